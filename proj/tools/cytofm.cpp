#include "cytofm/cli.hpp"

int main(int argc, char** argv) { return cytofm::cli_main(argc, argv); }
