#pragma once

#include "cytofm/core/blob_io.hpp"
#include "cytofm/core/matrix.hpp"

#include <Eigen/Eigenvalues>

#include <fstream>
#include <sstream>

namespace cytofm {

enum class ProjectionMethod { pca, external };

struct EmbeddingProjection {
  ProjectionMethod method = ProjectionMethod::pca;
  Matrix<double> coords;                  // n x 2
  std::vector<double> explained_variance; // per component, pca only
  double total_variance = 0;              // of the input, pca only
};

// PCA to two components. Each component's sign makes its largest-magnitude
// score positive.
inline EmbeddingProjection project_pca(const Matrix<double>& x) {
  CYTOFM_REQUIRE(x.rows() >= 3, "projection needs at least 3 rows");
  CYTOFM_REQUIRE(x.cols() >= 2, "projection needs at least 2 feature dims");
  CYTOFM_REQUIRE(all_finite(x), "features contain non-finite values");
  const Matrix<double> centered = x.rowwise() - x.colwise().mean();
  const double n = static_cast<double>(x.rows());
  const Matrix<double> cov = centered.transpose() * centered / n;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  CYTOFM_REQUIRE(es.info() == Eigen::Success, "eigendecomposition failed");
  const auto d = x.cols();
  Matrix<double> basis(d, 2);
  basis.col(0) = es.eigenvectors().col(d - 1);
  basis.col(1) = es.eigenvectors().col(d - 2);
  EmbeddingProjection p;
  p.coords = centered * basis;
  for (int k = 0; k < 2; ++k) {
    Eigen::Index arg = 0;
    p.coords.col(k).cwiseAbs().maxCoeff(&arg);
    if (p.coords(arg, k) < 0) p.coords.col(k) *= -1.0;
  }
  p.explained_variance = {es.eigenvalues()(d - 1), es.eigenvalues()(d - 2)};
  p.total_variance = cov.trace();
  return p;
}

// Coordinates computed elsewhere: CSV with x,y columns (optionally
// image_id,x,y[,label]); one row per feature row.
inline EmbeddingProjection project_external(const fs::path& csv, std::size_t expected_rows) {
  std::ifstream in(csv);
  CYTOFM_REQUIRE(in.good(), "cannot open coordinates file " + csv.string());
  std::vector<std::array<double, 2>> rows;
  std::string line;
  int x_col = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!header_seen) {
      header_seen = true;
      const auto it = std::find(cells.begin(), cells.end(), "x");
      if (it != cells.end()) {
        x_col = static_cast<int>(it - cells.begin());
        continue;
      }
    }
    CYTOFM_REQUIRE(static_cast<int>(cells.size()) >= x_col + 2, "coordinates row has too few columns: " + line);
    try {
      rows.push_back({std::stod(cells[static_cast<std::size_t>(x_col)]), std::stod(cells[static_cast<std::size_t>(x_col) + 1])});
    } catch (const std::exception&) {
      throw ValidationError("non-numeric coordinates row: " + line);
    }
  }
  CYTOFM_REQUIRE(rows.size() == expected_rows, "coordinates file has " + std::to_string(rows.size()) +
                                                   " rows, expected " + std::to_string(expected_rows));
  EmbeddingProjection p;
  p.method = ProjectionMethod::external;
  p.coords.resize(static_cast<Eigen::Index>(rows.size()), 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    p.coords(static_cast<Eigen::Index>(i), 0) = rows[i][0];
    p.coords(static_cast<Eigen::Index>(i), 1) = rows[i][1];
  }
  return p;
}

inline std::string projection_csv(const EmbeddingProjection& p, const std::vector<std::string>& ids,
                                  const std::vector<std::string>& labels) {
  CYTOFM_REQUIRE(ids.size() == static_cast<std::size_t>(p.coords.rows()), "one id per projected row required");
  std::ostringstream out;
  out.precision(9);
  out << "image_id,x,y,label\n";
  for (std::size_t i = 0; i < ids.size(); ++i)
    out << ids[i] << "," << p.coords(static_cast<Eigen::Index>(i), 0) << ","
        << p.coords(static_cast<Eigen::Index>(i), 1) << "," << (i < labels.size() ? labels[i] : "") << "\n";
  return out.str();
}

}  // namespace cytofm
