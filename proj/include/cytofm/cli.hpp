#pragma once

// Command-line front end. Every subcommand reads an optional --config JSON
// file, applies the flags given on the command line on top of it, validates
// the merged configuration and writes a run.json provenance record next to
// its outputs. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

#include "cytofm/datasets/registry.hpp"
#include "cytofm/datasets/split.hpp"
#include "cytofm/datasets/synthetic.hpp"
#include "cytofm/eval/benchmark.hpp"
#include "cytofm/preprocess/pipeline.hpp"
#include "cytofm/ssl/trainer.hpp"
#include "cytofm/viz/attention.hpp"
#include "cytofm/viz/extract.hpp"
#include "cytofm/viz/projection.hpp"

#include <CLI11.hpp>
#include <opencv2/core/version.hpp>

#include <functional>
#include <iostream>
#include <memory>

namespace cytofm {

inline constexpr const char* kCytofmVersion = "0.1.0";

namespace cli {

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string file_hash(const fs::path& p) {
  const auto bytes = read_bytes(p);
  return hex64(fnv1a(std::string_view(bytes.data(), bytes.size())));
}

inline json::json_pointer pointer(const std::string& key) { return json::json_pointer("/" + key); }

// Typed lookup in the merged config; keys use '/' for nesting.
template <class T>
T required(const json& cfg, const std::string& key, const std::string& flag) {
  if (!cfg.contains(pointer(key)) || cfg.at(pointer(key)).is_null())
    throw ValidationError("missing required option " + flag + " (config key '" + key + "')");
  try {
    return cfg.at(pointer(key)).get<T>();
  } catch (const json::exception&) {
    throw ValidationError("option " + flag + " has the wrong type");
  }
}

template <class T>
T optional_value(const json& cfg, const std::string& key, const std::string& flag, T fallback) {
  if (!cfg.contains(pointer(key)) || cfg.at(pointer(key)).is_null()) return fallback;
  return required<T>(cfg, key, flag);
}

// Comma-separated string or JSON array.
inline std::vector<std::string> string_list(const json& cfg, const std::string& key, const std::string& flag) {
  if (!cfg.contains(pointer(key))) return {};
  const auto& v = cfg.at(pointer(key));
  std::vector<std::string> out;
  if (v.is_array()) {
    for (const auto& e : v) {
      if (!e.is_string()) throw ValidationError("option " + flag + " must list strings");
      out.push_back(e.get<std::string>());
    }
    return out;
  }
  std::stringstream ss(required<std::string>(cfg, key, flag));
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

// Flags that override config keys, collected per subcommand.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON config file; flags override its keys");
  }

  template <class T>
  CLI::Option* add(const std::string& flag, const std::string& key, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app_->add_option(flag, *value, help);
    setters_.push_back([opt, value, key](json& j) {
      if (opt->count() > 0) j[pointer(key)] = *value;
    });
    return opt;
  }

  CLI::Option* add_flag(const std::string& flag, const std::string& key, const std::string& help) {
    auto value = std::make_shared<bool>(false);
    CLI::Option* opt = app_->add_flag(flag, *value, help);
    setters_.push_back([opt, value, key](json& j) {
      if (opt->count() > 0) j[pointer(key)] = *value;
    });
    return opt;
  }

  json merged() const {
    json cfg = json::object();
    if (!config_path_.empty()) {
      cfg = read_json(config_path_);
      CYTOFM_REQUIRE(cfg.is_object(), "config file must hold a JSON object: " + config_path_);
    }
    json overrides = json::object();
    for (const auto& s : setters_) s(overrides);
    cfg.merge_patch(overrides);
    return cfg;
  }

 private:
  CLI::App* app_;
  std::string config_path_;
  std::vector<std::function<void(json&)>> setters_;
};

inline json versions() {
  return {{"cytofm", kCytofmVersion},
          {"opencv", CV_VERSION},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"cli11", CLI11_VERSION}};
}

// Provenance record. Output paths are stored relative to the record's
// directory; directories expand to their files in sorted order.
inline void write_run_record(const fs::path& path, const std::string& command, const json& config,
                             std::optional<std::uint64_t> seed, const std::vector<fs::path>& outputs) {
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  std::vector<fs::path> files;
  for (const auto& o : outputs) {
    if (fs::is_directory(o)) {
      for (const auto& e : fs::recursive_directory_iterator(o))
        if (e.is_regular_file()) files.push_back(e.path());
    } else if (fs::exists(o)) {
      files.push_back(o);
    }
  }
  std::sort(files.begin(), files.end());
  json hashes = json::object();
  for (const auto& f : files) hashes[fs::relative(f, base).generic_string()] = file_hash(f);
  json rec{{"command", command},
           {"config", config},
           {"config_hash", hex64(fnv1a(config.dump()))},
           {"versions", versions()},
           {"outputs", hashes}};
  rec["seed"] = seed ? json(*seed) : json(nullptr);
  write_json(path, rec);
}

inline fs::path relative_to(const fs::path& target, const fs::path& dir) {
  return fs::relative(fs::absolute(target), fs::absolute(dir));
}

inline std::string run_record_path_for_store(const fs::path& store) {
  return store_paths(store).blob.replace_extension("").string() + ".run.json";
}

// ---------------------------------------------------------------------------
// register

inline Magnification parse_magnification(const std::string& s) {
  auto number = [&](std::size_t cut) {
    try {
      return std::stod(s.substr(0, cut));
    } catch (const std::exception&) {
      throw ValidationError("cannot parse magnification '" + s + "' (use e.g. 20x or 0.5mpp)");
    }
  };
  Magnification m;
  if (s.size() > 3 && s.ends_with("mpp")) {
    m.kind = Magnification::Kind::mpp;
    m.value = number(s.size() - 3);
  } else if (s.size() > 1 && (s.back() == 'x' || s.back() == 'X')) {
    m.kind = Magnification::Kind::objective;
    m.value = number(s.size() - 1);
  } else {
    throw ValidationError("cannot parse magnification '" + s + "' (use e.g. 20x or 0.5mpp)");
  }
  CYTOFM_REQUIRE(m.value > 0, "magnification must be positive");
  return m;
}

inline void run_register(const json& cfg, std::ostream& out) {
  const fs::path registry_path = required<std::string>(cfg, "registry", "--registry");
  auto registry = DatasetRegistry::load(registry_path);
  json rec = json::object();
  if (cfg.contains("record")) rec = cfg["record"];
  rec["name"] = optional_value<std::string>(cfg, "name", "--name", rec.value("name", std::string()));
  if (cfg.contains("root")) {
    // Roots given on the command line are relative to the working directory;
    // the registry stores them relative to its own location.
    const fs::path root = required<std::string>(cfg, "root", "--root");
    const fs::path dir = registry_path.parent_path().empty() ? fs::path(".") : registry_path.parent_path();
    rec["root_path"] = root.is_absolute() ? root.string() : relative_to(root, dir).generic_string();
  }
  CYTOFM_REQUIRE(rec.contains("root_path"), "missing required option --root (config key 'root')");
  if (cfg.contains("roles")) rec["roles"] = string_list(cfg, "roles", "--roles");
  CYTOFM_REQUIRE(rec.contains("roles"), "missing required option --roles (config key 'roles')");
  if (cfg.contains("organ")) rec["organ"] = cfg["organ"];
  if (cfg.contains("label_kind")) rec["label_kind"] = cfg["label_kind"];
  if (cfg.contains("classes")) rec["class_names"] = string_list(cfg, "classes", "--classes");
  if (cfg.contains("magnification")) {
    const auto m = parse_magnification(required<std::string>(cfg, "magnification", "--magnification"));
    rec["magnification"] = {{"kind", m.kind == Magnification::Kind::mpp ? "mpp" : "objective"}, {"value", m.value}};
  }
  if (cfg.contains("hold_out_count") || cfg.contains("hold_out_fraction")) {
    json h{{"seed", optional_value<std::uint64_t>(cfg, "hold_out_seed", "--hold-out-seed", 0)}};
    if (cfg.contains("hold_out_count")) h["count"] = required<int>(cfg, "hold_out_count", "--hold-out-count");
    if (cfg.contains("hold_out_fraction"))
      h["fraction"] = required<double>(cfg, "hold_out_fraction", "--hold-out-fraction");
    rec["hold_out"] = h;
  }
  DatasetRecord record;
  try {
    record = rec.get<DatasetRecord>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid dataset record: ") + e.what());
  }
  CYTOFM_REQUIRE(!record.name.empty(), "missing required option --name (config key 'name')");
  const auto& stored = registry.register_dataset(record);
  out << "registered " << stored.name << " in " << registry_path.string() << "\n";
}

// ---------------------------------------------------------------------------
// preprocess

// Writes <out>/<dataset>/ patch directories and <out>/registry.json, a copy
// of the input registry that records patch locations and held-out ids. The
// input registry is not modified.
inline void run_preprocess(const json& cfg, std::ostream& out) {
  const fs::path registry_path = required<std::string>(cfg, "registry", "--registry");
  const fs::path out_dir = required<std::string>(cfg, "out", "--out");
  CYTOFM_REQUIRE(fs::exists(registry_path), "registry not found: " + registry_path.string());
  const auto input = DatasetRegistry::load(registry_path);
  auto names = string_list(cfg, "datasets", "--dataset");
  if (names.empty())
    for (const auto& r : input.records()) names.push_back(r.name);
  CYTOFM_REQUIRE(!names.empty(), "registry lists no datasets");

  PreprocessOptions opt;
  opt.topk = optional_value<int>(cfg, "topk", "--topk", opt.topk);
  opt.tile = optional_value<int>(cfg, "tile", "--tile", opt.tile);
  CYTOFM_REQUIRE(opt.topk >= 1, "--topk must be >= 1");
  CYTOFM_REQUIRE(opt.tile >= 1, "--tile must be >= 1");
  const ForegroundFractionScorer scorer(optional_value<double>(cfg, "background_threshold", "--background-threshold", 220.0));

  fs::create_directories(out_dir);
  DatasetRegistry output(out_dir / "registry.json");
  std::vector<fs::path> manifests;
  for (auto record : input.records()) {
    const fs::path root = input.resolve(record.root_path);
    record.root_path = root.is_absolute() ? root : relative_to(root, out_dir);
    const bool selected = std::find(names.begin(), names.end(), record.name) != names.end();
    if (selected) {
      if (record.hold_out && record.held_out_ids.empty()) apply_hold_out(record, root);
      const fs::path dir = out_dir / record.name;
      const auto summary = preprocess_dataset(record, root, dir, scorer, opt);
      record.patches_dir = record.name;
      manifests.push_back(dir / kPatchManifestName);
      out << record.name << ": " << summary.images << " images, " << summary.patches << " patches";
      if (!record.held_out_ids.empty()) out << ", " << record.held_out_ids.size() << " held out from pretraining";
      out << "\n";
    } else if (!record.patches_dir.empty()) {
      record.patches_dir = relative_to(input.resolve(record.patches_dir), out_dir);
    }
    output.register_dataset(record);
  }
  for (const auto& n : names) CYTOFM_REQUIRE(input.find(n) != nullptr, "unknown dataset '" + n + "'");
  manifests.push_back(out_dir / "registry.json");
  write_run_record(out_dir / "run.json", "preprocess", cfg, std::nullopt, manifests);
}

// ---------------------------------------------------------------------------
// pretrain

// Keeps only log lines for steps before `step` (resume overwrites the rest).
inline void truncate_train_log(const fs::path& log, std::int64_t step) {
  if (!fs::exists(log)) return;
  std::ifstream in(log);
  std::string kept, line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line, nullptr, false);
    if (!j.is_discarded() && j.contains("step") && j["step"].get<std::int64_t>() < step) kept += line + "\n";
  }
  atomic_write_text(log, kept);
}

inline void run_pretrain(const json& cfg, std::ostream& out) {
  const fs::path out_dir = required<std::string>(cfg, "out", "--out");
  const bool resume = optional_value<bool>(cfg, "resume", "--resume", false);
  const auto seed = optional_value<std::uint64_t>(cfg, "seed", "--seed", 0);
  const bool has_registry = cfg.contains("registry"), has_patches = cfg.contains("patches");
  CYTOFM_REQUIRE(has_registry != has_patches, "give exactly one of --registry or --patches");
  CorpusIndex corpus = has_registry
                           ? build_pretrain_corpus(DatasetRegistry::load(required<std::string>(cfg, "registry", "--registry")), seed)
                           : corpus_from_directory(required<std::string>(cfg, "patches", "--patches"), seed);
  const std::size_t corpus_size = corpus.size();
  const CorpusPatchSource source(std::move(corpus));

  const fs::path ckpt_dir = out_dir / "checkpoints";
  const fs::path log_path = out_dir / "train_log.jsonl";
  TrainState state;
  if (resume) {
    CYTOFM_REQUIRE(fs::exists(store_paths(ckpt_dir / "latest").manifest),
                   "--resume given but no checkpoint in " + ckpt_dir.string());
    state = load_checkpoint(ckpt_dir / "latest");
    truncate_train_log(log_path, state.step);
    out << "resuming at step " << state.step << " of " << state.schedule.total_steps << "\n";
  } else {
    const json vit_json = cfg.value("vit", json::object());
    const json ssl_json = cfg.value("ssl", json::object());
    ViTConfig vit;
    SslConfig ssl;
    try {
      vit = vit_json.get<ViTConfig>();
      ssl = ssl_json.get<SslConfig>();
    } catch (const json::exception& e) {
      throw ValidationError(std::string("invalid vit/ssl config: ") + e.what());
    }
    if (!vit_json.contains("pixel_mean")) compute_channel_stats(source, vit);
    state = init_train_state(vit, ssl, resolve_schedule(ssl, corpus_size), seed);
    fs::create_directories(out_dir);
    if (fs::exists(log_path)) fs::remove(log_path);
  }
  out << "corpus: " << corpus_size << " patches, " << state.schedule.total_steps << " steps\n";

  PretrainOptions opt;
  opt.checkpoint_dir = ckpt_dir;
  opt.log_path = log_path;
  LossBreakdown last;
  opt.on_step = [&](std::int64_t, const LossBreakdown& l) { last = l; };
  pretrain(source, state, opt);

  const fs::path encoder_path = out_dir / "encoder";
  save_encoder(encoder_path, export_teacher_encoder(state, cfg.value("encoder_id", std::string("cytofm-teacher"))));
  out << "step " << state.step << ": L_cls " << last.l_cls << ", L_mim " << last.l_mim << "\n";
  out << "encoder written to " << store_paths(encoder_path).manifest.string() << "\n";
  json effective = cfg;
  effective["vit"] = state.vit;
  effective["ssl"] = state.ssl;
  write_run_record(out_dir / "run.json", "pretrain", effective, state.seed,
                   {store_paths(encoder_path).manifest, store_paths(encoder_path).blob, log_path,
                    store_paths(ckpt_dir / "latest").manifest, store_paths(ckpt_dir / "latest").blob});
}

// ---------------------------------------------------------------------------
// extract

inline void run_extract(const json& cfg, std::ostream& out) {
  const fs::path encoder_path = required<std::string>(cfg, "encoder", "--encoder");
  const fs::path patches = required<std::string>(cfg, "patches", "--patches");
  const fs::path store = required<std::string>(cfg, "out", "--out");
  const int threads = optional_value<int>(cfg, "threads", "--threads", 1);
  CYTOFM_REQUIRE(threads >= 1, "--threads must be >= 1");
  const auto enc = load_encoder(encoder_path);
  const auto bags = extract_features(enc, patches, store, threads);
  std::size_t rows = 0;
  for (const auto& b : bags) rows += static_cast<std::size_t>(b.size());
  out << bags.size() << " bags, " << rows << " patch embeddings of dim " << enc.config.embed_dim << "\n";
  write_run_record(run_record_path_for_store(store), "extract", cfg, std::nullopt,
                   {store_paths(store).manifest, store_paths(store).blob});
}

// ---------------------------------------------------------------------------
// train-mil / evaluate

inline TaskConfig load_task(const json& cfg) {
  const fs::path path = required<std::string>(cfg, "task", "--task");
  TaskConfig task;
  try {
    task = read_json(path).get<TaskConfig>();
  } catch (const json::exception& e) {
    throw ValidationError("invalid task file " + path.string() + ": " + e.what());
  }
  task.seed = optional_value<std::uint64_t>(cfg, "seed", "--seed", task.seed);
  task.n_splits = optional_value<int>(cfg, "n_splits", "--n-splits", task.n_splits);
  task.model_id = optional_value<std::string>(cfg, "model_id", "--model-id", task.model_id);
  if (cfg.contains("max_epochs")) task.mil.max_epochs = required<int>(cfg, "max_epochs", "--max-epochs");
  CYTOFM_REQUIRE(task.n_splits >= 1, "--n-splits must be >= 1");
  return task;
}

inline std::optional<SplitSpec> load_split(const json& cfg) {
  if (!cfg.contains("split")) return std::nullopt;
  const fs::path path = required<std::string>(cfg, "split", "--split");
  try {
    return read_json(path).get<SplitSpec>();
  } catch (const json::exception& e) {
    throw ValidationError("invalid split file " + path.string() + ": " + e.what());
  }
}

inline void run_train_mil(const json& cfg, std::ostream& out) {
  const auto bags_all = read_feature_store(required<std::string>(cfg, "features", "--features"));
  const auto task = load_task(cfg);
  const auto labels = read_labels_csv(required<std::string>(cfg, "labels", "--labels"), task.class_names);
  const fs::path out_dir = required<std::string>(cfg, "out", "--out");
  const auto split = load_split(cfg).value_or(stratified_split(labels, task.ratios, 0, task.seed));

  std::map<std::string, const FeatureBag*> by_id;
  for (const auto& b : bags_all) by_id[b.image_id] = &b;
  auto pick = [&](const std::vector<std::string>& ids) {
    auto v = select_bags(by_id, ids);
    for (auto& b : v) {
      const auto it = labels.find(b.image_id);
      CYTOFM_REQUIRE(it != labels.end(), "missing label for image '" + b.image_id + "'");
      b.label = it->second;
    }
    return v;
  };
  const auto train = pick(split.train), val = pick(split.val), test = pick(split.test);
  CYTOFM_REQUIRE(!train.empty() && !val.empty() && !test.empty(), "split has an empty partition");
  const auto model = train_mil(train, val, task.num_classes(), task.mil,
                               derive_seed(task.seed, {0xbe, static_cast<std::uint64_t>(split.split_id)}));
  const auto pred = predict_bags(model, test);

  fs::create_directories(out_dir);
  save_mil_model(out_dir / "mil_model", model, {{"task_id", task.task_id}, {"class_names", task.class_names}});
  write_json(out_dir / "split.json", split);
  std::ostringstream csv;
  csv.precision(9);
  csv << "image_id,label";
  for (const auto& c : task.class_names) csv << ",p_" << c;
  csv << "\n";
  for (std::size_t i = 0; i < test.size(); ++i) {
    csv << test[i].image_id << "," << task.class_names[static_cast<std::size_t>(test[i].label)];
    for (Eigen::Index k = 0; k < pred.probs.cols(); ++k) csv << "," << pred.probs(static_cast<Eigen::Index>(i), k);
    csv << "\n";
  }
  atomic_write_text(out_dir / "predictions.csv", csv.str());
  const json metrics{{"task_id", task.task_id},
                     {"split_id", split.split_id},
                     {"test_accuracy", predictions_accuracy(pred)},
                     {"test_auroc", predictions_auroc(pred)},
                     {"best_epoch", model.best_epoch},
                     {"epochs_run", model.epochs_run}};
  write_json(out_dir / "metrics.json", metrics);
  out << "test accuracy " << metrics["test_accuracy"].get<double>() << ", AUROC "
      << metrics["test_auroc"].get<double>() << " (best epoch " << model.best_epoch << ")\n";
  json effective = cfg;
  effective["task_config"] = task;
  write_run_record(out_dir / "run.json", "train-mil", effective, task.seed,
                   {store_paths(out_dir / "mil_model").manifest, store_paths(out_dir / "mil_model").blob,
                    out_dir / "split.json", out_dir / "predictions.csv", out_dir / "metrics.json"});
}

inline void run_evaluate(const json& cfg, std::ostream& out) {
  const fs::path features = required<std::string>(cfg, "features", "--features");
  auto task = load_task(cfg);
  const auto labels = read_labels_csv(required<std::string>(cfg, "labels", "--labels"), task.class_names);
  const fs::path out_dir = required<std::string>(cfg, "out", "--out");
  const auto fixed = load_split(cfg);
  if (fixed) task.protocol = SplitProtocol::fixed_split;
  const auto info = read_feature_store_info(features);
  auto report = run_benchmark(read_feature_store(features), labels, task, fixed, info.encoder_id);

  std::vector<MetricsReport> rows{report};
  for (const auto& other_path : string_list(cfg, "compare", "--compare")) {
    const auto other = report_from_json(read_json(other_path));
    report.p_values[other.model_id] = compare_reports(report, other, task.n_perm, task.seed);
    rows.push_back(other);
  }
  rows.front() = report;
  fs::create_directories(out_dir);
  write_json(out_dir / "report.json", to_json_report(report));
  atomic_write_text(out_dir / "report.csv", report_csv(rows));
  out << report.model_id << " on " << report.task_id << " (" << report.n_splits() << " splits): accuracy "
      << format_aggregate(report.accuracy) << ", AUROC " << format_aggregate(report.auroc) << "\n";
  for (const auto& [m, p] : report.p_values) out << "  vs " << m << ": p = " << p << "\n";
  json effective = cfg;
  effective["task_config"] = task;
  write_run_record(out_dir / "run.json", "evaluate", effective, task.seed,
                   {out_dir / "report.json", out_dir / "report.csv"});
}

// ---------------------------------------------------------------------------
// visualize

// image_id -> raw label text from an "image_id,label" CSV.
inline std::map<std::string, std::string> read_label_text(const fs::path& path) {
  std::ifstream in(path);
  CYTOFM_REQUIRE(in.good(), "cannot open labels file " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    const auto comma = line.find(',');
    CYTOFM_REQUIRE(comma != std::string::npos, "labels row needs image_id,label: " + line);
    out[line.substr(0, comma)] = line.substr(comma + 1);
  }
  return out;
}

inline void run_visualize(const json& cfg, std::ostream& out) {
  const fs::path encoder_path = required<std::string>(cfg, "encoder", "--encoder");
  const fs::path patches = required<std::string>(cfg, "patches", "--patches");
  const fs::path out_dir = required<std::string>(cfg, "out", "--out");
  const int head = optional_value<int>(cfg, "head", "--head", -1);
  const int max_patches = optional_value<int>(cfg, "max_patches", "--max-patches", 16);
  CYTOFM_REQUIRE(max_patches >= 0, "--max-patches must be >= 0");
  const auto enc = load_encoder(encoder_path);
  CYTOFM_REQUIRE(head < enc.config.heads, "--head must be below the encoder's head count (" +
                                               std::to_string(enc.config.heads) + ")");

  auto metas = read_patch_manifest(patches);
  std::sort(metas.begin(), metas.end(), [](const PatchMeta& a, const PatchMeta& b) {
    return std::tie(a.image_id, a.row, a.col) < std::tie(b.image_id, b.row, b.col);
  });
  const fs::path heat_dir = out_dir / "heatmaps", overlay_dir = out_dir / "overlays";
  fs::create_directories(heat_dir);
  fs::create_directories(overlay_dir);
  const std::size_t n_maps = std::min<std::size_t>(metas.size(), static_cast<std::size_t>(max_patches));
  for (std::size_t i = 0; i < n_maps; ++i) {
    const RgbImage patch = load_rgb(patches / metas[i].file);
    const auto map = attention_map(enc, patch, head, metas[i].image_id);
    const std::string stem = fs::path(metas[i].file).stem().string();
    save_png(heat_dir / (stem + ".png"), render_heatmap(map, patch.height, patch.width));
    save_png(overlay_dir / (stem + ".png"), render_overlay(patch, map));
  }

  // One point per image: the mean of its patch embeddings.
  const auto bags = cfg.contains("features") ? read_feature_store(required<std::string>(cfg, "features", "--features"))
                                             : extract_bags(enc, patches);
  Matrix<double> x(static_cast<Eigen::Index>(bags.size()), bags.empty() ? 0 : bags.front().dim());
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    CYTOFM_REQUIRE(bags[i].size() > 0, "bag '" + bags[i].image_id + "' is empty");
    x.row(static_cast<Eigen::Index>(i)) = bags[i].features.cast<double>().colwise().mean();
    ids.push_back(bags[i].image_id);
  }
  const auto projection = cfg.contains("coords")
                              ? project_external(required<std::string>(cfg, "coords", "--coords"), bags.size())
                              : project_pca(x);
  std::vector<std::string> label_text(ids.size());
  if (cfg.contains("labels")) {
    const auto labels = read_label_text(required<std::string>(cfg, "labels", "--labels"));
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (auto it = labels.find(ids[i]); it != labels.end()) label_text[i] = it->second;
  }
  atomic_write_text(out_dir / "projection.csv", projection_csv(projection, ids, label_text));
  out << n_maps << " attention maps, projection of " << ids.size() << " images ("
      << (projection.method == ProjectionMethod::pca ? "pca" : "external") << ")\n";
  write_run_record(out_dir / "run.json", "visualize", cfg, std::nullopt,
                   {heat_dir, overlay_dir, out_dir / "projection.csv"});
}

// ---------------------------------------------------------------------------
// synth-fixture

// A small labelled dataset plus the config files the pipeline consumes.
inline void run_synth_fixture(const json& cfg, std::ostream& out) {
  const fs::path out_dir = required<std::string>(cfg, "out", "--out");
  const int n = optional_value<int>(cfg, "images", "--images", 40);
  const int size = optional_value<int>(cfg, "size", "--size", 512);
  const auto seed = optional_value<std::uint64_t>(cfg, "seed", "--seed", 0);
  CYTOFM_REQUIRE(n >= 10 && n % 2 == 0, "--images must be an even number >= 10");
  CYTOFM_REQUIRE(size >= 64, "--size must be >= 64");
  const std::vector<std::string> classes{"benign", "malignant"};
  std::ostringstream labels;
  labels << "image_id,label\n";
  for (int i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "img_%03d", i);
    const int label = i % 2;
    const RgbImage img = synthetic_cytology_image(size, label, derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    save_png(out_dir / "images" / (std::string(id) + ".jpg"), img);
    labels << id << "," << classes[static_cast<std::size_t>(label)] << "\n";
  }
  atomic_write_text(out_dir / "labels.csv", labels.str());

  TaskConfig task;
  task.task_id = "synthetic_binary";
  task.class_names = classes;
  task.n_splits = 5;
  task.seed = seed;
  task.n_perm = 1000;
  task.mil.max_epochs = 40;
  task.mil.patience = 10;
  task.mil.lr = 1e-3;
  write_json(out_dir / "task.json", task);

  const fs::path reg_path = out_dir / "datasets.json";
  if (fs::exists(reg_path)) fs::remove(reg_path);
  DatasetRegistry reg(reg_path);
  DatasetRecord rec;
  rec.name = "synthetic";
  rec.organ = Organ::other;
  rec.label_kind = LabelKind::binary;
  rec.roles = {DatasetRole::pretrain, DatasetRole::evaluate};
  rec.root_path = "images";
  rec.magnification = Magnification{Magnification::Kind::objective, 40.0};
  rec.class_names = classes;
  rec.hold_out = HoldOutSpec{n / 5, std::nullopt, seed};
  reg.register_dataset(rec);

  const json pretrain_cfg{{"vit", {{"preset", "vit_tiny_desk"}}},
                          {"ssl",
                           {{"batch_size", 8},
                            {"max_steps", 50},
                            {"lr_absolute", 5e-4},
                            {"warmup_steps", 5},
                            {"teacher_temp_warmup_steps", 10},
                            {"checkpoint_every", 25}}},
                          {"seed", seed}};
  write_json(out_dir / "pretrain.json", pretrain_cfg);
  out << "wrote " << n << " images, labels.csv, task.json, datasets.json and pretrain.json to " << out_dir.string()
      << "\n";
}

}  // namespace cli

// Parses argv and dispatches. Never throws; returns the process exit code.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"cytofm: self-supervised cytology encoder pipeline"};
  app.name("cytofm");
  app.require_subcommand(1);
  app.set_version_flag("--version", kCytofmVersion);

  struct Command {
    CLI::App* app;
    std::unique_ptr<cli::Flags> flags;
    std::function<void(const json&, std::ostream&)> run;
  };
  std::vector<Command> commands;
  auto add = [&](const std::string& name, const std::string& help, auto run) -> cli::Flags& {
    CLI::App* sub = app.add_subcommand(name, help);
    commands.push_back({sub, std::make_unique<cli::Flags>(sub), run});
    return *commands.back().flags;
  };

  {
    auto& f = add("register", "add a dataset to a registry file", cli::run_register);
    f.add<std::string>("--registry", "registry", "registry JSON file (created if missing)");
    f.add<std::string>("--name", "name", "dataset name");
    f.add<std::string>("--root", "root", "directory holding the source images");
    f.add<std::string>("--roles", "roles", "comma list of pretrain,evaluate");
    f.add<std::string>("--organ", "organ", "breast|cervix|thyroid|other");
    f.add<std::string>("--label-kind", "label_kind", "binary|multiclass|segmentation|none");
    f.add<std::string>("--classes", "classes", "comma list of class names");
    f.add<std::string>("--magnification", "magnification", "objective (20x) or resolution (0.5mpp)");
    f.add<int>("--hold-out-count", "hold_out_count", "images held out from pretraining");
    f.add<double>("--hold-out-fraction", "hold_out_fraction", "fraction held out from pretraining");
    f.add<std::uint64_t>("--hold-out-seed", "hold_out_seed", "seed of the hold-out draw");
  }
  {
    auto& f = add("preprocess", "rescale, tile and select patches for registered datasets", cli::run_preprocess);
    f.add<std::string>("--registry", "registry", "registry JSON file");
    f.add<std::string>("--out", "out", "output directory");
    f.add<std::vector<std::string>>("--dataset", "datasets", "dataset(s) to process (default: all)");
    f.add<int>("--topk", "topk", "patches kept per image");
    f.add<int>("--tile", "tile", "tile size in pixels at 40x");
    f.add<double>("--background-threshold", "background_threshold", "luminance above which a pixel is background");
  }
  {
    auto& f = add("pretrain", "self-supervised pretraining of the encoder", cli::run_pretrain);
    f.add<std::string>("--registry", "registry", "preprocessed registry (from preprocess)");
    f.add<std::string>("--patches", "patches", "directory searched for patches.jsonl manifests");
    f.add<std::string>("--out", "out", "run directory");
    f.add<std::string>("--preset", "vit/preset", "vit_tiny_desk|vit_base");
    f.add<std::int64_t>("--steps", "ssl/max_steps", "total optimization steps");
    f.add<int>("--batch-size", "ssl/batch_size", "images per step");
    f.add<double>("--lr", "ssl/lr_absolute", "peak learning rate (not batch-scaled)");
    f.add<std::int64_t>("--checkpoint-every", "ssl/checkpoint_every", "steps between checkpoints");
    f.add<std::uint64_t>("--seed", "seed", "run seed");
    f.add_flag("--resume", "resume", "continue from <out>/checkpoints/latest");
  }
  {
    auto& f = add("extract", "embed every patch with a frozen encoder", cli::run_extract);
    f.add<std::string>("--encoder", "encoder", "encoder weights");
    f.add<std::string>("--patches", "patches", "patch directory with patches.jsonl");
    f.add<std::string>("--out", "out", "feature store path");
    f.add<int>("--threads", "threads", "worker threads");
  }
  {
    auto& f = add("train-mil", "train one ABMIL model on a single split", cli::run_train_mil);
    f.add<std::string>("--features", "features", "feature store");
    f.add<std::string>("--labels", "labels", "image_id,label CSV");
    f.add<std::string>("--task", "task", "task JSON");
    f.add<std::string>("--split", "split", "split JSON (default: split 0 of the task seed)");
    f.add<std::string>("--out", "out", "output directory");
    f.add<std::uint64_t>("--seed", "seed", "overrides the task seed");
    f.add<int>("--max-epochs", "max_epochs", "overrides the task's epoch limit");
  }
  {
    auto& f = add("evaluate", "repeated-split MIL benchmark of a feature store", cli::run_evaluate);
    f.add<std::string>("--features", "features", "feature store");
    f.add<std::string>("--labels", "labels", "image_id,label CSV");
    f.add<std::string>("--task", "task", "task JSON");
    f.add<std::string>("--split", "split", "fixed split JSON (single-split protocol)");
    f.add<std::string>("--out", "out", "output directory");
    f.add<int>("--n-splits", "n_splits", "overrides the task's split count");
    f.add<std::string>("--model-id", "model_id", "name of this model in reports");
    f.add<std::vector<std::string>>("--compare", "compare", "other report.json files for paired tests");
    f.add<std::uint64_t>("--seed", "seed", "overrides the task seed");
    f.add<int>("--max-epochs", "max_epochs", "overrides the task's epoch limit");
  }
  {
    auto& f = add("visualize", "attention heatmaps and an embedding projection", cli::run_visualize);
    f.add<std::string>("--encoder", "encoder", "encoder weights");
    f.add<std::string>("--patches", "patches", "patch directory with patches.jsonl");
    f.add<std::string>("--out", "out", "output directory");
    f.add<std::string>("--features", "features", "feature store (default: extract from --patches)");
    f.add<std::string>("--labels", "labels", "image_id,label CSV for the projection");
    f.add<std::string>("--coords", "coords", "externally computed 2-D coordinates CSV");
    f.add<int>("--head", "head", "attention head (-1: mean over heads)");
    f.add<int>("--max-patches", "max_patches", "number of patches to render");
  }
  {
    auto& f = add("synth-fixture", "write a small synthetic labelled dataset", cli::run_synth_fixture);
    f.add<std::string>("--out", "out", "output directory");
    f.add<int>("--images", "images", "number of images (even)");
    f.add<int>("--size", "size", "image side in pixels");
    f.add<std::uint64_t>("--seed", "seed", "generator seed");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  for (const auto& c : commands) {
    if (!c.app->parsed()) continue;
    try {
      c.run(c.flags->merged(), out);
      return 0;
    } catch (const ValidationError& e) {
      err << "error: " << e.what() << "\n";
      return 1;
    } catch (const json::exception& e) {
      err << "error: " << e.what() << "\n";
      return 1;
    } catch (const RuntimeError& e) {
      err << "runtime error: " << e.what() << "\n";
      return 2;
    } catch (const std::exception& e) {
      err << "runtime error: " << e.what() << "\n";
      return 2;
    }
  }
  return 1;
}

inline int cli_main(const std::vector<std::string>& args, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"cytofm"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace cytofm
