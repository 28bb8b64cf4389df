#pragma once

#include "cytofm/eval/protocol.hpp"
#include "cytofm/mil/train.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace cytofm {

enum class SplitProtocol { random_splits, fixed_split };
NLOHMANN_JSON_SERIALIZE_ENUM(SplitProtocol, {{SplitProtocol::random_splits, "random_splits"},
                                             {SplitProtocol::fixed_split, "fixed_split"}})

struct TaskConfig {
  std::string task_id = "task";
  std::string model_id = "cytofm";
  std::vector<std::string> class_names;
  SplitProtocol protocol = SplitProtocol::random_splits;
  int n_splits = 100;
  SplitRatios ratios;
  std::uint64_t seed = 0;
  MilTrainConfig mil;
  int n_perm = 10000;

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

inline void to_json(json& j, const TaskConfig& t) {
  j = json{{"task_id", t.task_id},
           {"model_id", t.model_id},
           {"class_names", t.class_names},
           {"protocol", t.protocol},
           {"n_splits", t.n_splits},
           {"ratios", {t.ratios.train, t.ratios.val, t.ratios.test}},
           {"seed", t.seed},
           {"mil", t.mil},
           {"n_perm", t.n_perm}};
}
inline void from_json(const json& j, TaskConfig& t) {
  t = TaskConfig{};
  t.task_id = j.value("task_id", t.task_id);
  t.model_id = j.value("model_id", t.model_id);
  t.class_names = j.at("class_names").get<std::vector<std::string>>();
  t.protocol = enum_value(j, "protocol", t.protocol);
  t.n_splits = j.value("n_splits", t.n_splits);
  if (j.contains("ratios")) {
    const auto r = j["ratios"].get<std::vector<double>>();
    CYTOFM_REQUIRE(r.size() == 3, "ratios must list train, val and test fractions");
    t.ratios = {r[0], r[1], r[2]};
  }
  t.seed = j.value("seed", t.seed);
  if (j.contains("mil")) t.mil = j["mil"].get<MilTrainConfig>();
  t.n_perm = j.value("n_perm", t.n_perm);
  CYTOFM_REQUIRE(t.class_names.size() >= 2, "a task needs at least 2 class names");
}

// "image_id,label" with a header row; labels are class names or indices.
inline std::map<std::string, int> read_labels_csv(const fs::path& path, const std::vector<std::string>& class_names) {
  std::ifstream in(path);
  CYTOFM_REQUIRE(in.good(), "cannot open labels file " + path.string());
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r\"");
    const auto e = s.find_last_not_of(" \t\r\"");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  std::map<std::string, int> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto comma = line.find(',');
    CYTOFM_REQUIRE(comma != std::string::npos, path.string() + ":" + std::to_string(lineno) + ": expected 'image_id,label'");
    const std::string id = trim(line.substr(0, comma));
    const std::string lab = trim(line.substr(comma + 1));
    if (lineno == 1 && id == "image_id") continue;
    int y = -1;
    const auto it = std::find(class_names.begin(), class_names.end(), lab);
    if (it != class_names.end()) {
      y = static_cast<int>(it - class_names.begin());
    } else {
      try {
        std::size_t used = 0;
        y = std::stoi(lab, &used);
        if (used != lab.size()) y = -1;
      } catch (const std::exception&) {
        y = -1;
      }
    }
    CYTOFM_REQUIRE(y >= 0 && y < static_cast<int>(class_names.size()),
                   path.string() + ":" + std::to_string(lineno) + ": unknown label '" + lab + "'");
    CYTOFM_REQUIRE(out.emplace(id, y).second, "duplicate label for image '" + id + "'");
  }
  CYTOFM_REQUIRE(!out.empty(), "labels file " + path.string() + " has no rows");
  return out;
}

struct SplitMetrics {
  int split_id = 0;
  std::uint64_t seed = 0;
  double accuracy = 0;
  double auroc = 0;
  int best_epoch = -1;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
};

struct MetricsReport {
  std::string task_id, model_id, encoder_id;
  SplitProtocol protocol = SplitProtocol::random_splits;
  std::vector<SplitMetrics> per_split;
  Aggregate accuracy, auroc;
  std::map<std::string, double> p_values;  // other model_id -> p (AUROC)

  std::size_t n_splits() const { return per_split.size(); }
};

inline json to_json_report(const MetricsReport& r) {
  json splits = json::array();
  for (const auto& s : r.per_split)
    splits.push_back({{"split_id", s.split_id}, {"seed", s.seed}, {"accuracy", s.accuracy}, {"auroc", s.auroc},
                      {"best_epoch", s.best_epoch}, {"n_train", s.n_train}, {"n_val", s.n_val}, {"n_test", s.n_test}});
  auto agg = [&](const Aggregate& a) {
    json j{{"mean", a.mean}, {"formatted", format_aggregate(a)}};
    if (a.n > 1) j["std"] = a.std;
    return j;
  };
  return json{{"task_id", r.task_id},
              {"model_id", r.model_id},
              {"encoder_id", r.encoder_id},
              {"protocol", r.protocol},
              {"n_splits", r.n_splits()},
              {"per_split", splits},
              {"aggregate", {{"accuracy", agg(r.accuracy)}, {"auroc", agg(r.auroc)}}},
              {"p_values", r.p_values}};
}

inline MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  r.task_id = j.at("task_id").get<std::string>();
  r.model_id = j.at("model_id").get<std::string>();
  r.encoder_id = j.value("encoder_id", std::string());
  r.protocol = enum_value(j, "protocol", SplitProtocol::random_splits);
  std::vector<double> acc, auc;
  for (const auto& s : j.at("per_split")) {
    SplitMetrics m;
    m.split_id = s.at("split_id").get<int>();
    m.seed = s.value("seed", std::uint64_t{0});
    m.accuracy = s.at("accuracy").get<double>();
    m.auroc = s.at("auroc").get<double>();
    m.best_epoch = s.value("best_epoch", -1);
    m.n_train = s.value("n_train", std::size_t{0});
    m.n_val = s.value("n_val", std::size_t{0});
    m.n_test = s.value("n_test", std::size_t{0});
    acc.push_back(m.accuracy);
    auc.push_back(m.auroc);
    r.per_split.push_back(m);
  }
  CYTOFM_REQUIRE(!r.per_split.empty(), "report has no splits");
  r.accuracy = aggregate_runs(acc);
  r.auroc = aggregate_runs(auc);
  r.p_values = j.value("p_values", std::map<std::string, double>{});
  return r;
}

// Table-2 style rows: model, task, accuracy, AUROC.
inline std::string report_csv(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  out << "model,task,n_splits,accuracy,auroc\n";
  for (const auto& r : reports)
    out << r.model_id << "," << r.task_id << "," << r.n_splits() << ",\"" << format_aggregate(r.accuracy) << "\",\""
        << format_aggregate(r.auroc) << "\"\n";
  return out.str();
}

// Paired permutation p-value on split-aligned AUROCs.
inline double compare_reports(const MetricsReport& a, const MetricsReport& b, int n_perm = 10000,
                              std::uint64_t seed = 0) {
  CYTOFM_REQUIRE(a.task_id == b.task_id, "reports belong to different tasks");
  CYTOFM_REQUIRE(a.n_splits() == b.n_splits(), "reports have different split counts");
  std::vector<double> va, vb;
  for (std::size_t i = 0; i < a.n_splits(); ++i) {
    CYTOFM_REQUIRE(a.per_split[i].split_id == b.per_split[i].split_id, "reports are not split-aligned");
    va.push_back(a.per_split[i].auroc);
    vb.push_back(b.per_split[i].auroc);
  }
  return paired_significance(va, vb, n_perm, seed);
}

inline std::vector<FeatureBag> select_bags(const std::map<std::string, const FeatureBag*>& by_id,
                                           const std::vector<std::string>& ids) {
  std::vector<FeatureBag> out;
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    CYTOFM_REQUIRE(it != by_id.end(), "split references image '" + id + "' that has no features");
    out.push_back(*it->second);
  }
  return out;
}

// Labels are applied to bags by image id; every labelled image needs
// features. With a fixed split the given split is used as the only one.
inline MetricsReport run_benchmark(std::vector<FeatureBag> bags, const std::map<std::string, int>& labels,
                                   const TaskConfig& task, const std::optional<SplitSpec>& fixed = std::nullopt,
                                   const std::string& encoder_id = "") {
  CYTOFM_REQUIRE(task.num_classes() >= 2, "task needs at least 2 classes");
  std::map<std::string, const FeatureBag*> by_id;
  for (auto& b : bags) {
    const auto it = labels.find(b.image_id);
    CYTOFM_REQUIRE(it != labels.end(), "missing label for image '" + b.image_id + "'");
    b.label = it->second;
    CYTOFM_REQUIRE(by_id.emplace(b.image_id, &b).second, "duplicate feature bag '" + b.image_id + "'");
  }
  for (const auto& [id, y] : labels)
    CYTOFM_REQUIRE(by_id.contains(id), "labelled image '" + id + "' has no features");

  std::vector<SplitSpec> splits;
  if (task.protocol == SplitProtocol::fixed_split) {
    CYTOFM_REQUIRE(fixed.has_value(), "fixed-split task needs a split file");
    splits.push_back(*fixed);
  } else {
    splits = stratified_splits(labels, task.ratios, task.n_splits, task.seed);
  }

  MetricsReport rep;
  rep.task_id = task.task_id;
  rep.model_id = task.model_id;
  rep.encoder_id = encoder_id;
  rep.protocol = task.protocol;
  std::vector<double> acc, auc;
  for (const auto& s : splits) {
    const auto train = select_bags(by_id, s.train);
    const auto val = select_bags(by_id, s.val);
    const auto test = select_bags(by_id, s.test);
    CYTOFM_REQUIRE(!train.empty() && !val.empty() && !test.empty(), "split has an empty partition");
    const auto model =
        train_mil(train, val, task.num_classes(), task.mil, derive_seed(task.seed, {0xbe, static_cast<std::uint64_t>(s.split_id)}));
    const auto pred = predict_bags(model, test);
    SplitMetrics m;
    m.split_id = s.split_id;
    m.seed = s.seed;
    m.accuracy = predictions_accuracy(pred);
    m.auroc = predictions_auroc(pred);
    m.best_epoch = model.best_epoch;
    m.n_train = train.size();
    m.n_val = val.size();
    m.n_test = test.size();
    acc.push_back(m.accuracy);
    auc.push_back(m.auroc);
    rep.per_split.push_back(m);
  }
  rep.accuracy = aggregate_runs(acc);
  rep.auroc = aggregate_runs(auc);
  return rep;
}

}  // namespace cytofm
