#pragma once

#include "cytofm/backbone/weights_io.hpp"
#include "cytofm/eval/metrics.hpp"
#include "cytofm/mil/abmil.hpp"
#include "cytofm/ssl/optimizer.hpp"

#include <set>

namespace cytofm {

// Held fixed across downstream tasks.
struct MilTrainConfig {
  int hidden = 128;
  bool gated = false;
  double dropout = 0.25;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  int max_epochs = 200;
  int patience = 20;
};

inline void to_json(json& j, const MilTrainConfig& c) {
  j = json{{"hidden", c.hidden},           {"gated", c.gated},         {"dropout", c.dropout}, {"lr", c.lr},
           {"weight_decay", c.weight_decay}, {"max_epochs", c.max_epochs}, {"patience", c.patience}};
}
inline void from_json(const json& j, MilTrainConfig& c) {
  c = MilTrainConfig{};
  c.hidden = j.value("hidden", c.hidden);
  c.gated = j.value("gated", c.gated);
  c.dropout = j.value("dropout", c.dropout);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
}

struct MilModel {
  AbmilConfig config;
  AbmilParams<double> params;
  int best_epoch = -1;
  double best_val_auroc = 0;
  double best_val_loss = 0;
  int epochs_run = 0;
};

struct BagPredictions {
  Matrix<double> probs;  // n x C
  std::vector<int> labels;
};

inline BagPredictions predict_bags(const MilModel& m, const std::vector<FeatureBag>& bags) {
  BagPredictions out;
  out.probs.resize(static_cast<Eigen::Index>(bags.size()), m.config.num_classes);
  for (std::size_t i = 0; i < bags.size(); ++i) {
    out.probs.row(static_cast<Eigen::Index>(i)) = predict_bag(m.params, m.config, bags[i]);
    out.labels.push_back(bags[i].label);
  }
  return out;
}

// Binary: AUROC of the positive-class probability. Multiclass: micro AUROC.
inline double predictions_auroc(const BagPredictions& p) {
  if (p.probs.cols() == 2) {
    std::vector<double> s(static_cast<std::size_t>(p.probs.rows()));
    for (Eigen::Index i = 0; i < p.probs.rows(); ++i) s[static_cast<std::size_t>(i)] = p.probs(i, 1);
    return auroc_binary(s, p.labels);
  }
  return auroc_micro(p.probs, p.labels);
}

inline double predictions_accuracy(const BagPredictions& p) {
  if (p.probs.cols() == 2) {
    std::vector<double> s(static_cast<std::size_t>(p.probs.rows()));
    for (Eigen::Index i = 0; i < p.probs.rows(); ++i) s[static_cast<std::size_t>(i)] = p.probs(i, 1);
    return accuracy_at_threshold(s, p.labels, 0.5);
  }
  return accuracy_argmax(p.probs, p.labels);
}

inline std::size_t distinct_labels(const std::vector<FeatureBag>& bags) {
  std::set<int> s;
  for (const auto& b : bags) s.insert(b.label);
  return s.size();
}

// Adam on one bag at a time, early stopping on validation AUROC (ties go to
// the lower validation loss). Returns the best checkpoint.
inline MilModel train_mil(const std::vector<FeatureBag>& train, const std::vector<FeatureBag>& val,
                          int num_classes, const MilTrainConfig& cfg, std::uint64_t seed) {
  CYTOFM_REQUIRE(!train.empty() && !val.empty(), "train and validation sets must be non-empty");
  CYTOFM_REQUIRE(cfg.max_epochs >= 1 && cfg.patience >= 1, "max_epochs and patience must be >= 1");
  CYTOFM_REQUIRE(distinct_labels(train) >= 2, "training set contains a single class");
  const auto dim = train.front().dim();
  for (const auto* set : {&train, &val})
    for (const auto& b : *set) {
      CYTOFM_REQUIRE(b.dim() == dim, "bag '" + b.image_id + "' has a different feature dim");
      CYTOFM_REQUIRE(b.size() >= 1, "bag '" + b.image_id + "' is empty");
      CYTOFM_REQUIRE(b.label >= 0 && b.label < num_classes, "bag '" + b.image_id + "' has no valid label");
      CYTOFM_REQUIRE(all_finite(b.features), "bag '" + b.image_id + "' has non-finite features");
    }
  // AUROC needs both classes; otherwise validation loss alone selects.
  const bool val_auroc = distinct_labels(val) >= 2;

  MilModel model;
  model.config = AbmilConfig{static_cast<int>(dim), cfg.hidden, num_classes, cfg.gated, cfg.dropout};
  model.params = init_abmil<double>(model.config, seed);
  AdamW<AbmilParams<double>> opt(model.params);

  std::vector<Matrix<double>> train_x;
  for (const auto& b : train) train_x.push_back(b.features.cast<double>());

  MilModel best = model;
  best.best_val_auroc = -1;
  best.best_val_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed, {0x4d11, static_cast<std::uint64_t>(epoch)});
    shuffle(order, rng);
    for (std::size_t idx : order) {
      AbmilCache<double> cache;
      const auto out = abmil_forward<double>(model.params, model.config, train_x[idx], &cache, &rng);
      RowVector<double> dl;
      const double loss = abmil_bag_loss<double>(model.config, out.logits, train[idx].label, &dl);
      if (!std::isfinite(loss))
        throw RuntimeError("non-finite MIL loss at epoch " + std::to_string(epoch) + " on bag '" +
                           train[idx].image_id + "'");
      auto grads = zeros_like(model.params);
      abmil_backward<double>(model.params, model.config, cache, dl, grads);
      opt.step(model.params, grads, cfg.lr, cfg.weight_decay);
    }
    const double vloss = abmil_dataset_loss<double>(model.params, model.config, val);
    const double vauc = val_auroc ? predictions_auroc(predict_bags(model, val)) : 0.0;
    const bool better = vauc > best.best_val_auroc || (vauc == best.best_val_auroc && vloss < best.best_val_loss);
    if (better) {
      best = model;
      best.best_epoch = epoch;
      best.best_val_auroc = vauc;
      best.best_val_loss = vloss;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      best.epochs_run = epoch + 1;
      return best;
    }
    best.epochs_run = epoch + 1;
  }
  return best;
}

inline void save_mil_model(const fs::path& path, const MilModel& m, const json& extra = json::object()) {
  TensorContainer c;
  c.kind = "abmil";
  c.metadata = extra;
  c.metadata["abmil"] = m.config;
  c.metadata["best_epoch"] = m.best_epoch;
  c.metadata["best_val_auroc"] = m.best_val_auroc;
  c.metadata["best_val_loss"] = m.best_val_loss;
  append_params(c, cast_abmil<float>(m.params), "abmil");
  write_container(path, c);
}

inline MilModel load_mil_model(const fs::path& path) {
  const auto c = read_container(path);
  CYTOFM_REQUIRE(c.kind == "abmil", "weights container is not an ABMIL model (kind '" + c.kind + "')");
  MilModel m;
  m.config = c.metadata.at("abmil").get<AbmilConfig>();
  m.best_epoch = c.metadata.value("best_epoch", -1);
  m.best_val_auroc = c.metadata.value("best_val_auroc", 0.0);
  m.best_val_loss = c.metadata.value("best_val_loss", 0.0);
  auto pf = init_abmil<float>(m.config, 0);
  load_params(c, pf, "abmil");
  m.params = cast_abmil<double>(pf);
  return m;
}

}  // namespace cytofm
