// Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails. `acceptance 3 5` runs a subset.

#include "cytofm/cli.hpp"
#include "cytofm/datasets/feature_store.hpp"
#include "cytofm/datasets/synthetic.hpp"
#include "cytofm/eval/probe.hpp"
#include "cytofm/eval/protocol.hpp"
#include "cytofm/mil/train.hpp"
#include "cytofm/preprocess/tiling.hpp"
#include "cytofm/ssl/trainer.hpp"
#include "support/gradcheck.hpp"
#include "support/synthetic_bags.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <set>
#include <sstream>

#ifndef CYTOFM_FIXTURE_DIR
#error "CYTOFM_FIXTURE_DIR must point at fixtures/synthetic"
#endif

namespace cytofm {
namespace {

// Pinned tolerances and budgets.
constexpr double kGradRelTol = 1e-3;
constexpr double kProbeTrainedMin = 0.9;
constexpr double kProbeInitMax = 0.7;
constexpr double kProbeL2 = 0.1;
constexpr double kMilAurocMin = 0.95;
constexpr double kInvarianceTol = 1e-6;
constexpr double kAttentionSumTol = 1e-6;
constexpr double kPermVsExactTol = 0.02;
constexpr double kShiftPMax = 0.001;
constexpr double kOneMinute = 60, kThirtyMinutes = 1800, kTenMinutes = 600;

struct Outcome {
  bool pass = true;
  std::string detail;
  double budget_s = 0;  // 0: no runtime limit
};

class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failures_.size() < 5) failures_.push_back(what);
    pass_ = pass_ && ok;
  }
  Outcome outcome(std::string detail, double budget_s = 0) const {
    for (const auto& f : failures_) detail += "; failed: " + f;
    return {pass_, detail, budget_s};
  }

 private:
  bool pass_ = true;
  std::vector<std::string> failures_;
};

double brute_force_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  std::int64_t twice = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        twice += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
        ++pairs;
      }
  return static_cast<double>(twice) / static_cast<double>(2 * pairs);
}

template <class P>
std::vector<std::vector<float>> flatten(const P& p) {
  std::vector<std::vector<float>> out;
  visit_params(p, "", [&](const std::string&, const Matrix<float>& m) { out.emplace_back(m.data(), m.data() + m.size()); });
  return out;
}

template <class P>
bool bitwise_equal(const P& a, const P& b) {
  const auto va = flatten(a), vb = flatten(b);
  if (va.size() != vb.size()) return false;
  for (std::size_t i = 0; i < va.size(); ++i)
    if (va[i].size() != vb[i].size() || std::memcmp(va[i].data(), vb[i].data(), va[i].size() * 4) != 0) return false;
  return true;
}

RgbImage noise_image(int size, std::uint64_t seed) {
  RgbImage img(size, size);
  auto rng = make_rng(seed);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(uniform_index(rng, 256));
  return img;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("cytofm_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------- 1

// Walks every candidate tile origin on the grid and counts the source pixels
// the tile covers along each axis; a tile is kept when neither axis needs more
// than half a tile of padding.
std::size_t tiles_by_coverage(int h, int w, int tile) {
  std::size_t kept = 0;
  for (int oy = 0; oy < h; oy += tile)
    for (int ox = 0; ox < w; ox += tile) {
      int rows = 0, cols = 0;
      for (int p = oy; p < oy + tile; ++p) rows += p < h;
      for (int p = ox; p < ox + tile; ++p) cols += p < w;
      if (tile - rows <= tile / 2 && tile - cols <= tile / 2) ++kept;
    }
  return kept;
}

Outcome tiling_oracle() {
  Check c;
  std::vector<int> sizes;
  for (int n = 1; n <= 1024; n += 2) sizes.push_back(n);
  for (int n : {255, 256, 383, 384, 385, 512, 1024}) sizes.push_back(n);
  auto rng = make_rng(1);
  std::size_t cases = 0;
  for (int h : sizes) {
    // Every height against three widths drawn from the grid, plus the square.
    std::vector<int> widths{h};
    for (int k = 0; k < 3; ++k) widths.push_back(sizes[uniform_index(rng, sizes.size())]);
    for (int w : widths) {
      const auto closed = static_cast<std::size_t>(tiles_along_axis(h) * tiles_along_axis(w));
      const auto oracle = tiles_by_coverage(h, w, kTileSize);
      RgbImage img(h, w);
      std::fill(img.pixels.begin(), img.pixels.end(), std::uint8_t{128});
      const auto tiles = tile_image(img, "img");
      c.expect(closed == oracle && tiles.size() == oracle,
               std::to_string(h) + "x" + std::to_string(w));
      ++cases;
    }
  }
  for (auto [n, want] : {std::pair{600, 4}, {456, 4}, {300, 1}}) {
    RgbImage img(n, n);
    c.expect(tile_image(img, "img").size() == static_cast<std::size_t>(want), std::to_string(n) + " worked example");
  }
  return c.outcome(std::to_string(cases) + " (H,W) pairs over " + std::to_string(sizes.size()) + " sizes",
                   kOneMinute);
}

// ---------------------------------------------------------------- 2

Outcome auroc_oracles() {
  Check c;
  auto rng = make_rng(2);
  int tied = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 199);
    std::vector<double> s(n);
    std::vector<int> y(n);
    const auto levels = 1 + uniform_index(rng, 25);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(uniform_index(rng, levels)) / 7.0;
      y[i] = static_cast<int>(uniform_index(rng, 2));
    }
    y[0] = 0;
    y[1] = 1;
    tied += std::set<double>(s.begin(), s.end()).size() < n;
    c.expect(auroc_binary(s, y) == brute_force_auroc(s, y), "binary trial " + std::to_string(trial));
  }
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + static_cast<int>(uniform_index(rng, 199));
    const int k = 3 + static_cast<int>(uniform_index(rng, 3));
    Matrix<double> p(n, k);
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < k; ++j) p(i, j) = 1 + static_cast<double>(uniform_index(rng, 4));
      p.row(i) /= p.row(i).sum();
      y[static_cast<std::size_t>(i)] = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(k)));
    }
    y[0] = 0;
    y[1] = 1;
    std::vector<double> fs_;
    std::vector<int> fy;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        fs_.push_back(p(i, j));
        fy.push_back(y[static_cast<std::size_t>(i)] == j);
      }
    c.expect(auroc_micro(p, y) == brute_force_auroc(fs_, fy), "micro trial " + std::to_string(trial));
  }
  return c.outcome("1000 binary (" + std::to_string(tied) + " with ties) + 1000 micro instances, exact equality",
                   kOneMinute);
}

// ---------------------------------------------------------------- 3

Matrix<double> random_bag(int n, int d, std::uint64_t seed) {
  auto rng = make_rng(seed);
  Matrix<double> h(n, d);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = normal(rng, 0, 1);
  return h;
}

Outcome gradient_checks() {
  Check c;
  double worst_mil = 0, worst_ibot = 0;
  for (bool gated : {false, true}) {
    const AbmilConfig mc{64, 32, 2, gated, 0.25};
    for (std::uint64_t point = 0; point < 5; ++point) {
      auto p = init_abmil<double>(mc, 10 + point);
      std::vector<FeatureBag> bags;
      for (int b = 0; b < 4; ++b) {
        FeatureBag bag;
        bag.features = random_bag(3 + b, 64, 50 + 10 * point + static_cast<std::uint64_t>(b)).cast<float>();
        bag.label = b % 2;
        bags.push_back(bag);
      }
      auto grads = zeros_like(p);
      abmil_dataset_loss<double>(p, mc, bags, &grads);
      const auto r = testing::check_gradients(p, grads, [&] { return abmil_dataset_loss<double>(p, mc, bags); },
                                              90 + point, 8);
      worst_mil = std::max(worst_mil, r.worst_rel_error);
      c.expect(r.worst_rel_error <= kGradRelTol, "abmil " + r.worst_tensor);
    }
  }
  const ViTConfig vc = ViTConfig::preset_config(VitPreset::vit_tiny_desk);
  const SslConfig ssl;
  for (std::uint64_t point = 0; point < 5; ++point) {
    auto student = init_vit<double>(vc, 100 + point);
    auto rng = make_rng(200 + point);
    visit_params(student, "", [&](const std::string&, Matrix<double>& m) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += normal(rng, 0.0, 0.05);
    });
    const auto teacher = init_vit<double>(vc, 300 + point);
    RowVector<double> center(vc.head_out_dim), pcenter(vc.head_out_dim);
    for (int k = 0; k < vc.head_out_dim; ++k) {
      center(k) = normal(rng, 0, 0.1);
      pcenter(k) = normal(rng, 0, 0.1);
    }
    std::vector<IbotSample<double>> batch;
    for (std::uint64_t i = 0; i < 2; ++i) {
      IbotSample<double> s;
      const auto seed = 400 + 10 * point + 4 * i;
      s.u = patchify<double>(noise_image(256, seed), vc);
      s.v = patchify<double>(noise_image(256, seed + 1), vc);
      s.mask_u = sample_view_mask(vc, ssl, seed + 2);
      s.mask_v = sample_view_mask(vc, ssl, seed + 3);
      batch.push_back(std::move(s));
    }
    auto grads = zeros_like(student);
    ibot_loss<double>(student, teacher, vc, center, pcenter, batch, 0.1, 0.04, 1.0, &grads);
    auto loss = [&] { return ibot_loss<double>(student, teacher, vc, center, pcenter, batch, 0.1, 0.04, 1.0).total; };
    const auto r = testing::check_gradients(student, grads, loss, 500 + point, 2);
    worst_ibot = std::max(worst_ibot, r.worst_rel_error);
    c.expect(r.worst_rel_error <= kGradRelTol, "ibot " + r.worst_tensor);
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "worst rel error ABMIL(D=64) %.2e, iBOT(vit_tiny_desk, dim 64) %.2e; tol %.0e",
                worst_mil, worst_ibot, kGradRelTol);
  return c.outcome(buf);
}

// ---------------------------------------------------------------- 4

Outcome ssl_identities() {
  Check c;
  ViTConfig vc = ViTConfig::preset_config(VitPreset::vit_tiny_desk);
  const auto student = init_vit<float>(vc, 1);
  const auto teacher0 = init_vit<float>(vc, 2);
  auto t = teacher0;
  ema_update(t, student, 1.0);
  c.expect(bitwise_equal(t, teacher0), "ema m=1 keeps teacher");
  ema_update(t, student, 0.0);
  c.expect(bitwise_equal(t, student), "ema m=0 copies student");

  auto rng = make_rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + static_cast<int>(uniform_index(rng, 64));
    RowVector<double> s(k), te(k), ce(k);
    for (int i = 0; i < k; ++i) {
      s(i) = normal(rng, 0, 3);
      te(i) = normal(rng, 0, 3);
      ce(i) = normal(rng, 0, 1);
    }
    const double tau_s = uniform(rng, 0.05, 1.0), tau_t = uniform(rng, 0.02, 1.0);
    const double loss = distill_loss<double>(s, te, tau_s, tau_t, ce);
    const RowVector<double> pt = teacher_distribution<double>(Matrix<double>(te), ce, tau_t).row(0);
    c.expect(loss >= entropy(pt) - 1e-6, "gibbs trial " + std::to_string(trial));
  }

  // One optimizer step: the teacher moves only by the EMA of the updated
  // student, so no gradient reached it.
  SslConfig ssl;
  ssl.batch_size = 2;
  ssl.max_steps = 10;
  ssl.lr_absolute = 1e-3;
  ssl.warmup_steps = 2;
  ssl.teacher_temp_warmup_steps = 5;
  const auto sched = resolve_schedule(ssl, 8);
  auto state = init_train_state(vc, ssl, sched, 9);
  // Start from a teacher that differs from the student.
  state.teacher = init_vit<float>(vc, 77);
  const auto teacher_before = state.teacher;
  const std::vector<AugmentedViewPair> batch{augment_pair(noise_image(256, 1), 1), augment_pair(noise_image(256, 2), 2)};
  ibot_step(state, batch, 5);
  auto expected = teacher_before;
  ema_update(expected, state.student, schedule_at(ssl, sched, 0).momentum);
  c.expect(bitwise_equal(expected, state.teacher), "teacher equals EMA of updated student");
  c.expect(!bitwise_equal(teacher_before, state.teacher), "teacher moved");

  const int g = vc.grid();
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const double ratio = 0.1 + 0.4 * static_cast<double>(seed % 5) / 4;
    const auto m = blockwise_mask(g, ratio, seed);
    c.expect(std::count(m.begin(), m.end(), true) == std::lround(ratio * g * g), "mask count seed " + std::to_string(seed));
    c.expect(m == blockwise_mask(g, ratio, seed), "mask reproducible seed " + std::to_string(seed));
  }
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto m = blockwise_mask(16, 0.3, seed);
    c.expect(std::count(m.begin(), m.end(), true) == 77, "16x16 mask count seed " + std::to_string(seed));
  }
  return c.outcome("EMA endpoints bit-exact, 1000 Gibbs pairs, EMA-only teacher update, 2x1000 masks exact count");
}

// ---------------------------------------------------------------- 5

// Probe images are fresh textures under a photometric shift of the kind the
// augmentation applies, so the probe measures orientation features that hold
// up under stain and illumination variation.
RgbImage probe_image(int texture, std::uint64_t seed) {
  const RgbImage img = synthetic_texture_patch(texture, seed);
  auto rng = make_rng(seed, {0x9b0e});
  AugmentationRecord r;
  r.crop_w = r.crop_h = img.width;
  r.jitter = true;
  r.brightness = uniform(rng, 0.6, 1.4);
  r.contrast = uniform(rng, 0.6, 1.4);
  r.saturation = uniform(rng, 0.8, 1.2);
  return apply_augmentation(img, r, img.width);
}

double probe_auroc(const BackboneParams<float>& b, const ViTConfig& vc) {
  constexpr int kTrain = 200, kTest = 200;
  Matrix<double> x(kTrain + kTest, vc.embed_dim);
  std::vector<int> y;
  for (int i = 0; i < kTrain + kTest; ++i) {
    const int texture = i % 2;
    x.row(i) = encode(b, vc, patchify<float>(probe_image(texture, 50000 + static_cast<std::uint64_t>(i)), vc))
                   .cls.cast<double>();
    y.push_back(texture);
  }
  const auto probe = fit_linear_probe(x.topRows(kTrain), {y.begin(), y.begin() + kTrain}, kProbeL2);
  return auroc_binary(probe.scores(x.bottomRows(kTest)), {y.begin() + kTrain, y.end()});
}

Outcome representation_learning() {
  Check c;
  constexpr int kBase = 64, kDup = 64, kSteps = 1000;
  ViTConfig vc = ViTConfig::preset_config(VitPreset::vit_tiny_desk);
  SslConfig ssl;
  ssl.batch_size = 8;
  ssl.max_steps = kSteps;
  ssl.lr_absolute = 5e-4;
  ssl.warmup_steps = kSteps / 10;
  ssl.teacher_temp_warmup_steps = kSteps / 4;
  std::vector<RgbImage> base;
  for (int i = 0; i < kBase; ++i) base.push_back(synthetic_texture_patch(i % 2, 1000 + static_cast<std::uint64_t>(i)));
  std::vector<std::size_t> index;
  for (int d = 0; d < kDup; ++d)
    for (int i = 0; i < kBase; ++i) index.push_back(static_cast<std::size_t>(i));
  InMemoryPatchSource src(base, index);
  compute_channel_stats(src, vc);
  auto state = init_train_state(vc, ssl, resolve_schedule(ssl, src.size()), 5);
  const double init = probe_auroc(export_teacher_encoder(state).weights, vc);
  pretrain(src, state);
  const double trained = probe_auroc(export_teacher_encoder(state).weights, vc);
  c.expect(src.size() <= 5000, "corpus <= 5k patches");
  c.expect(trained >= kProbeTrainedMin, "trained probe AUROC >= 0.9");
  c.expect(init <= kProbeInitMax, "random-init probe AUROC <= 0.7");
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d steps on %zu patches; probe AUROC trained %.3f (>= %.1f), random init %.3f (<= %.1f)",
                kSteps, src.size(), trained, kProbeTrainedMin, init, kProbeInitMax);
  return c.outcome(buf, kThirtyMinutes);
}

// ---------------------------------------------------------------- 6

std::vector<FeatureBag> slice(const std::vector<FeatureBag>& v, std::size_t a, std::size_t b) {
  return {v.begin() + static_cast<std::ptrdiff_t>(a), v.begin() + static_cast<std::ptrdiff_t>(b)};
}

Outcome mil_benchmark() {
  Check c;
  const auto bags = testing::shifted_gaussian_bags(200, 20, 16, 1.5, 3);
  MilTrainConfig cfg;
  cfg.max_epochs = 100;
  const auto model = train_mil(slice(bags, 0, 120), slice(bags, 120, 160), 2, cfg, 1);
  const double test_auroc = predictions_auroc(predict_bags(model, slice(bags, 160, 200)));
  c.expect(test_auroc >= kMilAurocMin, "test AUROC");

  auto rng = make_rng(6);
  double worst_perm = 0, worst_sum = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    FeatureBag b;
    b.features = random_bag(1 + static_cast<int>(uniform_index(rng, 50)), 16, 1000 + static_cast<std::uint64_t>(trial))
                     .cast<float>();
    const auto out = abmil_forward<double>(model.params, model.config, b.features.cast<double>());
    worst_sum = std::max(worst_sum, std::abs(out.attention.sum() - 1.0));
    if (trial < 1000) {
      FeatureBag shuffled = b;
      std::vector<Eigen::Index> perm(static_cast<std::size_t>(b.size()));
      std::iota(perm.begin(), perm.end(), 0);
      shuffle(perm, rng);
      for (std::size_t i = 0; i < perm.size(); ++i)
        shuffled.features.row(static_cast<Eigen::Index>(i)) = b.features.row(perm[i]);
      worst_perm = std::max(worst_perm, (predict_bag(model.params, model.config, b) -
                                         predict_bag(model.params, model.config, shuffled))
                                            .cwiseAbs()
                                            .maxCoeff());
    }
  }
  c.expect(worst_perm <= kInvarianceTol, "permutation invariance");
  c.expect(worst_sum <= kAttentionSumTol, "attention sums");
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "test AUROC %.3f (>= %.2f); max |dp| under permutation %.1e; max |sum a - 1| over 10k bags %.1e",
                test_auroc, kMilAurocMin, worst_perm, worst_sum);
  return c.outcome(buf);
}

// ---------------------------------------------------------------- 7

double exact_sign_flip_p(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  double obs = 0;
  for (std::size_t i = 0; i < n; ++i) obs += a[i] - b[i];
  obs = std::abs(obs) / static_cast<double>(n);
  int hits = 0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += ((mask >> i) & 1u) ? a[i] - b[i] : b[i] - a[i];
    if (std::abs(s) / static_cast<double>(n) >= obs - 1e-12) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(1u << n);
}

Outcome protocol_fidelity() {
  Check c;
  std::map<std::string, int> labels;
  auto rng = make_rng(7);
  for (int i = 0; i < 137; ++i) labels["img" + std::to_string(i)] = static_cast<int>(uniform_index(rng, 3));
  std::map<int, int> class_n;
  for (const auto& [id, y] : labels) ++class_n[y];
  const auto splits = stratified_splits(labels, {}, 100, 11);
  const auto again = stratified_splits(labels, {}, 100, 11);
  const double ratios[3] = {0.6, 0.2, 0.2};
  for (std::size_t k = 0; k < splits.size(); ++k) {
    const auto& s = splits[k];
    c.expect(s.train == again[k].train && s.val == again[k].val && s.test == again[k].test,
             "split " + std::to_string(k) + " regenerates");
    std::map<int, std::array<int, 3>> counts;
    std::set<std::string> seen;
    int part = 0;
    for (const auto* ids : {&s.train, &s.val, &s.test}) {
      for (const auto& id : *ids) {
        c.expect(seen.insert(id).second, "disjoint");
        ++counts[labels.at(id)][static_cast<std::size_t>(part)];
      }
      ++part;
    }
    c.expect(seen.size() == labels.size(), "exhaustive");
    for (const auto& [y, cnt] : counts)
      for (int p = 0; p < 3; ++p)
        c.expect(std::abs(cnt[static_cast<std::size_t>(p)] - ratios[p] * class_n[y]) <= 1.0,
                 "proportional split " + std::to_string(k));
  }

  c.expect(format_aggregate(aggregate_runs({0.93, 0.88, 0.98})) == "0.930 ± 0.04", "formatting");
  c.expect(format_aggregate(aggregate_runs({0.8, 1.0})) == "0.900 ± 0.10", "formatting");

  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(10), y(10);
    for (int i = 0; i < 10; ++i) {
      x[static_cast<std::size_t>(i)] = uniform(rng, 0.7, 0.9);
      y[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] + normal(rng, 0.01 * (trial % 4), 0.03);
    }
    worst = std::max(worst, std::abs(paired_significance(x, y, 10000, static_cast<std::uint64_t>(trial)) -
                                     exact_sign_flip_p(x, y)));
  }
  c.expect(worst <= kPermVsExactTol, "permutation p vs exact enumeration");
  std::vector<double> a(100), b(100);
  for (std::size_t i = 0; i < 100; ++i) {
    b[i] = uniform(rng, 0.6, 0.9);
    a[i] = b[i] + 0.1;
  }
  const double p_shift = paired_significance(a, b, 10000, 1);
  c.expect(p_shift < kShiftPMax, "uniform +0.1 shift");
  char buf[200];
  std::snprintf(buf, sizeof buf, "100 splits reproducible and within +-1; max |p - exact| (n=10) %.4f; shift p %.1e",
                worst, p_shift);
  return c.outcome(buf);
}

// ---------------------------------------------------------------- 8

Outcome round_trips() {
  Check c;
  const auto dir = scratch("roundtrip");
  auto rng = make_rng(8);
  std::vector<FeatureBag> bags;
  for (int b = 0; b < 5; ++b) {
    FeatureBag bag;
    bag.image_id = "img" + std::to_string(b);
    bag.label = b % 2;
    bag.features.resize(3 + b, 64);
    for (Eigen::Index i = 0; i < bag.features.size(); ++i) bag.features.data()[i] = static_cast<float>(normal(rng, 0, 1));
    bags.push_back(bag);
  }
  bags[0].features(0, 0) = -0.0f;
  bags[0].features(0, 1) = std::numeric_limits<float>::denorm_min();
  write_feature_store(bags, dir / "feats", "enc");
  const auto back = read_feature_store(dir / "feats");
  c.expect(back.size() == bags.size(), "bag count");
  for (std::size_t i = 0; i < std::min(back.size(), bags.size()); ++i)
    c.expect(back[i].image_id == bags[i].image_id && back[i].features.size() == bags[i].features.size() &&
                 std::memcmp(back[i].features.data(), bags[i].features.data(), bags[i].features.size() * 4) == 0,
             "feature bag " + std::to_string(i));

  const ViTConfig vc = ViTConfig::preset_config(VitPreset::vit_tiny_desk);
  const FrozenEncoder enc{vc, init_vit<float>(vc, 18).backbone, "enc"};
  save_encoder(dir / "enc", enc);
  c.expect(bitwise_equal(load_encoder(dir / "enc").weights, enc.weights), "encoder weights");

  SslConfig ssl;
  ssl.batch_size = 4;
  ssl.max_steps = 50;
  ssl.lr_absolute = 5e-4;
  ssl.warmup_steps = 5;
  ssl.teacher_temp_warmup_steps = 10;
  ssl.checkpoint_every = 25;
  std::vector<RgbImage> images;
  for (int i = 0; i < 8; ++i) images.push_back(synthetic_texture_patch(i % 2, static_cast<std::uint64_t>(i)));
  InMemoryPatchSource src(images);
  const auto sched = resolve_schedule(ssl, src.size());
  auto full = init_train_state(vc, ssl, sched, 21);
  pretrain(src, full);
  auto first = init_train_state(vc, ssl, sched, 21);
  PretrainOptions o;
  o.checkpoint_dir = dir / "ckpt";
  o.stop_at_step = 25;
  pretrain(src, first, o);
  auto resumed = load_checkpoint(dir / "ckpt" / "ckpt_step25");
  pretrain(src, resumed);
  c.expect(full.step == 50 && resumed.step == 50, "step counts");
  c.expect(bitwise_equal(full.student, resumed.student), "student after resume");
  c.expect(bitwise_equal(full.teacher, resumed.teacher), "teacher after resume");
  c.expect(full.center == resumed.center && full.patch_center == resumed.patch_center, "centers after resume");
  fs::remove_all(dir);
  return c.outcome("feature store and encoder bit-exact; 25+25 resumed run equals 50-step run bitwise");
}

// ---------------------------------------------------------------- 9

Outcome end_to_end() {
  Check c;
  const fs::path fixture = CYTOFM_FIXTURE_DIR;
  const auto dir = scratch("e2e");
  const auto s = [](const fs::path& p) { return p.string(); };
  std::ostringstream log;
  auto run = [&](std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli_main(args, out, err);
    c.expect(code == 0, args[0] + " exit " + std::to_string(code) + " " + err.str());
    log << args[0] << ":" << code << " ";
    return code == 0;
  };
  const bool ok =
      run({"preprocess", "--registry", s(fixture / "datasets.json"), "--out", s(dir / "pre")}) &&
      run({"pretrain", "--config", s(fixture / "pretrain.json"), "--registry", s(dir / "pre" / "registry.json"),
           "--out", s(dir / "run"), "--steps", "50"}) &&
      run({"extract", "--encoder", s(dir / "run" / "encoder"), "--patches", s(dir / "pre" / "synthetic"), "--out",
           s(dir / "features")}) &&
      run({"train-mil", "--features", s(dir / "features"), "--labels", s(fixture / "labels.csv"), "--task",
           s(fixture / "task.json"), "--out", s(dir / "mil")}) &&
      run({"evaluate", "--features", s(dir / "features"), "--labels", s(fixture / "labels.csv"), "--task",
           s(fixture / "task.json"), "--out", s(dir / "eval")}) &&
      run({"visualize", "--encoder", s(dir / "run" / "encoder"), "--patches", s(dir / "pre" / "synthetic"),
           "--features", s(dir / "features"), "--labels", s(fixture / "labels.csv"), "--out", s(dir / "viz")});
  std::size_t heatmaps = 0, projection_rows = 0;
  if (ok) {
    c.expect(fs::exists(dir / "eval" / "report.json") && fs::exists(dir / "eval" / "report.csv"), "report");
    if (fs::exists(dir / "viz" / "heatmaps"))
      for (const auto& e : fs::directory_iterator(dir / "viz" / "heatmaps")) heatmaps += e.path().extension() == ".png";
    c.expect(heatmaps > 0, "heatmaps");
    std::ifstream csv(dir / "viz" / "projection.csv");
    std::string line;
    while (std::getline(csv, line)) ++projection_rows;
    c.expect(projection_rows > 1, "projection CSV");
  }
  fs::remove_all(dir);
  return c.outcome(log.str() + "| " + std::to_string(heatmaps) + " heatmaps, " +
                       std::to_string(projection_rows > 0 ? projection_rows - 1 : 0) + " projection rows",
                   kTenMinutes);
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace cytofm

int main(int argc, char** argv) {
  using namespace cytofm;
  const std::vector<Criterion> all{
      {1, "tiling oracle", tiling_oracle},
      {2, "AUROC oracle equivalence", auroc_oracles},
      {3, "gradient checks", gradient_checks},
      {4, "SSL identities", ssl_identities},
      {5, "desk-scale representation learning", representation_learning},
      {6, "MIL benchmark", mil_benchmark},
      {7, "protocol fidelity", protocol_fidelity},
      {8, "round-trip integrity", round_trips},
      {9, "end-to-end smoke", end_to_end},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& cr : all) {
    if (!wanted.empty() && !wanted.contains(cr.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = cr.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what(), 0};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.budget_s > 0 && secs > o.budget_s) {
      o.pass = false;
      o.detail += "; over the " + std::to_string(static_cast<int>(o.budget_s)) + " s budget";
    }
    failed += !o.pass;
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", cr.id, cr.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
