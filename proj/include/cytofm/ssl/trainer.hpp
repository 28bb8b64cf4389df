#pragma once

// iBOT-style pretraining: cross-view CLS self-distillation plus masked patch
// prediction against an EMA teacher that serves as the online tokenizer.

#include "cytofm/backbone/vit.hpp"
#include "cytofm/backbone/weights_io.hpp"
#include "cytofm/datasets/corpus.hpp"
#include "cytofm/ssl/augment.hpp"
#include "cytofm/ssl/ema.hpp"
#include "cytofm/ssl/loss.hpp"
#include "cytofm/ssl/mask.hpp"
#include "cytofm/ssl/optimizer.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace cytofm {

struct SslConfig {
  double student_temp = 0.1;
  double teacher_temp_start = 0.04;
  double teacher_temp_end = 0.07;
  double momentum_start = 0.996;
  double momentum_end = 1.0;
  double center_momentum = 0.9;
  double mask_ratio_low = 0.1;
  double mask_ratio_high = 0.5;
  double lambda_mim = 1.0;

  // Learning rate at batch size 256; the effective rate scales linearly with
  // batch size unless lr_absolute is set.
  double lr = 5e-4;
  std::optional<double> lr_absolute;
  double min_lr = 1e-6;
  double weight_decay_start = 0.04;
  double weight_decay_end = 0.4;
  double clip_grad = 3.0;  // <= 0 disables clipping

  int batch_size = 16;
  int epochs = 1;
  std::int64_t max_steps = 0;  // 0: epochs * steps_per_epoch
  int warmup_epochs = 10;
  int teacher_temp_warmup_epochs = 10;
  // Step-based overrides of the two warmups (-1: derive from epochs).
  std::int64_t warmup_steps = -1;
  std::int64_t teacher_temp_warmup_steps = -1;
  std::int64_t checkpoint_every = 100;
  AugmentationConfig augment;

  void validate() const {
    CYTOFM_REQUIRE(student_temp > 0 && teacher_temp_start > 0 && teacher_temp_end > 0,
                   "temperatures must be positive");
    CYTOFM_REQUIRE(momentum_start >= 0 && momentum_start <= 1 && momentum_end >= 0 && momentum_end <= 1,
                   "EMA momentum must lie in [0,1]");
    CYTOFM_REQUIRE(center_momentum >= 0 && center_momentum <= 1, "center momentum must lie in [0,1]");
    CYTOFM_REQUIRE(0 <= mask_ratio_low && mask_ratio_low <= mask_ratio_high && mask_ratio_high <= 1,
                   "mask ratio range must satisfy 0 <= low <= high <= 1");
    CYTOFM_REQUIRE(lambda_mim >= 0, "lambda_mim must be non-negative");
    CYTOFM_REQUIRE(batch_size >= 1, "batch size must be >= 1");
    CYTOFM_REQUIRE(epochs >= 0 && max_steps >= 0, "epochs/max_steps must be non-negative");
  }
};

inline void to_json(json& j, const SslConfig& c) {
  j = json{{"student_temp", c.student_temp},
           {"teacher_temp_start", c.teacher_temp_start},
           {"teacher_temp_end", c.teacher_temp_end},
           {"momentum_start", c.momentum_start},
           {"momentum_end", c.momentum_end},
           {"center_momentum", c.center_momentum},
           {"mask_ratio_low", c.mask_ratio_low},
           {"mask_ratio_high", c.mask_ratio_high},
           {"lambda_mim", c.lambda_mim},
           {"lr", c.lr},
           {"min_lr", c.min_lr},
           {"weight_decay_start", c.weight_decay_start},
           {"weight_decay_end", c.weight_decay_end},
           {"clip_grad", c.clip_grad},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"max_steps", c.max_steps},
           {"warmup_epochs", c.warmup_epochs},
           {"teacher_temp_warmup_epochs", c.teacher_temp_warmup_epochs},
           {"warmup_steps", c.warmup_steps},
           {"teacher_temp_warmup_steps", c.teacher_temp_warmup_steps},
           {"checkpoint_every", c.checkpoint_every}};
  if (c.lr_absolute) j["lr_absolute"] = *c.lr_absolute;
}

inline void from_json(const json& j, SslConfig& c) {
  c = SslConfig{};
  c.student_temp = j.value("student_temp", c.student_temp);
  c.teacher_temp_start = j.value("teacher_temp_start", c.teacher_temp_start);
  c.teacher_temp_end = j.value("teacher_temp_end", c.teacher_temp_end);
  c.momentum_start = j.value("momentum_start", c.momentum_start);
  c.momentum_end = j.value("momentum_end", c.momentum_end);
  c.center_momentum = j.value("center_momentum", c.center_momentum);
  c.mask_ratio_low = j.value("mask_ratio_low", c.mask_ratio_low);
  c.mask_ratio_high = j.value("mask_ratio_high", c.mask_ratio_high);
  c.lambda_mim = j.value("lambda_mim", c.lambda_mim);
  c.lr = j.value("lr", c.lr);
  if (j.contains("lr_absolute")) c.lr_absolute = j["lr_absolute"].get<double>();
  c.min_lr = j.value("min_lr", c.min_lr);
  c.weight_decay_start = j.value("weight_decay_start", c.weight_decay_start);
  c.weight_decay_end = j.value("weight_decay_end", c.weight_decay_end);
  c.clip_grad = j.value("clip_grad", c.clip_grad);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.teacher_temp_warmup_epochs = j.value("teacher_temp_warmup_epochs", c.teacher_temp_warmup_epochs);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.teacher_temp_warmup_steps = j.value("teacher_temp_warmup_steps", c.teacher_temp_warmup_steps);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
}

// Step-resolved schedule lengths for a run over a corpus of a given size.
struct ScheduleSteps {
  std::int64_t steps_per_epoch = 1;
  std::int64_t total_steps = 0;
  std::int64_t warmup_steps = 0;
  std::int64_t teacher_temp_warmup_steps = 0;
};

inline ScheduleSteps resolve_schedule(const SslConfig& c, std::size_t corpus_size) {
  ScheduleSteps s;
  s.steps_per_epoch = std::max<std::int64_t>(1, static_cast<std::int64_t>(corpus_size) / c.batch_size);
  s.total_steps = c.max_steps > 0 ? c.max_steps : c.epochs * s.steps_per_epoch;
  s.warmup_steps = c.warmup_steps >= 0 ? c.warmup_steps
                                       : std::min<std::int64_t>(c.warmup_epochs * s.steps_per_epoch, s.total_steps);
  s.teacher_temp_warmup_steps =
      c.teacher_temp_warmup_steps >= 0
          ? c.teacher_temp_warmup_steps
          : std::min<std::int64_t>(c.teacher_temp_warmup_epochs * s.steps_per_epoch, s.total_steps);
  return s;
}

struct ScheduleValues {
  double lr = 0;
  double weight_decay = 0;
  double momentum = 0;
  double teacher_temp = 0;
};

inline ScheduleValues schedule_at(const SslConfig& c, const ScheduleSteps& s, std::int64_t step) {
  const double peak = c.lr_absolute ? *c.lr_absolute : c.lr * c.batch_size / 256.0;
  ScheduleValues v;
  v.lr = cosine_schedule(peak, c.min_lr, step, s.total_steps, s.warmup_steps, 0.0);
  v.weight_decay = cosine_schedule(c.weight_decay_start, c.weight_decay_end, step, s.total_steps);
  v.momentum = cosine_schedule(c.momentum_start, c.momentum_end, step, s.total_steps);
  v.teacher_temp = linear_warmup(c.teacher_temp_start, c.teacher_temp_end, step, s.teacher_temp_warmup_steps);
  return v;
}

struct TrainState {
  ViTConfig vit;
  SslConfig ssl;
  ScheduleSteps schedule;
  std::uint64_t seed = 0;
  VitParams<float> student;
  VitParams<float> teacher;
  RowVector<float> center;        // CLS targets
  RowVector<float> patch_center;  // patch-token targets
  AdamW<VitParams<float>> optimizer;
  std::int64_t step = 0;

  bool initialized() const { return !student.backbone.blocks.empty() && !teacher.backbone.blocks.empty(); }
};

// Teacher starts as an exact copy of the student.
inline TrainState init_train_state(const ViTConfig& vit, const SslConfig& ssl, const ScheduleSteps& schedule,
                                   std::uint64_t seed) {
  vit.validate();
  ssl.validate();
  TrainState s;
  s.vit = vit;
  s.ssl = ssl;
  s.schedule = schedule;
  s.seed = seed;
  s.student = init_vit<float>(vit, seed);
  s.teacher = s.student;
  s.center = RowVector<float>::Zero(vit.head_out_dim);
  s.patch_center = RowVector<float>::Zero(vit.head_out_dim);
  s.optimizer = AdamW<VitParams<float>>(s.student);
  return s;
}

struct LossBreakdown {
  double l_cls = 0;
  double l_mim = 0;
  double total = 0;
};

// One image of a batch: both augmented views as patch matrices plus the
// student masks applied to them.
template <class S>
struct IbotSample {
  Matrix<S> u, v;
  std::vector<bool> mask_u, mask_v;
};

template <class S>
struct IbotLossOutput {
  S l_cls = 0;
  S l_mim = 0;
  S total = 0;
  Matrix<S> teacher_cls_logits;      // (2B) x K
  RowVector<S> teacher_patch_mean;   // mean teacher patch logits
};

// Total loss L_cls + lambda * L_mim over a batch. L_cls averages the two
// cross-view CLS terms; L_mim averages, per view, the patch loss over masked
// positions (views without masked positions contribute 0). Teacher outputs
// are constants: gradients (when requested) flow to the student only.
template <class S>
IbotLossOutput<S> ibot_loss(const VitParams<S>& student, const VitParams<S>& teacher, const ViTConfig& c,
                            const RowVector<S>& center, const RowVector<S>& patch_center,
                            const std::vector<IbotSample<S>>& batch, S tau_s, S tau_t, S lambda_mim,
                            VitParams<S>* grads = nullptr) {
  CYTOFM_REQUIRE(!batch.empty(), "empty batch");
  const auto b = static_cast<S>(batch.size());
  const int n = c.num_patches();
  IbotLossOutput<S> out;
  out.teacher_cls_logits.resize(2 * static_cast<Eigen::Index>(batch.size()), c.head_out_dim);
  out.teacher_patch_mean = RowVector<S>::Zero(c.head_out_dim);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& item = batch[i];
    const auto tu = vit_forward(teacher, c, item.u);
    const auto tv = vit_forward(teacher, c, item.v);
    out.teacher_cls_logits.row(2 * i) = tu.cls_head_logits;
    out.teacher_cls_logits.row(2 * i + 1) = tv.cls_head_logits;
    out.teacher_patch_mean += (tu.patch_head_logits.colwise().mean() + tv.patch_head_logits.colwise().mean()) /
                              (S(2) * b);

    const Matrix<S> pt_cls_u = teacher_distribution(Matrix<S>(tu.cls_head_logits), center, tau_t);
    const Matrix<S> pt_cls_v = teacher_distribution(Matrix<S>(tv.cls_head_logits), center, tau_t);
    const Matrix<S> pt_patch_u = teacher_distribution(tu.patch_head_logits, patch_center, tau_t);
    const Matrix<S> pt_patch_v = teacher_distribution(tv.patch_head_logits, patch_center, tau_t);

    struct View {
      const Matrix<S>* pixels;
      const std::vector<bool>* mask;
      const Matrix<S>* cls_target;    // teacher on the other view
      const Matrix<S>* patch_target;  // teacher on the same view, unmasked
    };
    const View views[2] = {{&item.u, &item.mask_u, &pt_cls_v, &pt_patch_u},
                           {&item.v, &item.mask_v, &pt_cls_u, &pt_patch_v}};
    for (const auto& view : views) {
      CYTOFM_REQUIRE(static_cast<int>(view.mask->size()) == n, "mask length does not match the token grid");
      ForwardCache<S> cache;
      const auto so = vit_forward(student, c, *view.pixels, view.mask, grads ? &cache : nullptr);
      const S w_cls = S(1) / (S(2) * b);
      Matrix<S> d_cls;
      const S cls_loss = cross_entropy_rows(*view.cls_target, Matrix<S>(so.cls_head_logits), tau_s,
                                            grads ? &d_cls : nullptr, w_cls)(0);
      out.l_cls += w_cls * cls_loss;

      std::vector<Eigen::Index> masked;
      for (int k = 0; k < n; ++k)
        if ((*view.mask)[static_cast<std::size_t>(k)]) masked.push_back(k);
      Matrix<S> d_patch = Matrix<S>::Zero(n, c.head_out_dim);
      if (!masked.empty()) {
        const auto m = static_cast<Eigen::Index>(masked.size());
        Matrix<S> tgt(m, c.head_out_dim), logits(m, c.head_out_dim);
        for (Eigen::Index r = 0; r < m; ++r) {
          tgt.row(r) = view.patch_target->row(masked[r]);
          logits.row(r) = so.patch_head_logits.row(masked[r]);
        }
        const S w_mim = S(1) / (S(2) * b * static_cast<S>(m));
        Matrix<S> d_masked;
        const auto losses = cross_entropy_rows(tgt, logits, tau_s, grads ? &d_masked : nullptr, lambda_mim * w_mim);
        out.l_mim += w_mim * losses.sum();
        if (grads)
          for (Eigen::Index r = 0; r < m; ++r) d_patch.row(masked[r]) = d_masked.row(r);
      }
      if (grads) vit_backward(student, c, cache, d_cls, d_patch, *grads);
    }
  }
  out.total = out.l_cls + lambda_mim * out.l_mim;
  return out;
}

// Per-view mask ratio drawn uniformly from the configured range.
inline std::vector<bool> sample_view_mask(const ViTConfig& c, const SslConfig& s, std::uint64_t seed) {
  auto rng = make_rng(seed, {0x3a5c});
  const double ratio = uniform(rng, s.mask_ratio_low, s.mask_ratio_high);
  return blockwise_mask(c.grid(), ratio, derive_seed(seed, {0x3a5d}));
}

// One optimization step: loss and student gradients, clipped AdamW update,
// EMA teacher update, center updates.
inline LossBreakdown ibot_step(TrainState& state, const std::vector<AugmentedViewPair>& batch, std::uint64_t seed) {
  CYTOFM_REQUIRE(!batch.empty(), "ibot_step needs a non-empty batch");
  CYTOFM_REQUIRE(state.initialized(), "training state is not initialized");
  const auto sched = schedule_at(state.ssl, state.schedule, state.step);
  std::vector<IbotSample<float>> samples;
  samples.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    IbotSample<float> s;
    s.u = patchify<float>(batch[i].u, state.vit);
    s.v = patchify<float>(batch[i].v, state.vit);
    s.mask_u = sample_view_mask(state.vit, state.ssl, derive_seed(seed, {i, 0}));
    s.mask_v = sample_view_mask(state.vit, state.ssl, derive_seed(seed, {i, 1}));
    samples.push_back(std::move(s));
  }
  auto grads = zeros_like(state.student);
  const auto out = ibot_loss<float>(state.student, state.teacher, state.vit, state.center, state.patch_center, samples,
                                    static_cast<float>(state.ssl.student_temp), static_cast<float>(sched.teacher_temp),
                                    static_cast<float>(state.ssl.lambda_mim), &grads);
  if (!std::isfinite(out.l_cls))
    throw RuntimeError("non-finite L_cls at step " + std::to_string(state.step));
  if (!std::isfinite(out.l_mim))
    throw RuntimeError("non-finite L_mim at step " + std::to_string(state.step));
  if (!all_params_finite(grads)) throw RuntimeError("non-finite gradients at step " + std::to_string(state.step));

  clip_grad_norm(grads, state.ssl.clip_grad);
  state.optimizer.step(state.student, grads, sched.lr, sched.weight_decay);
  ema_update(state.teacher, state.student, sched.momentum);
  state.center = update_center(state.center, out.teacher_cls_logits, state.ssl.center_momentum);
  state.patch_center =
      update_center(state.patch_center, Matrix<float>(out.teacher_patch_mean), state.ssl.center_momentum);
  ++state.step;
  return {out.l_cls, out.l_mim, out.total};
}

// Frozen encoder carrying the teacher backbone only.
inline FrozenEncoder export_teacher_encoder(const TrainState& state, std::string id = "cytofm-teacher") {
  CYTOFM_REQUIRE(state.initialized(), "cannot export from an uninitialized training state");
  return FrozenEncoder{state.vit, state.teacher.backbone, std::move(id)};
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_checkpoint(const fs::path& path, const TrainState& s) {
  TensorContainer c;
  c.kind = "train_state";
  c.metadata = {{"vit", s.vit},
                {"ssl", s.ssl},
                {"seed", s.seed},
                {"step", s.step},
                {"optimizer_t", s.optimizer.t},
                {"schedule",
                 {{"steps_per_epoch", s.schedule.steps_per_epoch},
                  {"total_steps", s.schedule.total_steps},
                  {"warmup_steps", s.schedule.warmup_steps},
                  {"teacher_temp_warmup_steps", s.schedule.teacher_temp_warmup_steps}}}};
  append_params(c, s.student, "student");
  append_params(c, s.teacher, "teacher");
  append_params(c, s.optimizer.first, "adam_m");
  append_params(c, s.optimizer.second, "adam_v");
  c.tensors.emplace_back("center", Matrix<float>(s.center));
  c.tensors.emplace_back("patch_center", Matrix<float>(s.patch_center));
  write_container(path, c);
}

inline TrainState load_checkpoint(const fs::path& path) {
  const auto c = read_container(path);
  CYTOFM_REQUIRE(c.kind == "train_state", "not a training checkpoint: " + path.string());
  const auto& m = c.metadata;
  ScheduleSteps sched;
  sched.steps_per_epoch = m["schedule"].at("steps_per_epoch").get<std::int64_t>();
  sched.total_steps = m["schedule"].at("total_steps").get<std::int64_t>();
  sched.warmup_steps = m["schedule"].at("warmup_steps").get<std::int64_t>();
  sched.teacher_temp_warmup_steps = m["schedule"].at("teacher_temp_warmup_steps").get<std::int64_t>();
  TrainState s = init_train_state(m.at("vit").get<ViTConfig>(), m.at("ssl").get<SslConfig>(), sched,
                                  m.at("seed").get<std::uint64_t>());
  s.step = m.at("step").get<std::int64_t>();
  s.optimizer.t = m.at("optimizer_t").get<std::int64_t>();
  load_params(c, s.student, "student");
  load_params(c, s.teacher, "teacher");
  load_params(c, s.optimizer.first, "adam_m");
  load_params(c, s.optimizer.second, "adam_v");
  s.center = c.at("center");
  s.patch_center = c.at("patch_center");
  return s;
}

// ---------------------------------------------------------------------------
// Data

// Random-access patch provider for pretraining.
class PatchSource {
 public:
  virtual ~PatchSource() = default;
  virtual std::size_t size() const = 0;
  virtual const RgbImage& get(std::size_t i) const = 0;
};

// Images held in memory; index entries may repeat an image.
class InMemoryPatchSource final : public PatchSource {
 public:
  InMemoryPatchSource(std::vector<RgbImage> images, std::vector<std::size_t> index = {})
      : images_(std::move(images)), index_(std::move(index)) {
    if (index_.empty()) {
      index_.resize(images_.size());
      std::iota(index_.begin(), index_.end(), 0);
    }
    for (auto i : index_) CYTOFM_REQUIRE(i < images_.size(), "index entry out of range");
  }
  std::size_t size() const override { return index_.size(); }
  const RgbImage& get(std::size_t i) const override { return images_[index_.at(i)]; }

 private:
  std::vector<RgbImage> images_;
  std::vector<std::size_t> index_;
};

// Corpus entries decoded on first use and kept in memory.
class CorpusPatchSource final : public PatchSource {
 public:
  explicit CorpusPatchSource(CorpusIndex corpus) : corpus_(std::move(corpus)) {}
  std::size_t size() const override { return corpus_.size(); }
  const RgbImage& get(std::size_t i) const override {
    const auto& path = corpus_.entries.at(i).file;
    auto it = cache_.find(path.string());
    if (it == cache_.end()) it = cache_.emplace(path.string(), load_rgb(path)).first;
    return it->second;
  }

 private:
  CorpusIndex corpus_;
  mutable std::map<std::string, RgbImage> cache_;
};

// Per-channel mean/std (on the [0,1] scale) over up to max_images patches.
inline void compute_channel_stats(const PatchSource& src, ViTConfig& c, std::size_t max_images = 512) {
  double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
  double count = 0;
  const std::size_t n = std::min(src.size(), max_images);
  CYTOFM_REQUIRE(n > 0, "cannot compute channel statistics of an empty corpus");
  for (std::size_t i = 0; i < n; ++i) {
    const auto& img = src.get(i * src.size() / n);
    for (std::size_t p = 0; p < img.pixels.size(); p += 3) {
      for (int ch = 0; ch < 3; ++ch) {
        const double v = img.pixels[p + ch] / 255.0;
        sum[ch] += v;
        sq[ch] += v * v;
      }
      count += 1;
    }
  }
  for (int ch = 0; ch < 3; ++ch) {
    const double mean = sum[ch] / count;
    const double var = std::max(sq[ch] / count - mean * mean, 1e-6);
    c.pixel_mean[ch] = static_cast<float>(mean);
    c.pixel_std[ch] = static_cast<float>(std::sqrt(var));
  }
}

// Indices of the batch consumed at a given step: each epoch walks a seeded
// permutation of the source in consecutive batch_size chunks.
inline std::vector<std::size_t> batch_indices(std::size_t source_size, int batch_size, std::int64_t step,
                                              std::int64_t steps_per_epoch, std::uint64_t seed) {
  const std::int64_t epoch = step / steps_per_epoch;
  const std::int64_t within = step % steps_per_epoch;
  std::vector<std::size_t> perm(source_size);
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_rng(seed, {0xe90c, static_cast<std::uint64_t>(epoch)});
  shuffle(perm, rng);
  std::vector<std::size_t> out;
  for (int j = 0; j < batch_size; ++j)
    out.push_back(perm[static_cast<std::size_t>((within * batch_size + j)) % source_size]);
  return out;
}

struct PretrainOptions {
  fs::path checkpoint_dir;  // empty: no checkpoints
  fs::path log_path;        // empty: no training log
  std::int64_t stop_at_step = -1;  // -1: run the full schedule
  std::function<void(std::int64_t, const LossBreakdown&)> on_step;
};

inline std::vector<AugmentedViewPair> make_batch(const PatchSource& src, const TrainState& s) {
  std::vector<AugmentedViewPair> batch;
  const auto idx = batch_indices(src.size(), s.ssl.batch_size, s.step, s.schedule.steps_per_epoch, s.seed);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const auto& img = src.get(idx[j]);
    CYTOFM_REQUIRE(img.height == s.vit.image_size && img.width == s.vit.image_size,
                   "corpus patch does not match the model image size");
    batch.push_back(augment_pair(img, derive_seed(s.seed, {0xa0, static_cast<std::uint64_t>(s.step), j}),
                                 s.ssl.augment, s.vit.image_size));
  }
  return batch;
}

// Runs ibot_step until the schedule ends (or stop_at_step), writing a JSON
// line per step and checkpoints every checkpoint_every steps plus at the end.
// A non-finite loss aborts; checkpoints already on disk are kept.
inline TrainState& pretrain(const PatchSource& src, TrainState& state, const PretrainOptions& opt = {}) {
  CYTOFM_REQUIRE(src.size() > 0, "pretraining corpus is empty");
  CYTOFM_REQUIRE(state.initialized(), "training state is not initialized");
  std::ofstream log;
  if (!opt.log_path.empty()) {
    if (opt.log_path.has_parent_path()) fs::create_directories(opt.log_path.parent_path());
    log.open(opt.log_path, std::ios::app);
    if (!log) throw RuntimeError("cannot open training log " + opt.log_path.string());
  }
  auto write_ckpt = [&] {
    if (opt.checkpoint_dir.empty()) return;
    save_checkpoint(opt.checkpoint_dir / ("ckpt_step" + std::to_string(state.step)), state);
    save_checkpoint(opt.checkpoint_dir / "latest", state);
  };
  const std::int64_t end = opt.stop_at_step >= 0 ? std::min(opt.stop_at_step, state.schedule.total_steps)
                                                 : state.schedule.total_steps;
  while (state.step < end) {
    const auto sched = schedule_at(state.ssl, state.schedule, state.step);
    const auto batch = make_batch(src, state);
    const std::int64_t step = state.step;
    const auto loss = ibot_step(state, batch, derive_seed(state.seed, {0x57e9, static_cast<std::uint64_t>(step)}));
    if (log) {
      log << json{{"step", step},          {"L_cls", loss.l_cls},   {"L_mim", loss.l_mim},
                  {"total", loss.total},   {"lr", sched.lr},        {"m", sched.momentum},
                  {"tau_t", sched.teacher_temp}, {"wd", sched.weight_decay}}
                 .dump()
          << "\n";
      log.flush();
    }
    if (opt.on_step) opt.on_step(step, loss);
    if (state.ssl.checkpoint_every > 0 && state.step % state.ssl.checkpoint_every == 0) write_ckpt();
  }
  write_ckpt();
  return state;
}

}  // namespace cytofm
