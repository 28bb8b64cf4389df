#pragma once

// Attention-based MIL: a = softmax_i(w . tanh(V h_i + b_V) [* sigmoid(U h_i + b_U)]),
// z = sum_i a_i h_i, logits = z W_c + b_c.

#include "cytofm/backbone/layers.hpp"
#include "cytofm/backbone/params.hpp"
#include "cytofm/core/random.hpp"
#include "cytofm/mil/feature_bag.hpp"

#include <optional>
#include <vector>

namespace cytofm {

struct AbmilConfig {
  int dim = 0;           // D
  int hidden = 128;      // L
  int num_classes = 2;   // C; binary tasks use a single logit
  bool gated = false;
  double dropout = 0.25;

  int logits() const { return num_classes == 2 ? 1 : num_classes; }
  bool binary() const { return num_classes == 2; }

  void validate() const {
    CYTOFM_REQUIRE(dim >= 1, "ABMIL input dim must be positive");
    CYTOFM_REQUIRE(hidden >= 1, "ABMIL attention dim must be positive");
    CYTOFM_REQUIRE(num_classes >= 2, "ABMIL needs at least 2 classes");
    CYTOFM_REQUIRE(dropout >= 0 && dropout < 1, "dropout must lie in [0,1)");
  }
};

inline void to_json(json& j, const AbmilConfig& c) {
  j = json{{"dim", c.dim}, {"hidden", c.hidden}, {"num_classes", c.num_classes}, {"gated", c.gated},
           {"dropout", c.dropout}};
}
inline void from_json(const json& j, AbmilConfig& c) {
  c.dim = j.at("dim").get<int>();
  c.hidden = j.value("hidden", 128);
  c.num_classes = j.value("num_classes", 2);
  c.gated = j.value("gated", false);
  c.dropout = j.value("dropout", 0.25);
}

template <class S>
struct AbmilParams {
  using Scalar = S;
  LinearParams<S> attn_v;                 // D -> L
  std::optional<LinearParams<S>> attn_u;  // D -> L, gated variant
  Matrix<S> attn_w;                       // L x 1
  LinearParams<S> classifier;             // D -> C (or 1)
};

template <class S, class F>
void visit_params(AbmilParams<S>& p, const std::string& prefix, F&& f) {
  const std::string pre = prefix.empty() ? "" : prefix + ".";
  visit_params(p.attn_v, pre + "attn_v", f);
  if (p.attn_u) visit_params(*p.attn_u, pre + "attn_u", f);
  f(pre + "attn_w", p.attn_w);
  visit_params(p.classifier, pre + "classifier", f);
}

template <class S>
AbmilParams<S> init_abmil(const AbmilConfig& c, std::uint64_t seed) {
  c.validate();
  auto rng = make_rng(seed, {0xab});
  // Xavier-uniform weights, zero biases.
  auto xavier = [&](int in, int out) {
    const double a = std::sqrt(6.0 / (in + out));
    Matrix<S> m(in, out);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(uniform(rng, -a, a));
    return m;
  };
  AbmilParams<S> p;
  p.attn_v = {xavier(c.dim, c.hidden), Matrix<S>::Zero(1, c.hidden)};
  if (c.gated) p.attn_u = LinearParams<S>{xavier(c.dim, c.hidden), Matrix<S>::Zero(1, c.hidden)};
  p.attn_w = xavier(c.hidden, 1);
  p.classifier = {xavier(c.dim, c.logits()), Matrix<S>::Zero(1, c.logits())};
  return p;
}

template <class To, class From>
AbmilParams<To> cast_abmil(const AbmilParams<From>& p) {
  AbmilParams<To> out;
  if (p.attn_u) out.attn_u.emplace();
  std::vector<const Matrix<From>*> src;
  visit_params(p, "", [&](const std::string&, const Matrix<From>& m) { src.push_back(&m); });
  std::size_t i = 0;
  visit_params(out, "", [&](const std::string&, Matrix<To>& m) { m = src[i++]->template cast<To>(); });
  return out;
}

template <class S>
struct AbmilCache {
  Matrix<S> h;          // n x D
  Matrix<S> tanh_v;     // n x L
  Matrix<S> gate;       // n x L (gated only)
  Matrix<S> keep;       // n x L dropout multipliers (empty when off)
  Matrix<S> attended;   // n x L, input to attn_w
  RowVector<S> a;       // n
  RowVector<S> z;       // D
  RowVector<S> logits;  // C or 1
};

template <class S>
struct AbmilOutput {
  RowVector<S> attention;  // n, sums to 1
  RowVector<S> pooled;     // D
  RowVector<S> logits;
};

// Forward pass for one bag. A non-null rng enables training-mode dropout on
// the attention hidden layer.
template <class S>
AbmilOutput<S> abmil_forward(const AbmilParams<S>& p, const AbmilConfig& c, const Matrix<S>& h,
                             AbmilCache<S>* cache = nullptr, Rng* dropout_rng = nullptr) {
  CYTOFM_REQUIRE(h.rows() >= 1, "ABMIL bag is empty");
  CYTOFM_REQUIRE(h.cols() == c.dim, "bag feature dim " + std::to_string(h.cols()) + " != model dim " +
                                        std::to_string(c.dim));
  AbmilCache<S> local;
  AbmilCache<S>& k = cache ? *cache : local;
  k.h = h;
  k.tanh_v = linear_forward(h, p.attn_v).array().tanh().matrix();
  k.attended = k.tanh_v;
  if (c.gated) {
    CYTOFM_REQUIRE(p.attn_u.has_value(), "gated config but model has no gate weights");
    k.gate = (1.0 / (1.0 + (-linear_forward(h, *p.attn_u).array().template cast<double>()).exp()))
                 .template cast<S>()
                 .matrix();
    k.attended = k.attended.cwiseProduct(k.gate);
  }
  k.keep.resize(0, 0);
  if (dropout_rng && c.dropout > 0) {
    k.keep.resize(h.rows(), c.hidden);
    const S scale = static_cast<S>(1.0 / (1.0 - c.dropout));
    for (Eigen::Index i = 0; i < k.keep.size(); ++i)
      k.keep.data()[i] = bernoulli(*dropout_rng, c.dropout) ? S(0) : scale;
    k.attended = k.attended.cwiseProduct(k.keep);
  }
  const Matrix<S> scores = k.attended * p.attn_w;  // n x 1
  const S mx = scores.maxCoeff();
  k.a = (scores.array() - mx).exp().matrix().transpose();
  k.a /= k.a.sum();
  // Row-ordered accumulation.
  k.z = RowVector<S>::Zero(c.dim);
  for (Eigen::Index i = 0; i < h.rows(); ++i) k.z += k.a(i) * h.row(i);
  k.logits = k.z * p.classifier.w + p.classifier.b.row(0);
  return {k.a, k.z, k.logits};
}

// Class probabilities: [1-p, p] for binary, softmax otherwise.
template <class S>
RowVector<double> abmil_probabilities(const AbmilConfig& c, const RowVector<S>& logits) {
  RowVector<double> out(c.num_classes);
  if (c.binary()) {
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits(0))));
    out << 1.0 - p, p;
  } else {
    const RowVector<double> l = logits.template cast<double>();
    out = (l.array() - l.maxCoeff()).exp().matrix();
    out /= out.sum();
  }
  return out;
}

// Cross-entropy of one bag (binary: log-loss on the single logit).
template <class S>
double abmil_bag_loss(const AbmilConfig& c, const RowVector<S>& logits, int label, RowVector<S>* dlogits) {
  CYTOFM_REQUIRE(label >= 0 && label < c.num_classes, "bag label out of range");
  if (c.binary()) {
    const double l = static_cast<double>(logits(0));
    const double softplus = l > 0 ? l + std::log1p(std::exp(-l)) : std::log1p(std::exp(l));
    if (dlogits) {
      dlogits->resize(1);
      (*dlogits)(0) = static_cast<S>(1.0 / (1.0 + std::exp(-l)) - label);
    }
    return softplus - label * l;
  }
  const RowVector<double> p = abmil_probabilities(c, logits);
  if (dlogits) {
    *dlogits = p.template cast<S>();
    (*dlogits)(label) -= S(1);
  }
  return -std::log(std::max(p(label), 1e-300));
}

// Accumulates d(loss)/d(params) for one bag into grads.
template <class S>
void abmil_backward(const AbmilParams<S>& p, const AbmilConfig& c, const AbmilCache<S>& k,
                    const RowVector<S>& dlogits, AbmilParams<S>& grads) {
  grads.classifier.w.noalias() += k.z.transpose() * dlogits;
  grads.classifier.b.row(0) += dlogits;
  const RowVector<S> dz = dlogits * p.classifier.w.transpose();
  const Eigen::Index n = k.h.rows();
  Matrix<S> da(n, 1);
  da.noalias() = k.h * dz.transpose();
  const S dot = (k.a * da)(0, 0);
  Matrix<S> ds(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) ds(i, 0) = k.a(i) * (da(i, 0) - dot);
  grads.attn_w.noalias() += k.attended.transpose() * ds;
  Matrix<S> d_att = ds * p.attn_w.transpose();  // n x L
  if (k.keep.size() > 0) d_att = d_att.cwiseProduct(k.keep);
  Matrix<S> d_tanh = d_att;
  if (c.gated) {
    d_tanh = d_att.cwiseProduct(k.gate);
    const Matrix<S> d_gate_pre =
        d_att.cwiseProduct(k.tanh_v).cwiseProduct(k.gate).cwiseProduct((S(1) - k.gate.array()).matrix());
    linear_backward(k.h, *p.attn_u, d_gate_pre, *grads.attn_u);
  }
  const Matrix<S> d_v_pre = d_tanh.cwiseProduct((S(1) - k.tanh_v.array().square()).matrix());
  linear_backward(k.h, p.attn_v, d_v_pre, grads.attn_v);
}

template <class S>
RowVector<double> predict_bag(const AbmilParams<S>& p, const AbmilConfig& c, const FeatureBag& bag) {
  const auto out = abmil_forward<S>(p, c, bag.features.template cast<S>());
  return abmil_probabilities<S>(c, out.logits);
}

// Mean loss over bags and (optionally) its gradient, no dropout.
template <class S>
double abmil_dataset_loss(const AbmilParams<S>& p, const AbmilConfig& c, const std::vector<FeatureBag>& bags,
                          AbmilParams<S>* grads = nullptr) {
  CYTOFM_REQUIRE(!bags.empty(), "no bags");
  double total = 0;
  const S inv = static_cast<S>(1.0 / static_cast<double>(bags.size()));
  for (const auto& b : bags) {
    AbmilCache<S> cache;
    const auto out = abmil_forward<S>(p, c, b.features.template cast<S>(), &cache);
    RowVector<S> dl;
    total += abmil_bag_loss<S>(c, out.logits, b.label, grads ? &dl : nullptr);
    if (grads) abmil_backward<S>(p, c, cache, RowVector<S>(dl * inv), *grads);
  }
  return total / static_cast<double>(bags.size());
}

}  // namespace cytofm
