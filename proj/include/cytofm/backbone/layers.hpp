#pragma once

// Forward/backward kernels for the transformer building blocks. Every
// *_backward accumulates parameter gradients into the supplied gradient
// struct and returns the gradient with respect to the layer input.

#include "cytofm/core/matrix.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace cytofm {

template <class S>
struct LinearParams {
  Matrix<S> w;  // in x out
  Matrix<S> b;  // 1 x out
};

template <class S>
struct LayerNormParams {
  Matrix<S> g;  // 1 x dim
  Matrix<S> b;  // 1 x dim
};

inline constexpr double kLayerNormEps = 1e-6;

template <class S>
Matrix<S> linear_forward(const Matrix<S>& x, const LinearParams<S>& p) {
  Matrix<S> y(x.rows(), p.w.cols());
  y.noalias() = x * p.w;
  y.rowwise() += p.b.row(0);
  return y;
}

template <class S>
Matrix<S> linear_backward(const Matrix<S>& x, const LinearParams<S>& p, const Matrix<S>& dy,
                          LinearParams<S>& grad) {
  grad.w.noalias() += x.transpose() * dy;
  grad.b.row(0) += dy.colwise().sum();
  Matrix<S> dx(dy.rows(), p.w.rows());
  dx.noalias() = dy * p.w.transpose();
  return dx;
}

template <class S>
struct LayerNormCache {
  Matrix<S> xhat;
  Eigen::Matrix<S, Eigen::Dynamic, 1> rstd;
};

template <class S>
Matrix<S> layernorm_forward(const Matrix<S>& x, const LayerNormParams<S>& p, LayerNormCache<S>& cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  cache.xhat.resize(n, d);
  cache.rstd.resize(n);
  Matrix<S> y(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    const S rstd = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = (x.row(r).array() - mu) * rstd;
    y.row(r) = cache.xhat.row(r).cwiseProduct(p.g.row(0)) + p.b.row(0);
  }
  return y;
}

template <class S>
Matrix<S> layernorm_backward(const LayerNormCache<S>& cache, const LayerNormParams<S>& p,
                             const Matrix<S>& dy, LayerNormParams<S>& grad) {
  const auto n = dy.rows();
  const auto d = dy.cols();
  grad.g.row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
  grad.b.row(0) += dy.colwise().sum();
  Matrix<S> dx(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const RowVector<S> dxhat = dy.row(r).cwiseProduct(p.g.row(0));
    const S mean_dxhat = dxhat.mean();
    const S mean_dxhat_xhat = dxhat.cwiseProduct(cache.xhat.row(r)).mean();
    dx.row(r) = cache.rstd(r) *
                (dxhat.array() - mean_dxhat - cache.xhat.row(r).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

// Exact (erf) GELU.
template <class S>
Matrix<S> gelu(const Matrix<S>& x) {
  const S inv_sqrt2 = static_cast<S>(1.0 / std::numbers::sqrt2);
  return x.unaryExpr([inv_sqrt2](S v) { return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2)); });
}

template <class S>
Matrix<S> gelu_backward(const Matrix<S>& pre, const Matrix<S>& dy) {
  const S inv_sqrt2 = static_cast<S>(1.0 / std::numbers::sqrt2);
  const S inv_sqrt_2pi = static_cast<S>(1.0 / std::sqrt(2.0 * std::numbers::pi));
  Matrix<S> dx(pre.rows(), pre.cols());
  for (Eigen::Index i = 0; i < pre.size(); ++i) {
    const S v = pre.data()[i];
    const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
    const S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
    dx.data()[i] = dy.data()[i] * (cdf + v * pdf);
  }
  return dx;
}

// Multi-head self-attention: qkv projection, per-head softmax(QK^T/sqrt(dh))V,
// output projection.
template <class S>
struct AttentionCache {
  Matrix<S> input;              // T x D
  Matrix<S> qkv;                // T x 3D
  std::vector<Matrix<S>> probs; // heads x (T x T)
  Matrix<S> context;            // T x D, concatenated head outputs
};

template <class S>
Matrix<S> attention_forward(const Matrix<S>& x, const LinearParams<S>& qkv_p, const LinearParams<S>& proj_p,
                            int heads, AttentionCache<S>& cache) {
  const auto t = x.rows();
  const auto d = x.cols();
  const auto dh = d / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  cache.input = x;
  cache.qkv = linear_forward(x, qkv_p);
  cache.probs.assign(static_cast<std::size_t>(heads), Matrix<S>());
  cache.context.resize(t, d);
  for (int h = 0; h < heads; ++h) {
    const Matrix<S> q = cache.qkv.middleCols(h * dh, dh);
    const Matrix<S> k = cache.qkv.middleCols(d + h * dh, dh);
    const Matrix<S> v = cache.qkv.middleCols(2 * d + h * dh, dh);
    Matrix<S> scores(t, t);
    scores.noalias() = (q * k.transpose()) * scale;
    cache.probs[h] = softmax_rows(scores);
    cache.context.middleCols(h * dh, dh).noalias() = cache.probs[h] * v;
  }
  return linear_forward(cache.context, proj_p);
}

template <class S>
Matrix<S> attention_backward(const AttentionCache<S>& cache, const LinearParams<S>& qkv_p,
                             const LinearParams<S>& proj_p, int heads, const Matrix<S>& dy,
                             LinearParams<S>& qkv_g, LinearParams<S>& proj_g) {
  const auto t = cache.input.rows();
  const auto d = cache.input.cols();
  const auto dh = d / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  const Matrix<S> dcontext = linear_backward(cache.context, proj_p, dy, proj_g);
  Matrix<S> dqkv(t, 3 * d);
  for (int h = 0; h < heads; ++h) {
    const Matrix<S> q = cache.qkv.middleCols(h * dh, dh);
    const Matrix<S> k = cache.qkv.middleCols(d + h * dh, dh);
    const Matrix<S> v = cache.qkv.middleCols(2 * d + h * dh, dh);
    const Matrix<S>& a = cache.probs[h];
    const Matrix<S> dout = dcontext.middleCols(h * dh, dh);
    Matrix<S> da(t, t);
    da.noalias() = dout * v.transpose();
    dqkv.middleCols(2 * d + h * dh, dh).noalias() = a.transpose() * dout;
    Matrix<S> ds = a.cwiseProduct(da);
    const auto row_dot = ds.rowwise().sum().eval();
    ds.noalias() -= a.cwiseProduct(row_dot.replicate(1, t));
    ds *= scale;
    dqkv.middleCols(h * dh, dh).noalias() = ds * k;
    dqkv.middleCols(d + h * dh, dh).noalias() = ds.transpose() * q;
  }
  return linear_backward(cache.input, qkv_p, dqkv, qkv_g);
}

}  // namespace cytofm
