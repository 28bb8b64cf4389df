#pragma once

// Linear probe: L2-regularised logistic regression on standardised frozen
// features, fitted by Newton's method.

#include "cytofm/core/error.hpp"
#include "cytofm/core/matrix.hpp"

#include <Eigen/Cholesky>

#include <vector>

namespace cytofm {

struct LinearProbe {
  RowVector<double> mean, scale;
  Eigen::VectorXd weights;  // D
  double bias = 0;

  std::vector<double> scores(const Matrix<double>& x) const {
    CYTOFM_REQUIRE(x.cols() == mean.size(), "probe feature dim mismatch");
    const Matrix<double> z = ((x.rowwise() - mean).array().rowwise() / scale.array()).matrix();
    const Eigen::VectorXd s = (z * weights).array() + bias;
    return {s.data(), s.data() + s.size()};
  }
};

inline LinearProbe fit_linear_probe(const Matrix<double>& x, const std::vector<int>& y, double l2 = 1e-2,
                                    int iterations = 50) {
  CYTOFM_REQUIRE(x.rows() == static_cast<Eigen::Index>(y.size()) && x.rows() >= 2, "probe needs >= 2 rows");
  bool has0 = false, has1 = false;
  for (int v : y) {
    CYTOFM_REQUIRE(v == 0 || v == 1, "probe labels must be 0 or 1");
    (v ? has1 : has0) = true;
  }
  CYTOFM_REQUIRE(has0 && has1, "probe needs both classes");
  const auto n = x.rows(), d = x.cols();
  LinearProbe p;
  p.mean = x.colwise().mean();
  const Matrix<double> centered = x.rowwise() - p.mean;
  p.scale = (centered.array().square().colwise().sum() / static_cast<double>(n)).sqrt().matrix();
  for (Eigen::Index k = 0; k < d; ++k)
    if (p.scale(k) < 1e-12) p.scale(k) = 1.0;
  Matrix<double> z(n, d + 1);
  z.leftCols(d) = (centered.array().rowwise() / p.scale.array()).matrix();
  z.col(d).setOnes();
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
  Eigen::VectorXd target(n);
  for (Eigen::Index i = 0; i < n; ++i) target(i) = y[static_cast<std::size_t>(i)];
  // Mean log-loss + l2/2 |w|^2 (bias unpenalised).
  for (int it = 0; it < iterations; ++it) {
    Eigen::VectorXd pr(n);
    for (Eigen::Index i = 0; i < n; ++i) pr(i) = 1.0 / (1.0 + std::exp(-(z.row(i).dot(theta))));
    Eigen::VectorXd grad = z.transpose() * (pr - target) / static_cast<double>(n);
    grad.head(d) += l2 * theta.head(d);
    Matrix<double> hess = z.transpose() * (pr.array() * (1 - pr.array())).matrix().asDiagonal() * z;
    hess /= static_cast<double>(n);
    hess.diagonal().head(d).array() += l2;
    hess.diagonal().array() += 1e-10;
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    theta -= step;
    if (step.norm() < 1e-10) break;
  }
  p.weights = theta.head(d);
  p.bias = theta(d);
  return p;
}

}  // namespace cytofm
