#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>

namespace cytofm {

// Row-major dense matrix; every parameter and activation in the library is one
// of these (biases and vectors are stored as 1 x n rows).
template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;

template <class S>
bool all_finite(const Matrix<S>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (!std::isfinite(static_cast<double>(m.data()[i]))) return false;
  return true;
}

// Row-wise softmax with max subtraction.
template <class S>
Matrix<S> softmax_rows(const Matrix<S>& x) {
  Matrix<S> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mx = x.row(r).maxCoeff();
    S sum = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const S e = std::exp(x(r, c) - mx);
      out(r, c) = e;
      sum += e;
    }
    out.row(r) /= sum;
  }
  return out;
}

template <class S>
Matrix<S> log_softmax_rows(const Matrix<S>& x) {
  Matrix<S> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mx = x.row(r).maxCoeff();
    S sum = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) sum += std::exp(x(r, c) - mx);
    const S lse = mx + std::log(sum);
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

}  // namespace cytofm
