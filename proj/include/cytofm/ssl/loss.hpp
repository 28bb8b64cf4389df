#pragma once

#include "cytofm/core/error.hpp"
#include "cytofm/core/matrix.hpp"

#include <cmath>

namespace cytofm {

// Teacher targets: softmax((teacher - center) / tau_t), one row per token.
template <class S>
Matrix<S> teacher_distribution(const Matrix<S>& teacher_logits, const RowVector<S>& center, S tau_t) {
  CYTOFM_REQUIRE(tau_t > 0, "teacher temperature must be positive");
  CYTOFM_REQUIRE(center.size() == teacher_logits.cols(), "center dimension mismatch");
  Matrix<S> shifted = (teacher_logits.rowwise() - center) / tau_t;
  return softmax_rows(shifted);
}

// Row-wise cross-entropy H(p_t, softmax(student / tau_s)). When grad is given
// it receives d(sum of row losses * row_weight)/d(student logits); the
// teacher side is treated as a constant.
template <class S>
Eigen::Matrix<S, Eigen::Dynamic, 1> cross_entropy_rows(const Matrix<S>& teacher_probs, const Matrix<S>& student_logits,
                                                       S tau_s, Matrix<S>* grad = nullptr, S row_weight = S(1)) {
  CYTOFM_REQUIRE(tau_s > 0, "student temperature must be positive");
  CYTOFM_REQUIRE(teacher_probs.rows() == student_logits.rows() && teacher_probs.cols() == student_logits.cols(),
                 "student/teacher logit shapes differ");
  const Matrix<S> scaled = student_logits / tau_s;
  const Matrix<S> logp = log_softmax_rows(scaled);
  Eigen::Matrix<S, Eigen::Dynamic, 1> losses = -(teacher_probs.cwiseProduct(logp)).rowwise().sum();
  if (grad) {
    // d/ds of -sum p_t log softmax(s/tau) = (softmax(s/tau) - p_t) / tau since sum p_t = 1.
    *grad = (logp.array().exp() - teacher_probs.array()) * (row_weight / tau_s);
  }
  return losses;
}

// Single-distribution form of the self-distillation loss.
template <class S>
S distill_loss(const RowVector<S>& student_logits, const RowVector<S>& teacher_logits, S tau_s, S tau_t,
               const RowVector<S>& center) {
  CYTOFM_REQUIRE(student_logits.size() == teacher_logits.size(), "logit dimensions differ");
  CYTOFM_REQUIRE(all_finite(Matrix<S>(student_logits)) && all_finite(Matrix<S>(teacher_logits)),
                 "non-finite logits");
  const Matrix<S> pt = teacher_distribution(Matrix<S>(teacher_logits), center, tau_t);
  return cross_entropy_rows(pt, Matrix<S>(student_logits), tau_s)(0);
}

template <class S>
S entropy(const RowVector<S>& p) {
  S h = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0) h -= p(i) * std::log(p(i));
  return h;
}

}  // namespace cytofm
