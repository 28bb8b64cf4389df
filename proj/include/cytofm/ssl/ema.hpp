#pragma once

#include "cytofm/backbone/params.hpp"

namespace cytofm {

// teacher <- m * teacher + (1 - m) * student, parameter by parameter.
template <class P>
void ema_update(P& teacher, const P& student, double m) {
  CYTOFM_REQUIRE(m >= 0.0 && m <= 1.0, "EMA momentum must lie in [0,1]");
  std::vector<const void*> src;
  std::vector<Eigen::Index> sizes;
  visit_params(student, "", [&](const std::string&, const auto& s) {
    src.push_back(&s);
    sizes.push_back(s.size());
  });
  std::size_t i = 0;
  visit_params(teacher, "", [&](const std::string& name, auto& t) {
    using M = std::remove_reference_t<decltype(t)>;
    using S = typename M::Scalar;
    CYTOFM_REQUIRE(i < src.size() && sizes[i] == t.size(), "teacher/student shape mismatch at " + name);
    const auto& s = *static_cast<const M*>(src[i++]);
    CYTOFM_REQUIRE(s.rows() == t.rows() && s.cols() == t.cols(), "teacher/student shape mismatch at " + name);
    if (m == 1.0) return;
    if (m == 0.0) {
      t = s;
      return;
    }
    t = static_cast<S>(m) * t + static_cast<S>(1.0 - m) * s;
  });
  CYTOFM_REQUIRE(i == src.size(), "teacher/student parameter counts differ");
}

// center <- m_c * center + (1 - m_c) * mean over rows of the teacher logits.
template <class S>
RowVector<S> update_center(const RowVector<S>& center, const Matrix<S>& teacher_batch_logits, double m_c) {
  CYTOFM_REQUIRE(m_c >= 0.0 && m_c <= 1.0, "center momentum must lie in [0,1]");
  CYTOFM_REQUIRE(teacher_batch_logits.rows() > 0, "cannot update the center from an empty batch");
  CYTOFM_REQUIRE(teacher_batch_logits.cols() == center.size(), "center dimension mismatch");
  const RowVector<S> mean = teacher_batch_logits.colwise().mean();
  if (m_c == 1.0) return center;
  if (m_c == 0.0) return mean;
  return static_cast<S>(m_c) * center + static_cast<S>(1.0 - m_c) * mean;
}

}  // namespace cytofm
