#pragma once

#include <stdexcept>
#include <vector>

#include "omnidet/autodiff.hpp"
#include "omnidet/core.hpp"
#include "omnidet/detector.hpp"

namespace omnidet::distill {

// Elementwise EMA: teacher' = lambda * teacher + (1 - lambda) * student.
inline void ema_update(Tensor& teacher, const Tensor& student, double lambda) {
  if (!teacher.same_shape(student))
    throw std::invalid_argument("ema_update: shape mismatch");
  for (std::size_t i = 0; i < teacher.size(); ++i)
    teacher[i] = lambda * teacher[i] + (1.0 - lambda) * student[i];
}

// Scalar soft focal term: (qt*alpha + eps) * |qt - q|^gamma * BCE(q, qt).
inline double soft_focal_term(double q, double qt, double alpha, double eps,
                              double gamma) {
  q = clamp_prob(q);
  qt = clamp_prob(qt);
  return (qt * alpha + eps) * std::pow(std::fabs(qt - q), gamma) * bce_scalar(q, qt);
}

namespace detail {

inline double soft_focal_grad_q(double q, double qt, double alpha, double eps,
                                double gamma) {
  q = clamp_prob(q);
  qt = clamp_prob(qt);
  double d = qt - q;
  double ad = std::fabs(d);
  if (ad == 0) return 0.0;
  double w = (qt * alpha + eps);
  double bce = bce_scalar(q, qt);
  double dpow = -gamma * std::pow(ad, gamma - 1.0) * (d > 0 ? 1.0 : -1.0);
  double dbce = -(qt / q) + (1.0 - qt) / (1.0 - q);
  return w * (dpow * bce + std::pow(ad, gamma) * dbce);
}

}  // namespace detail

// Distills teacher classification maps into the student over every anchor,
// class, and level; sum divided by the total anchor count. Teacher maps are
// plain tensors (no-gradient evaluation).
inline Var soft_focal_loss(const std::vector<Var>& student_cls,
                           const std::vector<Tensor>& teacher_cls, double alpha,
                           double eps, double gamma, int per_cell) {
  if (student_cls.size() != teacher_cls.size())
    throw std::invalid_argument("soft_focal_loss: level count mismatch");
  long long anchor_count = 0;
  Var total = constant(Tensor::scalar(0.0));
  for (std::size_t m = 0; m < student_cls.size(); ++m) {
    const Var& q = student_cls[m];
    const Tensor qt = teacher_cls[m];
    if (!q->val.same_shape(qt))
      throw std::invalid_argument("soft_focal_loss: shape mismatch");
    anchor_count += static_cast<long long>(q->val.shape[1]) * q->val.shape[2] * per_cell;
    double sum = 0;
    for (std::size_t i = 0; i < q->val.size(); ++i)
      sum += soft_focal_term(q->val[i], qt[i], alpha, eps, gamma);
    Var part = make_op(Tensor::scalar(sum), {q}, [q, qt, alpha, eps, gamma](Node& n) {
      for (std::size_t i = 0; i < q->val.size(); ++i)
        q->grad[i] += n.grad[0] * detail::soft_focal_grad_q(q->val[i], qt[i], alpha,
                                                            eps, gamma);
    });
    total = add(total, part);
  }
  return scale(total, 1.0 / std::max<long long>(1, anchor_count));
}

// Mean-teacher copy of the detector. Parameters never require gradient, so
// teacher forwards build no tape.
class Teacher {
 public:
  explicit Teacher(const Config& cfg) : model_(cfg, dummy_rng_()) {
    for (Var& p : model_.parameters()) p->requires_grad = false;
  }

  void initialize_from(const Detector& student) {
    model_.copy_parameters_from(student);
    initialized_ = true;
  }
  bool initialized() const { return initialized_; }

  void ema_update_from(const Detector& student, double lambda) {
    if (!initialized_) throw std::logic_error("teacher not initialized");
    const auto& sp = student.parameters();
    auto& tp = model_.parameters();
    for (std::size_t i = 0; i < tp.size(); ++i)
      ema_update(tp[i]->val, sp[i]->val, lambda);
  }

  PyramidOutputs predict(const Tensor& image) const {
    if (!initialized_) throw std::logic_error("teacher not initialized");
    return model_.forward(image);
  }

  std::vector<Tensor> predict_cls(const Tensor& image) const {
    PyramidOutputs out = predict(image);
    std::vector<Tensor> maps;
    for (const Var& v : out.cls_probs) maps.push_back(v->val);
    return maps;
  }

  Detector& model() { return model_; }
  const Detector& model() const { return model_; }

 private:
  static std::mt19937_64& dummy_rng_() {
    static std::mt19937_64 rng(0);
    return rng;
  }
  Detector model_;
  bool initialized_ = false;
};

}  // namespace omnidet::distill
