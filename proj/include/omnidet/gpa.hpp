#pragma once

#include <stdexcept>
#include <vector>

#include "omnidet/autodiff.hpp"
#include "omnidet/core.hpp"

namespace omnidet::gpa {

// Per-class running feature centroids, updated only through the EMA rule
// below. Never receives gradient.
struct PrototypeBank {
  Tensor prototypes;               // (N, D)
  std::vector<char> initialized;   // classes updated at least once
  long long step = 0;
  double beta = 0.7;

  PrototypeBank() = default;
  PrototypeBank(int num_classes, int dim)
      : prototypes({num_classes, dim}), initialized(num_classes, 0) {}

  int num_classes() const { return prototypes.shape[0]; }
  int dim() const { return prototypes.shape[1]; }
};

// One detached category-specific feature with its global-head confidence.
struct CategoryFeature {
  int class_id = 0;
  std::vector<double> feature;
  double confidence = 0;
};

// F_c = sum_i R_c[i] * M[i]: a convex combination of the spatial feature
// vectors when R_c sums to 1.
inline Var aggregate_features(const Var& feature_map, const Var& local_attention) {
  return attention_pool(feature_map, local_attention);
}

// Confidence-weighted EMA: per class, m_c = sum_k p_k F_k / sum_k p_k over the
// batch samples containing the class; beta is 0 on the very first step.
inline void update_prototypes(PrototypeBank& bank,
                              const std::vector<CategoryFeature>& batch) {
  double beta = bank.step == 0 ? 0.0 : bank.beta;
  int d = bank.dim();
  for (int c = 0; c < bank.num_classes(); ++c) {
    std::vector<double> mean(d, 0.0);
    double weight = 0;
    for (const auto& f : batch) {
      if (f.class_id != c) continue;
      if (static_cast<int>(f.feature.size()) != d)
        throw std::invalid_argument("update_prototypes: feature dim mismatch");
      for (int i = 0; i < d; ++i) mean[i] += f.confidence * f.feature[i];
      weight += f.confidence;
    }
    if (weight <= 0) continue;  // class absent (or zero confidence): keep prototype
    for (int i = 0; i < d; ++i) {
      double m = mean[i] / weight;
      bank.prototypes.at2(c, i) = beta * bank.prototypes.at2(c, i) + (1 - beta) * m;
    }
    bank.initialized[c] = 1;
  }
  ++bank.step;
}

namespace detail {

// ||F - P||^2 with gradient only into F; the prototype is a constant.
inline Var sq_dist_to_const(const Var& feature, const Tensor& bank, int class_id) {
  int d = feature->val.shape[0];
  double s = 0;
  for (int i = 0; i < d; ++i) {
    double diff = feature->val[i] - bank.at2(class_id, i);
    s += diff * diff;
  }
  std::vector<double> proto(d);
  for (int i = 0; i < d; ++i) proto[i] = bank.at2(class_id, i);
  return make_op(Tensor::scalar(s), {feature}, [feature, proto, d](Node& n) {
    for (int i = 0; i < d; ++i)
      feature->grad[i] += n.grad[0] * 2.0 * (feature->val[i] - proto[i]);
  });
}

}  // namespace detail

// (1/N) sum over present classes of ||F_c - P_c||^2.
inline Var intra_loss(const std::vector<std::pair<int, Var>>& features,
                      const PrototypeBank& bank) {
  Var loss = constant(Tensor::scalar(0.0));
  for (const auto& [c, f] : features)
    loss = add(loss, detail::sq_dist_to_const(f, bank.prototypes, c));
  return scale(loss, 1.0 / bank.num_classes());
}

// (1/(N(N-1))) sum over prototype classes c and present classes j != c of
// max(0, delta - ||F_j - P_c||^2). Only initialized prototypes participate.
inline Var inter_loss(const std::vector<std::pair<int, Var>>& features,
                      const PrototypeBank& bank, double delta) {
  if (delta <= 0) throw std::invalid_argument("inter_loss: delta must be positive");
  int n = bank.num_classes();
  if (n < 2) return constant(Tensor::scalar(0.0));
  Var loss = constant(Tensor::scalar(0.0));
  for (int c = 0; c < n; ++c) {
    if (!bank.initialized[c]) continue;
    for (const auto& [j, f] : features) {
      if (j == c) continue;
      Var hinge = relu(sub(constant(Tensor::scalar(delta)),
                           detail::sq_dist_to_const(f, bank.prototypes, c)));
      loss = add(loss, hinge);
    }
  }
  return scale(loss, 1.0 / (static_cast<double>(n) * (n - 1)));
}

}  // namespace omnidet::gpa
