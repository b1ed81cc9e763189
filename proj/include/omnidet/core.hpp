#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "omnidet/tensor.hpp"

namespace omnidet {

constexpr double kProbEps = 1e-7;  // probability clamp before any log

inline double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// -sum_c [y log p + (1-y) log(1-p)]; accepts soft targets.
inline double binary_cross_entropy(const std::vector<double>& p,
                                   const std::vector<double>& y) {
  if (p.size() != y.size())
    throw std::invalid_argument("binary_cross_entropy: dimension mismatch");
  double loss = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double pc = clamp_prob(p[i]);
    loss -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
  }
  return loss;
}

inline double bce_scalar(double p, double y) {
  double pc = clamp_prob(p);
  return -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
}

enum class Granularity : std::uint8_t { FULL, WEAK, UNLABELED };

inline const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::FULL: return "FULL";
    case Granularity::WEAK: return "WEAK";
    default: return "UNLABELED";
  }
}

inline Granularity granularity_from_string(const std::string& s) {
  if (s == "FULL") return Granularity::FULL;
  if (s == "WEAK") return Granularity::WEAK;
  if (s == "UNLABELED") return Granularity::UNLABELED;
  throw std::invalid_argument("unknown granularity: " + s);
}

struct GroundTruthBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  int class_id = 0;

  double area() const { return (x_max - x_min) * (y_max - y_min); }
  bool well_ordered() const { return x_min < x_max && y_min < y_max; }
};

struct Detection {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  int class_id = 0;
  double score = 0;
};

// One image plus whatever labels its granularity permits. Hidden ground truth
// of WEAK/UNLABELED samples lives in the evaluation-only sidecar, never here.
struct Sample {
  int id = 0;
  Tensor image;  // (H,W), values in [0,1]
  // Jitter-free copy of `image`, filled in by augmentation when photometric
  // noise is on. The mean teacher scores this view, so student-teacher
  // disagreement measures noise sensitivity rather than vanishing as the
  // teacher catches up. Empty means "use `image`".
  Tensor teacher_view;
  Granularity granularity = Granularity::FULL;
  std::vector<GroundTruthBox> boxes;   // present iff FULL
  std::vector<int> image_labels;       // 0/1 per class, present iff FULL or WEAK

  bool has_labels() const { return granularity != Granularity::UNLABELED; }
};

inline std::vector<int> labels_from_boxes(const std::vector<GroundTruthBox>& boxes,
                                          int num_classes) {
  std::vector<int> y(num_classes, 0);
  for (const auto& b : boxes) y.at(b.class_id) = 1;
  return y;
}

struct Config {
  int num_classes = 3;
  int image_size = 128;

  // Loss hyperparameters.
  double beta = 0.7;      // prototype EMA coefficient (after the first step)
  double delta = 1.0;     // inter-class margin
  double lambda = 0.99;   // teacher EMA decay
  double alpha = 0.9;     // focal balance
  double epsilon = 0.05;  // soft-focal floor
  double gamma = 2.0;     // focal exponent

  // Loss weights (all 1 unless ablating).
  double w_focal = 1.0, w_reg = 1.0, w_bce = 1.0, w_intra = 1.0, w_inter = 1.0,
         w_sfl = 1.0;

  // Optimizer / schedule.
  double lr = 1e-5;
  double lr_floor = 1e-8;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  int patience = 3;
  double stagnation_eps = 1e-4;

  // Augmentation: std of the per-pixel jitter applied to the student's view.
  // The teacher always sees the jitter-free image, so a nonzero value turns
  // the distillation loss into a noise-consistency regularizer.
  double aug_noise = 0.0;

  // Batch quotas per granularity.
  int n_full = 2, n_weak = 2, n_unlabeled = 2;

  int steps = 5000;
  int eval_every = 250;

  // Detector shape.
  int pyramid_levels = 3;
  int feature_dim = 32;
  int anchors_per_cell = 3;
  double anchor_base = 4.0;  // anchor side as a multiple of the level stride

  std::uint64_t seed = 0;

  int batch_size() const { return n_full + n_weak + n_unlabeled; }
};

}  // namespace omnidet
