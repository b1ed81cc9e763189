#pragma once

#include <stdexcept>
#include <vector>

#include "omnidet/autodiff.hpp"
#include "omnidet/core.hpp"
#include "omnidet/detector.hpp"

namespace omnidet::daa {

// Scalar BCE node with analytic gradient; p is a scalar Var, y a soft target.
inline Var bce_term(const Var& p, double y) {
  if (p->val.size() != 1) throw std::invalid_argument("bce_term: p not scalar");
  double pc = clamp_prob(p->val[0]);
  double loss = -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
  return make_op(Tensor::scalar(loss), {p}, [p, y, pc](Node& n) {
    p->grad[0] += n.grad[0] * (-(y / pc) + (1.0 - y) / (1.0 - pc));
  });
}

// Elementwise max over the anchor channels: per level (N*A,H,W) -> (N,H,W).
inline std::vector<Var> reduce_anchor_dimension(const std::vector<Var>& cls_probs,
                                                int per_cell) {
  std::vector<Var> out;
  out.reserve(cls_probs.size());
  for (const Var& p : cls_probs) out.push_back(max_over_groups(p, per_cell));
  return out;
}

// Picks, per class, the whole map of the level whose peak activation is
// largest. Levels are ordered finest-first; ties go to the finest.
inline Var select_pyramid_level(const std::vector<Var>& level_maps, int class_id) {
  if (level_maps.empty()) throw std::invalid_argument("select_pyramid_level: no levels");
  int best = 0;
  double best_max = -1e300;
  for (std::size_t m = 0; m < level_maps.size(); ++m) {
    int h = level_maps[m]->val.shape[1], w = level_maps[m]->val.shape[2];
    double mx = -1e300;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) mx = std::max(mx, level_maps[m]->val.at3(class_id, y, x));
    if (mx > best_max) {
      best_max = mx;
      best = static_cast<int>(m);
    }
  }
  return select_channel(level_maps[best], class_id);
}

// Bilinear resize to the global map's shape, then divide by the sum so the
// result is a distribution over pixels. Gradient flows through the division.
inline Var normalize_attention(const Var& attn, int out_h, int out_w) {
  Var resized = bilinear_resize(attn, out_h, out_w);
  double total = resized->val.sum();
  if (total <= 0) {
    // Degenerate guard; unreachable when attn comes from sigmoid outputs.
    return constant(Tensor::full({out_h, out_w}, 1.0 / (out_h * out_w)));
  }
  return div_scalarvar(resized, sum_all(resized));
}

// p_c = sigmoid(sum_i X_c * R_c): attention-weighted pooling of the global map.
inline Var daa_pool(const Var& global_c, const Var& local_c) {
  if (!global_c->val.same_shape(local_c->val))
    throw std::invalid_argument("daa_pool: shape mismatch");
  return sigmoid(sum_all(mul(global_c, local_c)));
}

// Plain global-average pooling of the global map, bypassing the local branch.
// Exists as the control for the gradient-flow property.
inline Var gap_pool(const Var& global_c) {
  return sigmoid(scale(sum_all(global_c), 1.0 / global_c->val.size()));
}

struct AttentionPair {
  Var global;                    // (N, H0, W0), output of the 1x1 conv on M
  std::vector<Var> local;        // per class (H0, W0), each sums to 1
  std::vector<Var> predictions;  // per class scalar p_c in (0,1)
};

// Full DAA path for one sample: global CAM head plus normalized local
// attention from the dense classification maps.
inline AttentionPair compute_attention(const PyramidOutputs& outputs,
                                       const Var& global_weight, int num_classes,
                                       int per_cell, bool use_gap = false) {
  AttentionPair pair;
  pair.global = conv1x1_nobias(outputs.backbone_feature, global_weight);
  int h0 = pair.global->val.shape[1], w0 = pair.global->val.shape[2];
  std::vector<Var> level_maps = reduce_anchor_dimension(outputs.cls_probs, per_cell);
  for (int c = 0; c < num_classes; ++c) {
    Var local = normalize_attention(select_pyramid_level(level_maps, c), h0, w0);
    Var global_c = select_channel(pair.global, c);
    pair.local.push_back(local);
    pair.predictions.push_back(use_gap ? gap_pool(global_c) : daa_pool(global_c, local));
  }
  return pair;
}

// BCE between the DAA predictions and the image labels of one sample.
// Callers average across the qualifying samples of a batch.
inline Var weak_loss(const std::vector<Var>& predictions, const Sample& sample) {
  if (!sample.has_labels())
    throw std::invalid_argument("weak_loss: sample has no image labels");
  if (predictions.size() != sample.image_labels.size())
    throw std::invalid_argument("weak_loss: class count mismatch");
  Var loss = constant(Tensor::scalar(0.0));
  for (std::size_t c = 0; c < predictions.size(); ++c)
    loss = add(loss, bce_term(predictions[c], sample.image_labels[c]));
  return loss;
}

// Exports one class attention map as an 8-bit grayscale array (peak = 255).
inline std::vector<std::uint8_t> attention_to_gray(const Tensor& map) {
  double mx = map.max();
  std::vector<std::uint8_t> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i)
    out[i] = static_cast<std::uint8_t>(mx > 0 ? 255.0 * map[i] / mx : 0.0);
  return out;
}

}  // namespace omnidet::daa
