#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "omnidet/autodiff.hpp"
#include "omnidet/core.hpp"

namespace omnidet {

// Dense per-level outputs of one forward pass. cls channel layout is
// class-major (channel = c * A + a), reg is anchor-major (channel = a * 4 + j).
struct PyramidOutputs {
  std::vector<Var> cls_probs;  // per level (N*A, H_m, W_m), sigmoid applied
  std::vector<Var> reg_maps;   // per level (4*A, H_m, W_m)
  Var backbone_feature;        // (D, H_0, W_0), input of the global 1x1 conv
};

struct Anchor {
  double cx = 0, cy = 0, w = 0, h = 0;
  double x_min() const { return cx - w / 2; }
  double y_min() const { return cy - h / 2; }
  double x_max() const { return cx + w / 2; }
  double y_max() const { return cy + h / 2; }
};

struct AnchorSet {
  std::vector<std::vector<Anchor>> levels;  // per cell row-major, then anchor
  std::vector<int> strides;
  int anchors_per_cell = 0;
};

// Anchor classification target: >=0 class id, kBackground, or kIgnore.
constexpr int kBackground = -1;
constexpr int kIgnore = -2;

struct AnchorTargets {
  std::vector<std::vector<int>> cls;            // per level, per anchor
  std::vector<std::vector<double>> reg;         // per level, 4 per anchor
  int positive_count = 0;
};

namespace detail {

inline double iou_xyxy(double ax0, double ay0, double ax1, double ay1, double bx0,
                       double by0, double bx1, double by1) {
  double ix0 = std::max(ax0, bx0), iy0 = std::max(ay0, by0);
  double ix1 = std::min(ax1, bx1), iy1 = std::min(ay1, by1);
  double iw = std::max(0.0, ix1 - ix0), ih = std::max(0.0, iy1 - iy0);
  double inter = iw * ih;
  double uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace detail

// 3 scales x 1 ratio per cell, base size `base_mult`x stride, strides 8/16/32.
// The default 4x suits the full 128 px input; smaller inputs want 2x so the
// finest anchors still bracket the smallest objects.
inline AnchorSet build_anchors(int image_h, int image_w, int levels, int per_cell,
                               double base_mult = 4.0) {
  AnchorSet set;
  set.anchors_per_cell = per_cell;
  int stride = 8;
  for (int m = 0; m < levels; ++m, stride *= 2) {
    int h = image_h / stride, w = image_w / stride;
    std::vector<Anchor> anchors;
    anchors.reserve(static_cast<std::size_t>(h) * w * per_cell);
    double base = base_mult * stride;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int a = 0; a < per_cell; ++a) {
          double s = base * std::pow(2.0, a / static_cast<double>(per_cell));
          anchors.push_back({(x + 0.5) * stride, (y + 0.5) * stride, s, s});
        }
    set.levels.push_back(std::move(anchors));
    set.strides.push_back(stride);
  }
  return set;
}

// Standard max-IoU assignment: >=0.5 positive, <0.4 background, else ignore;
// every ground-truth box is force-matched to its best anchor.
inline AnchorTargets assign_targets(const std::vector<GroundTruthBox>& boxes,
                                    const AnchorSet& anchors) {
  AnchorTargets t;
  t.cls.resize(anchors.levels.size());
  t.reg.resize(anchors.levels.size());
  std::vector<std::pair<int, int>> best_anchor(boxes.size(), {-1, -1});  // level, idx
  std::vector<double> best_iou(boxes.size(), -1.0);

  for (std::size_t m = 0; m < anchors.levels.size(); ++m) {
    const auto& lv = anchors.levels[m];
    t.cls[m].assign(lv.size(), kBackground);
    t.reg[m].assign(lv.size() * 4, 0.0);
    for (std::size_t i = 0; i < lv.size(); ++i) {
      double max_iou = 0.0;
      int max_gt = -1;
      for (std::size_t g = 0; g < boxes.size(); ++g) {
        const auto& b = boxes[g];
        double iou = detail::iou_xyxy(lv[i].x_min(), lv[i].y_min(), lv[i].x_max(),
                                      lv[i].y_max(), b.x_min, b.y_min, b.x_max, b.y_max);
        if (iou > max_iou) {
          max_iou = iou;
          max_gt = static_cast<int>(g);
        }
        if (iou > best_iou[g]) {
          best_iou[g] = iou;
          best_anchor[g] = {static_cast<int>(m), static_cast<int>(i)};
        }
      }
      if (max_iou >= 0.5)
        t.cls[m][i] = boxes[max_gt].class_id;
      else if (max_iou >= 0.4)
        t.cls[m][i] = kIgnore;
      if (max_iou >= 0.5) {
        const auto& b = boxes[max_gt];
        const auto& a = lv[i];
        t.reg[m][i * 4 + 0] = ((b.x_min + b.x_max) / 2 - a.cx) / a.w;
        t.reg[m][i * 4 + 1] = ((b.y_min + b.y_max) / 2 - a.cy) / a.h;
        t.reg[m][i * 4 + 2] = std::log((b.x_max - b.x_min) / a.w);
        t.reg[m][i * 4 + 3] = std::log((b.y_max - b.y_min) / a.h);
      }
    }
  }
  // Force-match each GT to its best anchor even below threshold.
  for (std::size_t g = 0; g < boxes.size(); ++g) {
    auto [m, i] = best_anchor[g];
    if (m < 0) continue;
    const auto& b = boxes[g];
    const auto& a = anchors.levels[m][i];
    t.cls[m][i] = b.class_id;
    t.reg[m][i * 4 + 0] = ((b.x_min + b.x_max) / 2 - a.cx) / a.w;
    t.reg[m][i * 4 + 1] = ((b.y_min + b.y_max) / 2 - a.cy) / a.h;
    t.reg[m][i * 4 + 2] = std::log((b.x_max - b.x_min) / a.w);
    t.reg[m][i * 4 + 3] = std::log((b.y_max - b.y_min) / a.h);
  }
  for (const auto& lv : t.cls)
    for (int c : lv)
      if (c >= 0) ++t.positive_count;
  return t;
}

// Scalar two-sided alpha-balanced focal term; target is 0 or 1.
inline double focal_term(double q, int target, double alpha, double gamma) {
  q = clamp_prob(q);
  if (target == 1) return -alpha * std::pow(1.0 - q, gamma) * std::log(q);
  return -(1.0 - alpha) * std::pow(q, gamma) * std::log(1.0 - q);
}

namespace detail {

inline double focal_grad(double q, int target, double alpha, double gamma) {
  q = clamp_prob(q);
  if (target == 1)
    return alpha * (gamma * std::pow(1.0 - q, gamma - 1.0) * std::log(q) -
                    std::pow(1.0 - q, gamma) / q);
  return -(1.0 - alpha) * (gamma * std::pow(q, gamma - 1.0) * std::log(1.0 - q) -
                           std::pow(q, gamma) / (1.0 - q));
}

}  // namespace detail

// Two-sided focal loss over every non-ignored anchor of every class, summed
// over levels and divided by max(1, positive anchor count).
inline Var focal_loss(const std::vector<Var>& cls_probs, const AnchorTargets& targets,
                      int num_classes, int per_cell, double alpha, double gamma) {
  Var total = constant(Tensor::scalar(0.0));
  for (std::size_t m = 0; m < cls_probs.size(); ++m) {
    const Var& probs = cls_probs[m];
    int h = probs->val.shape[1], w = probs->val.shape[2];
    const std::vector<int> cls_t = targets.cls[m];  // copied into the closure
    double sum = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int a = 0; a < per_cell; ++a) {
          int tgt = cls_t[(static_cast<std::size_t>(y) * w + x) * per_cell + a];
          if (tgt == kIgnore) continue;
          for (int c = 0; c < num_classes; ++c) {
            double q = probs->val.at3(c * per_cell + a, y, x);
            sum += focal_term(q, tgt == c ? 1 : 0, alpha, gamma);
          }
        }
    Var part = make_op(
        Tensor::scalar(sum), {probs},
        [probs, cls_t, num_classes, per_cell, alpha, gamma, h, w](Node& n) {
          double g = n.grad[0];
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
              for (int a = 0; a < per_cell; ++a) {
                int tgt = cls_t[(static_cast<std::size_t>(y) * w + x) * per_cell + a];
                if (tgt == kIgnore) continue;
                for (int c = 0; c < num_classes; ++c) {
                  double q = probs->val.at3(c * per_cell + a, y, x);
                  probs->grad.at3(c * per_cell + a, y, x) +=
                      g * detail::focal_grad(q, tgt == c ? 1 : 0, alpha, gamma);
                }
              }
        });
    total = add(total, part);
  }
  return scale(total, 1.0 / std::max(1, targets.positive_count));
}

constexpr double kSmoothL1Sigma = 1.0 / 9.0;

inline double smooth_l1_term(double x, double sigma = kSmoothL1Sigma) {
  double ax = std::fabs(x);
  return ax < sigma ? 0.5 * x * x / sigma : ax - sigma / 2;
}

// Mean elementwise smooth-L1 over the 4 offsets of every positive anchor.
inline Var smooth_l1_loss(const std::vector<Var>& reg_maps, const AnchorTargets& targets,
                          int per_cell) {
  int npos = std::max(1, targets.positive_count);
  double norm = 1.0 / (npos * 4.0);
  Var total = constant(Tensor::scalar(0.0));
  for (std::size_t m = 0; m < reg_maps.size(); ++m) {
    const Var& reg = reg_maps[m];
    int h = reg->val.shape[1], w = reg->val.shape[2];
    const std::vector<int> cls_t = targets.cls[m];      // copied into the closure
    const std::vector<double> reg_t = targets.reg[m];
    double sum = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int a = 0; a < per_cell; ++a) {
          std::size_t ai = (static_cast<std::size_t>(y) * w + x) * per_cell + a;
          if (cls_t[ai] < 0) continue;
          for (int j = 0; j < 4; ++j)
            sum += smooth_l1_term(reg->val.at3(a * 4 + j, y, x) - reg_t[ai * 4 + j]);
        }
    Var part = make_op(Tensor::scalar(sum), {reg}, [reg, cls_t, reg_t, per_cell, h, w](Node& n) {
      double g = n.grad[0];
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int a = 0; a < per_cell; ++a) {
            std::size_t ai = (static_cast<std::size_t>(y) * w + x) * per_cell + a;
            if (cls_t[ai] < 0) continue;
            for (int j = 0; j < 4; ++j) {
              double d = reg->val.at3(a * 4 + j, y, x) - reg_t[ai * 4 + j];
              double grad = std::fabs(d) < kSmoothL1Sigma ? d / kSmoothL1Sigma
                                                          : (d > 0 ? 1.0 : -1.0);
              reg->grad.at3(a * 4 + j, y, x) += g * grad;
            }
          }
    });
    total = add(total, part);
  }
  return scale(total, norm);
}

// ---------------------------------------------------------------------------
// The detector network: 4 stride-2 conv blocks, a 3-level top-down pyramid
// (strides 8/16/32) and shared dense heads. Tiny on purpose.
// ---------------------------------------------------------------------------
class Detector {
 public:
  Detector(const Config& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    int D = cfg.feature_dim;
    int A = cfg.anchors_per_cell, N = cfg.num_classes;
    b1_w = conv_param(8, 1, 3, rng), b1_b = bias_param(8);
    b2_w = conv_param(16, 8, 3, rng), b2_b = bias_param(16);
    b3_w = conv_param(D, 16, 3, rng), b3_b = bias_param(D);
    b4_w = conv_param(D, D, 3, rng), b4_b = bias_param(D);
    p5_w = conv_param(D, D, 3, rng), p5_b = bias_param(D);
    lat3_w = conv_param(D, D, 1, rng), lat3_b = bias_param(D);
    lat4_w = conv_param(D, D, 1, rng), lat4_b = bias_param(D);
    cls1_w = conv_param(D, D, 3, rng), cls1_b = bias_param(D);
    cls2_w = conv_param(N * A, D, 3, rng), cls2_b = bias_param(N * A);
    reg1_w = conv_param(D, D, 3, rng), reg1_b = bias_param(D);
    reg2_w = conv_param(4 * A, D, 3, rng), reg2_b = bias_param(4 * A);
    // Prior-probability init keeps early focal loss small.
    double pi = 0.01;
    std::fill(cls2_b->val.v.begin(), cls2_b->val.v.end(), -std::log((1 - pi) / pi));
    // Global attention head: 1x1 conv without bias (pure CAM analogue).
    global_w = parameter(init_normal({N, D}, std::sqrt(1.0 / D), rng));
    params_ = {b1_w,  b1_b,  b2_w,   b2_b,   b3_w,  b3_b,  b4_w,  b4_b,
               p5_w,  p5_b,  lat3_w, lat3_b, lat4_w, lat4_b, cls1_w, cls1_b,
               cls2_w, cls2_b, reg1_w, reg1_b, reg2_w, reg2_b, global_w};
  }

  const Config& config() const { return cfg_; }
  std::vector<Var>& parameters() { return params_; }
  const std::vector<Var>& parameters() const { return params_; }
  const Var& global_head_weight() const { return global_w; }

  // Deterministic given parameters. Image sides must be divisible by 2^(M+2)
  // so every pyramid level halves exactly.
  PyramidOutputs forward(const Tensor& image) const {
    if (image.shape.size() != 2)
      throw std::invalid_argument("forward: expected 2-D grayscale image");
    int div = 1 << (cfg_.pyramid_levels + 2);
    if (image.shape[0] % div != 0 || image.shape[1] % div != 0)
      throw std::invalid_argument("forward: image size must be divisible by " +
                                  std::to_string(div));
    Var x = constant(Tensor({1, image.shape[0], image.shape[1]}, image.v));
    Var c1 = relu(conv2d(x, b1_w, b1_b, 2, 1));
    Var c2 = relu(conv2d(c1, b2_w, b2_b, 2, 1));
    Var c3 = relu(conv2d(c2, b3_w, b3_b, 2, 1));   // stride 8, the map M
    Var c4 = relu(conv2d(c3, b4_w, b4_b, 2, 1));   // stride 16
    Var p5 = conv2d(c4, p5_w, p5_b, 2, 1);         // stride 32
    Var p4 = add(conv2d(c4, lat4_w, lat4_b, 1, 0), upsample2(p5));
    Var p3 = add(conv2d(c3, lat3_w, lat3_b, 1, 0), upsample2(p4));

    PyramidOutputs out;
    out.backbone_feature = c3;
    for (const Var& p : {p3, p4, p5}) {
      Var ch = relu(conv2d(p, cls1_w, cls1_b, 1, 1));
      out.cls_probs.push_back(sigmoid(conv2d(ch, cls2_w, cls2_b, 1, 1)));
      Var rh = relu(conv2d(p, reg1_w, reg1_b, 1, 1));
      out.reg_maps.push_back(conv2d(rh, reg2_w, reg2_b, 1, 1));
    }
    return out;
  }

  void copy_parameters_from(const Detector& other) {
    for (std::size_t i = 0; i < params_.size(); ++i)
      params_[i]->val.v = other.params_[i]->val.v;
  }

 private:
  static Tensor init_normal(std::vector<int> shape, double std_dev,
                            std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std_dev);
    for (double& v : t.v) v = dist(rng);
    return t;
  }
  static Var conv_param(int out_ch, int in_ch, int k, std::mt19937_64& rng) {
    double std_dev = std::sqrt(2.0 / (in_ch * k * k));
    std::mt19937_64& r = rng;
    Tensor t({out_ch, in_ch, k, k});
    std::normal_distribution<double> dist(0.0, std_dev);
    for (double& v : t.v) v = dist(r);
    return parameter(std::move(t));
  }
  static Var bias_param(int n) { return parameter(Tensor({n})); }

  Config cfg_;
  Var b1_w, b1_b, b2_w, b2_b, b3_w, b3_b, b4_w, b4_b;
  Var p5_w, p5_b, lat3_w, lat3_b, lat4_w, lat4_b;
  Var cls1_w, cls1_b, cls2_w, cls2_b, reg1_w, reg1_b, reg2_w, reg2_b;
  Var global_w;
  std::vector<Var> params_;

 public:
  // Indices of the dense classification head parameters within parameters().
  std::vector<std::size_t> cls_head_param_indices() const { return {15, 16, 17, 18}; }
};

// Greedy per-class NMS; deterministic tie-breaks make the result invariant
// to the input ordering.
inline std::vector<Detection> nms(std::vector<Detection> cands, double iou_thresh,
                                  int max_dets) {
  std::stable_sort(cands.begin(), cands.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.x_min != b.x_min) return a.x_min < b.x_min;
    if (a.y_min != b.y_min) return a.y_min < b.y_min;
    if (a.x_max != b.x_max) return a.x_max < b.x_max;
    if (a.y_max != b.y_max) return a.y_max < b.y_max;
    return a.class_id < b.class_id;
  });
  std::vector<Detection> kept;
  for (const auto& d : cands) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id != d.class_id) continue;
      if (detail::iou_xyxy(d.x_min, d.y_min, d.x_max, d.y_max, k.x_min, k.y_min,
                           k.x_max, k.y_max) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept.push_back(d);
      if (static_cast<int>(kept.size()) >= max_dets) break;
    }
  }
  return kept;
}

inline std::vector<Detection> decode_and_nms(const PyramidOutputs& outputs,
                                             const AnchorSet& anchors, int num_classes,
                                             double score_thresh, double iou_thresh,
                                             int max_dets, double img_w, double img_h) {
  int A = anchors.anchors_per_cell;
  std::vector<Detection> cands;
  for (std::size_t m = 0; m < outputs.cls_probs.size(); ++m) {
    const Tensor& probs = outputs.cls_probs[m]->val;
    const Tensor& reg = outputs.reg_maps[m]->val;
    int h = probs.shape[1], w = probs.shape[2];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int a = 0; a < A; ++a) {
          const Anchor& anc = anchors.levels[m][(static_cast<std::size_t>(y) * w + x) * A + a];
          for (int c = 0; c < num_classes; ++c) {
            double score = probs.at3(c * A + a, y, x);
            if (score <= score_thresh) continue;
            double tx = reg.at3(a * 4 + 0, y, x), ty = reg.at3(a * 4 + 1, y, x);
            double tw = reg.at3(a * 4 + 2, y, x), th = reg.at3(a * 4 + 3, y, x);
            double cx = anc.cx + tx * anc.w, cy = anc.cy + ty * anc.h;
            double bw = anc.w * std::exp(std::clamp(tw, -6.0, 6.0));
            double bh = anc.h * std::exp(std::clamp(th, -6.0, 6.0));
            Detection d;
            d.x_min = std::clamp(cx - bw / 2, 0.0, img_w);
            d.y_min = std::clamp(cy - bh / 2, 0.0, img_h);
            d.x_max = std::clamp(cx + bw / 2, 0.0, img_w);
            d.y_max = std::clamp(cy + bh / 2, 0.0, img_h);
            d.class_id = c;
            d.score = score;
            if (d.x_max > d.x_min && d.y_max > d.y_min) cands.push_back(d);
          }
        }
  }
  return nms(std::move(cands), iou_thresh, max_dets);
}

}  // namespace omnidet
