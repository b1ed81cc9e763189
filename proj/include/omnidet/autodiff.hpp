#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "omnidet/tensor.hpp"

namespace omnidet {

// Reverse-mode autodiff over Tensors. A forward pass builds a tape of Nodes;
// backward() walks it in reverse topological order. Single-threaded by
// contract: one training thread owns the tape.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;  // accumulates into parents' grads

  explicit Node(Tensor t, bool rg = false) : val(std::move(t)), requires_grad(rg) {
    grad = Tensor(val.shape);
  }
};

inline Var constant(Tensor t) { return std::make_shared<Node>(std::move(t)); }
inline Var parameter(Tensor t) { return std::make_shared<Node>(std::move(t), true); }

inline Var make_op(Tensor out, std::vector<Var> parents,
                   std::function<void(Node&)> bwd) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  auto n = std::make_shared<Node>(std::move(out), rg);
  if (rg) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(bwd);
  }
  return n;
}

// Seeds the root with grad 1 and propagates. Root must be scalar-shaped.
inline void backward(const Var& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Var, std::size_t>> stack;
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx == 0 && seen.count(node.get())) {
      stack.pop_back();
      continue;
    }
    if (idx < node->parents.size()) {
      Var child = node->parents[idx++];
      if (!seen.count(child.get())) stack.emplace_back(std::move(child), 0);
    } else {
      seen.insert(node.get());
      order.push_back(node.get());
      stack.pop_back();
    }
  }
  std::fill(root->grad.v.begin(), root->grad.v.end(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->val[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      a->grad[i] += n.grad[i];
      b->grad[i] += n.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val)) throw std::invalid_argument("sub: shape mismatch");
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->val[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      a->grad[i] += n.grad[i];
      b->grad[i] -= n.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = a->val;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->val[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      a->grad[i] += n.grad[i] * b->val[i];
      b->grad[i] += n.grad[i] * a->val[i];
    }
  });
}

inline Var scale(const Var& a, double k) {
  Tensor out = a->val;
  for (double& x : out.v) x *= k;
  return make_op(std::move(out), {a}, [a, k](Node& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += k * n.grad[i];
  });
}

inline Var relu(const Var& a) {
  Tensor out = a->val;
  for (double& x : out.v) x = std::max(0.0, x);
  return make_op(std::move(out), {a}, [a](Node& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (a->val[i] > 0) a->grad[i] += n.grad[i];
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  Tensor out = a->val;
  for (double& x : out.v) x = sigmoid_scalar(x);
  return make_op(std::move(out), {a}, [a](Node& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      double s = n.val[i];
      a->grad[i] += n.grad[i] * s * (1.0 - s);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping helpers
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  Tensor out = Tensor::scalar(a->val.sum());
  return make_op(std::move(out), {a}, [a](Node& n) {
    for (std::size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += n.grad[0];
  });
}

// Elementwise division of a tensor by a scalar-shaped Var.
inline Var div_scalarvar(const Var& a, const Var& s) {
  if (s->val.size() != 1) throw std::invalid_argument("div_scalarvar: divisor not scalar");
  double d = s->val[0];
  Tensor out = a->val;
  for (double& x : out.v) x /= d;
  return make_op(std::move(out), {a, s}, [a, s, d](Node& n) {
    double gs = 0;
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      a->grad[i] += n.grad[i] / d;
      gs -= n.grad[i] * a->val[i] / (d * d);
    }
    s->grad[0] += gs;
  });
}

// Extracts channel c from a (C,H,W) tensor as an (H,W) map.
inline Var select_channel(const Var& a, int c) {
  int h = a->val.shape[1], w = a->val.shape[2];
  Tensor out({h, w});
  std::size_t base = static_cast<std::size_t>(c) * h * w;
  std::copy(a->val.v.begin() + base, a->val.v.begin() + base + h * w, out.v.begin());
  return make_op(std::move(out), {a}, [a, base](Node& n) {
    for (std::size_t i = 0; i < n.grad.size(); ++i) a->grad[base + i] += n.grad[i];
  });
}

// Max over groups of `group` consecutive channels: (G*group,H,W) -> (G,H,W).
// Gradient routes to the argmax element (first on ties).
inline Var max_over_groups(const Var& a, int group) {
  int ch = a->val.shape[0], h = a->val.shape[1], w = a->val.shape[2];
  if (ch % group != 0) throw std::invalid_argument("max_over_groups: channel count");
  int g = ch / group;
  Tensor out({g, h, w});
  std::vector<int> arg(out.size());
  for (int gi = 0; gi < g; ++gi)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double best = a->val.at3(gi * group, y, x);
        int bi = 0;
        for (int k = 1; k < group; ++k) {
          double v = a->val.at3(gi * group + k, y, x);
          if (v > best) {
            best = v;
            bi = k;
          }
        }
        out.at3(gi, y, x) = best;
        arg[(static_cast<std::size_t>(gi) * h + y) * w + x] = bi;
      }
  return make_op(std::move(out), {a}, [a, arg, group, h, w](Node& n) {
    int g = n.grad.shape[0];
    for (int gi = 0; gi < g; ++gi)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          std::size_t oi = (static_cast<std::size_t>(gi) * h + y) * w + x;
          a->grad.at3(gi * group + arg[oi], y, x) += n.grad[oi];
        }
  });
}

// Differentiable bilinear resize of an (H,W) map.
inline Var bilinear_resize(const Var& a, int out_h, int out_w) {
  int h = a->val.shape[0], w = a->val.shape[1];
  if (h == out_h && w == out_w) return a;
  Tensor out = bilinear_resize2d(a->val, out_h, out_w);
  return make_op(std::move(out), {a}, [a, h, w, out_h, out_w](Node& n) {
    double sy = static_cast<double>(h) / out_h;
    double sx = static_cast<double>(w) / out_w;
    for (int y = 0; y < out_h; ++y) {
      double fy = (y + 0.5) * sy - 0.5;
      int y0 = static_cast<int>(std::floor(fy));
      double wy = fy - y0;
      int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
      for (int x = 0; x < out_w; ++x) {
        double fx = (x + 0.5) * sx - 0.5;
        int x0 = static_cast<int>(std::floor(fx));
        double wx = fx - x0;
        int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
        double g = n.grad.at2(y, x);
        a->grad.at2(y0c, x0c) += g * (1 - wy) * (1 - wx);
        a->grad.at2(y0c, x1c) += g * (1 - wy) * wx;
        a->grad.at2(y1c, x0c) += g * wy * (1 - wx);
        a->grad.at2(y1c, x1c) += g * wy * wx;
      }
    }
  });
}

// Nearest-neighbour 2x upsample of a (C,H,W) tensor (FPN top-down path).
inline Var upsample2(const Var& a) {
  int c = a->val.shape[0], h = a->val.shape[1], w = a->val.shape[2];
  Tensor out({c, 2 * h, 2 * w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < 2 * h; ++y)
      for (int x = 0; x < 2 * w; ++x) out.at3(ci, y, x) = a->val.at3(ci, y / 2, x / 2);
  return make_op(std::move(out), {a}, [a, c, h, w](Node& n) {
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < 2 * h; ++y)
        for (int x = 0; x < 2 * w; ++x)
          a->grad.at3(ci, y / 2, x / 2) += n.grad.at3(ci, y, x);
  });
}

// Attention-weighted spatial pooling: feat (D,H,W), attn (H,W) -> (D).
inline Var attention_pool(const Var& feat, const Var& attn) {
  int d = feat->val.shape[0], h = feat->val.shape[1], w = feat->val.shape[2];
  if (attn->val.shape != std::vector<int>{h, w})
    throw std::invalid_argument("attention_pool: shape mismatch");
  Tensor out({d});
  for (int di = 0; di < d; ++di) {
    double s = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) s += feat->val.at3(di, y, x) * attn->val.at2(y, x);
    out[di] = s;
  }
  return make_op(std::move(out), {feat, attn}, [feat, attn, d, h, w](Node& n) {
    for (int di = 0; di < d; ++di) {
      double g = n.grad[di];
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          feat->grad.at3(di, y, x) += g * attn->val.at2(y, x);
          attn->grad.at2(y, x) += g * feat->val.at3(di, y, x);
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution: input (C,H,W), weight (O,C,k,k), bias (O), square kernel.
// ---------------------------------------------------------------------------

inline Var conv2d(const Var& input, const Var& weight, const Var& bias, int stride,
                  int pad) {
  int c = input->val.shape[0], h = input->val.shape[1], w = input->val.shape[2];
  int o = weight->val.shape[0], k = weight->val.shape[2];
  if (weight->val.shape[1] != c) throw std::invalid_argument("conv2d: channel mismatch");
  int oh = (h + 2 * pad - k) / stride + 1;
  int ow = (w + 2 * pad - k) / stride + 1;
  Tensor out({o, oh, ow});
  const auto& iv = input->val;
  const auto& wv = weight->val;
  for (int oc = 0; oc < o; ++oc) {
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = bias->val[oc];
        for (int ic = 0; ic < c; ++ic)
          for (int ky = 0; ky < k; ++ky) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= w) continue;
              acc += iv.at3(ic, iy, ix) * wv.v[((static_cast<std::size_t>(oc) * c + ic) * k + ky) * k + kx];
            }
          }
        out.at3(oc, oy, ox) = acc;
      }
  }
  return make_op(std::move(out), {input, weight, bias},
                 [input, weight, bias, stride, pad, c, h, w, o, k](Node& n) {
                   int oh = n.grad.shape[1], ow = n.grad.shape[2];
                   for (int oc = 0; oc < o; ++oc)
                     for (int oy = 0; oy < oh; ++oy)
                       for (int ox = 0; ox < ow; ++ox) {
                         double g = n.grad.at3(oc, oy, ox);
                         if (g == 0) continue;
                         bias->grad[oc] += g;
                         for (int ic = 0; ic < c; ++ic)
                           for (int ky = 0; ky < k; ++ky) {
                             int iy = oy * stride + ky - pad;
                             if (iy < 0 || iy >= h) continue;
                             for (int kx = 0; kx < k; ++kx) {
                               int ix = ox * stride + kx - pad;
                               if (ix < 0 || ix >= w) continue;
                               std::size_t wi = ((static_cast<std::size_t>(oc) * c + ic) * k + ky) * k + kx;
                               weight->grad[wi] += g * input->val.at3(ic, iy, ix);
                               input->grad.at3(ic, iy, ix) += g * weight->val[wi];
                             }
                           }
                       }
                 });
}

// 1x1 convolution without bias, used by the global attention head.
inline Var conv1x1_nobias(const Var& input, const Var& weight) {
  int c = input->val.shape[0], h = input->val.shape[1], w = input->val.shape[2];
  int o = weight->val.shape[0];
  if (weight->val.shape[1] != c) throw std::invalid_argument("conv1x1: channel mismatch");
  Tensor out({o, h, w});
  for (int oc = 0; oc < o; ++oc)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int ic = 0; ic < c; ++ic)
          acc += input->val.at3(ic, y, x) * weight->val[static_cast<std::size_t>(oc) * c + ic];
        out.at3(oc, y, x) = acc;
      }
  return make_op(std::move(out), {input, weight}, [input, weight, c, h, w, o](Node& n) {
    for (int oc = 0; oc < o; ++oc)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double g = n.grad.at3(oc, y, x);
          for (int ic = 0; ic < c; ++ic) {
            weight->grad[static_cast<std::size_t>(oc) * c + ic] += g * input->val.at3(ic, y, x);
            input->grad.at3(ic, y, x) += g * weight->val[static_cast<std::size_t>(oc) * c + ic];
          }
        }
  });
}

}  // namespace omnidet
