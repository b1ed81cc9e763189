#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "finite_diff.hpp"
#include "omnidet/daa.hpp"

using namespace omnidet;

namespace {

Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> uni(lo, hi);
  for (double& v : t.v) v = uni(rng);
  return t;
}

}  // namespace

TEST_CASE("reduce_anchor_dimension") {
  SUBCASE("A=1 is the identity") {
    Tensor t({2, 3, 3});
    std::iota(t.v.begin(), t.v.end(), 0.0);
    auto out = daa::reduce_anchor_dimension({constant(t)}, 1);
    CHECK(out[0]->val.v == t.v);
  }
  SUBCASE("elementwise max over anchors") {
    Tensor t({3, 1, 1}, {0.1, 0.7, 0.3});
    auto out = daa::reduce_anchor_dimension({constant(t)}, 3);
    CHECK(out[0]->val[0] == 0.7);
  }
  SUBCASE("random map equals brute-force loop") {
    std::mt19937_64 rng(1);
    Tensor t = random_tensor({6, 4, 4}, rng, 0, 1);
    auto out = daa::reduce_anchor_dimension({constant(t)}, 3);
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
          double ref = 0;
          for (int a = 0; a < 3; ++a) ref = std::max(ref, t.at3(c * 3 + a, y, x));
          CHECK(out[0]->val.at3(c, y, x) == ref);
        }
  }
}

TEST_CASE("select_pyramid_level") {
  auto level_with_max = [](double peak, int h) {
    Tensor t = Tensor::full({1, h, h}, peak / 2);
    t.at3(0, 0, 0) = peak;
    return constant(t);
  };
  SUBCASE("direct argmax picks the level with largest peak") {
    auto sel = daa::select_pyramid_level(
        {level_with_max(0.3, 8), level_with_max(0.7, 4), level_with_max(0.2, 2)}, 0);
    CHECK(sel->val.shape == std::vector<int>{4, 4});
    CHECK(sel->val.at2(0, 0) == 0.7);
  }
  SUBCASE("single level returns that level") {
    auto sel = daa::select_pyramid_level({level_with_max(0.5, 8)}, 0);
    CHECK(sel->val.shape == std::vector<int>{8, 8});
  }
  SUBCASE("ties break toward the finest level") {
    auto sel = daa::select_pyramid_level(
        {level_with_max(0.7, 8), level_with_max(0.5, 4), level_with_max(0.7, 2)}, 0);
    CHECK(sel->val.shape == std::vector<int>{8, 8});
  }
}

TEST_CASE("normalize_attention") {
  SUBCASE("constant map becomes uniform") {
    Var r = daa::normalize_attention(constant(Tensor::full({4, 4}, 3.7)), 4, 4);
    for (double v : r->val.v) CHECK(v == doctest::Approx(1.0 / 16).epsilon(1e-12));
  }
  SUBCASE("hand-normalized 2x2 example") {
    Var r = daa::normalize_attention(constant(Tensor({2, 2}, {1, 3, 0, 0})), 2, 2);
    CHECK(r->val.v[0] == doctest::Approx(0.25));
    CHECK(r->val.v[1] == doctest::Approx(0.75));
    CHECK(r->val.v[2] == 0.0);
    CHECK(r->val.v[3] == 0.0);
  }
  SUBCASE("sums to one and is scale invariant over random maps") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> scale_dist(0.01, 100.0);
    for (int i = 0; i < 1000; ++i) {
      Tensor t = random_tensor({5, 7}, rng, 1e-4, 1.0);
      Var r = daa::normalize_attention(constant(t), 6, 6);
      CHECK(std::fabs(r->val.sum() - 1.0) <= 1e-6);
      for (double v : r->val.v) CHECK(v >= 0.0);
      double k = scale_dist(rng);
      Tensor scaled = t;
      for (double& v : scaled.v) v *= k;
      Var r2 = daa::normalize_attention(constant(scaled), 6, 6);
      for (std::size_t j = 0; j < r->val.size(); ++j)
        CHECK(std::fabs(r->val[j] - r2->val[j]) < 1e-9);
    }
  }
}

TEST_CASE("daa_pool") {
  SUBCASE("uniform weights average the global map") {
    Var x = constant(Tensor({2, 2}, {1, 2, 3, 4}));
    Var r = constant(Tensor::full({2, 2}, 0.25));
    CHECK(daa::daa_pool(x, r)->val[0] == doctest::Approx(sigmoid(2.5)).epsilon(1e-12));
  }
  SUBCASE("constant global map gives sigmoid(k) for any weights") {
    std::mt19937_64 rng(3);
    Tensor attn = random_tensor({3, 3}, rng, 0, 1);
    double s = attn.sum();
    for (double& v : attn.v) v /= s;
    Var p = daa::daa_pool(constant(Tensor::full({3, 3}, -1.3)), constant(attn));
    CHECK(p->val[0] == doctest::Approx(sigmoid(-1.3)).epsilon(1e-9));
  }
  SUBCASE("one-hot weights pick one pixel") {
    Tensor x({2, 2}, {0.5, -2, 3, 1});
    Tensor r({2, 2}, {0, 0, 1, 0});
    CHECK(daa::daa_pool(constant(x), constant(r))->val[0] ==
          doctest::Approx(sigmoid(3.0)));
  }
  SUBCASE("shape mismatch throws") {
    CHECK_THROWS_AS(daa::daa_pool(constant(Tensor({2, 2})), constant(Tensor({3, 3}))),
                    std::invalid_argument);
  }
  SUBCASE("invariant under joint pixel permutation") {
    std::mt19937_64 rng(4);
    Tensor x = random_tensor({4, 4}, rng, -2, 2);
    Tensor r = random_tensor({4, 4}, rng, 0, 1);
    double p0 = daa::daa_pool(constant(x), constant(r))->val[0];
    std::vector<int> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor xp({4, 4}), rp({4, 4});
    for (int i = 0; i < 16; ++i) {
      xp.v[i] = x.v[perm[i]];
      rp.v[i] = r.v[perm[i]];
    }
    CHECK(daa::daa_pool(constant(xp), constant(rp))->val[0] == doctest::Approx(p0).epsilon(1e-12));
  }
}

TEST_CASE("weak_loss values and errors") {
  Sample weak;
  weak.granularity = Granularity::WEAK;
  weak.image_labels = {1, 0};
  std::vector<Var> preds = {constant(Tensor::scalar(0.5)), constant(Tensor::scalar(0.5))};
  CHECK(daa::weak_loss(preds, weak)->val[0] ==
        doctest::Approx(2 * std::log(2.0)).epsilon(1e-9));

  std::vector<Var> perfect = {constant(Tensor::scalar(1.0 - 1e-7)),
                              constant(Tensor::scalar(1e-7))};
  CHECK(daa::weak_loss(perfect, weak)->val[0] == doctest::Approx(0.0).epsilon(1e-5));

  Sample unlabeled;
  unlabeled.granularity = Granularity::UNLABELED;
  CHECK_THROWS_AS(daa::weak_loss(preds, unlabeled), std::invalid_argument);
}

TEST_CASE("daa-pooled bce gradient matches finite differences") {
  // End-to-end: raw positive attention -> normalize -> pool -> BCE.
  std::mt19937_64 rng(5);
  auto loss_fn = [](const Tensor& xt, const Tensor& at, double y) {
    Var x = constant(xt);
    Var a = constant(at);
    Var r = daa::normalize_attention(a, xt.shape[0], xt.shape[1]);
    return daa::bce_term(daa::daa_pool(x, r), y)->val[0];
  };
  int points = 0;
  for (int trial = 0; trial < 6; ++trial) {
    Tensor xt = random_tensor({4, 4}, rng, -2, 2);
    Tensor at = random_tensor({2, 2}, rng, 0.05, 0.95);
    double y = trial % 2;
    Var x = parameter(xt);
    Var a = parameter(at);
    Var r = daa::normalize_attention(a, 4, 4);
    Var loss = daa::bce_term(daa::daa_pool(x, r), y);
    backward(loss);
    for (std::size_t i = 0; i < xt.size(); ++i, ++points) {
      double n = testutil::central_diff([&] { return loss_fn(xt, at, y); }, xt.v[i], 1e-6);
      CHECK(testutil::rel_error(x->grad[i], n) < 1e-4);
    }
    for (std::size_t i = 0; i < at.size(); ++i, ++points) {
      double n = testutil::central_diff([&] { return loss_fn(xt, at, y); }, at.v[i], 1e-6);
      CHECK(testutil::rel_error(a->grad[i], n) < 1e-4);
    }
  }
  CHECK(points >= 100);
}

TEST_CASE("weak gradient flows into the local head through DAA but not GAP") {
  Config cfg;
  cfg.num_classes = 2;
  cfg.image_size = 32;
  std::mt19937_64 rng(6);
  Detector det(cfg, rng);
  Sample weak;
  weak.granularity = Granularity::WEAK;
  weak.image_labels = {1, 0};
  weak.image = random_tensor({32, 32}, rng, 0, 1);

  for (bool use_gap : {false, true}) {
    for (const Var& p : det.parameters()) std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0);
    PyramidOutputs out = det.forward(weak.image);
    daa::AttentionPair attn = daa::compute_attention(out, det.global_head_weight(),
                                                     cfg.num_classes,
                                                     cfg.anchors_per_cell, use_gap);
    backward(daa::weak_loss(attn.predictions, weak));
    double norm = 0;
    for (std::size_t i : det.cls_head_param_indices())
      norm += det.parameters()[i]->grad.norm();
    if (use_gap)
      CHECK(norm == 0.0);
    else
      CHECK(norm > 1e-12);
  }
}
