#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "finite_diff.hpp"
#include "omnidet/autodiff.hpp"

using namespace omnidet;

namespace {

Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1,
                     double hi = 1) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> uni(lo, hi);
  for (double& v : t.v) v = uni(rng);
  return t;
}

// Checks d(scalar_fn(x)) / dx against central differences at every element.
void check_grad(Tensor input, const std::function<Var(const Var&)>& scalar_fn,
                double tol = 1e-6) {
  Var x = parameter(input);
  Var y = scalar_fn(x);
  REQUIRE(y->val.size() == 1);
  backward(y);
  for (std::size_t i = 0; i < input.size(); ++i) {
    double numeric = testutil::central_diff(
        [&] { return scalar_fn(parameter(x->val))->val[0]; }, x->val[i], 1e-6);
    CHECK(testutil::rel_error(x->grad[i], numeric) < tol);
  }
}

}  // namespace

TEST_CASE("elementwise op gradients") {
  std::mt19937_64 rng(7);
  Tensor a = random_tensor({2, 3, 3}, rng);
  check_grad(a, [](const Var& x) { return sum_all(mul(sigmoid(x), relu(x))); });
  check_grad(a, [](const Var& x) { return sum_all(mul(x, x)); });
  check_grad(a, [](const Var& x) { return scale(sum_all(sub(x, scale(x, 0.25))), 2.0); });
}

TEST_CASE("div by scalar var gradient") {
  std::mt19937_64 rng(8);
  Tensor a = random_tensor({4, 4}, rng, 0.1, 1.0);
  check_grad(a, [](const Var& x) {
    Var normalized = div_scalarvar(x, sum_all(x));
    return sum_all(mul(normalized, normalized));
  });
}

TEST_CASE("max over groups forward and gradient") {
  std::mt19937_64 rng(9);
  Tensor a = random_tensor({6, 3, 3}, rng);
  Var x = constant(a);
  Var m = max_over_groups(x, 3);
  CHECK(m->val.shape == std::vector<int>{2, 3, 3});
  // brute-force reference
  for (int g = 0; g < 2; ++g)
    for (int y = 0; y < 3; ++y)
      for (int xx = 0; xx < 3; ++xx) {
        double ref = std::max({a.at3(g * 3, y, xx), a.at3(g * 3 + 1, y, xx),
                               a.at3(g * 3 + 2, y, xx)});
        CHECK(m->val.at3(g, y, xx) == ref);
      }
  check_grad(a, [](const Var& v) { return sum_all(mul(max_over_groups(v, 3),
                                                      max_over_groups(v, 3))); });
}

TEST_CASE("bilinear resize gradient") {
  std::mt19937_64 rng(10);
  Tensor a = random_tensor({3, 4}, rng, 0.0, 1.0);
  check_grad(a, [](const Var& x) {
    Var r = bilinear_resize(x, 5, 7);
    return sum_all(mul(r, r));
  });
}

TEST_CASE("upsample2 gradient") {
  std::mt19937_64 rng(11);
  Tensor a = random_tensor({2, 2, 3}, rng);
  check_grad(a, [](const Var& x) {
    Var u = upsample2(x);
    return sum_all(mul(u, u));
  });
}

TEST_CASE("attention pool forward and gradient") {
  std::mt19937_64 rng(12);
  Tensor feat = random_tensor({4, 3, 3}, rng);
  Tensor attn = random_tensor({3, 3}, rng, 0.0, 1.0);
  Var f = constant(feat);
  Var a = constant(attn);
  Var pooled = attention_pool(f, a);
  for (int d = 0; d < 4; ++d) {
    double ref = 0;
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) ref += feat.at3(d, y, x) * attn.at2(y, x);
    CHECK(pooled->val[d] == doctest::Approx(ref));
  }
  check_grad(feat, [&](const Var& x) {
    return sum_all(mul(attention_pool(x, constant(attn)), attention_pool(x, constant(attn))));
  });
  check_grad(attn, [&](const Var& x) {
    Var p = attention_pool(constant(feat), x);
    return sum_all(mul(p, p));
  });
}

TEST_CASE("conv2d gradients wrt input, weight and bias") {
  std::mt19937_64 rng(13);
  Tensor input = random_tensor({2, 6, 6}, rng);
  Tensor weight = random_tensor({3, 2, 3, 3}, rng);
  Tensor bias = random_tensor({3}, rng);
  for (int stride : {1, 2}) {
    auto loss_of = [&](Tensor in, Tensor w, Tensor b) {
      Var y = conv2d(constant(std::move(in)), constant(std::move(w)),
                     constant(std::move(b)), stride, 1);
      return sum_all(mul(y, y))->val[0];
    };
    Var vi = parameter(input), vw = parameter(weight), vb = parameter(bias);
    Var y = conv2d(vi, vw, vb, stride, 1);
    backward(sum_all(mul(y, y)));
    for (std::size_t i = 0; i < input.size(); i += 5) {
      double n = testutil::central_diff([&] { return loss_of(input, weight, bias); },
                                        input.v[i], 1e-6);
      CHECK(testutil::rel_error(vi->grad[i], n) < 1e-5);
    }
    for (std::size_t i = 0; i < weight.size(); i += 7) {
      double n = testutil::central_diff([&] { return loss_of(input, weight, bias); },
                                        weight.v[i], 1e-6);
      CHECK(testutil::rel_error(vw->grad[i], n) < 1e-5);
    }
    for (std::size_t i = 0; i < bias.size(); ++i) {
      double n = testutil::central_diff([&] { return loss_of(input, weight, bias); },
                                        bias.v[i], 1e-6);
      CHECK(testutil::rel_error(vb->grad[i], n) < 1e-5);
    }
  }
}

TEST_CASE("conv1x1 no-bias gradient") {
  std::mt19937_64 rng(14);
  Tensor input = random_tensor({3, 4, 4}, rng);
  Tensor weight = random_tensor({2, 3}, rng);
  Var vw = parameter(weight);
  Var y = conv1x1_nobias(constant(input), vw);
  backward(sum_all(mul(y, y)));
  for (std::size_t i = 0; i < weight.size(); ++i) {
    double n = testutil::central_diff(
        [&] {
          Var out = conv1x1_nobias(constant(input), constant(weight));
          return sum_all(mul(out, out))->val[0];
        },
        weight.v[i], 1e-6);
    CHECK(testutil::rel_error(vw->grad[i], n) < 1e-6);
  }
}

TEST_CASE("shared subexpression accumulates gradient once per use") {
  Var x = parameter(Tensor::scalar(3.0));
  Var y = add(mul(x, x), x);  // d/dx = 2x + 1 = 7
  backward(y);
  CHECK(x->grad[0] == doctest::Approx(7.0));
}

TEST_CASE("no gradient flows into non-requiring nodes") {
  Var c = constant(Tensor::scalar(2.0));
  Var x = parameter(Tensor::scalar(5.0));
  Var y = mul(c, x);
  backward(y);
  CHECK(x->grad[0] == doctest::Approx(2.0));
  CHECK(y->parents.size() == 2);
}
