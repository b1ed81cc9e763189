#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "omnidet/core.hpp"

using namespace omnidet;

TEST_CASE("sigmoid basics") {
  CHECK(sigmoid(0.0) == doctest::Approx(0.5));
  CHECK(sigmoid(2.5) == doctest::Approx(0.9241418).epsilon(1e-6));
  CHECK(sigmoid(1000.0) == doctest::Approx(1.0));
  CHECK(sigmoid(-1000.0) == doctest::Approx(0.0));
  CHECK(std::isfinite(sigmoid(1000.0)));
}

TEST_CASE("sigmoid monotone and symmetric") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> uni(-30, 30);
  for (int i = 0; i < 200; ++i) {
    double x = uni(rng);
    CHECK(std::fabs(sigmoid(-x) - (1.0 - sigmoid(x))) < 1e-12);
    CHECK(sigmoid(x + 0.1) > sigmoid(x));
  }
}

TEST_CASE("binary cross entropy examples") {
  CHECK(binary_cross_entropy({0.5}, {1.0}) == doctest::Approx(std::log(2.0)));
  CHECK(binary_cross_entropy({0.9, 0.1}, {1.0, 0.0}) ==
        doctest::Approx(-2 * std::log(0.9)).epsilon(1e-9));
  // hard labels, perfect prediction after clamping
  CHECK(binary_cross_entropy({1.0, 0.0}, {1.0, 0.0}) == doctest::Approx(0.0).epsilon(1e-5));
}

TEST_CASE("binary cross entropy dimension mismatch") {
  CHECK_THROWS_AS(binary_cross_entropy({0.5, 0.5}, {1.0}), std::invalid_argument);
}

TEST_CASE("bce nonnegative with minimum at p=y") {
  // grid search over scalar p for several soft targets
  for (double y : {0.0, 0.2, 0.5, 0.77, 1.0}) {
    double best_p = -1, best_loss = 1e300;
    for (int i = 1; i < 1000; ++i) {
      double p = i / 1000.0;
      double loss = binary_cross_entropy({p}, {y});
      CHECK(loss >= 0.0);
      if (loss < best_loss) {
        best_loss = loss;
        best_p = p;
      }
    }
    CHECK(std::fabs(best_p - y) <= 0.0011);
  }
}

TEST_CASE("labels derivable from boxes") {
  std::vector<GroundTruthBox> boxes = {{1, 1, 5, 5, 2}, {10, 10, 20, 20, 0}};
  auto y = labels_from_boxes(boxes, 4);
  CHECK(y == std::vector<int>{1, 0, 1, 0});
}
