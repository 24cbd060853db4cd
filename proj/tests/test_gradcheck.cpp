#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "mg/gradcheck.hpp"
#include "mg/ops.hpp"
#include "test_util.hpp"

using namespace mg;
using mg::testing::random_tensor;

namespace {

constexpr double kTol = 1e-3;
constexpr int kSeeds = 5;

// Values bounded away from 0 so central differences never straddle a ReLU kink.
Tensor away_from_zero(Shape shape, std::uint64_t seed) {
  auto t = random_tensor(std::move(shape), seed);
  for (auto& v : t.data()) v = v >= 0 ? 0.1f + v : -0.1f + v;
  return t;
}

// Distinct values spaced far apart relative to the finite-difference step.
Tensor well_separated(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::vector<float> v(static_cast<std::size_t>(t.numel()));
  std::iota(v.begin(), v.end(), 0.0f);
  std::shuffle(v.begin(), v.end(), Rng(seed));
  for (std::size_t i = 0; i < v.size(); ++i) t.data()[i] = 0.05f * v[i] - 1.0f;
  return t;
}

// Reduces an op output to a scalar with fixed random weights.
Tensor weighted_sum(Tape& tape, const Tensor& y, std::uint64_t seed) {
  return sum(tape, mul(tape, y, random_tensor(y.shape(), seed + 1000)));
}

}  // namespace

TEST_CASE("grad_check: f = sum has error < 1e-6 where float arithmetic is exact") {
  // integer point and a power-of-two step keep x +- h and the sum exactly representable
  Tensor x({7}, std::vector<float>{-3, -2, -1, 0, 1, 2, 3});
  const auto f = [](Tape& t, const Tensor& p) { return sum(t, p); };
  CHECK(grad_check(f, x, 1.0 / 1024) < 1e-6);
}

TEST_CASE("grad_check: f = sum at a random point with h = 1e-3") {
  // float32 rounding of the loss bounds the error by about ulp(f) / 2h
  auto x = random_tensor({7}, 1);
  CHECK(grad_check([](Tape& t, const Tensor& p) { return sum(t, p); }, x) < 1e-4);
}

TEST_CASE("grad_check: derivative of x^2 at 3 is 6") {
  Tensor x({1}, 3.0f);
  GradCheckOptions opt;
  auto report = grad_check([&](Tape& t) { return mul(t, x, x); }, {{"x", x}}, opt);
  CHECK(report.tensors[0].numeric == doctest::Approx(6.0).epsilon(1e-4 / 6));
  CHECK(report.tensors[0].analytic == doctest::Approx(6.0));
}

TEST_CASE("grad_check: a wrong gradient is detected") {
  auto x = random_tensor({5}, 2);
  GradCheckOptions opt;
  opt.after_backward = [&] { x.grad()[2] *= 1.5f; };
  auto report = grad_check([&](Tape& t) { return sum(t, mul(t, x, x)); }, {{"x", x}}, opt);
  CHECK(report.max_rel_error > 1e-2);
}

TEST_CASE("grad_check: non-finite evaluations raise") {
  Tensor x({1}, 100.0f);
  CHECK_THROWS_AS(grad_check(
                      [](Tape& t, const Tensor& p) {
                        auto big = mul(t, p, p);
                        for (int i = 0; i < 6; ++i) big = mul(t, big, big);
                        return sum(t, big);
                      },
                      x),
                  NumericalError);
}

TEST_CASE("analytic gradients match central differences for every op") {
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    SUBCASE("conv2d") {
      auto x = random_tensor({2, 3, 6, 5}, seed);
      auto k = random_tensor({4, 3, 3, 3}, seed + 10);
      auto b = random_tensor({4}, seed + 20);
      for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 0}, std::pair{2, 1}}) {
        auto r = grad_check([&](Tape& t) { return weighted_sum(t, conv2d(t, x, k, b, stride, pad), seed); },
                            {{"x", x}, {"k", k}, {"b", b}});
        CHECK(r.max_rel_error < kTol);
      }
    }
    SUBCASE("conv2d 1x1") {
      auto x = random_tensor({2, 3, 4, 4}, seed);
      auto k = random_tensor({2, 3, 1, 1}, seed + 10);
      auto b = random_tensor({2}, seed + 20);
      auto r = grad_check([&](Tape& t) { return weighted_sum(t, conv2d(t, x, k, b), seed); },
                          {{"x", x}, {"k", k}, {"b", b}});
      CHECK(r.max_rel_error < kTol);
    }
    SUBCASE("max_pool2d") {
      auto x = well_separated({2, 2, 6, 6}, seed);
      auto r = grad_check([&](Tape& t) { return weighted_sum(t, max_pool2d(t, x, 2, 2), seed); }, {{"x", x}});
      CHECK(r.max_rel_error < kTol);
    }
    SUBCASE("upsample_block") {
      auto x = random_tensor({2, 3, 2, 3}, seed);
      auto skip = random_tensor({2, 2, 4, 6}, seed + 5);
      auto k = random_tensor({4, 5, 3, 3}, seed + 10);
      auto b = random_tensor({4}, seed + 20);
      auto r = grad_check(
          [&](Tape& t) {
            return weighted_sum(t, upsample_block(t, x, skip, k, b, {Activation::Sigmoid}), seed);
          },
          {{"x", x}, {"skip", skip}, {"k", k}, {"b", b}});
      CHECK(r.max_rel_error < kTol);
    }
    SUBCASE("linear") {
      auto x = random_tensor({3, 4}, seed);
      auto w = random_tensor({2, 4}, seed + 10);
      auto b = random_tensor({2}, seed + 20);
      auto r = grad_check([&](Tape& t) { return weighted_sum(t, linear(t, x, w, b), seed); },
                          {{"x", x}, {"w", w}, {"b", b}});
      CHECK(r.max_rel_error < kTol);
    }
    SUBCASE("activations") {
      auto x = away_from_zero({3, 5}, seed);
      auto r = grad_check(
          [&](Tape& t) {
            auto a = relu(t, x);
            auto b = leaky_relu(t, x, 0.1f);
            auto c = sigmoid(t, x);
            return add(t, add(t, weighted_sum(t, a, seed), weighted_sum(t, b, seed + 1)), weighted_sum(t, c, seed + 2));
          },
          {{"x", x}});
      CHECK(r.max_rel_error < kTol);
    }
    SUBCASE("batch_norm2d train and eval") {
      auto x = random_tensor({3, 2, 3, 3}, seed);
      auto gamma = random_tensor({2}, seed + 10, 0.5f, 1.5f);
      auto beta = random_tensor({2}, seed + 20);
      for (auto mode : {Mode::Train, Mode::Eval}) {
        auto r = grad_check(
            [&](Tape& t) {
              BatchNormState st{Tensor({2}, 0.1f), Tensor({2}, 0.8f)};
              return weighted_sum(t, batch_norm2d(t, x, gamma, beta, st, mode), seed);
            },
            {{"x", x}, {"gamma", gamma}, {"beta", beta}});
        CHECK(r.max_rel_error < kTol);
      }
    }
    SUBCASE("dropout with a fixed mask") {
      auto x = random_tensor({4, 6}, seed);
      auto r = grad_check(
          [&](Tape& t) {
            Rng rng(seed);
            return weighted_sum(t, dropout(t, x, 0.4f, Mode::Train, rng), seed);
          },
          {{"x", x}});
      CHECK(r.max_rel_error < kTol);
    }
    SUBCASE("softmax, cross-entropy, mse") {
      auto z = random_tensor({4, 3}, seed, -2.0f, 2.0f);
      auto a = random_tensor({2, 3, 2, 2}, seed + 3);
      auto b = random_tensor({2, 3, 2, 2}, seed + 4);
      const std::vector<int> labels{0, 2, 1, 2};
      auto r = grad_check(
          [&](Tape& t) {
            auto l1 = softmax_cross_entropy(t, z, labels);
            auto l2 = weighted_sum(t, softmax(t, z), seed);
            auto l3 = mse_loss(t, a, b);
            return add(t, add(t, l1, l2), l3);
          },
          {{"z", z}, {"a", a}, {"b", b}});
      CHECK(r.max_rel_error < kTol);
    }
    SUBCASE("flatten, scale, pick") {
      auto x = random_tensor({2, 2, 3}, seed);
      auto r = grad_check(
          [&](Tape& t) {
            auto f = flatten(t, x);
            return add(t, weighted_sum(t, scale(t, f, -1.7f), seed), pick(t, f, 5));
          },
          {{"x", x}});
      CHECK(r.max_rel_error < kTol);
    }
  }
}

TEST_CASE("frozen branches: a probe straddling a ReLU kink measures the active piece") {
  // x sits 1e-4 above the kink; a 1e-3 probe crosses it on the way down
  Tensor x({1}, 1e-4f);
  const auto f = [&](Tape& t) { return relu(t, x); };
  GradCheckOptions frozen;
  auto r = grad_check(f, {{"x", x}}, frozen);
  CHECK(r.max_rel_error < 1e-6);
  CHECK(r.kinks_straddled == 1);

  GradCheckOptions raw;
  raw.freeze_branches = false;
  auto naive = grad_check(f, {{"x", x}}, raw);
  CHECK(naive.max_rel_error > 0.4);  // (1e-3 + 1e-4) / 2e-3 vs 1
}

TEST_CASE("frozen branches: max-pool winner is held fixed") {
  // the winner leads by 5e-4, so the downward probe hands the max to its neighbour
  Tensor x({1, 1, 2, 2}, std::vector<float>{0.5f, 0.5005f, -1.0f, -1.0f});
  const auto f = [&](Tape& t) { return sum(t, max_pool2d(t, x, 2, 2)); };
  auto r = grad_check(f, {{"x", x}});
  CHECK(r.max_rel_error < 1e-4);
  CHECK(r.kinks_straddled == 2);  // the runner-up's upward probe also takes over

  GradCheckOptions raw;
  raw.freeze_branches = false;
  CHECK(grad_check(f, {{"x", x}}, raw).max_rel_error > 0.2);
}

TEST_CASE("BranchTrace replay rejects a different graph") {
  BranchTrace rec(BranchTrace::Kind::Record);
  Tape t(false);
  relu(t, Tensor({3}, 1.0f));
  rec.stop();
  BranchTrace replay(BranchTrace::Kind::Replay, &rec);
  CHECK_THROWS_AS(relu(t, Tensor({4}, 1.0f)), std::logic_error);
}
