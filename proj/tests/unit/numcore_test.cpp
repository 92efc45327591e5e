#include <cmath>
#include <random>

#include "doctest.h"
#include "opcrash/errors.hpp"
#include "opcrash/numcore/ops.hpp"
#include "opcrash/numcore/params.hpp"
#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"

using namespace opcrash;
using namespace opcrash::numcore;
using opcrash::testing::grad_check;
using opcrash::testing::op_cases;
using opcrash::testing::random_tensor;

namespace {

Tensor<double> triple_loop(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

Var<double> cvar(Tensor<double> t) { return Var<double>::constant(std::move(t)); }

}  // namespace

TEST_CASE("matmul: identity and hand-computed products") {
  auto eye = cvar(Tensor<double>::matrix(2, 2, {1, 0, 0, 1}));
  auto a = cvar(Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
  CHECK(matmul(eye, a).value() == a.value());
  auto ones = cvar(Tensor<double>::matrix(2, 1, {1, 1}));
  CHECK(matmul(a, ones).value() == Tensor<double>::matrix(2, 1, {3, 7}));
}

TEST_CASE("matmul: triple-loop oracle and shape errors") {
  std::mt19937_64 rng(7);
  auto a = random_tensor({5, 4}, rng);
  auto b = random_tensor({4, 3}, rng);
  CHECK(max_abs_diff(matmul(cvar(a), cvar(b)).value(), triple_loop(a, b)) < 1e-12);
  CHECK_THROWS_AS(matmul(cvar(a), cvar(a)), DimensionError);
}

TEST_CASE("matmul variants agree with explicit transposes") {
  std::mt19937_64 rng(3);
  auto a = random_tensor({6, 5}, rng);
  auto b = random_tensor({6, 4}, rng);
  auto c = random_tensor({3, 5}, rng);
  CHECK(max_abs_diff(matmul_tn(cvar(a), cvar(b)).value(),
                     matmul(transpose(cvar(a)), cvar(b)).value()) < 1e-12);
  CHECK(max_abs_diff(matmul_nt(cvar(a), cvar(c)).value(),
                     matmul(cvar(a), transpose(cvar(c))).value()) < 1e-12);
}

TEST_CASE("matmul is associative on random triples") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    auto a = cvar(random_tensor({7, 5}, rng));
    auto b = cvar(random_tensor({5, 6}, rng));
    auto c = cvar(random_tensor({6, 4}, rng));
    CHECK(max_abs_diff(matmul(matmul(a, b), c).value(), matmul(a, matmul(b, c)).value()) <
          1e-10);
  }
}

TEST_CASE("softmax: symmetry, shift invariance, direct formula") {
  auto zero = cvar(Tensor<double>::matrix(1, 3, {0, 0, 0}));
  auto s = softmax(zero, 1).value();
  for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  std::mt19937_64 rng(11);
  auto x = random_tensor({4, 6}, rng, -5, 5);
  auto shifted = x;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) shifted(i, j) += 100.0 * static_cast<double>(i);
  CHECK(max_abs_diff(softmax(cvar(x), 1).value(), softmax(cvar(shifted), 1).value()) < 1e-12);

  auto y = softmax(cvar(Tensor<double>::matrix(1, 3, {1, 2, 3})), 1).value();
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(std::abs(y[0] - std::exp(1.0) / z) < 1e-12);
  CHECK(std::abs(y[1] - std::exp(2.0) / z) < 1e-12);
  CHECK(std::abs(y[2] - std::exp(3.0) / z) < 1e-12);
}

TEST_CASE("softmax: slices sum to one along the chosen axis") {
  std::mt19937_64 rng(5);
  auto xd = random_tensor({9, 7}, rng, -8, 8);
  for (std::size_t axis : {0u, 1u}) {
    auto yd = softmax(cvar(xd), axis).value();
    auto yf = softmax(Var<float>::constant(xd.cast<float>()), axis).value();
    const std::size_t lines = axis == 1 ? 9 : 7;
    for (std::size_t l = 0; l < lines; ++l) {
      double sd = 0, sf = 0;
      for (std::size_t e = 0; e < (axis == 1 ? 7u : 9u); ++e) {
        sd += axis == 1 ? yd(l, e) : yd(e, l);
        sf += axis == 1 ? yf(l, e) : yf(e, l);
      }
      CHECK(std::abs(sd - 1.0) < 1e-12);
      CHECK(std::abs(sf - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("softmax: NaN input is a numeric error") {
  auto bad = cvar(Tensor<double>::matrix(1, 2, {0.0, std::nan("")}));
  CHECK_THROWS_AS(softmax(bad, 1), NumericError);
}

TEST_CASE("mlp_apply: constant, linear and two-layer forward oracle") {
  ParamStore<double> store;
  Rng rng(1);
  auto mlp = make_mlp<double>(store, "m", {3, 4, 2}, rng);
  for (auto& l : mlp.layers) l.weight.mutable_value().fill(0.0);
  mlp.layers.back().bias.mutable_value() = Tensor<double>::matrix(1, 2, {0.5, -1.5});
  auto x = cvar(Tensor<double>::matrix(2, 3, {1, 2, 3, -4, 5, 6}));
  auto y = mlp_apply(mlp, x).value();
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(y(i, 0) == 0.5);
    CHECK(y(i, 1) == -1.5);
  }

  ParamStore<double> s2;
  auto single = make_mlp<double>(s2, "s", {3, 2}, rng);
  single.layers[0].bias.mutable_value() = Tensor<double>::matrix(1, 2, {0.25, 0.75});
  auto expect = matmul(x, single.layers[0].weight).value();
  for (std::size_t i = 0; i < 2; ++i) {
    expect(i, 0) += 0.25;
    expect(i, 1) += 0.75;
  }
  CHECK(max_abs_diff(mlp_apply(single, x).value(), expect) < 1e-15);

  ParamStore<double> s3;
  auto two = make_mlp<double>(s3, "t", {3, 4, 2}, rng);
  for (auto& l : two.layers) {
    for (auto& v : l.bias.mutable_value().values()) v = 0.1;
  }
  const auto& w1 = two.layers[0].weight.value();
  const auto& w2 = two.layers[1].weight.value();
  auto got = mlp_apply(two, x).value();
  for (std::size_t i = 0; i < 2; ++i) {
    double h[4];
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.1;
      for (std::size_t p = 0; p < 3; ++p) s += x.value()(i, p) * w1(p, j);
      h[j] = 0.5 * s * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (s + 0.044715 * s * s * s)));
    }
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.1;
      for (std::size_t p = 0; p < 4; ++p) s += h[p] * w2(p, j);
      CHECK(std::abs(got(i, j) - s) < 1e-12);
    }
  }

  Mlp<double> broken{{two.layers[0], two.layers[0]}};
  CHECK_THROWS_AS(mlp_apply(broken, x), DimensionError);
}

TEST_CASE("layer_norm: constant row, moments, formula oracle") {
  auto gain = cvar(Tensor<double>({1, 4}, 1.0));
  auto bias = cvar(Tensor<double>({1, 4}, 0.0));
  auto flat = layer_norm(cvar(Tensor<double>({1, 4}, 3.0)), gain, bias).value();
  for (double v : flat.values()) CHECK(v == 0.0);

  std::mt19937_64 rng(2);
  auto x = random_tensor({5, 8}, rng, -3, 3);
  auto y = layer_norm(cvar(x), cvar(Tensor<double>({1, 8}, 1.0)), cvar(Tensor<double>({1, 8})))
               .value();
  for (std::size_t i = 0; i < 5; ++i) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < 8; ++j) mean += y(i, j) / 8;
    for (std::size_t j = 0; j < 8; ++j) var += (y(i, j) - mean) * (y(i, j) - mean) / 8;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-5);
  }

  auto row = Tensor<double>::matrix(1, 4, {1.0, 2.0, 4.0, 7.0});
  auto g = Tensor<double>::matrix(1, 4, {1.0, 0.5, -2.0, 3.0});
  auto b = Tensor<double>::matrix(1, 4, {0.0, 1.0, 0.5, -1.0});
  auto out = layer_norm(cvar(row), cvar(g), cvar(b)).value();
  const double mean = 3.5;
  const double var = (6.25 + 2.25 + 0.25 + 12.25) / 4.0;
  for (std::size_t j = 0; j < 4; ++j) {
    const double expect = (row[j] - mean) / std::sqrt(var + 1e-5) * g[j] + b[j];
    CHECK(std::abs(out[j] - expect) < 1e-10);
  }
}

TEST_CASE("backward: linear map gradient is the outer structure of x") {
  auto w = Var<double>::parameter(Tensor<double>::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  auto x = cvar(Tensor<double>::matrix(1, 2, {0.5, -2.0}));
  backward(sum(matmul(x, w)));
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(w.grad()(0, j) == 0.5);
    CHECK(w.grad()(1, j) == -2.0);
  }
}

TEST_CASE("backward: disconnected parameter stays zero; non-scalar loss rejected") {
  auto used = Var<double>::parameter(Tensor<double>({2, 2}, 1.0));
  auto unused = Var<double>::parameter(Tensor<double>({2, 2}, 1.0));
  backward(sum(used));
  bool zero = true;
  for (double v : unused.grad().values()) zero = zero && v == 0.0;
  CHECK(zero);
  CHECK_THROWS_AS(backward(used), DimensionError);
}

TEST_CASE("backward: gradients accumulate across passes and through shared nodes") {
  auto p = Var<double>::parameter(Tensor<double>::matrix(1, 2, {1.0, 2.0}));
  auto twice = add(p, p);
  backward(sum(twice));
  CHECK(p.grad()[0] == 2.0);
  backward(sum(p));
  CHECK(p.grad()[0] == 3.0);
  p.zero_grad();
  CHECK(p.grad()[0] == 0.0);
}

TEST_CASE("gradient check: every op against central differences over 10 seeds") {
  for (const auto& c : op_cases()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(1000 + seed);
      std::vector<Tensor<double>> inputs;
      for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, c.lo, c.hi));
      worst = std::max(worst, grad_check(c.fn, inputs, rng));
    }
    INFO(c.name << " worst relative error " << worst);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("determinism: identical seeds give bit-identical values and gradients") {
  auto run = [] {
    ParamStore<float> store;
    Rng rng(99);
    auto mlp = make_mlp<float>(store, "m", {4, 8, 3}, rng);
    auto x = Var<float>::constant(scaled_normal<float>({6, 4}, 1.0f, rng));
    auto y = mlp(x);
    backward(sum_squares(y));
    std::vector<Tensor<float>> grads;
    for (const auto& p : store.entries()) grads.push_back(p.var.grad());
    return std::make_pair(y.value(), grads);
  };
  auto [y1, g1] = run();
  auto [y2, g2] = run();
  CHECK(y1 == y2);
  CHECK(g1 == g2);
}

TEST_CASE("memory tracker: tagged allocations and scoped peaks") {
  auto& tracker = MemoryTracker::instance();
  const auto before = tracker.live(AllocTag::kAttention);
  PeakScope scope;
  {
    ScopedAllocTag tag(AllocTag::kAttention);
    Tensor<float> a({100, 10});
    CHECK(tracker.live(AllocTag::kAttention) - before == 4000);
    Tensor<float> copy = a;
    CHECK(tracker.live(AllocTag::kAttention) - before == 8000);
  }
  CHECK(tracker.live(AllocTag::kAttention) == before);
  CHECK(scope.report()[AllocTag::kAttention] == 8000);
}

TEST_CASE("memory tracker: graph values and released interior gradients") {
  PeakScope scope;
  auto p = Var<double>::parameter(Tensor<double>({10, 10}, 1.0));
  const auto live_before = MemoryTracker::instance().live_total();
  {
    auto loss = sum(gelu(affine(p, 2.0)));
    backward(loss);
  }
  // Only the parameter gradient survives the graph.
  CHECK(MemoryTracker::instance().live_total() - live_before == 800);
}
