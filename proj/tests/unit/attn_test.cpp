#include <numeric>
#include <random>

#include "doctest.h"
#include "opcrash/attn/attention.hpp"
#include "opcrash/errors.hpp"
#include "opcrash/numcore/ops.hpp"
#include "support/dense_oracle.hpp"
#include "support/gradcheck.hpp"

using namespace opcrash;
using namespace opcrash::attn;
using numcore::Tensor;
using numcore::Var;
namespace oc = opcrash::oracle;

namespace {

template <typename T>
Tensor<T> random_points(std::size_t n, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  numcore::Rng rng(seed);
  return numcore::scaled_normal<T>({n, c}, static_cast<T>(scale), rng);
}

template <typename T>
void set_identity(numcore::Linear<T>& l) {
  auto& w = l.weight.mutable_value();
  w.fill(T{0});
  for (std::size_t i = 0; i < std::min(w.rows(), w.cols()); ++i) w(i, i) = T{1};
  if (l.bias.valid()) l.bias.mutable_value().fill(T{0});
}

template <typename T>
Tensor<T> permute_rows(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = x(perm[i], j);
  return y;
}

std::vector<std::size_t> random_perm(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

template <typename T>
double max_abs(const Tensor<T>& a, const Tensor<T>& b) {
  return numcore::max_abs_diff(a, b);
}

}  // namespace

TEST_CASE("physics_attention: equal logits give uniform slices and identical rows") {
  numcore::ParamStore<double> store;
  numcore::Rng rng(4);
  auto p = make_physics_attention<double>(store, "pa", 4, 2, 3, rng);
  p.slice.weight.mutable_value().fill(0.0);
  set_identity(p.in_fx);
  set_identity(p.v);
  set_identity(p.out);
  p.q.weight.mutable_value().fill(0.0);
  p.k.weight.mutable_value().fill(0.0);
  auto x = Var<double>::constant(random_points<double>(5, 4, 8));
  PhysicsTrace<double> trace;
  auto y = physics_attention(x, p, &trace).value();
  REQUIRE(trace.slice_weights.size() == 2);
  for (const auto& s : trace.slice_weights)
    for (double v : s.values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-14));
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(y(i, j) - y(0, j)) < 1e-14);
  // Tokens are column means of X, each scattered back with weight 1/N per slice.
  double mean0 = 0;
  for (std::size_t i = 0; i < 5; ++i) mean0 += x.value()(i, 0) / 5.0;
  CHECK(std::abs(y(0, 0) - 3.0 * mean0 / 5.0) < 1e-12);
}

TEST_CASE("physics_attention: matches the explicit N×N operator oracle") {
  for (auto [n, m] : {std::pair<std::size_t, std::size_t>{4, 2}, {17, 3}, {32, 4}}) {
    numcore::ParamStore<float> store;
    numcore::Rng rng(n);
    auto p = make_physics_attention<float>(store, "pa", 8, 2, m, rng);
    auto x = random_points<float>(n, 8, 100 + n);
    auto y = physics_attention(Var<float>::constant(x), p).value();
    INFO("N=" << n);
    CHECK(oc::max_diff(y, oc::physics_attention(oc::to_mat(x), p)) < 1e-6);
  }
}

TEST_CASE("physics_attention: slice columns are normalised and nonnegative") {
  numcore::ParamStore<float> store;
  numcore::Rng rng(1);
  auto p = make_physics_attention<float>(store, "pa", 16, 4, 8, rng);
  PhysicsTrace<float> trace;
  physics_attention(Var<float>::constant(random_points<float>(200, 16, 3, 2.0)), p, &trace);
  REQUIRE(trace.slice_weights.size() == 4);
  for (const auto& s : trace.slice_weights) {
    for (std::size_t j = 0; j < s.cols(); ++j) {
      double total = 0;
      for (std::size_t i = 0; i < s.rows(); ++i) {
        CHECK(s(i, j) >= 0.0f);
        total += s(i, j);
      }
      CHECK(std::abs(total - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("physics_attention: configuration errors") {
  numcore::ParamStore<float> store;
  numcore::Rng rng(1);
  CHECK_THROWS_AS(make_physics_attention<float>(store, "a", 8, 2, 0, rng), ConfigError);
  CHECK_THROWS_AS(make_physics_attention<float>(store, "b", 8, 3, 2, rng), ConfigError);
  auto p = make_physics_attention<float>(store, "c", 8, 2, 2, rng);
  CHECK_THROWS_AS(physics_attention(Var<float>::constant(Tensor<float>({3, 5})), p),
                  DimensionError);
}

TEST_CASE("attention mechanisms are permutation equivariant in 32-bit") {
  numcore::ParamStore<float> store;
  numcore::Rng rng(21);
  auto pa = make_physics_attention<float>(store, "pa", 16, 4, 6, rng);
  auto fl = make_flare<float>(store, "fl", 16, 4, 6, rng);
  auto cr = make_cross_attention<float>(store, "cr", 16, 16, 4, rng);
  auto x = random_points<float>(40, 16, 5);
  auto ctx = Var<float>::constant(random_points<float>(5, 16, 6));
  auto perm = random_perm(40, 9);
  auto xp = permute_rows(x, perm);
  auto cx = Var<float>::constant(x), cxp = Var<float>::constant(xp);
  CHECK(max_abs(permute_rows(physics_attention(cx, pa).value(), perm),
                physics_attention(cxp, pa).value()) <= 1e-5);
  CHECK(max_abs(permute_rows(flare_route(cx, fl).value(), perm), flare_route(cxp, fl).value()) <=
        1e-5);
  CHECK(max_abs(permute_rows(cross_attention(cx, ctx, cr).value(), perm),
                cross_attention(cxp, ctx, cr).value()) <= 1e-5);
}

TEST_CASE("flare_route: a single latent collapses every row onto Z") {
  numcore::ParamStore<double> store;
  numcore::Rng rng(2);
  auto p = make_flare<double>(store, "fl", 6, 1, 1, rng);
  set_identity(p.out);
  auto x = random_points<double>(9, 6, 3);
  auto y = flare_route(Var<double>::constant(x), p).value();
  const auto v = oc::apply_linear(p.value, oc::to_mat(x));
  for (std::size_t j = 0; j < 6; ++j) {
    for (std::size_t i = 1; i < 9; ++i) CHECK(std::abs(y(i, j) - y(0, j)) < 1e-14);
    CHECK(y(0, j) >= v.col(j).minCoeff() - 1e-12);
    CHECK(y(0, j) <= v.col(j).maxCoeff() + 1e-12);
  }
}

TEST_CASE("flare_route: implied mixing operator has rank at most M") {
  numcore::ParamStore<double> store;
  numcore::Rng rng(17);
  const std::size_t n = 16, m = 4, c = 8, heads = 2;
  auto p = make_flare<double>(store, "fl", c, heads, m, rng);
  set_identity(p.out);
  auto x = random_points<double>(n, c, 44);
  auto y = oc::to_mat(flare_route(Var<double>::constant(x), p).value());
  const auto v = oc::apply_linear(p.value, oc::to_mat(x));
  const Eigen::Index d = c / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    const auto w = oc::flare_operator(oc::to_mat(x), p, h);
    // The routed output is exactly this operator applied to the values.
    CHECK((y.middleCols(d * h, d) - w * v.middleCols(d * h, d)).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::JacobiSVD<oc::Mat> svd(w);
    const auto sv = svd.singularValues();
    for (Eigen::Index i = m; i < sv.size(); ++i) CHECK(sv(i) < 1e-10 * sv(0));
    CHECK(sv(m - 1) > 1e-6 * sv(0));
  }
}

TEST_CASE("flare_route: matches the literal two-stage oracle") {
  for (std::size_t n : {5u, 16u, 32u}) {
    numcore::ParamStore<float> store;
    numcore::Rng rng(n);
    auto p = make_flare<float>(store, "fl", 8, 2, 4, rng);
    auto x = random_points<float>(n, 8, 7 * n);
    INFO("N=" << n);
    CHECK(oc::max_diff(flare_route(Var<float>::constant(x), p).value(),
                       oc::flare_route(oc::to_mat(x), p)) < 1e-6);
  }
}

TEST_CASE("cross_attention: single token, identical tokens, dense oracle") {
  numcore::ParamStore<double> store;
  numcore::Rng rng(5);
  auto p = make_cross_attention<double>(store, "cr", 8, 6, 2, rng);
  set_identity(p.out);
  auto x = Var<double>::constant(random_points<double>(7, 8, 1));
  auto one = random_points<double>(1, 6, 2);
  auto y = cross_attention(x, Var<double>::constant(one), p).value();
  const auto value = oc::apply_linear(p.v, oc::to_mat(one));
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(y(i, j) - value(0, j)) < 1e-14);

  Tensor<double> same({3, 6});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j) same(i, j) = one(0, j);
  CHECK(max_abs(cross_attention(x, Var<double>::constant(same), p).value(), y) < 1e-14);

  numcore::ParamStore<float> fstore;
  auto pf = make_cross_attention<float>(fstore, "cr", 8, 8, 2, rng);
  auto xf = random_points<float>(8, 8, 3);
  auto ctx = random_points<float>(3, 8, 4);
  CHECK(oc::max_diff(cross_attention(Var<float>::constant(xf), Var<float>::constant(ctx), pf).value(),
                     oc::cross_attention(oc::to_mat(xf), oc::to_mat(ctx), pf)) < 1e-6);

  CHECK_THROWS_AS(cross_attention(x, Var<double>::constant(Tensor<double>({0, 6})), p),
                  ConfigError);
  CHECK_THROWS_AS(cross_attention(x, Var<double>{}, p), ConfigError);
}

TEST_CASE("gated block: zero gate averages, saturated gates select one branch") {
  numcore::ParamStore<double> store;
  numcore::Rng rng(8);
  BlockConfig cfg{SelfAttentionKind::kFlare, true, 8, 2, 3, 8};
  auto b = make_block<double>(store, "b", cfg, rng);
  CHECK(b.gate.value()[0] == 0.0);
  auto h = Var<double>::constant(random_points<double>(6, 8, 1));
  auto ctx = Var<double>::constant(random_points<double>(4, 8, 2));
  auto self = flare_route(h, *b.flare).value();
  auto cross = cross_attention(h, ctx, *b.cross).value();
  auto mixed = mixed_attention(h, ctx, b).value();
  for (std::size_t i = 0; i < mixed.size(); ++i)
    CHECK(std::abs(mixed[i] - 0.5 * (self[i] + cross[i])) < 1e-15);
  CHECK(mixed_attention(h, ctx, b, BlockOptions{1.0}).value() == self);
  CHECK(mixed_attention(h, ctx, b, BlockOptions{0.0}).value() == cross);
}

TEST_CASE("attention_block: matches the scripted oracle for every variant") {
  const BlockConfig configs[] = {
      {SelfAttentionKind::kPhysics, false, 8, 2, 3, 0},
      {SelfAttentionKind::kPhysics, true, 8, 2, 3, 8},
      {SelfAttentionKind::kFlare, true, 8, 2, 3, 8},
  };
  int idx = 0;
  for (const auto& cfg : configs) {
    numcore::ParamStore<float> store;
    numcore::Rng rng(30 + idx);
    auto b = make_block<float>(store, "b", cfg, rng);
    if (b.cross) b.gate.mutable_value()[0] = 0.3f;
    auto x = random_points<float>(8, 8, 50 + idx);
    auto ctx = random_points<float>(4, 8, 60 + idx);
    auto y = attention_block(Var<float>::constant(x), Var<float>::constant(ctx), b).value();
    INFO("variant " << idx);
    CHECK(oc::max_diff(y, oc::attention_block(oc::to_mat(x), oc::to_mat(ctx), b)) < 1e-6);
    ++idx;
  }
}

TEST_CASE("attention_block: gradients match finite differences in 64-bit") {
  for (auto kind : {SelfAttentionKind::kPhysics, SelfAttentionKind::kFlare}) {
    numcore::ParamStore<double> store;
    numcore::Rng rng(3);
    auto b = make_block<double>(store, "b", {kind, true, 8, 2, 3, 4}, rng);
    b.gate.mutable_value()[0] = -0.4;
    std::mt19937_64 gen(12);
    auto x = testing::random_tensor({6, 8}, gen);
    auto ctx = testing::random_tensor({3, 4}, gen);
    auto fn = [&b](const std::vector<Var<double>>& in) {
      return attention_block(in[0], in[1], b);
    };
    CHECK(testing::grad_check(fn, {x, ctx}, gen) < 1e-4);

    auto xv = Var<double>::constant(x), cv = Var<double>::constant(ctx);
    const double worst =
        testing::param_grad_check(store, [&] { return attention_block(xv, cv, b); }, gen);
    CHECK(worst < 1e-4);
  }
}
