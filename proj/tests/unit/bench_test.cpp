#include <cmath>

#include "doctest.h"
#include "opcrash/bench/bench.hpp"
#include "opcrash/errors.hpp"

using namespace opcrash;
using namespace opcrash::bench;
using model::Backbone;

namespace {

crashdata::DatasetFile tiny_train(std::size_t frames) {
  crashdata::GenerateOptions o;
  o.nodes = 96;
  o.sim.frames = frames;
  o.seed = 5;
  auto set = crashdata::generate_doe(crashdata::DoeLevels{}.truncated(3, 2, 1), o);
  return set.files[static_cast<int>(crashdata::Split::kTrain)];
}

EpochOptions tiny_epoch_options() {
  EpochOptions o;
  auto& c = o.base;
  c.tokens = 4;
  c.layers = 1;
  c.heads = 2;
  c.channels = 16;
  c.context_anchors = 8;
  c.scales = {{0.1, 4}, {0.3, 8}};
  c.time_samples = 3;
  c.max_train = 3;
  c.seed = 2;
  o.epochs = 5;
  o.tc_queries = 3;
  return o;
}

}  // namespace

TEST_CASE("fit_quadratic recovers exact coefficients and rejects degenerate sweeps") {
  const std::vector<double> n{1024, 2048, 4096, 8192};
  std::vector<double> y;
  for (double x : n) y.push_back(3e-4 * x * x + 250 * x + 7000);
  const auto fit = fit_quadratic(n, y);
  CHECK(fit.a == doctest::Approx(3e-4).epsilon(1e-9));
  CHECK(fit.b == doctest::Approx(250).epsilon(1e-9));
  CHECK(fit.c == doctest::Approx(7000).epsilon(1e-6));
  // Oracle: |a|·N²/|b·N| at N = 8192.
  CHECK(fit.quadratic_fraction(8192) == doctest::Approx(3e-4 * 8192 / 250).epsilon(1e-9));

  std::vector<double> lin;
  for (double x : n) lin.push_back(96 * x + 4096);
  const auto lf = fit_quadratic(n, lin);
  CHECK(std::abs(lf.a) * 8192 * 8192 < 1e-6 * 96 * 8192);
  CHECK(lf.quadratic_fraction(8192) < 1e-9);

  CHECK_THROWS_AS(fit_quadratic({1, 1, 2, 2}, {1, 2, 3, 4}), ConfigError);
  CHECK_THROWS_AS(fit_quadratic({1, 2, 3}, {1, 2}), DimensionError);
}

TEST_CASE("median of odd, even and empty samples") {
  CHECK(median({3, 1, 2}) == 2);
  CHECK(median({4, 1, 3, 2}) == 2.5);
  CHECK(std::isnan(median({})));
}

TEST_CASE("block peak memory is linear in N and repeatable") {
  const std::vector<std::size_t> ns{64, 128, 256, 512};
  for (auto b : {Backbone::kTS, Backbone::kGeoTS, Backbone::kGeoTSFlare}) {
    CAPTURE(model::to_string(b));
    std::vector<double> xs, ys;
    for (auto n : ns) {
      const auto p = measure_block_peak(b, n, 8, 16, 2, 6, 1);
      CHECK(p.attention_bytes > 0);
      CHECK(p.total_bytes >= p.attention_bytes);
      xs.push_back(static_cast<double>(n));
      ys.push_back(static_cast<double>(p.attention_bytes));
    }
    CHECK(fit_quadratic(xs, ys).quadratic_fraction(512) < 0.05);
    // Bit-exact on a rerun.
    CHECK(measure_block_peak(b, 512, 8, 16, 2, 6, 1).attention_bytes == ys.back());
    // More slice or latent tokens never shrink the peak.
    CHECK(measure_block_peak(b, 512, 16, 16, 2, 6, 1).attention_bytes >= ys.back());
  }
}

TEST_CASE("run_bench_mem: ordering of the geometry-aware backbones and report shape") {
  MemOptions o;
  o.ns = {64, 128, 192, 256};
  o.m = 8;
  o.channels = 16;
  o.heads = 2;
  o.context_tokens = 6;
  const auto r = run_bench_mem(o);
  REQUIRE(r.backbones.size() == 3);
  CHECK(r.points.size() == 3 * 5);
  CHECK(r.geots_over_flare >= 1.0);
  for (const auto& b : r.backbones) {
    CHECK(b.quadratic_fraction < 0.05);
    CHECK(b.m_doubling_ratio >= 1.0);
  }
  const auto json = to_json(r);
  CHECK(json.find("\"geots_over_geots_flare\"") != std::string::npos);
  CHECK(to_json(run_bench_mem(o)) == json);

  o.ns = {64, 128, 256};
  CHECK_THROWS_AS(run_bench_mem(o), ConfigError);
}

TEST_CASE("run_bench_epoch: inference call counts and strategy ordering") {
  const auto train = tiny_train(8);
  const auto o = tiny_epoch_options();
  const auto r = run_bench_epoch(o, train);
  REQUIRE(r.strategies.size() == 3);
  CHECK(r.calls_match);
  CHECK(r.strategies[0].inference_calls == 1);
  CHECK(r.strategies[1].inference_calls == 3);
  CHECK(r.strategies[2].inference_calls == 8);
  CHECK(r.strategies[0].train_calls_per_epoch == 3);
  CHECK(r.strategies[1].train_calls_per_epoch == 9);
  CHECK(r.strategies[2].train_calls_per_epoch == 24);
  for (const auto& s : r.strategies) CHECK(s.epoch_seconds.size() == 5);
  CHECK(r.ordered);

  auto few = o;
  few.epochs = 2;
  CHECK_THROWS_AS(run_bench_epoch(few, train), ConfigError);
  CHECK_THROWS_AS(run_bench_epoch(o, crashdata::DatasetFile{}), ConfigError);
}

TEST_CASE("run_bench_epoch: a one-step horizon puts every strategy within 2x") {
  const auto train = tiny_train(1);
  auto o = tiny_epoch_options();
  o.tc_queries = 1;
  const auto r = run_bench_epoch(o, train);
  CHECK(r.calls_match);
  double lo = INFINITY, hi = 0;
  for (const auto& s : r.strategies) {
    CHECK(s.inference_calls == 1);
    lo = std::min(lo, s.median_seconds);
    hi = std::max(hi, s.median_seconds);
  }
  CHECK(hi < 2 * lo);
}
