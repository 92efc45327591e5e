#include "opcrash/bench/bench.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <set>

#include <json.hpp>

#include "opcrash/attn/attention.hpp"
#include "opcrash/errors.hpp"
#include "opcrash/numcore/memory.hpp"
#include "opcrash/numcore/ops.hpp"

namespace opcrash::bench {

using numcore::Tensor;
using numcore::Var;
using J = nlohmann::ordered_json;

double QuadraticFit::quadratic_fraction(double n) const {
  const double lin = std::abs(b * n);
  return lin == 0 ? INFINITY : std::abs(a) * n * n / lin;
}

QuadraticFit fit_quadratic(const std::vector<double>& n, const std::vector<double>& y) {
  if (n.size() != y.size()) throw DimensionError("fit_quadratic: length mismatch");
  if (std::set<double>(n.begin(), n.end()).size() < 3) {
    throw ConfigError("fit_quadratic needs at least three distinct N values");
  }
  // Normal equations in a rescaled abscissa for conditioning.
  const double s = *std::max_element(n.begin(), n.end());
  std::array<std::array<double, 4>, 3> aug{};
  for (std::size_t i = 0; i < n.size(); ++i) {
    const double u = n[i] / s;
    const double basis[3] = {u * u, u, 1.0};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) aug[r][c] += basis[r] * basis[c];
      aug[r][3] += basis[r] * y[i];
    }
  }
  for (int col = 0; col < 3; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 3; ++r)
      if (std::abs(aug[r][col]) > std::abs(aug[pivot][col])) pivot = r;
    std::swap(aug[col], aug[pivot]);
    for (int r = 0; r < 3; ++r) {
      if (r == col) continue;
      const double f = aug[r][col] / aug[col][col];
      for (int c = col; c < 4; ++c) aug[r][c] -= f * aug[col][c];
    }
  }
  return {aug[0][3] / aug[0][0] / (s * s), aug[1][3] / aug[1][1] / s, aug[2][3] / aug[2][2]};
}

MemPoint measure_block_peak(model::Backbone backbone, std::size_t n, std::size_t m,
                            std::size_t channels, std::size_t heads, std::size_t context_tokens,
                            std::uint64_t seed) {
  numcore::Rng rng(seed);
  numcore::ParamStore<float> store;
  attn::BlockConfig cfg;
  cfg.self_kind = backbone == model::Backbone::kGeoTSFlare ? attn::SelfAttentionKind::kFlare
                                                           : attn::SelfAttentionKind::kPhysics;
  cfg.with_context = backbone != model::Backbone::kTS;
  cfg.channels = channels;
  cfg.heads = heads;
  cfg.tokens = m;
  cfg.context_width = channels;
  const auto block = attn::make_block(store, "block", cfg, rng);
  const auto x = Var<float>::parameter(numcore::scaled_normal<float>({n, channels}, 1.0f, rng));
  Var<float> ctx;
  if (cfg.with_context) {
    numcore::ScopedAllocTag tag(numcore::AllocTag::kContext);
    ctx = Var<float>::constant(numcore::scaled_normal<float>({context_tokens, channels}, 1.0f, rng));
  }
  MemPoint p{backbone, n, m, 0, 0};
  {
    numcore::PeakScope scope;
    {
      const auto y = attn::attention_block(x, ctx, block);
      numcore::backward(numcore::sum(y));
    }
    const auto rep = scope.report();
    p.attention_bytes = rep[numcore::AllocTag::kAttention];
    p.total_bytes = rep.peak_total;
  }
  return p;
}

MemReport run_bench_mem(const MemOptions& o) {
  if (o.ns.size() < 4) throw ConfigError("bench-mem needs at least four N values");
  MemReport r;
  r.options = o;
  const std::size_t n_max = *std::max_element(o.ns.begin(), o.ns.end());
  std::vector<std::pair<model::Backbone, std::int64_t>> at_max;
  for (auto b : o.backbones) {
    std::vector<double> xs, ys;
    std::int64_t peak_max = 0;
    for (auto n : o.ns) {
      const auto p = measure_block_peak(b, n, o.m, o.channels, o.heads, o.context_tokens, o.seed);
      r.points.push_back(p);
      xs.push_back(static_cast<double>(n));
      ys.push_back(static_cast<double>(p.attention_bytes));
      if (n == n_max) peak_max = p.attention_bytes;
    }
    BackboneMem bm{b, fit_quadratic(xs, ys), 0, 0};
    bm.quadratic_fraction = bm.fit.quadratic_fraction(static_cast<double>(n_max));
    if (o.m_probe) {
      const auto p2 = measure_block_peak(b, n_max, 2 * o.m, o.channels, o.heads, o.context_tokens, o.seed);
      r.points.push_back(p2);
      bm.m_doubling_ratio = static_cast<double>(p2.attention_bytes) / static_cast<double>(peak_max);
    }
    r.backbones.push_back(bm);
    at_max.emplace_back(b, peak_max);
  }
  auto find = [&](model::Backbone b) -> std::int64_t {
    for (const auto& [k, v] : at_max)
      if (k == b) return v;
    return 0;
  };
  if (find(model::Backbone::kGeoTS) && find(model::Backbone::kGeoTSFlare)) {
    r.geots_over_flare = static_cast<double>(find(model::Backbone::kGeoTS)) /
                         static_cast<double>(find(model::Backbone::kGeoTSFlare));
  }
  return r;
}

std::string to_json(const MemReport& r) {
  J j;
  j["method"] = "logical bytes from the allocation tracker, attention tag, forward+backward of one block";
  j["m"] = r.options.m;
  j["channels"] = r.options.channels;
  j["heads"] = r.options.heads;
  j["context_tokens"] = r.options.context_tokens;
  J pts = J::array();
  for (const auto& p : r.points) {
    pts.push_back({{"backbone", model::to_string(p.backbone)},
                   {"n", p.n},
                   {"m", p.m},
                   {"attention_bytes", p.attention_bytes},
                   {"total_bytes", p.total_bytes}});
  }
  j["points"] = pts;
  J fits = J::array();
  for (const auto& b : r.backbones) {
    fits.push_back({{"backbone", model::to_string(b.backbone)},
                    {"a", b.fit.a},
                    {"b", b.fit.b},
                    {"c", b.fit.c},
                    {"quadratic_fraction", b.quadratic_fraction},
                    {"m_doubling_ratio", b.m_doubling_ratio}});
  }
  j["fits"] = fits;
  j["geots_over_geots_flare"] = r.geots_over_flare;
  j["reference_ratio"] = 2.0;
  return j.dump(2);
}

double median(std::vector<double> v) {
  if (v.empty()) return NAN;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

CostReport run_bench_epoch(const EpochOptions& o, const crashdata::DatasetFile& train) {
  if (train.samples.empty()) throw ConfigError("bench-epoch needs a non-empty training split");
  if (o.epochs < 3) throw ConfigError("bench-epoch measures at least three epochs");
  CostReport rep;
  rep.steps = train.steps;
  rep.calls_match = true;
  for (auto s : o.strategies) {
    auto cfg = o.base;
    cfg.strategy = s;
    cfg.epochs = o.epochs;
    cfg.eval_every = 0;
    cfg.save_checkpoints = false;
    const auto run = trainer::train(cfg, train, crashdata::DatasetFile{});
    rep.train_samples = cfg.max_train ? std::min(cfg.max_train, train.samples.size()) : train.samples.size();
    StrategyCost c{s, {}, 0, 0, 0, 0, false};
    for (const auto& e : run.ledger.records()) {
      c.epoch_seconds.push_back(e.wall_seconds);
      c.unstable = c.unstable || e.unstable();
    }
    c.median_seconds = median(c.epoch_seconds);
    c.train_calls_per_epoch = run.ledger.records().front().model_calls;

    // Inference cost on one sample: 1 / |queries| / T calls.
    const auto sample = trainer::prepare(run.model->config(), run.stats, train.samples[0], train.dt);
    const auto f = temporal::bind_model(*run.model, sample.geometry);
    const auto scaling = run.stats.scaling();
    run.model->reset_calls();
    try {
      switch (s) {
        case temporal::StrategyKind::kOneShot:
          temporal::predict_oneshot(f, sample.trajectory, scaling);
          c.expected_inference_calls = 1;
          break;
        case temporal::StrategyKind::kTimeConditional: {
          std::vector<double> times;
          for (std::size_t q = 0; q < o.tc_queries; ++q) {
            times.push_back(train.dt * static_cast<double>(train.steps) * static_cast<double>(q + 1) /
                            static_cast<double>(o.tc_queries));
          }
          temporal::query_times(f, sample.trajectory, scaling, times);
          c.expected_inference_calls = o.tc_queries;
          break;
        }
        case temporal::StrategyKind::kAutoregressive:
        case temporal::StrategyKind::kTeacherForcing:
          temporal::rollout_ar(f, sample.trajectory, scaling, temporal::RolloutMode::kInference);
          c.expected_inference_calls = train.steps;
          break;
      }
    } catch (const DivergenceError&) {
      c.unstable = true;
    }
    c.inference_calls = run.model->calls();
    rep.calls_match = rep.calls_match && (c.unstable || c.inference_calls == c.expected_inference_calls);
    rep.strategies.push_back(std::move(c));
  }
  rep.ordered = true;
  for (std::size_t k = 1; k < rep.strategies.size(); ++k) {
    rep.ordered = rep.ordered && rep.strategies[k - 1].median_seconds < rep.strategies[k].median_seconds;
  }
  return rep;
}

std::string to_json(const CostReport& r) {
  J j;
  j["steps"] = r.steps;
  j["train_samples"] = r.train_samples;
  J arr = J::array();
  for (const auto& s : r.strategies) {
    arr.push_back({{"strategy", temporal::to_string(s.strategy)},
                   {"epoch_seconds", s.epoch_seconds},
                   {"median_seconds", s.median_seconds},
                   {"train_calls_per_epoch", s.train_calls_per_epoch},
                   {"inference_calls", s.inference_calls},
                   {"expected_inference_calls", s.expected_inference_calls},
                   {"unstable", s.unstable}});
  }
  j["strategies"] = arr;
  j["ordered"] = r.ordered;
  j["calls_match"] = r.calls_match;
  return j.dump(2);
}

}  // namespace opcrash::bench
