#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "opcrash/crashdata/crashdata.hpp"
#include "opcrash/model/model.hpp"
#include "opcrash/trainer/trainer.hpp"

namespace opcrash::bench {

/// Least-squares fit peak ≈ a·N² + b·N + c.
struct QuadraticFit {
  double a = 0, b = 0, c = 0;
  /// |a|·N² / |b·N|: share of the quadratic term relative to the linear one.
  double quadratic_fraction(double n) const;
};

/// Throws ConfigError with fewer than three distinct abscissae.
QuadraticFit fit_quadratic(const std::vector<double>& n, const std::vector<double>& y);

struct MemPoint {
  model::Backbone backbone = model::Backbone::kTS;
  std::size_t n = 0, m = 0;
  std::int64_t attention_bytes = 0;  // peak under the attention tag
  std::int64_t total_bytes = 0;      // peak over every tag inside the scope
};

/// Forward plus backward through one transformer block of `backbone`
/// (context bank of `context_tokens` rows for the geometry-aware ones).
MemPoint measure_block_peak(model::Backbone backbone, std::size_t n, std::size_t m,
                            std::size_t channels, std::size_t heads, std::size_t context_tokens,
                            std::uint64_t seed);

struct MemOptions {
  std::vector<std::size_t> ns{1024, 2048, 4096, 8192};
  std::size_t m = 128, channels = 256, heads = 8, context_tokens = 34;
  std::vector<model::Backbone> backbones{model::Backbone::kTS, model::Backbone::kGeoTS,
                                         model::Backbone::kGeoTSFlare};
  bool m_probe = true;  // repeat the largest N with 2M
  std::uint64_t seed = 0;
};

struct BackboneMem {
  model::Backbone backbone;
  QuadraticFit fit;
  double quadratic_fraction = 0;   // at the largest N
  double m_doubling_ratio = 0;     // peak(2M) / peak(M) at the largest N; 0 if not probed
};

struct MemReport {
  MemOptions options;
  std::vector<MemPoint> points;
  std::vector<BackboneMem> backbones;
  double geots_over_flare = 0;  // peak ratio at the largest N, when both were measured
};

MemReport run_bench_mem(const MemOptions& options);
std::string to_json(const MemReport& r);

struct EpochOptions {
  trainer::TrainConfig base;  // strategy is overridden per run
  std::vector<temporal::StrategyKind> strategies{temporal::StrategyKind::kOneShot,
                                                 temporal::StrategyKind::kTimeConditional,
                                                 temporal::StrategyKind::kAutoregressive};
  std::size_t epochs = 3;
  std::size_t tc_queries = 8;  // query count for the time-conditional inference probe
};

struct StrategyCost {
  temporal::StrategyKind strategy;
  std::vector<double> epoch_seconds;
  double median_seconds = 0;
  std::uint64_t train_calls_per_epoch = 0;
  std::uint64_t inference_calls = 0;   // one sample
  std::uint64_t expected_inference_calls = 0;
  bool unstable = false;
};

struct CostReport {
  std::size_t steps = 0, train_samples = 0;
  std::vector<StrategyCost> strategies;
  /// Medians strictly increase in the order the strategies were listed.
  bool ordered = false;
  bool calls_match = false;
};

/// Times `epochs` training epochs per strategy on `train` with validation and
/// checkpointing off, then counts inference calls on the first sample.
CostReport run_bench_epoch(const EpochOptions& options, const crashdata::DatasetFile& train);
std::string to_json(const CostReport& r);

double median(std::vector<double> v);

}  // namespace opcrash::bench
