#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "opcrash/crashdata/crashdata.hpp"
#include "opcrash/model/model.hpp"
#include "opcrash/numcore/params.hpp"
#include "opcrash/temporal/temporal.hpp"

namespace opcrash::trainer {

using numcore::Tensor;

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over every entry of a parameter store. Moments live
/// under the optimiser allocation tag.
class Adam {
 public:
  Adam(numcore::ParamStore<float>& params, AdamHyper hyper);

  /// Applies one update with learning rate `lr`, scaling gradients by
  /// `grad_scale` first. Returns false and leaves parameters and moments
  /// untouched when any gradient is non-finite; `diagnostic()` then names it.
  bool step(double lr, double grad_scale = 1.0);
  std::uint64_t steps() const { return t_; }
  const std::string& diagnostic() const { return diagnostic_; }
  const std::vector<Tensor<double>>& first_moments() const { return m_; }
  const std::vector<Tensor<double>>& second_moments() const { return v_; }

 private:
  numcore::ParamStore<float>& params_;
  AdamHyper hyper_;
  std::vector<Tensor<double>> m_, v_;
  std::uint64_t t_ = 0;
  std::string diagnostic_;
};

/// Cosine decay from `lr` to `lr_min` over `total` steps.
double cosine_lr(double lr, double lr_min, std::uint64_t step, std::uint64_t total);

struct TrainConfig {
  temporal::StrategyKind strategy = temporal::StrategyKind::kOneShot;
  model::Backbone backbone = model::Backbone::kGeoTSFlare;
  AdamHyper adam;
  double lr_min = 1e-5;
  std::size_t epochs = 200;
  std::size_t accumulation = 4;   // trajectories per optimiser step
  std::uint64_t seed = 0;
  std::size_t eval_every = 10;    // 0 disables validation
  temporal::LossForm loss = temporal::LossForm::kL2Sum;
  std::size_t time_samples = 8;   // time-conditional queries per trajectory
  std::size_t ar_truncation = 0;  // AR unroll backprop window; 0 is full horizon
  std::size_t max_train = 0;      // 0 uses the whole split
  bool save_checkpoints = true;

  // Model shape.
  std::size_t tokens = 32, layers = 3, heads = 4, channels = 64, context_anchors = 32;
  std::vector<geo::BallScale> scales{{0.05, 8}, {0.25, 32}};

  void validate() const;
  model::ModelConfig model_config(const crashdata::DatasetFile& data) const;
};

/// Flat `key = value` lines; `#` starts a comment. Unknown keys and bad values
/// throw ConfigError. Without a `seed` key the OPCRASH_SEED environment
/// variable is used when set.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
/// Documented keys with their current values, in file order.
std::string format_train_config(const TrainConfig& c);

/// One sample with its model inputs prepared.
struct PreparedSample {
  temporal::Trajectory trajectory;
  model::SampleGeometry geometry;
  std::vector<std::size_t> probes;
};

/// Stats rounded through float32 so they survive a checkpoint bit-exactly.
crashdata::NormStats checkpoint_stats(const crashdata::NormStats& stats);

/// Zero mean, unit deviation per column; near-constant columns are only centred.
void standardize_columns(numcore::Tensor<double>& a);

/// Unit-box cloud, normalised features/globals/bc, standardised static inputs.
PreparedSample prepare(const model::ModelConfig& config, const crashdata::NormStats& stats,
                       const crashdata::SampleRecord& record, double dt);

struct EpochRecord {
  std::size_t epoch = 0;
  double wall_seconds = 0;
  double train_loss = 0;               // mean per-trajectory loss
  std::optional<double> val_rel_l2;    // when validated this epoch
  std::int64_t peak_bytes = 0;         // tracker peak over the epoch
  std::uint64_t model_calls = 0;
  double lr = 0;
  std::size_t rejected_steps = 0;
  std::size_t diverged = 0;            // AR trajectories that blew up
  std::optional<std::size_t> divergence_step;
  bool unstable() const { return diverged > 0; }
};

/// Append-only JSON-lines ledger.
class RunLedger {
 public:
  RunLedger() = default;
  explicit RunLedger(std::filesystem::path path);
  void append(const EpochRecord& r);
  const std::vector<EpochRecord>& records() const { return records_; }
  static std::string format(const EpochRecord& r, bool with_timing = true);

 private:
  std::optional<std::filesystem::path> path_;
  std::vector<EpochRecord> records_;
};

struct TrainResult {
  RunLedger ledger;
  std::unique_ptr<model::Model<float>> model;
  crashdata::NormStats stats;
  std::optional<double> best_val;
  std::size_t best_epoch = 0;
};

/// Trains on `train`, validating on `val` (may be empty) every
/// `eval_every` epochs. With `out_dir` set, writes ledger.jsonl, config.txt,
/// best.opck and last.opck there.
TrainResult train(const TrainConfig& config, const crashdata::DatasetFile& train,
                  const crashdata::DatasetFile& val,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Loss of one trajectory under the configured strategy; the graph is left
/// ready for backward.
numcore::Var<float> trajectory_loss(const TrainConfig& config, const model::Model<float>& m,
                                    const PreparedSample& s, const temporal::Scaling& scaling,
                                    numcore::Rng& rng);

struct SampleMetrics {
  crashdata::DesignConfig config;
  temporal::KinematicsMetrics metrics;
  std::uint64_t model_calls = 0;
  std::optional<std::size_t> diverged_at;
};

struct EvalRecord {
  std::string split;
  std::vector<SampleMetrics> samples;
  std::vector<double> rel_l2_per_step;  // mean over finite samples
  double rel_l2 = 0;                    // mean of per-sample aggregates
  double position_mse = 0;
  double probe_position_mse = 0, probe_velocity_mse = 0, probe_acceleration_mse = 0;
  std::size_t unstable = 0;
};

/// Produces a full-horizon prediction for one sample.
using Predictor = std::function<temporal::TrajectoryPrediction(const PreparedSample&)>;

/// Inference predictor for a trained model: one-shot, all-steps
/// time-conditional, or autoregressive rollout for acceleration heads.
Predictor model_predictor(const model::Model<float>& m, temporal::StrategyKind strategy,
                          const temporal::Scaling& scaling);

EvalRecord evaluate(const Predictor& predictor, const std::vector<PreparedSample>& samples,
                    std::span<const crashdata::DesignConfig> configs, std::string split);

/// Model, strategy and stats as restored from a checkpoint.
struct LoadedRun {
  std::unique_ptr<model::Model<float>> model;
  temporal::StrategyKind strategy = temporal::StrategyKind::kOneShot;
  crashdata::NormStats stats;
};

void save_run(const std::filesystem::path& path, const model::Model<float>& m,
              temporal::StrategyKind strategy, const crashdata::NormStats& stats);
LoadedRun load_run(const std::filesystem::path& path);

EvalRecord evaluate_run(const LoadedRun& run, const crashdata::DatasetFile& split);

std::string eval_json(const EvalRecord& r);
/// Tab-separated step, time (ms), mean relative L2.
std::string per_step_table(const EvalRecord& r, double dt);

}  // namespace opcrash::trainer
