#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "opcrash/model/model.hpp"
#include "opcrash/numcore/tensor.hpp"

namespace opcrash::temporal {

using numcore::Tensor;
using numcore::Var;

enum class StrategyKind { kAutoregressive, kTeacherForcing, kOneShot, kTimeConditional };

std::string to_string(StrategyKind k);
/// Accepts "ar", "tf"/"teacher-forcing", "oneshot"/"one-shot", "time"/"time-conditional".
StrategyKind parse_strategy(std::string_view s);
model::OutputMode output_mode(StrategyKind k);

/// Ground truth for one sample in physical units (mm, ms).
struct Trajectory {
  Tensor<double> positions;  // (T+1) × N × 3
  Tensor<double> v0;         // N × 3
  double dt = 1.0;
  Tensor<double> features;   // N × F
  std::vector<double> globals;
  std::vector<double> bc;

  std::size_t steps() const { return positions.shape().at(0) - 1; }
  std::size_t points() const { return positions.shape().at(1); }
  /// Copy of frame t as N × 3.
  Tensor<double> frame(std::size_t t) const;
};

/// Per-axis scales between physical quantities and the model's normalised
/// inputs/outputs. Losses divide position errors by `position`.
struct Scaling {
  std::array<double, 3> position{1, 1, 1};
  std::array<double, 3> displacement{1, 1, 1};
  std::array<double, 3> velocity{1, 1, 1};
  std::array<double, 3> acceleration{1, 1, 1};
};

/// One model invocation on N × dynamic_width inputs, returning normalised
/// per-point outputs.
template <typename T>
using ModelFn = std::function<Var<T>(const Var<T>& dynamic)>;

/// Binds a model to one sample; the context bank is built once here and
/// shared by every call.
template <typename T>
ModelFn<T> bind_model(const model::Model<T>& m, const model::SampleGeometry& sample);

/// Semi-implicit Euler: v' = v + dt·a, x' = x + dt·v'.
template <typename T>
std::pair<Var<T>, Var<T>> euler_step(const Var<T>& x, const Var<T>& v, const Var<T>& a, T dt);
void euler_step(std::span<double> x, std::span<double> v, std::span<const double> a, double dt);

enum class RolloutMode { kTrainUnroll, kInference };

/// Predicted states for steps 1..T (index t-1), physical units.
template <typename T>
struct Rollout {
  std::vector<Var<T>> positions;
  std::vector<Var<T>> velocities;     // AR / teacher forcing only
  std::vector<Var<T>> accelerations;  // AR / teacher forcing only
  std::vector<std::size_t> steps;     // frame index of every entry
  std::uint64_t model_calls = 0;
};

/// Dynamic inputs of the acceleration model: displacement of the last state
/// from x(0) and the finite-difference velocity between the last two states,
/// both normalised.
template <typename T>
Var<T> ar_inputs(const Var<T>& x_prev, const Var<T>& x_prev2, const Var<T>& x0, double dt,
                 const Scaling& s);

/// Autoregressive rollout from x(0) and V0. Training mode keeps the whole
/// unrolled graph unless `truncation` > 0, which cuts the carried state every
/// `truncation` steps; inference cuts it after every step. A non-finite state
/// (or a non-finite model evaluation) throws DivergenceError with its step.
template <typename T>
Rollout<T> rollout_ar(const ModelFn<T>& f, const Trajectory& traj, const Scaling& s,
                      RolloutMode mode, std::size_t truncation = 0);

/// Each step starts from the true previous state and the finite-difference
/// true velocity (V0 at the first step). Steps share no graph.
template <typename T>
Rollout<T> rollout_teacher_forcing(const ModelFn<T>& f, const Trajectory& traj, const Scaling& s);

/// One call; the 3T outputs are normalised displacements from x(0).
template <typename T>
Rollout<T> predict_oneshot(const ModelFn<T>& f, const Trajectory& traj, const Scaling& s);

/// One call per queried frame index with t/(TΔt) appended as an input.
template <typename T>
Rollout<T> predict_time_conditional(const ModelFn<T>& f, const Trajectory& traj,
                                    const Scaling& s, std::span<const std::size_t> steps);
/// Same with arbitrary query times in ms; throws ConfigError outside [0, TΔt].
template <typename T>
std::vector<Var<T>> query_times(const ModelFn<T>& f, const Trajectory& traj, const Scaling& s,
                                std::span<const double> times_ms, std::uint64_t* calls = nullptr);

enum class LossForm { kL2Sum, kMse };
LossForm parse_loss(std::string_view s);

/// Σ_t ||(x̂(t) - x(t)) / scale||₂ over the rollout's steps, or the mean
/// squared normalised error.
template <typename T>
Var<T> sequence_loss(const Rollout<T>& pred, const Trajectory& truth,
                     const std::array<double, 3>& scale, LossForm form);

/// Detached, 64-bit view of a prediction over all frames 0..T.
struct TrajectoryPrediction {
  Tensor<double> positions;      // (T+1) × N × 3
  Tensor<double> velocities;     // (T+1) × N × 3
  Tensor<double> accelerations;  // (T+1) × N × 3
  bool model_kinematics = false;  // velocities/accelerations came from the model
  std::uint64_t model_calls = 0;
};

/// Requires the rollout to cover steps 1..T. Velocities and accelerations
/// come from the rollout when present, otherwise from finite differences.
template <typename T>
TrajectoryPrediction to_prediction(const Rollout<T>& r, const Trajectory& traj);

/// Central differences inside, second-order one-sided at the ends.
Tensor<double> fd_velocity(const Tensor<double>& positions, double dt);
/// Central second differences inside, three-point one-sided at the ends.
Tensor<double> fd_acceleration(const Tensor<double>& positions, double dt);

struct KinematicsMetrics {
  std::vector<double> rel_l2_per_step;  // steps 1..T
  double rel_l2 = 0;                    // aggregated over steps and points
  double position_mse = 0;              // full field, mm²
  double probe_position_mse = 0;
  double probe_velocity_mse = 0;
  double probe_acceleration_mse = 0;
};

/// Relative L2 of the displacement field x(t) - x(0); probe errors over
/// steps 1..T against finite-difference truth kinematics. Throws
/// DimensionError for out-of-range probe ids.
KinematicsMetrics kinematics_metrics(const TrajectoryPrediction& pred, const Trajectory& truth,
                                     std::span<const std::size_t> probes);

}  // namespace opcrash::temporal
