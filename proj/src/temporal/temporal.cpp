#include "opcrash/temporal/temporal.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "opcrash/errors.hpp"
#include "opcrash/numcore/ops.hpp"

namespace opcrash::temporal {

using namespace numcore;

namespace {

std::string normalise_name(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::replace(out.begin(), out.end(), '_', '-');
  return out;
}

template <typename T>
std::array<T, 3> cast3(const std::array<double, 3>& a) {
  return {static_cast<T>(a[0]), static_cast<T>(a[1]), static_cast<T>(a[2])};
}

template <typename T>
std::array<T, 3> inverse3(const std::array<double, 3>& a) {
  return {static_cast<T>(1.0 / a[0]), static_cast<T>(1.0 / a[1]), static_cast<T>(1.0 / a[2])};
}

template <typename T>
Var<T> constant_frame(const Trajectory& traj, std::size_t t) {
  return Var<T>::constant(traj.frame(t).cast<T>());
}

template <typename T>
void check_finite_state(const Var<T>& x, const Var<T>& v, std::size_t step) {
  if (!all_finite(x.value()) || (v.valid() && !all_finite(v.value()))) throw DivergenceError(step);
}

void check_trajectory(const Trajectory& traj) {
  const auto& s = traj.positions.shape();
  if (s.size() != 3 || s[2] != 3 || s[0] < 1) {
    throw DimensionError("trajectory positions must be (T+1)×N×3, got " + shape_string(s));
  }
  if (traj.v0.shape() != Shape{s[1], 3}) throw DimensionError("V0 must be N×3");
  if (!(traj.dt > 0)) throw ConfigError("trajectory time step must be positive");
}

}  // namespace

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::kAutoregressive: return "ar";
    case StrategyKind::kTeacherForcing: return "teacher-forcing";
    case StrategyKind::kOneShot: return "oneshot";
    case StrategyKind::kTimeConditional: return "time-conditional";
  }
  throw ConfigError("invalid strategy");
}

StrategyKind parse_strategy(std::string_view s) {
  const std::string n = normalise_name(s);
  if (n == "ar" || n == "autoregressive") return StrategyKind::kAutoregressive;
  if (n == "tf" || n == "teacher-forcing") return StrategyKind::kTeacherForcing;
  if (n == "oneshot" || n == "one-shot") return StrategyKind::kOneShot;
  if (n == "time" || n == "time-conditional") return StrategyKind::kTimeConditional;
  throw ConfigError("unknown strategy '" + std::string(s) +
                    "' (expected ar, teacher-forcing, oneshot, time-conditional)");
}

model::OutputMode output_mode(StrategyKind k) {
  switch (k) {
    case StrategyKind::kAutoregressive:
    case StrategyKind::kTeacherForcing: return model::OutputMode::kAcceleration;
    case StrategyKind::kOneShot: return model::OutputMode::kOneShot;
    case StrategyKind::kTimeConditional: return model::OutputMode::kTimeConditional;
  }
  throw ConfigError("invalid strategy");
}

LossForm parse_loss(std::string_view s) {
  const std::string n = normalise_name(s);
  if (n == "l2" || n == "l2-sum") return LossForm::kL2Sum;
  if (n == "mse") return LossForm::kMse;
  throw ConfigError("unknown loss form '" + std::string(s) + "' (expected l2-sum or mse)");
}

Tensor<double> Trajectory::frame(std::size_t t) const {
  const std::size_t n = points();
  return Tensor<double>({n, 3}, std::span<const double>(positions.row(t), n * 3));
}

template <typename T>
ModelFn<T> bind_model(const model::Model<T>& m, const model::SampleGeometry& sample) {
  Var<T> ctx = m.context(sample);
  return [&m, &sample, ctx](const Var<T>& dynamic) { return m.forward(sample, ctx, dynamic); };
}

template <typename T>
std::pair<Var<T>, Var<T>> euler_step(const Var<T>& x, const Var<T>& v, const Var<T>& a, T dt) {
  Var<T> vn = add(v, affine(a, dt));
  Var<T> xn = add(x, affine(vn, dt));
  return {xn, vn};
}

void euler_step(std::span<double> x, std::span<double> v, std::span<const double> a, double dt) {
  if (x.size() != v.size() || v.size() != a.size()) throw DimensionError("euler_step: size mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) {
    v[i] += dt * a[i];
    x[i] += dt * v[i];
  }
}

template <typename T>
Var<T> ar_inputs(const Var<T>& x_prev, const Var<T>& x_prev2, const Var<T>& x0, double dt,
                 const Scaling& s) {
  const auto inv_d = inverse3<T>(s.displacement);
  std::array<double, 3> vs{s.velocity[0] * dt, s.velocity[1] * dt, s.velocity[2] * dt};
  const auto inv_v = inverse3<T>(vs);
  return concat_cols<T>({scale_cols<T>(sub(x_prev, x0), inv_d),
                         scale_cols<T>(sub(x_prev, x_prev2), inv_v)});
}

template <typename T>
Rollout<T> rollout_ar(const ModelFn<T>& f, const Trajectory& traj, const Scaling& s,
                      RolloutMode mode, std::size_t truncation) {
  check_trajectory(traj);
  const std::size_t steps = traj.steps();
  if (steps < 1) throw ConfigError("rollout needs at least one step");
  const T dt = static_cast<T>(traj.dt);
  const auto acc_scale = cast3<T>(s.acceleration);
  const bool train = mode == RolloutMode::kTrainUnroll;

  Rollout<T> r;
  Var<T> x0 = constant_frame<T>(traj, 0);
  Var<T> x_prev = x0, x_prev2 = x0;
  Var<T> v = Var<T>::constant(traj.v0.cast<T>());
  for (std::size_t t = 1; t <= steps; ++t) {
    Var<T> out;
    try {
      out = f(ar_inputs(x_prev, x_prev2, x0, traj.dt, s));
    } catch (const NumericError&) {
      throw DivergenceError(t);
    }
    ++r.model_calls;
    if (out.cols() != 3 || out.rows() != traj.points()) {
      throw DimensionError("acceleration model must return N×3, got " + shape_string(out.shape()));
    }
    Var<T> a = scale_cols<T>(out, acc_scale);
    auto [xn, vn] = euler_step(x_prev, v, a, dt);
    check_finite_state(xn, vn, t);
    if (!train) {
      xn = xn.detached();
      vn = vn.detached();
      a = a.detached();
    }
    r.positions.push_back(xn);
    r.velocities.push_back(vn);
    r.accelerations.push_back(a);
    r.steps.push_back(t);
    x_prev2 = x_prev;
    x_prev = xn;
    v = vn;
    if (train && truncation > 0 && t % truncation == 0) {
      x_prev2 = x_prev2.detached();
      x_prev = x_prev.detached();
      v = v.detached();
    }
  }
  return r;
}

template <typename T>
Rollout<T> rollout_teacher_forcing(const ModelFn<T>& f, const Trajectory& traj, const Scaling& s) {
  check_trajectory(traj);
  const std::size_t steps = traj.steps();
  if (steps < 1) throw ConfigError("rollout needs at least one step");
  const T dt = static_cast<T>(traj.dt);
  const auto acc_scale = cast3<T>(s.acceleration);
  const T inv_dt = static_cast<T>(1.0 / traj.dt);

  Rollout<T> r;
  Var<T> x0 = constant_frame<T>(traj, 0);
  for (std::size_t t = 1; t <= steps; ++t) {
    Var<T> xp = constant_frame<T>(traj, t - 1);
    Var<T> xp2 = t >= 2 ? constant_frame<T>(traj, t - 2) : xp;
    Var<T> vp = t >= 2 ? Var<T>::constant(affine(sub(xp, xp2), inv_dt).value())
                       : Var<T>::constant(traj.v0.cast<T>());
    Var<T> out;
    try {
      out = f(ar_inputs(xp, xp2, x0, traj.dt, s));
    } catch (const NumericError&) {
      throw DivergenceError(t);
    }
    ++r.model_calls;
    Var<T> a = scale_cols<T>(out, acc_scale);
    auto [xn, vn] = euler_step(xp, vp, a, dt);
    check_finite_state(xn, vn, t);
    r.positions.push_back(xn);
    r.velocities.push_back(vn);
    r.accelerations.push_back(a);
    r.steps.push_back(t);
  }
  return r;
}

template <typename T>
Rollout<T> predict_oneshot(const ModelFn<T>& f, const Trajectory& traj, const Scaling& s) {
  check_trajectory(traj);
  const std::size_t steps = traj.steps();
  Rollout<T> r;
  Var<T> out = f(Var<T>{});
  r.model_calls = 1;
  if (out.rows() != traj.points() || out.cols() != 3 * steps) {
    throw DimensionError("one-shot model must return N×" + std::to_string(3 * steps) + ", got " +
                         shape_string(out.shape()));
  }
  Var<T> x0 = constant_frame<T>(traj, 0);
  const auto scale = cast3<T>(s.displacement);
  for (std::size_t t = 1; t <= steps; ++t) {
    r.positions.push_back(add(x0, scale_cols<T>(slice_cols(out, 3 * (t - 1), 3), scale)));
    r.steps.push_back(t);
  }
  return r;
}

template <typename T>
std::vector<Var<T>> query_times(const ModelFn<T>& f, const Trajectory& traj, const Scaling& s,
                                std::span<const double> times_ms, std::uint64_t* calls) {
  check_trajectory(traj);
  const double horizon = static_cast<double>(traj.steps()) * traj.dt;
  Var<T> x0 = constant_frame<T>(traj, 0);
  const auto scale = cast3<T>(s.displacement);
  std::vector<Var<T>> out;
  out.reserve(times_ms.size());
  for (double t : times_ms) {
    const double tol = 1e-9 * std::max(horizon, 1.0);
    if (!(t >= -tol && t <= horizon + tol)) {
      throw ConfigError("query time " + std::to_string(t) + " ms outside [0, " +
                        std::to_string(horizon) + "]");
    }
    const double tau = horizon > 0 ? std::clamp(t / horizon, 0.0, 1.0) : 0.0;
    Var<T> y = f(Var<T>::constant(Tensor<T>({traj.points(), 1}, static_cast<T>(tau))));
    if (calls) ++*calls;
    if (y.rows() != traj.points() || y.cols() != 3) {
      throw DimensionError("time-conditional model must return N×3, got " + shape_string(y.shape()));
    }
    out.push_back(add(x0, scale_cols<T>(y, scale)));
  }
  return out;
}

template <typename T>
Rollout<T> predict_time_conditional(const ModelFn<T>& f, const Trajectory& traj,
                                    const Scaling& s, std::span<const std::size_t> steps) {
  std::vector<double> times;
  times.reserve(steps.size());
  for (std::size_t k : steps) {
    if (k > traj.steps()) throw ConfigError("query step " + std::to_string(k) + " beyond horizon");
    times.push_back(static_cast<double>(k) * traj.dt);
  }
  Rollout<T> r;
  r.positions = query_times(f, traj, s, times, &r.model_calls);
  r.steps.assign(steps.begin(), steps.end());
  return r;
}

template <typename T>
Var<T> sequence_loss(const Rollout<T>& pred, const Trajectory& truth,
                     const std::array<double, 3>& scale, LossForm form) {
  if (pred.positions.empty() || pred.positions.size() != pred.steps.size()) {
    throw DimensionError("sequence_loss: prediction has no steps");
  }
  const auto inv = inverse3<T>(scale);
  Var<T> total;
  for (std::size_t k = 0; k < pred.positions.size(); ++k) {
    if (pred.steps[k] > truth.steps()) throw DimensionError("sequence_loss: step beyond truth");
    Var<T> target = constant_frame<T>(truth, pred.steps[k]);
    if (pred.positions[k].shape() != target.shape()) {
      throw DimensionError("sequence_loss: prediction " + shape_string(pred.positions[k].shape()) +
                           " vs truth " + shape_string(target.shape()));
    }
    Var<T> err = scale_cols<T>(sub(pred.positions[k], target), inv);
    Var<T> term = form == LossForm::kL2Sum ? l2_norm(err) : sum_squares(err);
    total = total.valid() ? add(total, term) : term;
  }
  if (form == LossForm::kMse) {
    const double count = static_cast<double>(pred.positions.size() * truth.points() * 3);
    total = affine(total, static_cast<T>(1.0 / count));
  }
  return total;
}

Tensor<double> fd_velocity(const Tensor<double>& positions, double dt) {
  const std::size_t frames = positions.shape().at(0), w = positions.size() / frames;
  Tensor<double> v(positions.shape());
  if (frames < 2) return v;
  auto x = [&](std::size_t t, std::size_t i) { return positions.row(t)[i]; };
  for (std::size_t i = 0; i < w; ++i) {
    if (frames == 2) {
      v.row(0)[i] = v.row(1)[i] = (x(1, i) - x(0, i)) / dt;
      continue;
    }
    const std::size_t last = frames - 1;
    v.row(0)[i] = (-3 * x(0, i) + 4 * x(1, i) - x(2, i)) / (2 * dt);
    v.row(last)[i] = (3 * x(last, i) - 4 * x(last - 1, i) + x(last - 2, i)) / (2 * dt);
    for (std::size_t t = 1; t < last; ++t) v.row(t)[i] = (x(t + 1, i) - x(t - 1, i)) / (2 * dt);
  }
  return v;
}

Tensor<double> fd_acceleration(const Tensor<double>& positions, double dt) {
  const std::size_t frames = positions.shape().at(0), w = positions.size() / frames;
  Tensor<double> a(positions.shape());
  if (frames < 3) return a;
  auto x = [&](std::size_t t, std::size_t i) { return positions.row(t)[i]; };
  const double inv = 1.0 / (dt * dt);
  const std::size_t last = frames - 1;
  for (std::size_t i = 0; i < w; ++i) {
    a.row(0)[i] = (x(0, i) - 2 * x(1, i) + x(2, i)) * inv;
    a.row(last)[i] = (x(last, i) - 2 * x(last - 1, i) + x(last - 2, i)) * inv;
    for (std::size_t t = 1; t < last; ++t) a.row(t)[i] = (x(t + 1, i) - 2 * x(t, i) + x(t - 1, i)) * inv;
  }
  return a;
}

template <typename T>
TrajectoryPrediction to_prediction(const Rollout<T>& r, const Trajectory& traj) {
  check_trajectory(traj);
  const std::size_t steps = traj.steps(), n = traj.points();
  if (r.positions.size() != steps) throw DimensionError("prediction does not cover every step");
  for (std::size_t k = 0; k < steps; ++k) {
    if (r.steps[k] != k + 1) throw DimensionError("prediction steps must be 1..T in order");
  }
  TrajectoryPrediction p;
  p.model_calls = r.model_calls;
  p.positions = Tensor<double>(traj.positions.shape());
  std::copy_n(traj.positions.row(0), n * 3, p.positions.row(0));
  for (std::size_t t = 1; t <= steps; ++t) {
    const auto& v = r.positions[t - 1].value();
    for (std::size_t i = 0; i < n * 3; ++i) p.positions.row(t)[i] = static_cast<double>(v[i]);
  }
  p.velocities = fd_velocity(p.positions, traj.dt);
  p.accelerations = fd_acceleration(p.positions, traj.dt);
  if (!r.velocities.empty()) {
    p.model_kinematics = true;
    std::copy_n(traj.v0.values().data(), n * 3, p.velocities.row(0));
    for (std::size_t t = 1; t <= steps; ++t) {
      const auto& v = r.velocities[t - 1].value();
      const auto& a = r.accelerations[t - 1].value();
      for (std::size_t i = 0; i < n * 3; ++i) {
        p.velocities.row(t)[i] = static_cast<double>(v[i]);
        p.accelerations.row(t)[i] = static_cast<double>(a[i]);
      }
    }
  }
  return p;
}

KinematicsMetrics kinematics_metrics(const TrajectoryPrediction& pred, const Trajectory& truth,
                                     std::span<const std::size_t> probes) {
  check_trajectory(truth);
  if (pred.positions.shape() != truth.positions.shape()) {
    throw DimensionError("prediction and truth trajectories differ in shape");
  }
  const std::size_t steps = truth.steps(), n = truth.points();
  for (std::size_t p : probes) {
    if (p >= n) throw DimensionError("probe id " + std::to_string(p) + " out of range");
  }
  const Tensor<double> tv = fd_velocity(truth.positions, truth.dt);
  const Tensor<double> ta = fd_acceleration(truth.positions, truth.dt);

  KinematicsMetrics m;
  double err_total = 0, ref_total = 0, sq_total = 0;
  for (std::size_t t = 1; t <= steps; ++t) {
    double err = 0, ref = 0;
    const double* xp = pred.positions.row(t);
    const double* xt = truth.positions.row(t);
    const double* x0 = truth.positions.row(0);
    for (std::size_t i = 0; i < n * 3; ++i) {
      err += (xp[i] - xt[i]) * (xp[i] - xt[i]);
      ref += (xt[i] - x0[i]) * (xt[i] - x0[i]);
    }
    m.rel_l2_per_step.push_back(err == 0 ? 0.0 : std::sqrt(err) / std::sqrt(ref));
    err_total += err;
    ref_total += ref;
    sq_total += err;
  }
  m.rel_l2 = err_total == 0 ? 0.0 : std::sqrt(err_total) / std::sqrt(ref_total);
  m.position_mse = steps ? sq_total / static_cast<double>(steps * n * 3) : 0.0;

  if (!probes.empty() && steps > 0) {
    double pe = 0, ve = 0, ae = 0;
    for (std::size_t t = 1; t <= steps; ++t) {
      for (std::size_t p : probes) {
        for (std::size_t a = 0; a < 3; ++a) {
          const std::size_t i = p * 3 + a;
          const double dp = pred.positions.row(t)[i] - truth.positions.row(t)[i];
          const double dv = pred.velocities.row(t)[i] - tv.row(t)[i];
          const double da = pred.accelerations.row(t)[i] - ta.row(t)[i];
          pe += dp * dp;
          ve += dv * dv;
          ae += da * da;
        }
      }
    }
    const double count = static_cast<double>(steps * probes.size() * 3);
    m.probe_position_mse = pe / count;
    m.probe_velocity_mse = ve / count;
    m.probe_acceleration_mse = ae / count;
  }
  return m;
}

#define OPCRASH_INSTANTIATE_TEMPORAL(T)                                                          \
  template ModelFn<T> bind_model(const model::Model<T>&, const model::SampleGeometry&);          \
  template std::pair<Var<T>, Var<T>> euler_step(const Var<T>&, const Var<T>&, const Var<T>&, T); \
  template Var<T> ar_inputs(const Var<T>&, const Var<T>&, const Var<T>&, double,                 \
                            const Scaling&);                                                     \
  template Rollout<T> rollout_ar(const ModelFn<T>&, const Trajectory&, const Scaling&,           \
                                 RolloutMode, std::size_t);                                      \
  template Rollout<T> rollout_teacher_forcing(const ModelFn<T>&, const Trajectory&,              \
                                              const Scaling&);                                   \
  template Rollout<T> predict_oneshot(const ModelFn<T>&, const Trajectory&, const Scaling&);     \
  template std::vector<Var<T>> query_times(const ModelFn<T>&, const Trajectory&, const Scaling&, \
                                           std::span<const double>, std::uint64_t*);             \
  template Rollout<T> predict_time_conditional(const ModelFn<T>&, const Trajectory&,             \
                                               const Scaling&, std::span<const std::size_t>);    \
  template Var<T> sequence_loss(const Rollout<T>&, const Trajectory&,                            \
                                const std::array<double, 3>&, LossForm);                         \
  template TrajectoryPrediction to_prediction(const Rollout<T>&, const Trajectory&);

OPCRASH_INSTANTIATE_TEMPORAL(float)
OPCRASH_INSTANTIATE_TEMPORAL(double)

}  // namespace opcrash::temporal
