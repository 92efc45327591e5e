#include "opcrash/trainer/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "opcrash/errors.hpp"
#include "opcrash/numcore/memory.hpp"
#include "opcrash/numcore/ops.hpp"

namespace opcrash::trainer {

using crashdata::ChannelStats;
using crashdata::NormStats;
using numcore::Tensor;
using numcore::Var;
using temporal::StrategyKind;

// ---------------------------------------------------------------- optimiser

Adam::Adam(numcore::ParamStore<float>& params, AdamHyper hyper) : params_(params), hyper_(hyper) {
  numcore::ScopedAllocTag tag(numcore::AllocTag::kOptimizer);
  for (const auto& p : params_.entries()) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

bool Adam::step(double lr, double grad_scale) {
  const auto& entries = params_.entries();
  for (const auto& p : entries) {
    const auto& g = p.var.grad();
    if (!g.empty() && !numcore::all_finite(g)) {
      diagnostic_ = "non-finite gradient in " + p.name + "; step rejected";
      return false;
    }
  }
  ++t_;
  const double c1 = 1 - std::pow(hyper_.beta1, static_cast<double>(t_));
  const double c2 = 1 - std::pow(hyper_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Var<float> var = entries[k].var;
    const auto& g = var.grad();
    auto& w = var.mutable_value();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : grad_scale * static_cast<double>(g[i]);
      m[i] = hyper_.beta1 * m[i] + (1 - hyper_.beta1) * gi;
      v[i] = hyper_.beta2 * v[i] + (1 - hyper_.beta2) * gi * gi;
      const double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + hyper_.eps);
      w[i] = static_cast<float>(static_cast<double>(w[i]) - update);
    }
  }
  diagnostic_.clear();
  return true;
}

double cosine_lr(double lr, double lr_min, std::uint64_t step, std::uint64_t total) {
  if (total == 0) return lr;
  const double progress = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return lr_min + 0.5 * (lr - lr_min) * (1 + std::cos(std::numbers::pi * progress));
}

// ------------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (!(adam.lr > 0) || !(lr_min >= 0) || lr_min > adam.lr) throw ConfigError("need 0 <= lr_min <= lr, lr > 0");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0)) throw ConfigError("Adam eps must be positive");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (accumulation < 1) throw ConfigError("accumulation must be >= 1");
  if (strategy == StrategyKind::kTimeConditional && time_samples < 1) {
    throw ConfigError("time_samples must be >= 1");
  }
}

model::ModelConfig TrainConfig::model_config(const crashdata::DatasetFile& data) const {
  model::ModelConfig m;
  m.backbone = backbone;
  m.output = temporal::output_mode(strategy);
  m.tokens = tokens;
  m.layers = layers;
  m.heads = heads;
  m.channels = channels;
  m.context_anchors = context_anchors;
  m.scales = scales;
  m.feature_width = data.features;
  m.globals_width = crashdata::kGlobalsWidth;
  m.bc_width = crashdata::kBcWidth;
  m.horizon = data.steps;
  m.seed = seed;
  m.validate();
  return m;
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || !std::isfinite(d)) throw ConfigError(key + ": not a number: '" + v + "'");
  return d;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(key + ": not a non-negative integer: '" + v + "'");
  }
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": out of range: '" + v + "'");
  }
}

std::vector<geo::BallScale> parse_scales(const std::string& v) {
  std::vector<geo::BallScale> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("scales: expected radius:cap, got '" + item + "'");
    out.push_back({to_double("scales", trim(item.substr(0, colon))),
                   static_cast<std::size_t>(to_uint("scales", trim(item.substr(colon + 1))))});
  }
  if (out.empty()) throw ConfigError("scales: empty list");
  return out;
}

std::string loss_name(temporal::LossForm f) { return f == temporal::LossForm::kMse ? "mse" : "l2"; }

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
  TrainConfig c;
  bool seed_set = false;
  std::stringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
    if (key == "strategy") c.strategy = temporal::parse_strategy(v);
    else if (key == "backbone") c.backbone = model::parse_backbone(v);
    else if (key == "lr") c.adam.lr = to_double(key, v);
    else if (key == "lr_min") c.lr_min = to_double(key, v);
    else if (key == "beta1") c.adam.beta1 = to_double(key, v);
    else if (key == "beta2") c.adam.beta2 = to_double(key, v);
    else if (key == "eps") c.adam.eps = to_double(key, v);
    else if (key == "epochs") c.epochs = to_uint(key, v);
    else if (key == "accumulation" || key == "batch_size") c.accumulation = to_uint(key, v);
    else if (key == "seed") { c.seed = to_uint(key, v); seed_set = true; }
    else if (key == "eval_every") c.eval_every = to_uint(key, v);
    else if (key == "loss") c.loss = temporal::parse_loss(v);
    else if (key == "time_samples") c.time_samples = to_uint(key, v);
    else if (key == "ar_truncation") c.ar_truncation = to_uint(key, v);
    else if (key == "max_train") c.max_train = to_uint(key, v);
    else if (key == "save_checkpoints") c.save_checkpoints = to_uint(key, v) != 0;
    else if (key == "tokens") c.tokens = to_uint(key, v);
    else if (key == "layers") c.layers = to_uint(key, v);
    else if (key == "heads") c.heads = to_uint(key, v);
    else if (key == "channels") c.channels = to_uint(key, v);
    else if (key == "context_anchors") c.context_anchors = to_uint(key, v);
    else if (key == "scales") c.scales = parse_scales(v);
    else throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  if (!seed_set) {
    if (const char* env = std::getenv("OPCRASH_SEED"); env && *env) c.seed = to_uint("OPCRASH_SEED", env);
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

std::string format_train_config(const TrainConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "strategy = " << temporal::to_string(c.strategy) << '\n'
    << "backbone = " << model::to_string(c.backbone) << '\n'
    << "lr = " << c.adam.lr << '\n'
    << "lr_min = " << c.lr_min << '\n'
    << "beta1 = " << c.adam.beta1 << '\n'
    << "beta2 = " << c.adam.beta2 << '\n'
    << "eps = " << c.adam.eps << '\n'
    << "epochs = " << c.epochs << '\n'
    << "accumulation = " << c.accumulation << '\n'
    << "seed = " << c.seed << '\n'
    << "eval_every = " << c.eval_every << '\n'
    << "loss = " << loss_name(c.loss) << '\n'
    << "time_samples = " << c.time_samples << '\n'
    << "ar_truncation = " << c.ar_truncation << '\n'
    << "max_train = " << c.max_train << '\n'
    << "save_checkpoints = " << (c.save_checkpoints ? 1 : 0) << '\n'
    << "tokens = " << c.tokens << '\n'
    << "layers = " << c.layers << '\n'
    << "heads = " << c.heads << '\n'
    << "channels = " << c.channels << '\n'
    << "context_anchors = " << c.context_anchors << '\n'
    << "scales = ";
  for (std::size_t i = 0; i < c.scales.size(); ++i) {
    o << (i ? "," : "") << c.scales[i].radius << ':' << c.scales[i].cap;
  }
  o << '\n';
  return o.str();
}

// ------------------------------------------------------------------ samples

NormStats checkpoint_stats(const NormStats& s) {
  auto round = [](ChannelStats c) {
    for (auto* v : {&c.mean, &c.std})
      for (double& x : *v) x = static_cast<double>(static_cast<float>(x));
    return c;
  };
  NormStats out;
  out.position = round(s.position);
  out.displacement = round(s.displacement);
  out.velocity = round(s.velocity);
  out.acceleration = round(s.acceleration);
  out.features = round(s.features);
  out.globals = round(s.globals);
  out.bc = round(s.bc);
  return out;
}

void standardize_columns(Tensor<double>& a) {
  const std::size_t n = a.rows();
  if (n == 0) return;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    double mean = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) mean += a(i, c);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) sq += (a(i, c) - mean) * (a(i, c) - mean);
    double sd = std::sqrt(sq / static_cast<double>(n));
    if (!(sd > ChannelStats::kMinStd)) sd = 1;
    for (std::size_t i = 0; i < n; ++i) a(i, c) = (a(i, c) - mean) / sd;
  }
}

PreparedSample prepare(const model::ModelConfig& config, const NormStats& stats,
                       const crashdata::SampleRecord& record, double dt) {
  PreparedSample p;
  p.trajectory = crashdata::to_trajectory(record, dt);
  geo::PointCloud cloud;
  cloud.positions = p.trajectory.frame(0);
  geo::unit_box_transform(cloud.positions).apply(cloud.positions);
  cloud.features = p.trajectory.features;
  stats.features.apply(cloud.features.values());
  p.geometry = model::prepare_sample(config, cloud, stats.globals.applied(p.trajectory.globals),
                                     stats.bc.applied(p.trajectory.bc));
  p.probes.assign(record.probes.begin(), record.probes.end());
  standardize_columns(p.geometry.geometry.augmented);
  return p;
}

namespace {

std::vector<PreparedSample> prepare_all(const model::ModelConfig& config, const NormStats& stats,
                                        const crashdata::DatasetFile& file, std::size_t limit = 0) {
  std::vector<PreparedSample> out;
  const std::size_t n = limit ? std::min(limit, file.samples.size()) : file.samples.size();
  for (std::size_t i = 0; i < n; ++i) out.push_back(prepare(config, stats, file.samples[i], file.dt));
  return out;
}

std::vector<std::size_t> sample_steps(std::size_t horizon, std::size_t count, numcore::Rng& rng) {
  std::vector<std::size_t> all(horizon);
  std::iota(all.begin(), all.end(), 1);
  if (count >= horizon) return all;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

Var<float> trajectory_loss(const TrainConfig& config, const model::Model<float>& m,
                           const PreparedSample& s, const temporal::Scaling& scaling,
                           numcore::Rng& rng) {
  const auto f = temporal::bind_model(m, s.geometry);
  const auto& tr = s.trajectory;
  temporal::Rollout<float> r;
  switch (config.strategy) {
    case StrategyKind::kOneShot: r = temporal::predict_oneshot(f, tr, scaling); break;
    case StrategyKind::kTimeConditional: {
      const auto steps = sample_steps(tr.steps(), config.time_samples, rng);
      r = temporal::predict_time_conditional<float>(f, tr, scaling, steps);
      break;
    }
    case StrategyKind::kAutoregressive:
      r = temporal::rollout_ar(f, tr, scaling, temporal::RolloutMode::kTrainUnroll,
                               config.ar_truncation);
      break;
    case StrategyKind::kTeacherForcing: r = temporal::rollout_teacher_forcing(f, tr, scaling); break;
  }
  return temporal::sequence_loss(r, tr, scaling.position, config.loss);
}

// ------------------------------------------------------------------- ledger

RunLedger::RunLedger(std::filesystem::path path) : path_(std::move(path)) {
  std::ofstream(*path_, std::ios::trunc);
}

std::string RunLedger::format(const EpochRecord& r, bool with_timing) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["status"] = r.unstable() ? "unstable" : "ok";
  j["train_loss"] = r.train_loss;
  j["val_rel_l2"] = r.val_rel_l2 ? nlohmann::ordered_json(*r.val_rel_l2) : nlohmann::ordered_json();
  j["lr"] = r.lr;
  j["peak_bytes"] = r.peak_bytes;
  j["model_calls"] = r.model_calls;
  j["rejected_steps"] = r.rejected_steps;
  j["diverged"] = r.diverged;
  j["divergence_step"] = r.divergence_step ? nlohmann::ordered_json(*r.divergence_step) : nlohmann::ordered_json();
  if (with_timing) j["wall_s"] = r.wall_seconds;
  return j.dump();
}

void RunLedger::append(const EpochRecord& r) {
  if (!records_.empty() && r.epoch <= records_.back().epoch) {
    throw ConfigError("ledger epochs must increase");
  }
  records_.push_back(r);
  if (path_) {
    std::ofstream out(*path_, std::ios::app);
    out << format(r) << '\n';
  }
}

// --------------------------------------------------------------- evaluation

Predictor model_predictor(const model::Model<float>& m, StrategyKind strategy,
                          const temporal::Scaling& scaling) {
  return [&m, strategy, scaling](const PreparedSample& s) {
    const auto f = temporal::bind_model(m, s.geometry);
    const auto& tr = s.trajectory;
    temporal::Rollout<float> r;
    switch (strategy) {
      case StrategyKind::kOneShot: r = temporal::predict_oneshot(f, tr, scaling); break;
      case StrategyKind::kTimeConditional: {
        std::vector<std::size_t> steps(tr.steps());
        std::iota(steps.begin(), steps.end(), 1);
        r = temporal::predict_time_conditional<float>(f, tr, scaling, steps);
        break;
      }
      case StrategyKind::kAutoregressive:
      case StrategyKind::kTeacherForcing:
        r = temporal::rollout_ar(f, tr, scaling, temporal::RolloutMode::kInference);
        break;
    }
    return temporal::to_prediction(r, tr);
  };
}

EvalRecord evaluate(const Predictor& predictor, const std::vector<PreparedSample>& samples,
                    std::span<const crashdata::DesignConfig> configs, std::string split) {
  EvalRecord ev;
  ev.split = std::move(split);
  if (samples.empty()) throw ConfigError("split '" + ev.split + "' has no samples");
  const std::size_t steps = samples.front().trajectory.steps();
  ev.rel_l2_per_step.assign(steps, 0.0);
  for (std::size_t k = 0; k < samples.size(); ++k) {
    SampleMetrics sm;
    if (k < configs.size()) sm.config = configs[k];
    try {
      const auto pred = predictor(samples[k]);
      sm.model_calls = pred.model_calls;
      sm.metrics = temporal::kinematics_metrics(pred, samples[k].trajectory, samples[k].probes);
    } catch (const DivergenceError& e) {
      sm.diverged_at = e.step();
      ++ev.unstable;
      auto& m = sm.metrics;
      m.rel_l2_per_step.assign(steps, INFINITY);
      m.rel_l2 = m.position_mse = INFINITY;
      m.probe_position_mse = m.probe_velocity_mse = m.probe_acceleration_mse = INFINITY;
    }
    ev.samples.push_back(std::move(sm));
  }
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (const auto& s : ev.samples) {
    const auto& m = s.metrics;
    for (std::size_t t = 0; t < steps; ++t) ev.rel_l2_per_step[t] += m.rel_l2_per_step[t] * inv;
    ev.rel_l2 += m.rel_l2 * inv;
    ev.position_mse += m.position_mse * inv;
    ev.probe_position_mse += m.probe_position_mse * inv;
    ev.probe_velocity_mse += m.probe_velocity_mse * inv;
    ev.probe_acceleration_mse += m.probe_acceleration_mse * inv;
  }
  return ev;
}

namespace {

constexpr const char* kStatGroups[] = {"position", "displacement", "velocity", "acceleration",
                                       "features", "globals", "bc"};

std::array<ChannelStats*, 7> groups(NormStats& s) {
  return {&s.position, &s.displacement, &s.velocity, &s.acceleration, &s.features, &s.globals, &s.bc};
}

Tensor<float> to_blob(const std::vector<double>& v) {
  Tensor<float> t({1, v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i]);
  return t;
}

}  // namespace

void save_run(const std::filesystem::path& path, const model::Model<float>& m,
              StrategyKind strategy, const NormStats& stats) {
  NormStats copy = stats;
  std::vector<model::NamedBlob> extras;
  extras.push_back({"run.strategy", Tensor<float>({1, 1}, static_cast<float>(static_cast<int>(strategy)))});
  const auto g = groups(copy);
  for (std::size_t k = 0; k < g.size(); ++k) {
    extras.push_back({std::string("norm.") + kStatGroups[k] + ".mean", to_blob(g[k]->mean)});
    extras.push_back({std::string("norm.") + kStatGroups[k] + ".std", to_blob(g[k]->std)});
  }
  model::save_checkpoint(path.string(), m, extras);
}

LoadedRun load_run(const std::filesystem::path& path) {
  std::vector<model::NamedBlob> extras;
  LoadedRun run;
  run.model = model::load_checkpoint(path.string(), &extras);
  auto find = [&](const std::string& name) -> const Tensor<float>& {
    for (const auto& b : extras)
      if (b.name == name) return b.data;
    throw FormatError(path.string() + ": missing blob " + name);
  };
  const int code = static_cast<int>(find("run.strategy")[0]);
  if (code < 0 || code > 3) throw FormatError("bad strategy code in " + path.string());
  run.strategy = static_cast<StrategyKind>(code);
  const auto g = groups(run.stats);
  for (std::size_t k = 0; k < g.size(); ++k) {
    for (const char* part : {"mean", "std"}) {
      const auto& t = find(std::string("norm.") + kStatGroups[k] + "." + part);
      auto& dst = std::string(part) == "mean" ? g[k]->mean : g[k]->std;
      dst.assign(t.values().begin(), t.values().end());
    }
  }
  if (temporal::output_mode(run.strategy) != run.model->config().output) {
    throw FormatError("strategy does not match the checkpoint's output head");
  }
  return run;
}

EvalRecord evaluate_run(const LoadedRun& run, const crashdata::DatasetFile& split) {
  const auto samples = prepare_all(run.model->config(), run.stats, split);
  std::vector<crashdata::DesignConfig> configs;
  for (const auto& s : split.samples) configs.push_back(s.config);
  return evaluate(model_predictor(*run.model, run.strategy, run.stats.scaling()), samples, configs,
                  crashdata::to_string(split.split));
}

std::string eval_json(const EvalRecord& r) {
  using J = nlohmann::ordered_json;
  auto num = [](double d) { return std::isfinite(d) ? J(d) : J(); };
  J j;
  j["split"] = r.split;
  j["samples"] = r.samples.size();
  j["verdict"] = r.unstable ? "unstable" : "ok";
  j["unstable"] = r.unstable;
  j["rel_l2"] = num(r.rel_l2);
  j["position_mse"] = num(r.position_mse);
  j["probe_position_mse"] = num(r.probe_position_mse);
  j["probe_velocity_mse"] = num(r.probe_velocity_mse);
  j["probe_acceleration_mse"] = num(r.probe_acceleration_mse);
  J steps = J::array();
  for (double e : r.rel_l2_per_step) steps.push_back(num(e));
  j["rel_l2_per_step"] = steps;
  J per = J::array();
  for (const auto& s : r.samples) {
    per.push_back({{"v0", s.config.v0},
                   {"thickness", s.config.thickness},
                   {"offset", s.config.offset},
                   {"rel_l2", num(s.metrics.rel_l2)},
                   {"model_calls", s.model_calls},
                   {"diverged_at", s.diverged_at ? J(*s.diverged_at) : J()}});
  }
  j["per_sample"] = per;
  return j.dump(2);
}

std::string per_step_table(const EvalRecord& r, double dt) {
  std::ostringstream o;
  o.precision(9);
  o << "step\ttime_ms\trel_l2\n";
  for (std::size_t t = 0; t < r.rel_l2_per_step.size(); ++t) {
    o << t + 1 << '\t' << dt * static_cast<double>(t + 1) << '\t' << r.rel_l2_per_step[t] << '\n';
  }
  return o.str();
}

// ----------------------------------------------------------------- training

TrainResult train(const TrainConfig& config, const crashdata::DatasetFile& train_set,
                  const crashdata::DatasetFile& val_set,
                  const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  if (train_set.samples.empty()) throw ConfigError("training split is empty");
  TrainResult result;
  result.stats = checkpoint_stats(crashdata::compute_norm_stats(train_set));
  const auto scaling = result.stats.scaling();
  const auto mcfg = config.model_config(train_set);
  result.model = std::make_unique<model::Model<float>>(mcfg);
  auto& m = *result.model;

  std::vector<PreparedSample> train_samples, val_samples;
  {
    numcore::ScopedAllocTag tag(numcore::AllocTag::kData);
    train_samples = prepare_all(mcfg, result.stats, train_set, config.max_train);
    if (!val_set.samples.empty()) val_samples = prepare_all(mcfg, result.stats, val_set);
  }
  std::vector<crashdata::DesignConfig> val_configs;
  for (const auto& s : val_set.samples) val_configs.push_back(s.config);

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    result.ledger = RunLedger(*out_dir / "ledger.jsonl");
    std::ofstream(*out_dir / "config.txt") << format_train_config(config);
  }
  Adam adam(m.params(), config.adam);
  numcore::Rng rng(config.seed ^ 0x7261696e65720000ull);
  const std::size_t n = train_samples.size();
  const std::size_t groups_per_epoch = (n + config.accumulation - 1) / config.accumulation;
  const std::uint64_t total_steps = config.epochs * groups_per_epoch;
  std::uint64_t step = 0;
  const auto predictor = model_predictor(m, config.strategy, scaling);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    m.reset_calls();
    const auto start = std::chrono::steady_clock::now();
    double loss_sum = 0;
    std::size_t finished = 0;
    {
      numcore::PeakScope peak;
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      std::size_t pending = 0;
      for (std::size_t k = 0; k < n; ++k) {
        try {
          const auto loss = trajectory_loss(config, m, train_samples[order[k]], scaling, rng);
          numcore::backward(loss);
          loss_sum += static_cast<double>(loss.value()[0]);
          ++finished;
          ++pending;
        } catch (const DivergenceError& e) {
          ++rec.diverged;
          rec.divergence_step = std::min(rec.divergence_step.value_or(e.step()), e.step());
        }
        if ((k + 1) % config.accumulation == 0 || k + 1 == n) {
          rec.lr = cosine_lr(config.adam.lr, config.lr_min, step, total_steps);
          if (pending > 0 && !adam.step(rec.lr, 1.0 / static_cast<double>(pending))) ++rec.rejected_steps;
          m.params().zero_grad();
          pending = 0;
          ++step;
        }
      }
      rec.peak_bytes = peak.report().peak_total;
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rec.train_loss = finished ? loss_sum / static_cast<double>(finished) : INFINITY;
    rec.model_calls = m.calls();

    const bool validate = config.eval_every && !val_samples.empty() &&
                          (epoch % config.eval_every == 0 || epoch == config.epochs);
    if (validate) {
      const auto ev = evaluate(predictor, val_samples, val_configs, "val");
      rec.val_rel_l2 = ev.rel_l2;
      if (!result.best_val || ev.rel_l2 < *result.best_val) {
        result.best_val = ev.rel_l2;
        result.best_epoch = epoch;
        if (out_dir && config.save_checkpoints) save_run(*out_dir / "best.opck", m, config.strategy, result.stats);
      }
    }
    result.ledger.append(rec);
  }
  if (out_dir && config.save_checkpoints) {
    save_run(*out_dir / "last.opck", m, config.strategy, result.stats);
    if (!result.best_val) std::filesystem::copy_file(*out_dir / "last.opck", *out_dir / "best.opck",
                                                     std::filesystem::copy_options::overwrite_existing);
  }
  return result;
}

}  // namespace opcrash::trainer
