#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "opcrash/crashdata/crashdata.hpp"
#include "opcrash/errors.hpp"
#include "opcrash/numcore/binary_io.hpp"

namespace opcrash::crashdata {

namespace {

constexpr char kMagic[4] = {'O', 'P', 'D', 'S'};

void write_f64(numcore::BinaryWriter& w, double d) { w.u64(std::bit_cast<std::uint64_t>(d)); }
double read_f64(numcore::BinaryReader& r) { return std::bit_cast<double>(r.u64()); }

}  // namespace

DoeLevels DoeLevels::truncated(std::size_t nv, std::size_t nt, std::size_t no) const {
  if (nv == 0 || nt == 0 || no == 0 || nv > velocities.size() || nt > thicknesses.size() ||
      no > offsets.size()) {
    throw ConfigError("level counts must lie in [1, " + std::to_string(velocities.size()) + "]");
  }
  DoeLevels out = *this;
  out.velocities.resize(nv);
  out.thicknesses.resize(nt);
  out.offsets.resize(no);
  return out;
}

std::size_t DoeLevels::count() const {
  return velocities.size() * thicknesses.size() * offsets.size() * scales.size();
}

std::vector<DesignConfig> doe_configs(const DoeLevels& levels, std::uint64_t seed) {
  if (levels.count() == 0) throw ConfigError("every DoE level list must be non-empty");
  std::vector<DesignConfig> out;
  for (const auto& s : levels.scales)
    for (double v : levels.velocities)
      for (double t : levels.thicknesses)
        for (double o : levels.offsets) {
          DesignConfig c{s[0], s[1], s[2], v, t, o, seed};
          c.validate();
          out.push_back(c);
        }
  return out;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

std::array<std::size_t, 3> split_counts(std::size_t total) {
  constexpr std::array<std::size_t, 3> tenths{8, 1, 1};
  std::array<std::size_t, 3> counts{};
  std::array<std::size_t, 3> rem{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    counts[i] = total * tenths[i] / 10;
    rem[i] = total * tenths[i] % 10;
    used += counts[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++counts[order[k % 3]];
  return counts;
}

std::vector<Split> assign_splits(std::span<const DesignConfig> configs) {
  std::vector<std::size_t> order(configs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return configs[a].hash() < configs[b].hash();
  });
  const auto counts = split_counts(configs.size());
  std::vector<Split> out(configs.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    out[order[k]] = k < counts[0] ? Split::kTrain : k < counts[0] + counts[1] ? Split::kVal : Split::kTest;
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, const DatasetFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  numcore::BinaryWriter w(out);
  w.bytes(kMagic);
  w.u32(DatasetFile::kVersion);
  w.u32(static_cast<std::uint32_t>(file.samples.size()));
  w.u32(file.points);
  w.u32(file.steps);
  w.u32(file.dims);
  w.u32(file.features);
  write_f64(w, file.dt);
  w.u32(static_cast<std::uint32_t>(file.split));
  const std::size_t frame_values = std::size_t{file.steps + 1} * file.points * file.dims;
  for (const auto& s : file.samples) {
    if (s.positions.size() != frame_values || s.v0.size() != std::size_t{file.points} * file.dims ||
        s.features.size() != std::size_t{file.points} * file.features) {
      throw DimensionError("sample tensors do not match the dataset header");
    }
    for (double d : {s.config.sx, s.config.sy, s.config.sz, s.config.v0, s.config.thickness,
                     s.config.offset}) {
      write_f64(w, d);
    }
    w.u64(s.config.seed);
    w.f32s(s.positions.values());
    w.f32s(s.v0.values());
    w.f32s(s.features.values());
    w.u32(static_cast<std::uint32_t>(s.probes.size()));
    for (auto p : s.probes) w.u32(p);
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

DatasetFile read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  numcore::BinaryReader r(in);
  char magic[4];
  r.bytes(magic);
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError(path.string() + ": not an OPDS file");
  if (const auto v = r.u32(); v != DatasetFile::kVersion) {
    throw FormatError("unsupported OPDS version " + std::to_string(v));
  }
  DatasetFile f;
  const std::uint32_t count = r.u32();
  f.points = r.u32();
  f.steps = r.u32();
  f.dims = r.u32();
  f.features = r.u32();
  f.dt = read_f64(r);
  const std::uint32_t split = r.u32();
  if (split > 2) throw FormatError("bad split tag " + std::to_string(split));
  f.split = static_cast<Split>(split);
  if (f.dims != 3 || f.points == 0 || f.points > (1u << 24) || f.steps > (1u << 16) ||
      f.features > 1024 || !(f.dt > 0)) {
    throw FormatError("implausible OPDS header counts");
  }
  const std::size_t n = f.points, frames = std::size_t{f.steps} + 1;
  for (std::uint32_t k = 0; k < count; ++k) {
    SampleRecord s;
    s.config.sx = read_f64(r);
    s.config.sy = read_f64(r);
    s.config.sz = read_f64(r);
    s.config.v0 = read_f64(r);
    s.config.thickness = read_f64(r);
    s.config.offset = read_f64(r);
    s.config.seed = r.u64();
    s.positions = Tensor<float>({frames, n, 3}, std::span<const float>(r.f32s(frames * n * 3)));
    s.v0 = Tensor<float>({n, 3}, std::span<const float>(r.f32s(n * 3)));
    s.features = Tensor<float>({n, std::size_t{f.features}}, std::span<const float>(r.f32s(n * f.features)));
    const std::uint32_t probes = r.u32();
    if (probes > n) throw FormatError("probe count exceeds point count");
    for (std::uint32_t p = 0; p < probes; ++p) {
      const std::uint32_t id = r.u32();
      if (id >= n) throw FormatError("probe id out of range");
      s.probes.push_back(id);
    }
    f.samples.push_back(std::move(s));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes");
  return f;
}

SampleRecord generate_sample(const DesignConfig& config, const GenerateOptions& opt,
                             SimResult* audit) {
  config.validate();
  const auto lattice = build_lattice(config, span_nodes_for(opt.nodes, opt.spec), opt.spec);
  SimResult sim = simulate(lattice, {config.v0, 0, 0}, opt.sim);
  const std::size_t n = lattice.size();
  SampleRecord rec;
  rec.config = config;
  rec.positions = sim.positions.cast<float>();
  rec.v0 = Tensor<float>({n, 3});
  rec.features = Tensor<float>({n, kFeatureWidth});
  for (std::size_t i = 0; i < n; ++i) {
    rec.v0(i, 0) = static_cast<float>(config.v0);
    const double layer = static_cast<double>((i / lattice.heights) % lattice.layers);
    const double feats[kFeatureWidth] = {config.thickness, config.v0, config.offset, layer};
    for (std::size_t k = 0; k < kFeatureWidth; ++k) rec.features(i, k) = static_cast<float>(feats[k]);
  }
  const auto probes = probe_points(lattice);
  rec.probes.assign(probes.begin(), probes.end());
  if (audit) *audit = std::move(sim);
  return rec;
}

GeneratedSet generate_doe(const DoeLevels& levels, const GenerateOptions& opt) {
  GeneratedSet set;
  set.configs = doe_configs(levels, opt.seed);
  set.splits = assign_splits(set.configs);
  std::vector<SampleRecord> records(set.configs.size());
  const std::size_t workers = std::clamp<std::size_t>(opt.threads, 1, records.size());
  if (workers == 1) {
    for (std::size_t i = 0; i < records.size(); ++i) records[i] = generate_sample(set.configs[i], opt);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < records.size(); i += workers) {
            records[i] = generate_sample(set.configs[i], opt);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  const std::size_t n = span_nodes_for(opt.nodes, opt.spec) * opt.spec.layers * opt.spec.heights;
  for (int s = 0; s < 3; ++s) {
    auto& f = set.files[s];
    f.points = static_cast<std::uint32_t>(n);
    f.steps = static_cast<std::uint32_t>(opt.sim.frames);
    f.dt = opt.sim.frame_dt;
    f.split = static_cast<Split>(s);
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    set.files[static_cast<int>(set.splits[i])].samples.push_back(std::move(records[i]));
  }
  return set;
}

std::filesystem::path split_path(const std::filesystem::path& dir, Split s) {
  return dir / (to_string(s) + ".opds");
}

void write_generated(const std::filesystem::path& dir, const GeneratedSet& set,
                     const DoeLevels& levels, const GenerateOptions& opt) {
  std::filesystem::create_directories(dir);
  for (const auto& f : set.files) write_dataset(split_path(dir, f.split), f);

  nlohmann::ordered_json m;
  m["format"] = "OPDS";
  m["version"] = DatasetFile::kVersion;
  m["seed"] = opt.seed;
  m["nodes"] = set.files[0].points;
  m["frames"] = opt.sim.frames;
  m["frame_dt_ms"] = opt.sim.frame_dt;
  m["substeps"] = opt.sim.substeps;
  m["levels"] = {{"velocities", levels.velocities},
                 {"thicknesses", levels.thicknesses},
                 {"offsets", levels.offsets},
                 {"scales", levels.scales}};
  for (const auto& f : set.files) {
    m["splits"][to_string(f.split)] = {{"file", split_path("", f.split).string()},
                                       {"samples", f.samples.size()}};
  }
  auto& configs = m["configs"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < set.configs.size(); ++i) {
    const auto& c = set.configs[i];
    configs.push_back({{"index", i},
                       {"split", to_string(set.splits[i])},
                       {"hash", c.hash()},
                       {"scale", {c.sx, c.sy, c.sz}},
                       {"v0", c.v0},
                       {"thickness", c.thickness},
                       {"offset", c.offset}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << m.dump(2) << '\n';
  if (!out) throw FormatError("cannot write manifest under " + dir.string());
}

void RunningStats::push(double x) {
  ++n_;
  const double delta = x - mean_;
  mean_ += delta / static_cast<double>(n_);
  m2_ += delta * (x - mean_);
}

double RunningStats::stddev() const {
  return n_ == 0 ? 0.0 : std::sqrt(m2_ / static_cast<double>(n_));
}

void ChannelStats::apply(std::span<double> values) const {
  const std::size_t c = mean.size();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = (values[i] - mean[i % c]) / std[i % c];
}

void ChannelStats::invert(std::span<double> values) const {
  const std::size_t c = mean.size();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = values[i] * std[i % c] + mean[i % c];
}

std::vector<double> ChannelStats::applied(std::span<const double> values) const {
  std::vector<double> out(values.begin(), values.end());
  apply(out);
  return out;
}

ChannelStats finish_stats(std::span<const RunningStats> channels) {
  ChannelStats s;
  for (const auto& c : channels) {
    s.mean.push_back(c.mean());
    const double sd = c.stddev();
    s.std.push_back(sd < ChannelStats::kMinStd ? 1.0 : sd);
  }
  return s;
}

NormStats compute_norm_stats(const DatasetFile& train) {
  if (train.samples.empty()) throw ConfigError("normalisation needs a non-empty training split");
  std::array<RunningStats, 3> pos, disp, vel, acc;
  std::vector<RunningStats> feat(train.features);
  std::array<RunningStats, kGlobalsWidth> glob;
  std::array<RunningStats, kBcWidth> bc;
  const std::size_t n = train.points, frames = std::size_t{train.steps} + 1;
  for (const auto& s : train.samples) {
    const Tensor<double> p = s.positions.cast<double>();
    const Tensor<double> v = temporal::fd_velocity(p, train.dt);
    const Tensor<double> a = temporal::fd_acceleration(p, train.dt);
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t i = 0; i < n * 3; ++i) {
        pos[i % 3].push(p.row(t)[i]);
        vel[i % 3].push(v.row(t)[i]);
        acc[i % 3].push(a.row(t)[i]);
        if (t > 0) disp[i % 3].push(p.row(t)[i] - p.row(0)[i]);
      }
    }
    for (std::size_t i = 0; i < s.features.size(); ++i) feat[i % train.features].push(s.features[i]);
    const auto g = globals_of(s.config);
    const auto b = bc_of(s.config);
    for (std::size_t k = 0; k < kGlobalsWidth; ++k) glob[k].push(g[k]);
    for (std::size_t k = 0; k < kBcWidth; ++k) bc[k].push(b[k]);
  }
  NormStats out;
  out.position = finish_stats(pos);
  out.displacement = finish_stats(disp);
  out.velocity = finish_stats(vel);
  out.acceleration = finish_stats(acc);
  out.features = finish_stats(feat);
  out.globals = finish_stats(glob);
  out.bc = finish_stats(bc);
  return out;
}

temporal::Scaling NormStats::scaling() const {
  temporal::Scaling s;
  for (int k = 0; k < 3; ++k) {
    // Loss errors are measured in displacement units.
    s.position[k] = displacement.std[k];
    s.displacement[k] = displacement.std[k];
    s.velocity[k] = velocity.std[k];
    s.acceleration[k] = acceleration.std[k];
  }
  return s;
}

std::vector<double> globals_of(const DesignConfig& c) { return {c.sx, c.sy, c.sz, c.thickness}; }
std::vector<double> bc_of(const DesignConfig& c) { return {c.v0, c.offset}; }

temporal::Trajectory to_trajectory(const SampleRecord& r, double dt) {
  temporal::Trajectory t;
  t.positions = r.positions.cast<double>();
  t.v0 = r.v0.cast<double>();
  t.dt = dt;
  t.features = r.features.cast<double>();
  t.globals = globals_of(r.config);
  t.bc = bc_of(r.config);
  return t;
}

}  // namespace opcrash::crashdata
