#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>

#include "doctest.h"
#include "opcrash/crashdata/crashdata.hpp"
#include "opcrash/errors.hpp"

using namespace opcrash;
using namespace opcrash::crashdata;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("opcrash_crashdata_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

GenerateOptions small_options() {
  GenerateOptions o;
  o.nodes = 48;
  o.sim.frames = 5;
  o.sim.substeps = 100;
  o.seed = 3;
  return o;
}

/// Two unit masses joined by one elastic spring along x.
BeamLattice dumbbell(double wall_gap) {
  BeamLattice lat;
  lat.nodes = {Vec3{0, 0, 0}, Vec3{10, 0, 0}};
  lat.masses = {1.0, 1.0};
  Element e;
  e.a = 0;
  e.b = 1;
  e.rest = 10;
  e.stiffness = 1.0;
  e.yield_force = 1e9;
  lat.elements = {e};
  lat.impactor = {-wall_gap - 5.0, 0.0, 5.0, 50.0};
  lat.span_nodes = 2;
  lat.layers = lat.heights = 1;
  return lat;
}

}  // namespace

TEST_CASE("lattice: nominal box, stiffness scaling, element enumeration") {
  LatticeSpec spec;
  auto lat = build_lattice(DesignConfig{}, 11, spec);
  Vec3 lo{INFINITY, INFINITY, INFINITY}, hi{-INFINITY, -INFINITY, -INFINITY};
  for (const auto& p : lat.nodes)
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::min(lo[k], p[k]);
      hi[k] = std::max(hi[k], p[k]);
    }
  const auto box = spec.nominal_box();
  for (int k = 0; k < 3; ++k) {
    CHECK(std::abs(lo[k] - box[0][k]) < 1e-9);
    CHECK(std::abs(hi[k] - box[1][k]) < 1e-9);
  }

  DesignConfig thick;
  thick.thickness = 2;
  auto lat2 = build_lattice(thick, 11, spec);
  REQUIRE(lat2.elements.size() == lat.elements.size());
  for (std::size_t j = 0; j < lat.elements.size(); ++j) {
    CHECK(lat2.elements[j].stiffness == 2 * lat.elements[j].stiffness);
    CHECK(lat2.elements[j].yield_force == 2 * lat.elements[j].yield_force);
  }

  DesignConfig stretched{2, 0.5, 3};
  auto lat3 = build_lattice(stretched, 11, spec);
  for (std::size_t i = 0; i < lat.size(); ++i) {
    CHECK(lat3.nodes[i][0] == doctest::Approx(2 * lat.nodes[i][0]));
    CHECK(lat3.nodes[i][1] == doctest::Approx(0.5 * lat.nodes[i][1]));
    CHECK(lat3.nodes[i][2] == doctest::Approx(3 * lat.nodes[i][2]));
  }

  // Enumerate grid pairs one step apart along one axis or diagonally in one plane.
  for (std::size_t u : {2u, 3u, 7u}) {
    auto l = build_lattice(DesignConfig{}, u, spec);
    std::set<std::pair<std::size_t, std::size_t>> expected;
    for (std::size_t i = 0; i < l.size(); ++i)
      for (std::size_t j = i + 1; j < l.size(); ++j) {
        const long du = static_cast<long>(i / 12) - static_cast<long>(j / 12);
        const long dl = static_cast<long>(i / 4 % 3) - static_cast<long>(j / 4 % 3);
        const long dh = static_cast<long>(i % 4) - static_cast<long>(j % 4);
        const long a = std::abs(du), b = std::abs(dl), c = std::abs(dh);
        if (a > 1 || b > 1 || c > 1) continue;
        if (a + b + c == 1 || a + b + c == 2) expected.insert({i, j});
      }
    std::set<std::pair<std::size_t, std::size_t>> built;
    for (const auto& e : l.elements) built.insert({std::min(e.a, e.b), std::max(e.a, e.b)});
    CHECK(built.size() == l.elements.size());
    CHECK(built == expected);
    CHECK(element_count(u, 3, 4) == expected.size());
  }
  CHECK_THROWS_AS(build_lattice(DesignConfig{}, 1, spec), ConfigError);
  CHECK(span_nodes_for(512) == 43);
}

TEST_CASE("probes: rear face, mirror symmetric, stable") {
  for (std::size_t u : {9u, 43u}) {
    auto lat = build_lattice(DesignConfig{}, u);
    auto p = probe_points(lat);
    const auto& a = lat.nodes[p[0]];
    const auto& b = lat.nodes[p[1]];
    CHECK(a[0] == doctest::Approx(b[0]));
    CHECK(a[1] == doctest::Approx(-b[1]));
    CHECK(a[2] == b[2]);
    CHECK(std::abs(a[1]) == doctest::Approx(300.0).epsilon(0.1));
    // Rear face: the largest x among the nodes sharing its span station.
    for (auto id : p) {
      const std::size_t station = id / (lat.layers * lat.heights);
      for (std::size_t l = 0; l < lat.layers; ++l)
        for (std::size_t h = 0; h < lat.heights; ++h)
          CHECK(lat.nodes[lat.index(station, l, h)][0] <= lat.nodes[id][0] + 1e-12);
    }
    CHECK(probe_points(build_lattice(DesignConfig{}, u)) == p);
  }
}

TEST_CASE("simulate: equilibrium, free flight, contact, stability checks") {
  auto lat = build_lattice(DesignConfig{}, 6);
  SimOptions opt{0.4, 4, 100};
  auto still = simulate(lat, {0, 0, 0}, opt);
  for (std::size_t t = 0; t <= 4; ++t)
    for (std::size_t i = 0; i < lat.size() * 3; ++i) CHECK(still.positions.row(t)[i] == still.positions.row(0)[i]);

  // Dumbbell in free flight until the front mass reaches the wall.
  auto d = dumbbell(5.0);
  SimOptions fo{0.5, 20, 50};
  auto r = simulate(d, {-1, 0, 0}, fo);
  for (std::size_t t = 0; t <= 9; ++t) {
    const double time = 0.5 * static_cast<double>(t);
    CHECK(std::abs(r.positions.row(t)[0] - (0.0 - time)) < 1e-9);
    CHECK(std::abs(r.positions.row(t)[3] - (10.0 - time)) < 1e-9);
  }
  CHECK(r.positions.row(20)[0] > r.positions.row(10)[0]);  // rebounded
  CHECK(r.max_energy_error < 1e-2);

  CHECK_THROWS_AS(simulate(lat, {-5, 0, 0}, SimOptions{0.4, 2, 1}), ConfigError);

  auto unstable = dumbbell(0.0);
  unstable.elements[0].damping = -0.4;
  CHECK_THROWS_AS(simulate(unstable, {-1, 0, 0}, SimOptions{1.0, 200, 50}), SimulationError);
}

TEST_CASE("simulate: energy audit, penetration and plastic monotonicity on DoE corners") {
  GenerateOptions o;
  o.nodes = 120;
  for (double v : {-3.0, -7.0})
    for (double tau : {0.7, 1.3}) {
      DesignConfig c{1, 1, 1, v, tau, 240, 0};
      SimResult audit;
      generate_sample(c, o, &audit);
      INFO("v0=" << v << " tau=" << tau);
      CHECK(audit.max_energy_error < 0.01);
      CHECK(audit.max_penetration < 0.02 * audit.min_rest_length);
      CHECK(audit.plastic_monotone);
      if (v < -5) CHECK(audit.yielded > 0);
      const auto& h = audit.plastic_history;
      const std::size_t ne = audit.plastic.size();
      for (std::size_t t = 1; t < h.shape()[0]; ++t)
        for (std::size_t j = 0; j < ne; ++j) REQUIRE(h.row(t)[j] >= h.row(t - 1)[j]);
    }
}

TEST_CASE("DoE: counts, splits, determinism") {
  DoeLevels levels;
  CHECK(doe_configs(levels.truncated(1, 1, 1), 0).size() == 1);
  const auto nominal = doe_configs(levels.truncated(1, 1, 1), 0)[0];
  CHECK(nominal.v0 == -5);
  CHECK(nominal.thickness == 1.0);
  CHECK(nominal.offset == 0);
  auto all = doe_configs(levels, 7);
  CHECK(all.size() == 27);
  CHECK(split_counts(27) == std::array<std::size_t, 3>{21, 3, 3});
  CHECK(split_counts(1) == std::array<std::size_t, 3>{1, 0, 0});
  CHECK(split_counts(10) == std::array<std::size_t, 3>{8, 1, 1});
  for (std::size_t total = 0; total < 60; ++total) {
    const auto c = split_counts(total);
    CHECK(c[0] + c[1] + c[2] == total);
    CHECK(std::abs(static_cast<double>(c[0]) - 0.8 * static_cast<double>(total)) < 1.0);
  }
  auto splits = assign_splits(all);
  CHECK(std::count(splits.begin(), splits.end(), Split::kTrain) == 21);
  CHECK(std::count(splits.begin(), splits.end(), Split::kVal) == 3);
  CHECK(assign_splits(all) == splits);
  CHECK_THROWS_AS(levels.truncated(0, 1, 1), ConfigError);
  CHECK_THROWS_AS(levels.truncated(4, 1, 1), ConfigError);

  auto o = small_options();
  auto lv = levels.truncated(2, 1, 2);
  auto a = scratch_dir("det_a"), b = scratch_dir("det_b");
  write_generated(a, generate_doe(lv, o), lv, o);
  o.threads = 3;
  write_generated(b, generate_doe(lv, o), lv, o);
  for (const char* f : {"train.opds", "val.opds", "test.opds", "manifest.json"}) {
    INFO(f);
    CHECK(slurp(a / f) == slurp(b / f));
    CHECK(!slurp(a / f).empty());
  }
}

TEST_CASE("OPDS: bit-exact round trip and damaged files") {
  auto o = small_options();
  auto set = generate_doe(DoeLevels{}.truncated(2, 2, 1), o);
  const auto& train = set.files[0];
  REQUIRE(train.samples.size() == 3);
  auto dir = scratch_dir("roundtrip");
  write_dataset(dir / "x.opds", train);
  auto back = read_dataset(dir / "x.opds");
  CHECK(back.points == train.points);
  CHECK(back.steps == 5);
  CHECK(back.dt == train.dt);
  CHECK(back.split == Split::kTrain);
  REQUIRE(back.samples.size() == train.samples.size());
  for (std::size_t i = 0; i < back.samples.size(); ++i) {
    CHECK(back.samples[i].config == train.samples[i].config);
    CHECK(back.samples[i].positions == train.samples[i].positions);
    CHECK(back.samples[i].v0 == train.samples[i].v0);
    CHECK(back.samples[i].features == train.samples[i].features);
    CHECK(back.samples[i].probes == train.samples[i].probes);
  }
  write_dataset(dir / "y.opds", back);
  CHECK(slurp(dir / "x.opds") == slurp(dir / "y.opds"));

  const std::string bytes = slurp(dir / "x.opds");
  auto damaged = [&](const std::string& content) {
    std::ofstream(dir / "bad.opds", std::ios::binary) << content;
    return dir / "bad.opds";
  };
  CHECK_THROWS_AS(read_dataset(damaged(bytes.substr(0, bytes.size() - 3))), FormatError);
  CHECK_THROWS_AS(read_dataset(damaged(bytes + "x")), FormatError);
  CHECK_THROWS_AS(read_dataset(damaged("OPCK" + bytes.substr(4))), FormatError);
  CHECK_THROWS_AS(read_dataset(dir / "missing.opds"), FormatError);
}

TEST_CASE("normalisation: Welford vs two-pass, constant channel, round trip") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(1e4, 3.0);
  std::vector<double> xs(5000);
  RunningStats rs;
  for (auto& x : xs) {
    x = g(rng);
    rs.push(x);
  }
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  CHECK(std::abs(rs.mean() - mean) < 1e-9);
  CHECK(std::abs(rs.stddev() - std::sqrt(var)) < 1e-9);

  auto set = generate_doe(DoeLevels{}.truncated(3, 3, 1), small_options());
  const auto& train = set.files[0];
  auto stats = compute_norm_stats(train);
  // Offset is constant across this sweep: mean 0, std clamped to 1.
  CHECK(stats.features.std[2] == 1.0);
  CHECK(stats.features.mean[2] == 0.0);
  CHECK(stats.bc.std[1] == 1.0);
  CHECK(stats.globals.std[0] == 1.0);
  CHECK(stats.features.std[0] > 0.1);

  // Two-pass oracle on the x displacement channel.
  std::vector<double> disp;
  for (const auto& s : train.samples)
    for (std::size_t t = 1; t <= train.steps; ++t)
      for (std::size_t i = 0; i < train.points; ++i)
        disp.push_back(double(s.positions.row(t)[i * 3]) - double(s.positions.row(0)[i * 3]));
  double dm = 0, dv = 0;
  for (double x : disp) dm += x;
  dm /= static_cast<double>(disp.size());
  for (double x : disp) dv += (x - dm) * (x - dm);
  CHECK(std::abs(stats.displacement.mean[0] - dm) < 1e-9 * std::max(1.0, std::abs(dm)));
  CHECK(std::abs(stats.displacement.std[0] - std::sqrt(dv / static_cast<double>(disp.size()))) < 1e-9);

  const auto& rec = train.samples[0];
  std::vector<double> pos(rec.positions.values().begin(), rec.positions.values().end());
  auto normed = stats.position.applied(pos);
  stats.position.invert(normed);
  double worst = 0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const float f = static_cast<float>(normed[i]);
    worst = std::max(worst, std::abs(static_cast<double>(f) - pos[i]) / std::max(1.0, std::abs(pos[i])));
  }
  CHECK(worst < 1e-6);

  const auto sc = stats.scaling();
  CHECK(sc.displacement[0] == stats.displacement.std[0]);
  CHECK(sc.acceleration[2] == stats.acceleration.std[2]);
  CHECK_THROWS_AS(compute_norm_stats(DatasetFile{}), ConfigError);
}

TEST_CASE("records carry features, probes and a consistent trajectory view") {
  auto o = small_options();
  DesignConfig c{1, 1, 1, -7, 1.3, 120, 3};
  auto rec = generate_sample(c, o);
  const std::size_t n = span_nodes_for(o.nodes) * 12;
  CHECK(rec.positions.shape() == numcore::Shape{6, n, 3});
  CHECK(rec.features.shape() == numcore::Shape{n, kFeatureWidth});
  CHECK(rec.features(0, 0) == 1.3f);
  CHECK(rec.features(0, 1) == -7.0f);
  CHECK(rec.features(0, 2) == 120.0f);
  CHECK(rec.features(4, 3) == 1.0f);  // layer of node 4
  CHECK(rec.v0(5, 0) == -7.0f);
  CHECK(rec.v0(5, 1) == 0.0f);
  CHECK(rec.probes.size() == 2);
  auto tr = to_trajectory(rec, 0.4);
  CHECK(tr.steps() == 5);
  CHECK(tr.points() == n);
  CHECK(tr.globals == std::vector<double>{1, 1, 1, 1.3});
  CHECK(tr.bc == std::vector<double>{-7, 120});
  CHECK_THROWS_AS(generate_sample(DesignConfig{1, 1, 1, 0.0}, o), ConfigError);
}
