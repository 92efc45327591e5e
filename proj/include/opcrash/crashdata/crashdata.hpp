#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "opcrash/numcore/tensor.hpp"
#include "opcrash/temporal/temporal.hpp"

namespace opcrash::crashdata {

using numcore::Tensor;
using Vec3 = std::array<double, 3>;

/// Bad or unstable ground-truth generation.
class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One design point. Units: mm, ms, kg (forces in kN, energies in J).
struct DesignConfig {
  double sx = 1, sy = 1, sz = 1;
  double v0 = -5;         // mm/ms along x; negative moves toward the impactor
  double thickness = 1;   // τ, scales element stiffness and strength
  double offset = 0;      // lateral impactor offset, mm
  std::uint64_t seed = 0;

  void validate() const;
  /// FNV-1a over the bit patterns of every field.
  std::uint64_t hash() const;
  bool operator==(const DesignConfig&) const = default;
};

/// Nominal lattice template and material constants.
struct LatticeSpec {
  double span = 1200;       // y extent
  double layer_gap = 30;    // x spacing between the three layers
  double sag = 60;          // x set-back of the beam ends relative to its centre
  double height = 100;      // z extent
  std::size_t layers = 3;
  std::size_t heights = 4;

  double axial_rigidity = 120;    // EA, kN; element stiffness EA·τ/L0
  double yield_strain = 0.01;
  double hardening_ratio = 0.05;  // post-yield tangent over elastic stiffness
  double damping_time = 5e-4;     // stiffness-proportional damping β, ms
  double node_mass = 0.01;        // kg
  double end_mass = 0.5;          // added to every node of both beam ends
  double impactor_radius = 127;
  double impactor_gap = 1;        // initial clearance at the impacted point
  double contact_stiffness = 20;  // kN/mm

  /// Bounding box of the unscaled template: {min, max}.
  std::array<Vec3, 2> nominal_box() const;
};

struct Element {
  std::uint32_t a = 0, b = 0;
  double rest = 0;
  double stiffness = 0;
  double yield_force = 0;
  double hardening_modulus = 0;  // kinematic hardening H, tangent kH/(k+H)
  double damping = 0;            // dashpot coefficient along the element
};

/// Rigid vertical cylinder, axis parallel to z through (x, y).
struct Impactor {
  double x = 0, y = 0, radius = 0, stiffness = 0;
};

struct BeamLattice {
  std::vector<Vec3> nodes;
  std::vector<Element> elements;
  std::vector<double> masses;
  Impactor impactor;
  std::size_t span_nodes = 0, layers = 0, heights = 0;

  std::size_t size() const { return nodes.size(); }
  /// Node id of grid coordinate (u along the span, layer l, height h).
  std::size_t index(std::size_t u, std::size_t l, std::size_t h) const {
    return (u * layers + l) * heights + h;
  }
};

/// Span resolution giving roughly `target_nodes` nodes (at least 2).
std::size_t span_nodes_for(std::size_t target_nodes, const LatticeSpec& spec = {});
/// Axial links plus both diagonals of every grid face.
std::size_t element_count(std::size_t span_nodes, std::size_t layers, std::size_t heights);

/// Curved three-layer beam lattice scaled by the design's (sx, sy, sz) with
/// stiffness and strength scaled by τ. Throws ConfigError for span_nodes < 2.
BeamLattice build_lattice(const DesignConfig& config, std::size_t span_nodes,
                          const LatticeSpec& spec = {});

/// Two rear-layer nodes mirrored about the impact axis at ±span/4.
std::array<std::uint32_t, 2> probe_points(const BeamLattice& lattice);

struct SimOptions {
  double frame_dt = 0.4;  // ms
  std::size_t frames = 50;
  std::size_t substeps = 100;
};

struct EnergyState {
  double kinetic = 0, elastic = 0, hardening = 0, contact = 0;
  double plastic = 0, damping = 0;  // cumulative dissipation
  double total() const { return kinetic + elastic + hardening + contact + plastic + damping; }
};

struct SimResult {
  Tensor<double> positions;   // (T+1) × N × 3
  Tensor<double> velocities;  // (T+1) × N × 3
  std::vector<EnergyState> energy;  // frames 0..T-1
  double max_energy_error = 0;      // max |E(t) - E(0)| / E(0) over substeps
  double max_penetration = 0;       // mm
  double min_rest_length = 0;
  bool plastic_monotone = true;
  std::vector<double> plastic;      // accumulated plastic elongation per element
  Tensor<double> plastic_history;   // (T+1) × elements
  std::size_t yielded = 0;
};

/// Largest stable substep from a Gershgorin bound on the stiffness spectrum.
double stable_dt(const BeamLattice& lattice);

/// Semi-implicit Euler integration from a uniform initial velocity. Throws
/// ConfigError when the substep is not below stable_dt and SimulationError
/// when kinetic plus stored energy grows beyond 10× its initial value.
SimResult simulate(const BeamLattice& lattice, const Vec3& v0, const SimOptions& options);

/// Full-factorial level lists, nominal level first.
struct DoeLevels {
  std::vector<double> velocities{-5, -3, -7};
  std::vector<double> thicknesses{1.0, 0.7, 1.3};
  std::vector<double> offsets{0, 120, 240};
  std::vector<Vec3> scales{{1, 1, 1}};

  /// First k entries of each list; throws ConfigError when k is 0 or too large.
  DoeLevels truncated(std::size_t velocities, std::size_t thicknesses, std::size_t offsets) const;
  std::size_t count() const;
};

std::vector<DesignConfig> doe_configs(const DoeLevels& levels, std::uint64_t seed);

enum class Split : std::uint32_t { kTrain = 0, kVal = 1, kTest = 2 };
std::string to_string(Split s);
Split parse_split(std::string_view s);

/// 80/10/10 with largest-remainder rounding.
std::array<std::size_t, 3> split_counts(std::size_t total);
/// Configs ordered by hash, then cut into train/val/test.
std::vector<Split> assign_splits(std::span<const DesignConfig> configs);

inline constexpr std::size_t kFeatureWidth = 4;  // τ, v0, offset, layer
inline constexpr std::size_t kGlobalsWidth = 4;  // sx, sy, sz, τ
inline constexpr std::size_t kBcWidth = 2;       // v0, offset

struct SampleRecord {
  DesignConfig config;
  Tensor<float> positions;  // (T+1) × N × 3
  Tensor<float> v0;         // N × 3
  Tensor<float> features;   // N × F
  std::vector<std::uint32_t> probes;
};

/// "OPDS" container for one split.
struct DatasetFile {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t points = 0, steps = 0, dims = 3, features = kFeatureWidth;
  double dt = 0;
  Split split = Split::kTrain;
  std::vector<SampleRecord> samples;
};

void write_dataset(const std::filesystem::path& path, const DatasetFile& file);
/// Throws FormatError on bad magic, version, counts or trailing bytes.
DatasetFile read_dataset(const std::filesystem::path& path);

struct GenerateOptions {
  std::size_t nodes = 512;
  SimOptions sim;
  LatticeSpec spec;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Simulates one design and packs it as a dataset record.
SampleRecord generate_sample(const DesignConfig& config, const GenerateOptions& options,
                             SimResult* audit = nullptr);

struct GeneratedSet {
  std::vector<DesignConfig> configs;
  std::vector<Split> splits;
  std::array<DatasetFile, 3> files;  // indexed by Split
};

/// Runs the sweep; simulation of independent configs may use several threads
/// without affecting the output.
GeneratedSet generate_doe(const DoeLevels& levels, const GenerateOptions& options);
/// Writes train/val/test .opds files and manifest.json under `dir`.
void write_generated(const std::filesystem::path& dir, const GeneratedSet& set,
                     const DoeLevels& levels, const GenerateOptions& options);
std::filesystem::path split_path(const std::filesystem::path& dir, Split s);

/// Welford accumulator for one channel.
class RunningStats {
 public:
  void push(double x);
  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  /// Population standard deviation.
  double stddev() const;

 private:
  std::size_t n_ = 0;
  double mean_ = 0, m2_ = 0;
};

struct ChannelStats {
  std::vector<double> mean, std;
  /// Standard deviations below this are replaced by 1.
  static constexpr double kMinStd = 1e-12;

  void apply(std::span<double> values) const;   // cyclic over channels
  void invert(std::span<double> values) const;
  std::vector<double> applied(std::span<const double> values) const;
};

/// Per-channel statistics over a training split.
struct NormStats {
  ChannelStats position, displacement, velocity, acceleration;
  ChannelStats features, globals, bc;

  temporal::Scaling scaling() const;
};

ChannelStats finish_stats(std::span<const RunningStats> channels);
NormStats compute_norm_stats(const DatasetFile& train);

std::vector<double> globals_of(const DesignConfig& c);
std::vector<double> bc_of(const DesignConfig& c);
/// Record in physical units as a temporal trajectory (features unnormalised).
temporal::Trajectory to_trajectory(const SampleRecord& r, double dt);

}  // namespace opcrash::crashdata
