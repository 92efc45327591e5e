#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "opcrash/attn/attention.hpp"
#include "opcrash/geo/geometry.hpp"
#include "opcrash/numcore/params.hpp"

namespace opcrash::model {

using numcore::Tensor;
using numcore::Var;

enum class Backbone { kTS, kGeoTS, kGeoTSFlare };

/// What the head predicts per point.
enum class OutputMode {
  kAcceleration,     // 3 channels, driven step by step
  kOneShot,          // 3·T channels, displacements from the initial frame
  kTimeConditional,  // 3 channels at a queried normalised time
};

std::string to_string(Backbone b);
std::string to_string(OutputMode m);
/// Accepts "ts", "geots", "geots-flare" (case-insensitive). Throws ConfigError.
Backbone parse_backbone(std::string_view s);

struct ModelConfig {
  Backbone backbone = Backbone::kGeoTSFlare;
  OutputMode output = OutputMode::kOneShot;
  std::size_t tokens = 128;  // M
  std::size_t layers = 6;    // L
  std::size_t heads = 8;     // H
  std::size_t channels = 256;
  std::size_t context_anchors = 32;
  std::vector<geo::BallScale> scales{{0.05, 8}, {0.25, 32}};
  std::size_t feature_width = 0;  // F
  std::size_t globals_width = 0;
  std::size_t bc_width = 0;
  std::size_t horizon = 1;  // T, sets the one-shot output width
  std::uint64_t seed = 0;

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;
  bool uses_context() const { return backbone != Backbone::kTS; }
  /// Width of the per-call inputs appended to the static point features.
  std::size_t dynamic_width() const;
  std::size_t static_width() const;
  std::size_t output_width() const;
};

/// Per-sample inputs that do not change between model calls.
struct SampleGeometry {
  geo::GeometryCache geometry;
  std::vector<double> globals;
  std::vector<double> bc;
};

/// Builds the geometry cache for a cloud already mapped to the unit box.
SampleGeometry prepare_sample(const ModelConfig& config, const geo::PointCloud& cloud,
                              std::vector<double> globals, std::vector<double> bc);

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const noexcept { return config_; }
  numcore::ParamStore<T>& params() noexcept { return store_; }
  const numcore::ParamStore<T>& params() const noexcept { return store_; }

  /// Context bank for one sample, or an invalid Var for TS.
  Var<T> context(const SampleGeometry& sample) const;
  /// Per-point outputs (N × output_width). `dynamic` is N × dynamic_width and
  /// may be invalid when that width is zero; gradients flow into it.
  Var<T> forward(const SampleGeometry& sample, const Var<T>& context,
                 const Var<T>& dynamic) const;
  /// Convenience: context and forward in one call.
  Var<T> forward(const SampleGeometry& sample, const Var<T>& dynamic = {}) const;

  /// Model invocations since construction or the last reset.
  std::uint64_t calls() const noexcept { return calls_.load(std::memory_order_relaxed); }
  void reset_calls() noexcept { calls_.store(0, std::memory_order_relaxed); }
  std::uint64_t context_calls() const noexcept;

  const std::vector<attn::BlockParams<T>>& blocks() const noexcept { return blocks_; }
  std::vector<attn::BlockParams<T>>& blocks() noexcept { return blocks_; }
  const numcore::Mlp<T>& embed() const noexcept { return embed_; }
  const numcore::Mlp<T>& head() const noexcept { return head_; }
  numcore::Mlp<T>& head() noexcept { return head_; }

 private:
  ModelConfig config_;
  numcore::ParamStore<T> store_;
  numcore::Mlp<T> embed_;
  std::optional<geo::ContextProjector<T>> projector_;
  std::vector<attn::BlockParams<T>> blocks_;
  numcore::Mlp<T> head_;
  mutable std::atomic<std::uint64_t> calls_{0};
};

/// Named float tensor stored alongside the parameters.
struct NamedBlob {
  std::string name;
  Tensor<float> data;
};

/// Writes the "OPCK" container: header, config record, then every parameter
/// followed by `extras`, as little-endian float32 blobs.
void save_checkpoint(const std::string& path, const Model<float>& model,
                     const std::vector<NamedBlob>& extras = {});

struct Checkpoint {
  ModelConfig config;
  std::vector<NamedBlob> blobs;  // parameters first, then extras
};

/// Throws FormatError on a malformed or truncated file.
Checkpoint read_checkpoint(const std::string& path);
/// Rebuilds the model and copies every parameter blob into it; the
/// remaining blobs are returned through `extras`.
std::unique_ptr<Model<float>> load_checkpoint(const std::string& path,
                                              std::vector<NamedBlob>* extras = nullptr);

}  // namespace opcrash::model
