#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "opcrash/numcore/params.hpp"

namespace opcrash::geo {

using numcore::Tensor;
using numcore::Var;

/// Positions N×3 and per-point design features N×F, both in 64-bit.
struct PointCloud {
  Tensor<double> positions;
  Tensor<double> features;

  std::size_t size() const { return positions.rows(); }
  std::size_t feature_width() const { return features.empty() ? 0 : features.cols(); }
};

/// Uniform scale and shift mapping a cloud into [0, 1]^3 (longest side = 1).
struct UnitBoxTransform {
  std::array<double, 3> origin{};
  double scale = 1.0;

  void apply(Tensor<double>& positions) const;
};

UnitBoxTransform unit_box_transform(const Tensor<double>& positions);

struct BallScale {
  double radius = 0.05;
  std::size_t cap = 8;
};

/// Neighbour lists in compressed-row form.
struct BallQueryResult {
  std::vector<std::size_t> offsets;  // size N + 1
  std::vector<std::uint32_t> indices;

  std::span<const std::uint32_t> neighbors(std::size_t i) const {
    return {indices.data() + offsets[i], offsets[i + 1] - offsets[i]};
  }
  std::size_t count(std::size_t i) const { return offsets[i + 1] - offsets[i]; }
};

/// Up to `cap` points within `radius` (inclusive) of each point, nearest
/// first. Equal distances are ordered by lexicographic coordinates, then by
/// index, so the neighbour set does not depend on point order. Throws
/// ConfigError for radius <= 0 or cap == 0.
BallQueryResult ball_query(const Tensor<double>& positions, double radius, std::size_t cap);

/// Width of multiscale_features' output: 3 + F + Σ (5 + F).
std::size_t multiscale_width(std::size_t feature_width, std::size_t scales);

/// Per point: position, features, then for every scale the neighbour
/// centroid offset (3), mean neighbour distance, count / cap and the mean
/// neighbour feature vector.
Tensor<double> multiscale_features(const PointCloud& cloud, std::span<const BallScale> scales);

/// Farthest-point sampling over the lexicographically sorted points. The
/// first sorted point seeds the distance field but is only chosen once every
/// other point has been. Returns min(count, N) original indices.
std::vector<std::size_t> farthest_point_anchors(const Tensor<double>& positions,
                                                std::size_t count);

/// Geometry derived from the initial frame, computed once per sample.
struct GeometryCache {
  Tensor<double> augmented;          // N × multiscale_width
  std::vector<std::size_t> anchors;  // rows of `augmented` feeding the context
};

GeometryCache prepare_geometry(const PointCloud& cloud, std::span<const BallScale> scales,
                               std::size_t anchors);

template <typename T>
struct ContextProjector {
  numcore::Mlp<T> anchor_mlp;
  numcore::Mlp<T> globals_mlp;
  numcore::Mlp<T> bc_mlp;
  /// Number of project_context evaluations; lets callers verify reuse.
  mutable std::atomic<std::uint64_t> calls{0};

  ContextProjector() = default;
  ContextProjector(const ContextProjector& o)
      : anchor_mlp(o.anchor_mlp), globals_mlp(o.globals_mlp), bc_mlp(o.bc_mlp), calls(0) {}
  ContextProjector& operator=(const ContextProjector& o) {
    anchor_mlp = o.anchor_mlp;
    globals_mlp = o.globals_mlp;
    bc_mlp = o.bc_mlp;
    return *this;
  }
};

template <typename T>
ContextProjector<T> make_context_projector(numcore::ParamStore<T>& store, const std::string& name,
                                           std::size_t augmented_width, std::size_t globals_width,
                                           std::size_t bc_width, std::size_t width,
                                           numcore::Rng& rng);

/// Context bank of anchors.size() + 2 rows: one token per anchor, then the
/// globals token, then the boundary-condition token.
template <typename T>
Var<T> project_context(const GeometryCache& geometry, std::span<const double> globals,
                       std::span<const double> bc, const ContextProjector<T>& projector);

}  // namespace opcrash::geo
