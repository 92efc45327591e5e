#include "opcrash/geo/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <tuple>

#include "opcrash/errors.hpp"
#include "opcrash/numcore/memory.hpp"
#include "opcrash/numcore/ops.hpp"

namespace opcrash::geo {

namespace {

constexpr std::size_t kMaxCellsPerAxis = 256;

void require_points(const Tensor<double>& positions) {
  if (positions.shape().size() != 2 || positions.cols() != 3) {
    throw DimensionError("expected N×3 positions, got " + numcore::shape_string(positions.shape()));
  }
}

double dist2(const double* a, const double* b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Strict order on points by coordinates, then index.
struct LexLess {
  const Tensor<double>* pos;
  bool operator()(std::size_t a, std::size_t b) const {
    const double* pa = pos->row(a);
    const double* pb = pos->row(b);
    return std::tie(pa[0], pa[1], pa[2], a) < std::tie(pb[0], pb[1], pb[2], b);
  }
};

}  // namespace

void UnitBoxTransform::apply(Tensor<double>& positions) const {
  require_points(positions);
  for (std::size_t i = 0; i < positions.rows(); ++i)
    for (std::size_t a = 0; a < 3; ++a) positions(i, a) = (positions(i, a) - origin[a]) * scale;
}

UnitBoxTransform unit_box_transform(const Tensor<double>& positions) {
  require_points(positions);
  if (positions.rows() == 0) throw DimensionError("empty point cloud");
  UnitBoxTransform t;
  std::array<double, 3> hi{};
  for (std::size_t a = 0; a < 3; ++a) {
    t.origin[a] = hi[a] = positions(0, a);
  }
  for (std::size_t i = 1; i < positions.rows(); ++i) {
    for (std::size_t a = 0; a < 3; ++a) {
      t.origin[a] = std::min(t.origin[a], positions(i, a));
      hi[a] = std::max(hi[a], positions(i, a));
    }
  }
  const double extent = std::max({hi[0] - t.origin[0], hi[1] - t.origin[1], hi[2] - t.origin[2]});
  t.scale = extent > 0 ? 1.0 / extent : 1.0;
  return t;
}

BallQueryResult ball_query(const Tensor<double>& positions, double radius, std::size_t cap) {
  require_points(positions);
  if (!(radius > 0)) throw ConfigError("ball_query radius must be positive");
  if (cap == 0) throw ConfigError("ball_query cap must be at least 1");
  const std::size_t n = positions.rows();
  BallQueryResult out;
  out.offsets.assign(n + 1, 0);
  if (n == 0) return out;

  std::array<double, 3> lo{}, hi{};
  for (std::size_t a = 0; a < 3; ++a) lo[a] = hi[a] = positions(0, a);
  for (std::size_t i = 1; i < n; ++i)
    for (std::size_t a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], positions(i, a));
      hi[a] = std::max(hi[a], positions(i, a));
    }

  // Uniform grid with cells no smaller than the radius; coarsened when the
  // box would need too many cells along an axis.
  std::array<std::size_t, 3> dims{1, 1, 1};
  std::array<double, 3> cell{1, 1, 1};
  for (std::size_t a = 0; a < 3; ++a) {
    const double extent = hi[a] - lo[a];
    if (std::isfinite(radius) && extent > 0) {
      const double wanted = std::floor(extent / radius) + 1;
      dims[a] = static_cast<std::size_t>(std::min<double>(wanted, kMaxCellsPerAxis));
    }
    cell[a] = dims[a] > 1 ? extent / static_cast<double>(dims[a]) * (1 + 1e-12) : 1.0;
    if (dims[a] > 1) cell[a] = std::max(cell[a], radius);
  }
  auto cell_of = [&](const double* p, std::size_t a) {
    if (dims[a] == 1) return std::size_t{0};
    const auto c = static_cast<std::size_t>((p[a] - lo[a]) / cell[a]);
    return std::min(c, dims[a] - 1);
  };
  auto flat = [&](std::size_t x, std::size_t y, std::size_t z) {
    return (x * dims[1] + y) * dims[2] + z;
  };

  std::vector<std::size_t> cell_start(dims[0] * dims[1] * dims[2] + 1, 0);
  std::vector<std::size_t> point_cell(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = positions.row(i);
    point_cell[i] = flat(cell_of(p, 0), cell_of(p, 1), cell_of(p, 2));
    ++cell_start[point_cell[i] + 1];
  }
  std::partial_sum(cell_start.begin(), cell_start.end(), cell_start.begin());
  std::vector<std::uint32_t> cell_points(n);
  {
    std::vector<std::size_t> fill(cell_start.begin(), cell_start.end() - 1);
    for (std::size_t i = 0; i < n; ++i) cell_points[fill[point_cell[i]]++] = static_cast<std::uint32_t>(i);
  }

  std::array<std::size_t, 3> reach{};
  for (std::size_t a = 0; a < 3; ++a) {
    reach[a] = dims[a] == 1 ? 0
                            : static_cast<std::size_t>(std::ceil(radius / cell[a]));
    reach[a] = std::min(reach[a], dims[a]);
  }

  const double r2 = radius * radius;
  std::vector<std::pair<double, std::uint32_t>> cand;
  LexLess lex{&positions};
  auto closer = [&](const std::pair<double, std::uint32_t>& a,
                    const std::pair<double, std::uint32_t>& b) {
    if (a.first != b.first) return a.first < b.first;
    return lex(a.second, b.second);
  };
  out.indices.reserve(n * std::min(cap, n));
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = positions.row(i);
    const std::size_t cx = cell_of(p, 0), cy = cell_of(p, 1), cz = cell_of(p, 2);
    cand.clear();
    for (std::size_t x = cx - std::min(cx, reach[0]); x <= std::min(cx + reach[0], dims[0] - 1); ++x)
      for (std::size_t y = cy - std::min(cy, reach[1]); y <= std::min(cy + reach[1], dims[1] - 1); ++y)
        for (std::size_t z = cz - std::min(cz, reach[2]); z <= std::min(cz + reach[2], dims[2] - 1);
             ++z) {
          const std::size_t c = flat(x, y, z);
          for (std::size_t k = cell_start[c]; k < cell_start[c + 1]; ++k) {
            const std::uint32_t j = cell_points[k];
            const double d2 = dist2(p, positions.row(j));
            if (d2 <= r2) cand.emplace_back(d2, j);
          }
        }
    const std::size_t keep = std::min(cap, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(),
                      closer);
    for (std::size_t k = 0; k < keep; ++k) out.indices.push_back(cand[k].second);
    out.offsets[i + 1] = out.indices.size();
  }
  return out;
}

std::size_t multiscale_width(std::size_t feature_width, std::size_t scales) {
  return 3 + feature_width + scales * (5 + feature_width);
}

Tensor<double> multiscale_features(const PointCloud& cloud, std::span<const BallScale> scales) {
  require_points(cloud.positions);
  if (scales.empty()) throw ConfigError("multiscale_features needs at least one scale");
  const std::size_t n = cloud.size(), f = cloud.feature_width();
  if (f > 0 && cloud.features.rows() != n) {
    throw DimensionError("feature rows do not match point count");
  }
  Tensor<double> out({n, multiscale_width(f, scales.size())});
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.row(i);
    std::copy_n(cloud.positions.row(i), 3, row);
    if (f > 0) std::copy_n(cloud.features.row(i), f, row + 3);
  }
  std::size_t col = 3 + f;
  for (const auto& s : scales) {
    const BallQueryResult nb = ball_query(cloud.positions, s.radius, s.cap);
    for (std::size_t i = 0; i < n; ++i) {
      double* row = out.row(i) + col;
      const auto ids = nb.neighbors(i);
      const double inv = 1.0 / static_cast<double>(ids.size());
      const double* p = cloud.positions.row(i);
      double mean_dist = 0;
      for (std::uint32_t j : ids) {
        const double* q = cloud.positions.row(j);
        for (std::size_t a = 0; a < 3; ++a) row[a] += q[a] * inv;
        mean_dist += std::sqrt(dist2(p, q)) * inv;
        for (std::size_t c = 0; c < f; ++c) row[5 + c] += cloud.features(j, c) * inv;
      }
      for (std::size_t a = 0; a < 3; ++a) row[a] -= p[a];
      row[3] = mean_dist;
      row[4] = static_cast<double>(ids.size()) / static_cast<double>(s.cap);
    }
    col += 5 + f;
  }
  return out;
}

std::vector<std::size_t> farthest_point_anchors(const Tensor<double>& positions,
                                                std::size_t count) {
  require_points(positions);
  const std::size_t n = positions.rows();
  if (n == 0) throw DimensionError("empty point cloud");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), LexLess{&positions});

  const std::size_t take = std::min(count, n);
  std::vector<double> nearest(n);
  std::vector<char> chosen(n, 0);
  const double* seed = positions.row(order[0]);
  for (std::size_t k = 0; k < n; ++k) nearest[k] = dist2(positions.row(order[k]), seed);

  std::vector<std::size_t> anchors;
  anchors.reserve(take);
  while (anchors.size() < take) {
    std::size_t best = n;
    for (std::size_t k = 0; k < n; ++k) {
      if (!chosen[k] && (best == n || nearest[k] > nearest[best])) best = k;
    }
    chosen[best] = 1;
    anchors.push_back(order[best]);
    const double* a = positions.row(order[best]);
    for (std::size_t k = 0; k < n; ++k) nearest[k] = std::min(nearest[k], dist2(positions.row(order[k]), a));
  }
  return anchors;
}

GeometryCache prepare_geometry(const PointCloud& cloud, std::span<const BallScale> scales,
                               std::size_t anchors) {
  GeometryCache g;
  g.augmented = multiscale_features(cloud, scales);
  g.anchors = farthest_point_anchors(cloud.positions, anchors);
  return g;
}

template <typename T>
ContextProjector<T> make_context_projector(numcore::ParamStore<T>& store, const std::string& name,
                                           std::size_t augmented_width, std::size_t globals_width,
                                           std::size_t bc_width, std::size_t width,
                                           numcore::Rng& rng) {
  ContextProjector<T> p;
  p.anchor_mlp = numcore::make_mlp(store, name + ".anchor", {augmented_width, width, width}, rng);
  p.globals_mlp = numcore::make_mlp(store, name + ".globals", {globals_width, width, width}, rng);
  p.bc_mlp = numcore::make_mlp(store, name + ".bc", {bc_width, width, width}, rng);
  return p;
}

template <typename T>
Var<T> project_context(const GeometryCache& geometry, std::span<const double> globals,
                       std::span<const double> bc, const ContextProjector<T>& projector) {
  numcore::ScopedAllocTag tag(numcore::AllocTag::kContext);
  projector.calls.fetch_add(1, std::memory_order_relaxed);
  const std::size_t w = geometry.augmented.cols();
  Tensor<T> anchor_rows({geometry.anchors.size(), w});
  for (std::size_t k = 0; k < geometry.anchors.size(); ++k)
    for (std::size_t c = 0; c < w; ++c)
      anchor_rows(k, c) = static_cast<T>(geometry.augmented(geometry.anchors[k], c));
  auto row_of = [](std::span<const double> v) {
    Tensor<T> t({1, v.size()});
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<T>(v[i]);
    return Var<T>::constant(std::move(t));
  };
  return numcore::concat_rows<T>({projector.anchor_mlp(Var<T>::constant(std::move(anchor_rows))),
                                  projector.globals_mlp(row_of(globals)),
                                  projector.bc_mlp(row_of(bc))});
}

template ContextProjector<float> make_context_projector(numcore::ParamStore<float>&,
                                                        const std::string&, std::size_t,
                                                        std::size_t, std::size_t, std::size_t,
                                                        numcore::Rng&);
template ContextProjector<double> make_context_projector(numcore::ParamStore<double>&,
                                                         const std::string&, std::size_t,
                                                         std::size_t, std::size_t, std::size_t,
                                                         numcore::Rng&);
template Var<float> project_context(const GeometryCache&, std::span<const double>,
                                    std::span<const double>, const ContextProjector<float>&);
template Var<double> project_context(const GeometryCache&, std::span<const double>,
                                     std::span<const double>, const ContextProjector<double>&);

}  // namespace opcrash::geo
