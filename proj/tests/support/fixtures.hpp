#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "opcrash/geo/geometry.hpp"
#include "opcrash/model/model.hpp"

namespace opcrash::testing {

inline geo::PointCloud random_unit_cloud(std::size_t n, std::size_t f, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g;
  geo::PointCloud c{numcore::Tensor<double>({n, 3}), numcore::Tensor<double>({n, f})};
  for (auto& v : c.positions.values()) v = u(rng);
  for (auto& v : c.features.values()) v = g(rng);
  return c;
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), std::mt19937_64(seed));
  return p;
}

template <typename T>
numcore::Tensor<T> permute_rows(const numcore::Tensor<T>& x, const std::vector<std::size_t>& perm) {
  numcore::Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = x(perm[i], j);
  return y;
}

inline geo::PointCloud permute_cloud(const geo::PointCloud& c, const std::vector<std::size_t>& perm) {
  return {permute_rows(c.positions, perm), permute_rows(c.features, perm)};
}

/// Small configuration used throughout the tests.
inline model::ModelConfig tiny_config(model::Backbone b, model::OutputMode m = model::OutputMode::kOneShot) {
  model::ModelConfig c;
  c.backbone = b;
  c.output = m;
  c.tokens = 4;
  c.layers = 2;
  c.heads = 2;
  c.channels = 16;
  c.context_anchors = 4;
  c.scales = {{0.2, 4}, {0.5, 8}};
  c.feature_width = 2;
  c.globals_width = 3;
  c.bc_width = 2;
  c.horizon = 2;
  c.seed = 5;
  return c;
}

/// Replaces the zero-initialised last head layer with small random weights.
template <typename T>
void randomize_head(model::Model<T>& m, std::uint64_t seed) {
  numcore::Rng rng(seed);
  auto& w = m.head().layers.back().weight.mutable_value();
  w = numcore::scaled_normal<T>(w.shape(), T(0.3), rng);
}

}  // namespace opcrash::testing
