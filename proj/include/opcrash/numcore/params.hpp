#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "opcrash/numcore/autodiff.hpp"

namespace opcrash::numcore {

using Rng = std::mt19937_64;

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

/// Ordered registry of trainable tensors. Registration order defines the
/// checkpoint layout and the optimiser's iteration order.
template <typename T>
class ParamStore {
 public:
  /// Throws ConfigError on a duplicate name.
  Var<T> add(std::string name, Tensor<T> init);

  const std::vector<NamedParam<T>>& entries() const noexcept { return params_; }
  /// Throws ConfigError when absent.
  Var<T> get(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<NamedParam<T>> params_;
};

/// Xavier-uniform weight, U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);
/// Unit normal scaled by `scale`.
template <typename T>
Tensor<T> scaled_normal(Shape shape, T scale, Rng& rng);

template <typename T>
struct Linear {
  Var<T> weight;  // in × out
  Var<T> bias;    // 1 × out, may be invalid

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }
  Var<T> operator()(const Var<T>& x) const;
};

template <typename T>
Linear<T> make_linear(ParamStore<T>& store, const std::string& name, std::size_t in,
                      std::size_t out, Rng& rng, bool with_bias = true);

/// Affine layers with GELU between them; no activation after the last.
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;

  std::size_t in_features() const { return layers.front().in_features(); }
  std::size_t out_features() const { return layers.back().out_features(); }
  Var<T> operator()(const Var<T>& x) const;
};

/// `widths` lists every layer boundary, e.g. {in, hidden, out}.
template <typename T>
Mlp<T> make_mlp(ParamStore<T>& store, const std::string& name,
                const std::vector<std::size_t>& widths, Rng& rng);

/// Checks that consecutive widths chain and applies the layers.
template <typename T>
Var<T> mlp_apply(const Mlp<T>& mlp, const Var<T>& x);

template <typename T>
struct LayerNormParams {
  Var<T> gain;
  Var<T> bias;
  Var<T> operator()(const Var<T>& x) const;
};

template <typename T>
LayerNormParams<T> make_layer_norm(ParamStore<T>& store, const std::string& name,
                                   std::size_t width);

}  // namespace opcrash::numcore
