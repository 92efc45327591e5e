#include "opcrash/numcore/params.hpp"

#include <cmath>

#include "opcrash/errors.hpp"
#include "opcrash/numcore/ops.hpp"

namespace opcrash::numcore {

template <typename T>
Var<T> ParamStore<T>::add(std::string name, Tensor<T> init) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  Var<T> v = Var<T>::parameter(std::move(init));
  params_.push_back({std::move(name), v});
  return v;
}

template <typename T>
Var<T> ParamStore<T>::get(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.var;
  }
  throw ConfigError("unknown parameter '" + std::string(name) + "'");
}

template <typename T>
bool ParamStore<T>::contains(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return true;
  }
  return false;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.value().size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

template <typename T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> w({fan_in, fan_out});
  for (auto& v : w.values()) v = static_cast<T>(dist(rng));
  return w;
}

template <typename T>
Tensor<T> scaled_normal(Shape shape, T scale, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> w(std::move(shape));
  for (auto& v : w.values()) v = static_cast<T>(dist(rng)) * scale;
  return w;
}

template <typename T>
Var<T> Linear<T>::operator()(const Var<T>& x) const {
  return linear(x, weight, bias);
}

template <typename T>
Linear<T> make_linear(ParamStore<T>& store, const std::string& name, std::size_t in,
                      std::size_t out, Rng& rng, bool with_bias) {
  Linear<T> l;
  l.weight = store.add(name + ".weight", xavier_uniform<T>(in, out, rng));
  if (with_bias) l.bias = store.add(name + ".bias", Tensor<T>({1, out}));
  return l;
}

template <typename T>
Var<T> Mlp<T>::operator()(const Var<T>& x) const {
  return mlp_apply(*this, x);
}

template <typename T>
Mlp<T> make_mlp(ParamStore<T>& store, const std::string& name,
                const std::vector<std::size_t>& widths, Rng& rng) {
  if (widths.size() < 2) throw ConfigError("mlp '" + name + "' needs at least two widths");
  Mlp<T> mlp;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    mlp.layers.push_back(
        make_linear(store, name + "." + std::to_string(i), widths[i], widths[i + 1], rng));
  }
  return mlp;
}

template <typename T>
Var<T> mlp_apply(const Mlp<T>& mlp, const Var<T>& x) {
  if (mlp.layers.empty()) throw ConfigError("mlp_apply: no layers");
  for (std::size_t i = 0; i + 1 < mlp.layers.size(); ++i) {
    if (mlp.layers[i].out_features() != mlp.layers[i + 1].in_features()) {
      throw DimensionError("mlp_apply: layer " + std::to_string(i) + " width " +
                           std::to_string(mlp.layers[i].out_features()) + " does not chain to " +
                           std::to_string(mlp.layers[i + 1].in_features()));
    }
  }
  Var<T> h = x;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    h = mlp.layers[i](h);
    if (i + 1 < mlp.layers.size()) h = gelu(h);
  }
  return h;
}

template <typename T>
Var<T> LayerNormParams<T>::operator()(const Var<T>& x) const {
  return layer_norm(x, gain, bias);
}

template <typename T>
LayerNormParams<T> make_layer_norm(ParamStore<T>& store, const std::string& name,
                                   std::size_t width) {
  LayerNormParams<T> ln;
  ln.gain = store.add(name + ".gain", Tensor<T>({1, width}, T{1}));
  ln.bias = store.add(name + ".bias", Tensor<T>({1, width}));
  return ln;
}

#define OPCRASH_INSTANTIATE_PARAMS(T)                                                       \
  template class ParamStore<T>;                                                            \
  template struct Linear<T>;                                                               \
  template struct Mlp<T>;                                                                  \
  template struct LayerNormParams<T>;                                                      \
  template Tensor<T> xavier_uniform<T>(std::size_t, std::size_t, Rng&);                    \
  template Tensor<T> scaled_normal<T>(Shape, T, Rng&);                                     \
  template Linear<T> make_linear<T>(ParamStore<T>&, const std::string&, std::size_t,       \
                                    std::size_t, Rng&, bool);                              \
  template Mlp<T> make_mlp<T>(ParamStore<T>&, const std::string&,                          \
                              const std::vector<std::size_t>&, Rng&);                      \
  template Var<T> mlp_apply<T>(const Mlp<T>&, const Var<T>&);                              \
  template LayerNormParams<T> make_layer_norm<T>(ParamStore<T>&, const std::string&,       \
                                                 std::size_t);

OPCRASH_INSTANTIATE_PARAMS(float)
OPCRASH_INSTANTIATE_PARAMS(double)

}  // namespace opcrash::numcore
