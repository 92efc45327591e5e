#include "opcrash/attn/attention.hpp"

#include <cassert>
#include <cmath>

#include "opcrash/errors.hpp"
#include "opcrash/numcore/memory.hpp"
#include "opcrash/numcore/ops.hpp"

namespace opcrash::attn {

using namespace numcore;

namespace {

void check_heads(std::size_t channels, std::size_t heads) {
  if (heads == 0 || channels == 0 || channels % heads != 0) {
    throw ConfigError("channel width " + std::to_string(channels) + " is not divisible into " +
                      std::to_string(heads) + " heads");
  }
}

void check_tokens(std::size_t tokens) {
  if (tokens < 1) throw ConfigError("at least one slice/latent token is required");
}

template <typename T>
void check_width(const Var<T>& x, std::size_t channels, const char* what) {
  if (x.shape().size() != 2 || x.cols() != channels) {
    throw DimensionError(std::string(what) + ": expected N×" + std::to_string(channels) +
                         " input, got " + shape_string(x.shape()));
  }
}

#ifndef NDEBUG
template <typename T>
void assert_columns_normalised(const Tensor<T>& s) {
  for (std::size_t j = 0; j < s.cols(); ++j) {
    double total = 0;
    for (std::size_t i = 0; i < s.rows(); ++i) {
      assert(s(i, j) >= T{0});
      total += s(i, j);
    }
    assert(std::abs(total - 1.0) < 1e-5);
  }
}
#endif

}  // namespace

template <typename T>
PhysicsAttentionParams<T> make_physics_attention(ParamStore<T>& store, const std::string& name,
                                                 std::size_t channels, std::size_t heads,
                                                 std::size_t tokens, Rng& rng) {
  check_heads(channels, heads);
  check_tokens(tokens);
  const std::size_t d = channels / heads;
  PhysicsAttentionParams<T> p;
  p.in_x = make_linear(store, name + ".in_x", channels, channels, rng);
  p.in_fx = make_linear(store, name + ".in_fx", channels, channels, rng);
  p.slice = make_linear(store, name + ".slice", d, tokens, rng);
  p.q = make_linear(store, name + ".q", channels, channels, rng, false);
  p.k = make_linear(store, name + ".k", channels, channels, rng, false);
  p.v = make_linear(store, name + ".v", channels, channels, rng, false);
  p.out = make_linear(store, name + ".out", channels, channels, rng);
  p.heads = heads;
  p.tokens = tokens;
  return p;
}

template <typename T>
Var<T> physics_attention(const Var<T>& x, const PhysicsAttentionParams<T>& p,
                         PhysicsTrace<T>* trace) {
  ScopedAllocTag tag(AllocTag::kAttention);
  const std::size_t c = p.in_x.in_features();
  check_width(x, c, "physics_attention");
  const std::size_t d = c / p.heads;

  Var<T> xm = p.in_x(x);
  Var<T> fm = p.in_fx(x);
  std::vector<Var<T>> slices, tokens;
  slices.reserve(p.heads);
  tokens.reserve(p.heads);
  if (trace) trace->slice_weights.clear();
  for (std::size_t h = 0; h < p.heads; ++h) {
    Var<T> s = column_normalize(softmax(p.slice(slice_cols(xm, h * d, d)), 1));
#ifndef NDEBUG
    assert_columns_normalised(s.value());
#endif
    if (trace) trace->slice_weights.push_back(s.value());
    tokens.push_back(matmul_tn(s, slice_cols(fm, h * d, d)));
    slices.push_back(std::move(s));
  }
  Var<T> t = concat_cols(tokens);
  tokens.clear();
  Var<T> mixed = attention(p.q(t), p.k(t), p.v(t), p.heads);

  std::vector<Var<T>> parts;
  parts.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    parts.push_back(matmul(slices[h], slice_cols(mixed, h * d, d)));
  }
  return p.out(concat_cols(parts));
}

template <typename T>
FlareParams<T> make_flare(ParamStore<T>& store, const std::string& name, std::size_t channels,
                          std::size_t heads, std::size_t tokens, Rng& rng) {
  check_heads(channels, heads);
  check_tokens(tokens);
  FlareParams<T> p;
  p.queries = store.add(name + ".queries",
                        scaled_normal<T>({tokens, channels},
                                         T{1} / std::sqrt(static_cast<T>(channels)), rng));
  p.key = make_linear(store, name + ".key", channels, channels, rng);
  p.value = make_linear(store, name + ".value", channels, channels, rng);
  p.out = make_linear(store, name + ".out", channels, channels, rng);
  p.heads = heads;
  return p;
}

template <typename T>
Var<T> flare_route(const Var<T>& x, const FlareParams<T>& p) {
  ScopedAllocTag tag(AllocTag::kAttention);
  check_width(x, p.key.in_features(), "flare_route");
  Var<T> k = p.key(x);
  Var<T> z = attention(p.queries, k, p.value(x), p.heads);
  return p.out(attention(k, p.queries, z, p.heads));
}

template <typename T>
CrossAttentionParams<T> make_cross_attention(ParamStore<T>& store, const std::string& name,
                                             std::size_t channels, std::size_t context_width,
                                             std::size_t heads, Rng& rng) {
  check_heads(channels, heads);
  if (context_width == 0) throw ConfigError("context width must be positive");
  CrossAttentionParams<T> p;
  p.q = make_linear(store, name + ".q", channels, channels, rng);
  p.k = make_linear(store, name + ".k", context_width, channels, rng);
  p.v = make_linear(store, name + ".v", context_width, channels, rng);
  p.out = make_linear(store, name + ".out", channels, channels, rng);
  p.heads = heads;
  return p;
}

template <typename T>
Var<T> cross_attention(const Var<T>& x, const Var<T>& context, const CrossAttentionParams<T>& p) {
  ScopedAllocTag tag(AllocTag::kAttention);
  if (!context.valid() || context.shape().size() != 2 || context.rows() == 0) {
    throw ConfigError("cross_attention: context bank is empty");
  }
  check_width(x, p.q.in_features(), "cross_attention");
  check_width(context, p.k.in_features(), "cross_attention context");
  return p.out(attention(p.q(x), p.k(context), p.v(context), p.heads));
}

template <typename T>
BlockParams<T> make_block(ParamStore<T>& store, const std::string& name, const BlockConfig& config,
                          Rng& rng) {
  check_heads(config.channels, config.heads);
  BlockParams<T> b;
  b.config = config;
  b.norm1 = make_layer_norm(store, name + ".norm1", config.channels);
  if (config.self_kind == SelfAttentionKind::kPhysics) {
    b.physics = make_physics_attention(store, name + ".physics", config.channels, config.heads,
                                       config.tokens, rng);
  } else {
    b.flare = make_flare(store, name + ".flare", config.channels, config.heads, config.tokens, rng);
  }
  if (config.with_context) {
    b.cross = make_cross_attention(store, name + ".cross", config.channels, config.context_width,
                                   config.heads, rng);
    b.gate = store.add(name + ".gate", Tensor<T>({1, 1}));
  }
  b.norm2 = make_layer_norm(store, name + ".norm2", config.channels);
  b.ffn = make_mlp(store, name + ".ffn", {config.channels, 2 * config.channels, config.channels},
                   rng);
  return b;
}

template <typename T>
Var<T> mixed_attention(const Var<T>& h, const Var<T>& context, const BlockParams<T>& block,
                       const BlockOptions& options, PhysicsTrace<T>* trace) {
  ScopedAllocTag tag(AllocTag::kAttention);
  Var<T> self_out =
      block.physics ? physics_attention(h, *block.physics, trace) : flare_route(h, *block.flare);
  if (!block.cross) return self_out;
  Var<T> cross_out = cross_attention(h, context, *block.cross);
  if (options.fixed_gate) {
    const T w = static_cast<T>(*options.fixed_gate);
    return add(affine(self_out, w), affine(cross_out, T{1} - w));
  }
  Var<T> w = sigmoid(block.gate);
  return add(mul_scalar(w, self_out), mul_scalar(affine(w, T{-1}, T{1}), cross_out));
}

template <typename T>
Var<T> attention_block(const Var<T>& x, const Var<T>& context, const BlockParams<T>& block,
                       const BlockOptions& options, PhysicsTrace<T>* trace) {
  ScopedAllocTag tag(AllocTag::kAttention);
  Var<T> y = add(x, mixed_attention(block.norm1(x), context, block, options, trace));
  return add(y, block.ffn(block.norm2(y)));
}

#define OPCRASH_INSTANTIATE_ATTN(T)                                                              \
  template PhysicsAttentionParams<T> make_physics_attention(ParamStore<T>&, const std::string&, \
                                                            std::size_t, std::size_t,            \
                                                            std::size_t, Rng&);                  \
  template Var<T> physics_attention(const Var<T>&, const PhysicsAttentionParams<T>&,             \
                                    PhysicsTrace<T>*);                                           \
  template FlareParams<T> make_flare(ParamStore<T>&, const std::string&, std::size_t,           \
                                     std::size_t, std::size_t, Rng&);                            \
  template Var<T> flare_route(const Var<T>&, const FlareParams<T>&);                             \
  template CrossAttentionParams<T> make_cross_attention(ParamStore<T>&, const std::string&,     \
                                                        std::size_t, std::size_t, std::size_t,   \
                                                        Rng&);                                   \
  template Var<T> cross_attention(const Var<T>&, const Var<T>&, const CrossAttentionParams<T>&); \
  template BlockParams<T> make_block(ParamStore<T>&, const std::string&, const BlockConfig&,    \
                                     Rng&);                                                      \
  template Var<T> mixed_attention(const Var<T>&, const Var<T>&, const BlockParams<T>&,          \
                                  const BlockOptions&, PhysicsTrace<T>*);                        \
  template Var<T> attention_block(const Var<T>&, const Var<T>&, const BlockParams<T>&,          \
                                  const BlockOptions&, PhysicsTrace<T>*);

OPCRASH_INSTANTIATE_ATTN(float)
OPCRASH_INSTANTIATE_ATTN(double)

}  // namespace opcrash::attn
