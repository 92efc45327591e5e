#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "opcrash/numcore/params.hpp"

namespace opcrash::attn {

using numcore::Linear;
using numcore::ParamStore;
using numcore::Rng;
using numcore::Tensor;
using numcore::Var;

/// Slice-based self-attention. Each head owns its own N×M soft assignment of
/// points to slices; the slice projector is shared across heads.
template <typename T>
struct PhysicsAttentionParams {
  Linear<T> in_x;   // C×C, feeds the slice logits
  Linear<T> in_fx;  // C×C, feeds the aggregated tokens
  Linear<T> slice;  // d×M
  Linear<T> q, k, v;
  Linear<T> out;
  std::size_t heads = 1;
  std::size_t tokens = 1;
};

/// Records the normalised slice weights of every head during a forward pass.
template <typename T>
struct PhysicsTrace {
  std::vector<Tensor<T>> slice_weights;
};

/// Throws ConfigError for tokens < 1 or channels not divisible by heads.
template <typename T>
PhysicsAttentionParams<T> make_physics_attention(ParamStore<T>& store, const std::string& name,
                                                 std::size_t channels, std::size_t heads,
                                                 std::size_t tokens, Rng& rng);

/// Per head h: S_h = colnorm(softmax_rows(X_h W_slice)), T_h = S_hᵀ F_h,
/// T̂ = MHA(T), Y_h = S_h T̂_h, then the output projection. Memory is linear in N.
template <typename T>
Var<T> physics_attention(const Var<T>& x, const PhysicsAttentionParams<T>& p,
                         PhysicsTrace<T>* trace = nullptr);

/// Two-stage routing through M learnable latent queries.
template <typename T>
struct FlareParams {
  Var<T> queries;  // M×C
  Linear<T> key, value, out;
  std::size_t heads = 1;
};

template <typename T>
FlareParams<T> make_flare(ParamStore<T>& store, const std::string& name, std::size_t channels,
                          std::size_t heads, std::size_t tokens, Rng& rng);

/// Z = softmax(G Kᵀ/√d) V over points, Y = softmax(K Gᵀ/√d) Z over latents,
/// both per head, followed by the output projection.
template <typename T>
Var<T> flare_route(const Var<T>& x, const FlareParams<T>& p);

template <typename T>
struct CrossAttentionParams {
  Linear<T> q;     // C×C, from points
  Linear<T> k, v;  // D×C, from context tokens
  Linear<T> out;
  std::size_t heads = 1;
};

template <typename T>
CrossAttentionParams<T> make_cross_attention(ParamStore<T>& store, const std::string& name,
                                             std::size_t channels, std::size_t context_width,
                                             std::size_t heads, Rng& rng);

/// Throws ConfigError when `context` has no rows.
template <typename T>
Var<T> cross_attention(const Var<T>& x, const Var<T>& context, const CrossAttentionParams<T>& p);

enum class SelfAttentionKind { kPhysics, kFlare };

struct BlockConfig {
  SelfAttentionKind self_kind = SelfAttentionKind::kPhysics;
  /// Adds the gated cross-attention branch to a shared context bank.
  bool with_context = false;
  std::size_t channels = 0;
  std::size_t heads = 1;
  std::size_t tokens = 1;
  std::size_t context_width = 0;
};

/// Pre-norm transformer block: x + A(LN(x)), then + FFN(LN(·)) with hidden 2C.
template <typename T>
struct BlockParams {
  BlockConfig config;
  numcore::LayerNormParams<T> norm1, norm2;
  std::optional<PhysicsAttentionParams<T>> physics;
  std::optional<FlareParams<T>> flare;
  std::optional<CrossAttentionParams<T>> cross;
  Var<T> gate;  // 1×1, starts at 0
  numcore::Mlp<T> ffn;
};

template <typename T>
BlockParams<T> make_block(ParamStore<T>& store, const std::string& name, const BlockConfig& config,
                          Rng& rng);

struct BlockOptions {
  /// Replaces σ(α) with a constant weight on the self branch.
  std::optional<double> fixed_gate;
};

/// The attention sub-layer on already-normalised input, before the residual:
/// self branch alone, or (1-σ(α))·cross + σ(α)·self with a context.
template <typename T>
Var<T> mixed_attention(const Var<T>& h, const Var<T>& context, const BlockParams<T>& block,
                       const BlockOptions& options = {}, PhysicsTrace<T>* trace = nullptr);

/// Full block. `context` is ignored (may be invalid) for context-free blocks.
template <typename T>
Var<T> attention_block(const Var<T>& x, const Var<T>& context, const BlockParams<T>& block,
                       const BlockOptions& options = {}, PhysicsTrace<T>* trace = nullptr);

}  // namespace opcrash::attn
