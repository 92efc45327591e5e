#include "opcrash/model/model.hpp"

#include <algorithm>
#include <cctype>

#include "opcrash/errors.hpp"
#include "opcrash/numcore/ops.hpp"

namespace opcrash::model {

std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::kTS: return "ts";
    case Backbone::kGeoTS: return "geots";
    case Backbone::kGeoTSFlare: return "geots-flare";
  }
  throw ConfigError("invalid backbone");
}

std::string to_string(OutputMode m) {
  switch (m) {
    case OutputMode::kAcceleration: return "acceleration";
    case OutputMode::kOneShot: return "oneshot";
    case OutputMode::kTimeConditional: return "time-conditional";
  }
  throw ConfigError("invalid output mode");
}

Backbone parse_backbone(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::replace(lower.begin(), lower.end(), '_', '-');
  if (lower == "ts" || lower == "transolver") return Backbone::kTS;
  if (lower == "geots" || lower == "geotransolver") return Backbone::kGeoTS;
  if (lower == "geots-flare" || lower == "flare") return Backbone::kGeoTSFlare;
  throw ConfigError("unknown backbone '" + std::string(s) + "' (expected ts, geots, geots-flare)");
}

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model needs at least one layer");
  if (heads < 1 || channels % heads != 0) {
    throw ConfigError("channels (" + std::to_string(channels) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  if (tokens < 1) throw ConfigError("model needs at least one slice/latent token");
  if (output == OutputMode::kOneShot && horizon < 1) throw ConfigError("one-shot horizon must be >= 1");
  if (uses_context()) {
    if (scales.empty()) throw ConfigError("geometry-aware backbones need at least one ball scale");
    if (context_anchors < 1) throw ConfigError("context needs at least one anchor");
  }
  switch (backbone) {
    case Backbone::kTS:
    case Backbone::kGeoTS:
    case Backbone::kGeoTSFlare: break;
    default: throw ConfigError("invalid backbone");
  }
  switch (output) {
    case OutputMode::kAcceleration:
    case OutputMode::kOneShot:
    case OutputMode::kTimeConditional: break;
    default: throw ConfigError("invalid output mode");
  }
}

std::size_t ModelConfig::dynamic_width() const {
  switch (output) {
    case OutputMode::kAcceleration: return 6;
    case OutputMode::kTimeConditional: return 1;
    case OutputMode::kOneShot: return 0;
  }
  return 0;
}

std::size_t ModelConfig::static_width() const {
  return uses_context() ? geo::multiscale_width(feature_width, scales.size()) : 3 + feature_width;
}

std::size_t ModelConfig::output_width() const {
  return output == OutputMode::kOneShot ? 3 * horizon : 3;
}

SampleGeometry prepare_sample(const ModelConfig& config, const geo::PointCloud& cloud,
                              std::vector<double> globals, std::vector<double> bc) {
  if (cloud.feature_width() != config.feature_width) {
    throw DimensionError("point features have width " + std::to_string(cloud.feature_width()) +
                         ", model expects " + std::to_string(config.feature_width));
  }
  if (globals.size() != config.globals_width || bc.size() != config.bc_width) {
    throw DimensionError("globals/bc widths do not match the model configuration");
  }
  SampleGeometry s;
  if (config.uses_context()) {
    s.geometry = geo::prepare_geometry(cloud, config.scales, config.context_anchors);
  } else {
    const std::size_t n = cloud.size(), f = cloud.feature_width();
    s.geometry.augmented = Tensor<double>({n, 3 + f});
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(cloud.positions.row(i), 3, s.geometry.augmented.row(i));
      if (f) std::copy_n(cloud.features.row(i), f, s.geometry.augmented.row(i) + 3);
    }
  }
  s.globals = std::move(globals);
  s.bc = std::move(bc);
  return s;
}

template <typename T>
Model<T>::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  numcore::Rng rng(config_.seed);
  const std::size_t c = config_.channels;
  embed_ = numcore::make_mlp(store_, "embed",
                             {config_.static_width() + config_.dynamic_width(), c, c}, rng);
  if (config_.uses_context()) {
    projector_ = geo::make_context_projector(store_, "context", config_.static_width(),
                                             config_.globals_width, config_.bc_width, c, rng);
  }
  attn::BlockConfig bc;
  bc.self_kind = config_.backbone == Backbone::kGeoTSFlare ? attn::SelfAttentionKind::kFlare
                                                           : attn::SelfAttentionKind::kPhysics;
  bc.with_context = config_.uses_context();
  bc.channels = c;
  bc.heads = config_.heads;
  bc.tokens = config_.tokens;
  bc.context_width = c;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    blocks_.push_back(attn::make_block(store_, "block" + std::to_string(l), bc, rng));
  }
  head_ = numcore::make_mlp(store_, "head", {c, 2 * c, config_.output_width()}, rng);
  head_.layers.back().weight.mutable_value().fill(T{0});
}

template <typename T>
Var<T> Model<T>::context(const SampleGeometry& sample) const {
  if (!projector_) return {};
  return geo::project_context<T>(sample.geometry, sample.globals, sample.bc, *projector_);
}

template <typename T>
std::uint64_t Model<T>::context_calls() const noexcept {
  return projector_ ? projector_->calls.load(std::memory_order_relaxed) : 0;
}

template <typename T>
Var<T> Model<T>::forward(const SampleGeometry& sample, const Var<T>& context,
                         const Var<T>& dynamic) const {
  const Tensor<double>& stat = sample.geometry.augmented;
  const std::size_t n = stat.rows(), ws = config_.static_width(), wd = config_.dynamic_width();
  if (stat.cols() != ws) {
    throw DimensionError("static point features have width " + std::to_string(stat.cols()) +
                         ", model expects " + std::to_string(ws));
  }
  if (wd > 0 && (!dynamic.valid() || dynamic.shape().size() != 2 || dynamic.rows() != n ||
                 dynamic.cols() != wd)) {
    throw DimensionError("dynamic inputs must be " + std::to_string(n) + "×" + std::to_string(wd) +
                         ", got " + (dynamic.valid() ? numcore::shape_string(dynamic.shape())
                                                     : std::string("none")));
  }
  if (config_.uses_context() && !context.valid()) throw ConfigError("missing context bank");
  calls_.fetch_add(1, std::memory_order_relaxed);

  Var<T> input = Var<T>::constant(stat.cast<T>());
  if (wd > 0) input = numcore::concat_cols<T>({input, dynamic});
  Var<T> x = embed_(input);
  for (const auto& block : blocks_) x = attn::attention_block(x, context, block);
  return head_(x);
}

template <typename T>
Var<T> Model<T>::forward(const SampleGeometry& sample, const Var<T>& dynamic) const {
  return forward(sample, context(sample), dynamic);
}

template class Model<float>;
template class Model<double>;

}  // namespace opcrash::model
