#include <bit>
#include <fstream>

#include "opcrash/errors.hpp"
#include "opcrash/model/model.hpp"
#include "opcrash/numcore/binary_io.hpp"

namespace opcrash::model {

namespace {

constexpr char kMagic[4] = {'O', 'P', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxRank = 8;

void write_config(numcore::BinaryWriter& w, const ModelConfig& c) {
  w.u32(static_cast<std::uint32_t>(c.backbone));
  w.u32(static_cast<std::uint32_t>(c.output));
  for (std::size_t v : {c.tokens, c.layers, c.heads, c.channels, c.context_anchors,
                        c.feature_width, c.globals_width, c.bc_width, c.horizon}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.u32(static_cast<std::uint32_t>(c.scales.size()));
  for (const auto& s : c.scales) {
    w.u64(std::bit_cast<std::uint64_t>(s.radius));
    w.u32(static_cast<std::uint32_t>(s.cap));
  }
  w.u64(c.seed);
}

ModelConfig read_config(numcore::BinaryReader& r) {
  ModelConfig c;
  const std::uint32_t backbone = r.u32(), output = r.u32();
  if (backbone > 2 || output > 2) throw FormatError("checkpoint: invalid backbone/output tag");
  c.backbone = static_cast<Backbone>(backbone);
  c.output = static_cast<OutputMode>(output);
  for (std::size_t* v : {&c.tokens, &c.layers, &c.heads, &c.channels, &c.context_anchors,
                         &c.feature_width, &c.globals_width, &c.bc_width, &c.horizon}) {
    *v = r.u32();
  }
  const std::uint32_t scales = r.u32();
  if (scales > 64) throw FormatError("checkpoint: implausible scale count");
  c.scales.resize(scales);
  for (auto& s : c.scales) {
    s.radius = std::bit_cast<double>(r.u64());
    s.cap = r.u32();
  }
  c.seed = r.u64();
  return c;
}

void write_blob(numcore::BinaryWriter& w, const std::string& name, const Tensor<float>& t) {
  w.string(name);
  w.u32(static_cast<std::uint32_t>(t.shape().size()));
  for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.f32s(t.values());
}

NamedBlob read_blob(numcore::BinaryReader& r) {
  NamedBlob b;
  b.name = r.string(4096);
  const std::uint32_t rank = r.u32();
  if (rank > kMaxRank) throw FormatError("checkpoint: blob '" + b.name + "' has rank " + std::to_string(rank));
  numcore::Shape shape(rank);
  std::size_t count = 1;
  for (auto& d : shape) {
    d = r.u32();
    count *= d;
    if (count > (std::size_t{1} << 32)) throw FormatError("checkpoint: blob too large");
  }
  auto values = r.f32s(count);
  b.data = Tensor<float>(std::move(shape), std::span<const float>(values));
  return b;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model<float>& model,
                     const std::vector<NamedBlob>& extras) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  numcore::BinaryWriter w(out);
  w.bytes(kMagic);
  w.u32(kVersion);
  write_config(w, model.config());
  const auto& params = model.params().entries();
  w.u32(static_cast<std::uint32_t>(params.size() + extras.size()));
  for (const auto& p : params) write_blob(w, p.name, p.var.value());
  for (const auto& e : extras) write_blob(w, e.name, e.data);
  out.flush();
  if (!out) throw FormatError("write to '" + path + "' failed");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  numcore::BinaryReader r(in);
  char magic[4];
  r.bytes(magic);
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError("'" + path + "' is not an OPCK checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.config = read_config(r);
  const std::uint32_t count = r.u32();
  ck.blobs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) ck.blobs.push_back(read_blob(r));
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint has trailing bytes");
  return ck;
}

std::unique_ptr<Model<float>> load_checkpoint(const std::string& path,
                                              std::vector<NamedBlob>* extras) {
  Checkpoint ck = read_checkpoint(path);
  auto m = std::make_unique<Model<float>>(ck.config);
  const auto& params = m->params().entries();
  if (ck.blobs.size() < params.size()) throw FormatError("checkpoint is missing parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const NamedBlob& b = ck.blobs[i];
    if (b.name != params[i].name || b.data.shape() != params[i].var.shape()) {
      throw FormatError("checkpoint blob '" + b.name + "' does not match parameter '" +
                        params[i].name + "'");
    }
    Var<float> v = params[i].var;
    v.mutable_value() = b.data;
  }
  if (extras) extras->assign(ck.blobs.begin() + static_cast<std::ptrdiff_t>(params.size()), ck.blobs.end());
  return m;
}

}  // namespace opcrash::model
