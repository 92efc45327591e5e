#include "opcrash/numcore/binary_io.hpp"

#include <array>
#include <bit>

#include "opcrash/errors.hpp"

namespace opcrash::numcore {

namespace {

template <typename U>
std::array<char, sizeof(U)> to_le(U v) {
  std::array<char, sizeof(U)> b{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  }
  return b;
}

template <typename U>
U from_le(const std::array<char, sizeof(U)>& b) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(static_cast<unsigned char>(b[i])) << (8 * i);
  }
  return v;
}

}  // namespace

void BinaryWriter::bytes(std::span<const char> data) {
  out_.write(data.data(), static_cast<std::streamsize>(data.size()));
}
void BinaryWriter::u32(std::uint32_t v) { bytes(to_le(v)); }
void BinaryWriter::u64(std::uint64_t v) { bytes(to_le(v)); }
void BinaryWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void BinaryWriter::f32s(std::span<const float> values) {
  for (float v : values) f32(v);
}
void BinaryWriter::string(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

void BinaryReader::bytes(std::span<char> data) {
  in_.read(data.data(), static_cast<std::streamsize>(data.size()));
  if (in_.gcount() != static_cast<std::streamsize>(data.size())) {
    throw FormatError("unexpected end of binary stream");
  }
}
std::uint32_t BinaryReader::u32() {
  std::array<char, 4> b{};
  bytes(b);
  return from_le<std::uint32_t>(b);
}
std::uint64_t BinaryReader::u64() {
  std::array<char, 8> b{};
  bytes(b);
  return from_le<std::uint64_t>(b);
}
float BinaryReader::f32() { return std::bit_cast<float>(u32()); }
std::vector<float> BinaryReader::f32s(std::size_t count) {
  std::vector<float> out(count);
  for (auto& v : out) v = f32();
  return out;
}
std::string BinaryReader::string(std::size_t max_length) {
  const std::uint32_t n = u32();
  if (n > max_length) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  bytes(s);
  return s;
}

}  // namespace opcrash::numcore
