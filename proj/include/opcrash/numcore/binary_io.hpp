#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace opcrash::numcore {

/// Little-endian primitive writer.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  void bytes(std::span<const char> data);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f32s(std::span<const float> values);
  /// u32 length prefix followed by the raw UTF-8 bytes.
  void string(const std::string& s);

 private:
  std::ostream& out_;
};

/// Little-endian primitive reader; throws FormatError on truncation.
class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}

  void bytes(std::span<char> data);
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::vector<float> f32s(std::size_t count);
  std::string string(std::size_t max_length = 1u << 20);

 private:
  std::istream& in_;
};

}  // namespace opcrash::numcore
