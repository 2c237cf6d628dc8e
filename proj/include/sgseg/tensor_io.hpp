#ifndef SGSEG_TENSOR_IO_HPP
#define SGSEG_TENSOR_IO_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgseg/tensor.hpp"

namespace sgseg {

// Malformed file contents. `offset` is the byte position where parsing
// stopped.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

namespace detail {

inline std::vector<unsigned char> read_file_bytes(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

// "SGT1" | u32 rank | rank x u32 dims | float32 payload, all little-endian.
inline std::vector<unsigned char> encode_tensor(const Tensor& t) {
  std::vector<unsigned char> out{'S', 'G', 'T', '1'};
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 4 * t.size());
  for (float v : t.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline Tensor decode_tensor(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "SGT1", 4) != 0) {
    throw ParseError("missing SGT1 magic", 0);
  }
  const std::uint32_t rank = detail::get_u32(bytes.data() + 4);
  std::size_t pos = 8;
  if (rank == 0 || bytes.size() < pos + 4ull * rank) {
    throw ParseError("bad tensor rank " + std::to_string(rank), 4);
  }
  Shape shape(rank);
  for (auto& d : shape) {
    d = detail::get_u32(bytes.data() + pos);
    if (d == 0) throw ParseError("zero tensor dimension", pos);
    pos += 4;
  }
  const std::size_t count = shape_volume(shape);
  if (bytes.size() != pos + 4 * count) {
    throw ParseError("tensor payload has " + std::to_string(bytes.size() - pos) +
                         " bytes, expected " + std::to_string(4 * count),
                     pos);
  }
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i, pos += 4) {
    data[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + pos));
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  detail::write_file_bytes(path, encode_tensor(t));
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  return decode_tensor(detail::read_file_bytes(path));
}

}  // namespace sgseg

#endif  // SGSEG_TENSOR_IO_HPP
