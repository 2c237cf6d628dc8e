#ifndef SGSEG_NETPBM_HPP
#define SGSEG_NETPBM_HPP

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sgseg/pseudolabel.hpp"
#include "sgseg/tensor.hpp"
#include "sgseg/tensor_io.hpp"

namespace sgseg {

class UnsupportedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct PnmHeader {
  char kind = 0;  // '5' or '6'
  std::size_t width = 0, height = 0;
  std::size_t payload = 0;  // offset of the first raster byte
};

inline PnmHeader parse_pnm_header(const std::vector<unsigned char>& bytes,
                                  char expected) {
  if (bytes.size() < 2 || bytes[0] != 'P') {
    throw ParseError("not a netpbm file: bad magic bytes", 0);
  }
  if (bytes[1] != static_cast<unsigned char>(expected)) {
    throw ParseError(std::string("unsupported magic bytes 'P") +
                         static_cast<char>(bytes[1]) + "', expected 'P" +
                         expected + "'",
                     0);
  }
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw ParseError(std::string(what) + " too large", start);
      ++pos;
    }
    if (pos == start) throw ParseError(std::string("expected ") + what, start);
    return v;
  };
  PnmHeader h;
  h.kind = expected;
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw ParseError("expected whitespace after magic", pos);
  }
  h.width = read_int("width");
  h.height = read_int("height");
  const std::size_t maxval_at = pos;
  const std::size_t maxval = read_int("maxval");
  if (maxval != 255) {
    throw ParseError("only 8-bit maxval 255 is supported, got " +
                         std::to_string(maxval),
                     maxval_at);
  }
  if (h.width == 0 || h.height == 0) throw ParseError("zero image dimension", maxval_at);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw ParseError("expected single whitespace before raster", pos);
  }
  h.payload = pos + 1;
  const std::size_t channels = expected == '6' ? 3 : 1;
  const std::size_t need = h.payload + h.width * h.height * channels;
  if (bytes.size() < need) {
    throw ParseError("truncated raster: " + std::to_string(bytes.size() - h.payload) +
                         " bytes, expected " +
                         std::to_string(need - h.payload),
                     bytes.size());
  }
  return h;
}

inline std::vector<unsigned char> pnm_header_bytes(char kind, std::size_t w,
                                                   std::size_t h) {
  const std::string head = std::string("P") + kind + "\n" + std::to_string(w) +
                           " " + std::to_string(h) + "\n255\n";
  return {head.begin(), head.end()};
}

inline unsigned char to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(c * 255.0f));
}

}  // namespace detail

// P6 <-> [3,H,W] float tensor in [0,1].
inline Tensor decode_ppm(const std::vector<unsigned char>& bytes) {
  const auto h = detail::parse_pnm_header(bytes, '6');
  Tensor img({3, h.height, h.width});
  const std::size_t n = h.width * h.height;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      img[c * n + i] = static_cast<float>(bytes[h.payload + 3 * i + c]) / 255.0f;
    }
  }
  return img;
}

inline std::vector<unsigned char> encode_ppm(const Tensor& image) {
  detail::require_rank(image, 3, "ppm image");
  detail::require(image.dim(0) == 3, "ppm image must have 3 channels");
  const std::size_t h = image.dim(1), w = image.dim(2), n = h * w;
  auto out = detail::pnm_header_bytes('6', w, h);
  out.reserve(out.size() + 3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out.push_back(detail::to_byte(image[c * n + i]));
  }
  return out;
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  return decode_ppm(detail::read_file_bytes(path));
}
inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  detail::write_file_bytes(path, encode_ppm(image));
}

// P5 with raw class indices.
inline LabelMap decode_pgm_labels(const std::vector<unsigned char>& bytes) {
  const auto h = detail::parse_pnm_header(bytes, '5');
  LabelMap m(h.height, h.width);
  for (std::size_t i = 0; i < m.size(); ++i) m.labels[i] = bytes[h.payload + i];
  return m;
}

inline std::vector<unsigned char> encode_pgm_labels(const LabelMap& labels) {
  auto out = detail::pnm_header_bytes('5', labels.width, labels.height);
  out.reserve(out.size() + labels.size());
  for (std::int32_t v : labels.labels) {
    if (v < 0 || v > 255) {
      throw UnsupportedError("class index " + std::to_string(v) +
                             " cannot be stored in an 8-bit PGM");
    }
    out.push_back(static_cast<unsigned char>(v));
  }
  return out;
}

inline LabelMap read_pgm_labels(const std::filesystem::path& path) {
  return decode_pgm_labels(detail::read_file_bytes(path));
}
inline void write_pgm_labels(const std::filesystem::path& path, const LabelMap& labels) {
  detail::write_file_bytes(path, encode_pgm_labels(labels));
}

// P5 <-> [H,W] grayscale float tensor, [0,1] <-> [0,255].
inline Tensor decode_pgm_gray(const std::vector<unsigned char>& bytes) {
  const auto h = detail::parse_pnm_header(bytes, '5');
  Tensor t({h.height, h.width});
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<float>(bytes[h.payload + i]) / 255.0f;
  }
  return t;
}

inline std::vector<unsigned char> encode_pgm_gray(const Tensor& gray) {
  detail::require_rank(gray, 2, "pgm grayscale image");
  auto out = detail::pnm_header_bytes('5', gray.dim(1), gray.dim(0));
  for (float v : gray.values()) out.push_back(detail::to_byte(v));
  return out;
}

inline Tensor read_pgm_gray(const std::filesystem::path& path) {
  return decode_pgm_gray(detail::read_file_bytes(path));
}
inline void write_pgm_gray(const std::filesystem::path& path, const Tensor& gray) {
  detail::write_file_bytes(path, encode_pgm_gray(gray));
}

// The 21-entry PASCAL VOC color map (bit-interleaved class index).
inline constexpr std::size_t kPaletteSize = 21;

inline std::array<std::uint8_t, 3> palette_color(std::size_t label) {
  std::array<std::uint8_t, 3> rgb{0, 0, 0};
  std::size_t c = label;
  for (int shift = 7; shift >= 0 && c; --shift, c >>= 3) {
    for (int ch = 0; ch < 3; ++ch) {
      rgb[ch] |= static_cast<std::uint8_t>(((c >> ch) & 1u) << shift);
    }
  }
  return rgb;
}

/// Label map rendered through the fixed palette; background is black.
inline Tensor viz_labelmap(const LabelMap& labels) {
  const std::size_t n = labels.size();
  Tensor out({3, labels.height, labels.width});
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = labels.labels[i];
    if (v < 0 || static_cast<std::size_t>(v) >= kPaletteSize) {
      throw UnsupportedError("class index " + std::to_string(v) +
                             " outside the 21-color palette");
    }
    const auto rgb = palette_color(static_cast<std::size_t>(v));
    for (std::size_t c = 0; c < 3; ++c) out[c * n + i] = static_cast<float>(rgb[c]) / 255.0f;
  }
  return out;
}

}  // namespace sgseg

#endif  // SGSEG_NETPBM_HPP
