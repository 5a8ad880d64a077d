#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "vdet/error.hpp"
#include "vdet/tensor.hpp"

namespace vdet {

// RGB image as a 3 x H x W tensor with values in [0, 1].
using Image = Tensor<float>;

inline int image_height(const Image& img) { return img.dim(1); }
inline int image_width(const Image& img) { return img.dim(2); }

inline Image make_image(int width, int height, float r = 0, float g = 0, float b = 0) {
  Image img({3, height, width});
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  std::fill_n(img.data(), plane, r);
  std::fill_n(img.data() + plane, plane, g);
  std::fill_n(img.data() + 2 * plane, plane, b);
  return img;
}

// Decodes a binary PPM (P6, maxval 255). Comment lines are accepted anywhere
// in the header. Every byte v maps to v / 255.
inline Image decode_ppm(const std::vector<unsigned char>& bytes) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> FormatError {
    return FormatError("PPM: " + what + " at byte offset " + std::to_string(pos));
  };
  auto skip_space_and_comments = [&]() {
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
  auto read_int = [&]() {
    skip_space_and_comments();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw fail("expected a decimal integer");
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1L << 24)) throw fail("header value too large");
      ++pos;
    }
    return static_cast<int>(v);
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw fail("unsupported magic (expected P6)");
  pos = 2;
  const int width = read_int();
  const int height = read_int();
  const int maxval = read_int();
  if (width < 1 || height < 1) throw fail("non-positive image dimensions");
  if (maxval != 255) throw fail("unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("missing whitespace after header");
  ++pos;

  const std::size_t n = static_cast<std::size_t>(width) * height;
  if (bytes.size() - pos < 3 * n) {
    const std::size_t found = bytes.size() - pos;
    pos = bytes.size();
    throw fail("truncated payload (expected " + std::to_string(3 * n) + " bytes, found " +
               std::to_string(found) + ")");
  }
  Image img({3, height, width});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      img[c * n + i] = static_cast<float>(bytes[pos + 3 * i + c]) / 255.0f;
    }
  }
  return img;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline Image decode_image(const std::filesystem::path& path) {
  try {
    return decode_ppm(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline unsigned char quantize_channel(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline std::vector<unsigned char> encode_ppm(const Image& img) {
  const int h = image_height(img), w = image_width(img);
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  const std::size_t n = static_cast<std::size_t>(w) * h;
  out.reserve(out.size() + 3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out.push_back(quantize_channel(img[c * n + i]));
  }
  return out;
}

// Bilinear sample of channel c at continuous pixel-index position (py, px);
// positions outside the image are clamped, which replicates edge pixels.
inline float sample_bilinear(const Image& img, int c, double py, double px) {
  const int h = image_height(img), w = image_width(img);
  py = std::clamp(py, 0.0, static_cast<double>(h - 1));
  px = std::clamp(px, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(std::floor(py));
  const int x0 = static_cast<int>(std::floor(px));
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double fy = py - y0, fx = px - x0;
  const float* plane = img.data() + static_cast<std::size_t>(c) * h * w;
  const double v00 = plane[static_cast<std::size_t>(y0) * w + x0];
  const double v01 = plane[static_cast<std::size_t>(y0) * w + x1];
  const double v10 = plane[static_cast<std::size_t>(y1) * w + x0];
  const double v11 = plane[static_cast<std::size_t>(y1) * w + x1];
  return static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11));
}

}  // namespace vdet
