#pragma once

#include <png.h>

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <cstdio>
#include <string>
#include <vector>

#include "vdet/detection.hpp"
#include "vdet/error.hpp"
#include "vdet/evalkit.hpp"
#include "vdet/image.hpp"

namespace vdet {

// 8-bit RGB PNG of a 3 x H x W image.
inline std::vector<unsigned char> encode_png(const Image& img) {
  const int h = image_height(img), w = image_width(img);
  std::vector<unsigned char> rgb(static_cast<std::size_t>(w) * h * 3);
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) rgb[p * 3 + c] = quantize_channel(img[c * plane + p]);
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, rgb.data(), 0, nullptr)) {
    throw Error(std::string("png encode failed: ") + image.message);
  }
  std::vector<unsigned char> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, rgb.data(), 0, nullptr)) {
    throw Error(std::string("png encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

inline std::string base64(const std::vector<unsigned char>& bytes) {
  using namespace boost::archive::iterators;
  using It = base64_from_binary<transform_width<std::vector<unsigned char>::const_iterator, 6, 8>>;
  std::string s(It(bytes.begin()), It(bytes.end()));
  s.append((3 - bytes.size() % 3) % 3, '=');
  return s;
}

// SVG with the image embedded as a PNG data URI and one outlined box per
// detection, labelled with its class and score. `scale` magnifies the view.
inline std::string detection_overlay_svg(const Image& img, const std::vector<Detection>& dets, int scale = 8) {
  const int w = image_width(img) * scale, h = image_height(img) * scale;
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                  std::to_string(w) + "\" height=\"" + std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) +
                  " " + std::to_string(h) + "\">\n";
  s += "<image x=\"0\" y=\"0\" width=\"" + std::to_string(w) + "\" height=\"" + std::to_string(h) +
       "\" style=\"image-rendering:pixelated\" href=\"data:image/png;base64," + base64(encode_png(img)) + "\"/>\n";
  for (const auto& d : dets) {
    s += "<rect x=\"" + num(d.box.x * scale) + "\" y=\"" + num(d.box.y * scale) + "\" width=\"" +
         num(d.box.w * scale) + "\" height=\"" + num(d.box.h * scale) +
         "\" fill=\"none\" stroke=\"#ff2020\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + num(d.box.x * scale + 2) + "\" y=\"" + num(d.box.y * scale + 12) +
         "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#ff2020\">" + class_name(d.class_id) + " " +
         num(d.score) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace vdet
