#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vdet/detection.hpp"
#include "vdet/error.hpp"
#include "vdet/image.hpp"
#include "vdet/rng.hpp"

namespace vdet {

struct DatasetRow {
  std::string image_path;  // as written in the table
  std::vector<GroundTruth> gts;
};

// The training table: one row per image with its ground-truth boxes.
// Relative image paths resolve against base_dir.
struct DatasetTable {
  std::filesystem::path base_dir;
  std::vector<DatasetRow> rows;

  std::size_t size() const { return rows.size(); }

  std::filesystem::path resolve(const DatasetRow& row) const {
    std::filesystem::path p(row.image_path);
    return p.is_absolute() ? p : base_dir / p;
  }
};

namespace detail {

// Splits one CSV line into fields, honouring double-quoted fields with ""
// escapes.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          fields.back() += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        fields.back() += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.emplace_back();
    } else {
      fields.back() += ch;
    }
  }
  if (quoted) throw FormatError("dataset line " + std::to_string(line_no) + ": unterminated quote");
  return fields;
}

inline double parse_number(const std::string& text, std::size_t line_no) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  while (used < text.size() && std::isspace(static_cast<unsigned char>(text[used]))) ++used;
  if (used != text.size() || text.empty() || !std::isfinite(v)) {
    throw FormatError("dataset line " + std::to_string(line_no) + ": bad number '" + text + "'");
  }
  return v;
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// Parses the boxes field: semicolon-separated x,y,w,h quadruples.
inline std::vector<GroundTruth> parse_boxes(const std::string& field, std::size_t line_no) {
  std::vector<GroundTruth> gts;
  std::stringstream ss(field);
  std::string quad;
  while (std::getline(ss, quad, ';')) {
    if (quad.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> v;
    std::stringstream qs(quad);
    std::string num;
    while (std::getline(qs, num, ',')) {
      const auto b = num.find_first_not_of(" \t");
      v.push_back(detail::parse_number(b == std::string::npos ? "" : num.substr(b), line_no));
    }
    if (v.size() != 4) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": box '" + quad +
                        "' must have 4 values");
    }
    const BBox box{v[0], v[1], v[2], v[3]};
    if (!box.valid()) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": box '" + quad +
                        "' has non-positive width or height");
    }
    gts.push_back({kVehicle, box});
  }
  return gts;
}

inline DatasetTable parse_dataset(std::istream& in, const std::filesystem::path& base_dir) {
  DatasetTable table{base_dir, {}};
  std::string line;
  std::size_t line_no = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line, line_no);
    if (header) {
      header = false;
      if (fields.size() == 2 && fields[0] == "image" && fields[1] == "boxes") continue;
      throw FormatError("dataset line 1: expected header 'image,boxes'");
    }
    if (fields.size() != 2) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": expected 2 fields, found " +
                        std::to_string(fields.size()));
    }
    if (fields[0].empty()) throw FormatError("dataset line " + std::to_string(line_no) + ": empty image path");
    table.rows.push_back({fields[0], parse_boxes(fields[1], line_no)});
  }
  if (header) throw FormatError("dataset: missing header");
  return table;
}

inline DatasetTable load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
  try {
    return parse_dataset(in, path.parent_path());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline std::string format_dataset(const DatasetTable& table) {
  std::string out = "image,boxes\n";
  for (const auto& row : table.rows) {
    out += row.image_path + ",\"";
    for (std::size_t i = 0; i < row.gts.size(); ++i) {
      const BBox& b = row.gts[i].box;
      if (i) out += ';';
      out += detail::format_number(b.x) + "," + detail::format_number(b.y) + "," +
             detail::format_number(b.w) + "," + detail::format_number(b.h);
    }
    out += "\"\n";
  }
  return out;
}

inline void save_dataset(const DatasetTable& table, const std::filesystem::path& path) {
  const std::string text = format_dataset(table);
  write_file_bytes(path, std::vector<unsigned char>(text.begin(), text.end()));
}

struct SplitSpec {
  double train_fraction = 0.6;
  std::uint64_t seed = 1;
};

struct DatasetSplit {
  DatasetTable train;
  DatasetTable test;
  std::vector<std::size_t> train_rows;  // row indices into the source table
  std::vector<std::size_t> test_rows;
};

// Seeded Fisher-Yates shuffle of the rows; the first floor(f * n) go to train.
inline DatasetSplit split_dataset(const DatasetTable& table, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0 && spec.train_fraction < 1)) {
    throw ConfigError("split: train_fraction must lie in (0, 1)");
  }
  if (table.size() < 2) throw ConfigError("split: need at least 2 rows");
  std::vector<std::size_t> idx(table.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(idx);
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(idx.size())));
  DatasetSplit split{{table.base_dir, {}}, {table.base_dir, {}}, {}, {}};
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto& part = i < n_train ? split.train : split.test;
    auto& rows = i < n_train ? split.train_rows : split.test_rows;
    part.rows.push_back(table.rows[idx[i]]);
    rows.push_back(idx[i]);
  }
  return split;
}

struct SynthConfig {
  int width = 64;
  int height = 64;
  int min_size = 12;
  int max_size = 28;
  int min_vehicles = 1;
  int max_vehicles = 2;
  double noise_amplitude = 0.04;
  // Minimum RGB distance between body color and background color.
  double min_contrast = 0.35;
};

struct SynthScene {
  Image image;
  std::vector<GroundTruth> gts;
};

namespace detail {

inline void fill_rect(Image& img, int x, int y, int w, int h, const double (&rgb)[3]) {
  const int iw = image_width(img), ih = image_height(img);
  for (int c = 0; c < 3; ++c) {
    for (int yy = std::max(0, y); yy < std::min(ih, y + h); ++yy) {
      for (int xx = std::max(0, x); xx < std::min(iw, x + w); ++xx) {
        img[(static_cast<std::size_t>(c) * ih + yy) * iw + xx] = static_cast<float>(rgb[c]);
      }
    }
  }
}

}  // namespace detail

// Paints one vehicle: solid body plus darker 2-pixel wheel blocks at the two
// bottom corners.
inline void paint_vehicle(Image& img, const BBox& box, const double (&body)[3]) {
  const int x = static_cast<int>(box.x), y = static_cast<int>(box.y);
  const int w = static_cast<int>(box.w), h = static_cast<int>(box.h);
  detail::fill_rect(img, x, y, w, h, body);
  const double wheel[3] = {body[0] * 0.25, body[1] * 0.25, body[2] * 0.25};
  const int ww = std::max(2, w / 4);
  detail::fill_rect(img, x, y + h - 2, ww, 2, wheel);
  detail::fill_rect(img, x + w - ww, y + h - 2, ww, 2, wheel);
}

// One synthetic scene: low-amplitude noise around a random background color
// and 1-2 non-overlapping vehicles fully inside the frame. Pixel values are
// quantized to 8 bits so that the scene equals its PPM encoding.
inline SynthScene synth_scene(Rng& rng, const SynthConfig& cfg) {
  if (cfg.min_size < 4 || cfg.max_size < cfg.min_size || cfg.max_size > std::min(cfg.width, cfg.height)) {
    throw ConfigError("synth: invalid vehicle size range");
  }
  if (cfg.min_vehicles < 0 || cfg.max_vehicles < cfg.min_vehicles) {
    throw ConfigError("synth: invalid vehicle count range");
  }
  for (;;) {
    SynthScene scene{Image({3, cfg.height, cfg.width}), {}};
    double bg[3];
    for (double& c : bg) c = rng.uniform(0.2, 0.8);
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < cfg.width * cfg.height; ++i) {
        const double v = bg[c] + rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude);
        scene.image[static_cast<std::size_t>(c) * cfg.width * cfg.height + i] = static_cast<float>(v);
      }
    }
    const int count = static_cast<int>(rng.uniform_int(cfg.min_vehicles, cfg.max_vehicles));
    bool placed_all = true;
    for (int v = 0; v < count && placed_all; ++v) {
      bool placed = false;
      for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        const int w = static_cast<int>(rng.uniform_int(cfg.min_size, cfg.max_size));
        const int h = static_cast<int>(rng.uniform_int(cfg.min_size, cfg.max_size));
        const int x = static_cast<int>(rng.uniform_int(0, cfg.width - w));
        const int y = static_cast<int>(rng.uniform_int(0, cfg.height - h));
        const BBox box{double(x), double(y), double(w), double(h)};
        bool overlaps = false;
        for (const auto& g : scene.gts) overlaps = overlaps || intersection_area(g.box, box) > 0;
        if (overlaps) continue;
        double body[3];
        double dist = 0;
        do {
          for (double& c : body) c = rng.uniform(0.0, 1.0);
          dist = std::sqrt((body[0] - bg[0]) * (body[0] - bg[0]) + (body[1] - bg[1]) * (body[1] - bg[1]) +
                           (body[2] - bg[2]) * (body[2] - bg[2]));
        } while (dist < cfg.min_contrast);
        paint_vehicle(scene.image, box, body);
        scene.gts.push_back({kVehicle, box});
        placed = true;
      }
      placed_all = placed;
    }
    if (!placed_all) continue;
    for (float& v : scene.image.values()) v = static_cast<float>(quantize_channel(v)) / 255.0f;
    return scene;
  }
}

// Writes n scenes as images/img_NNNN.ppm plus dataset.csv under out_dir.
inline DatasetTable synth_dataset(std::size_t n_images, std::uint64_t seed, const SynthConfig& cfg,
                                  const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create '" + (out_dir / "images").string() + "': " + ec.message());
  Rng rng(seed);
  DatasetTable table{out_dir, {}};
  for (std::size_t i = 0; i < n_images; ++i) {
    SynthScene scene = synth_scene(rng, cfg);
    char name[48];
    std::snprintf(name, sizeof name, "images/img_%04zu.ppm", i);
    write_file_bytes(out_dir / name, encode_ppm(scene.image));
    table.rows.push_back({name, std::move(scene.gts)});
  }
  save_dataset(table, out_dir / "dataset.csv");
  return table;
}

// Decodes every image of a table, in row order.
inline std::vector<Image> load_images(const DatasetTable& table) {
  std::vector<Image> images;
  images.reserve(table.size());
  for (const auto& row : table.rows) images.push_back(decode_image(table.resolve(row)));
  return images;
}

}  // namespace vdet
