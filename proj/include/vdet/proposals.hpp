#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <queue>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "vdet/error.hpp"
#include "vdet/geometry.hpp"
#include "vdet/image.hpp"

namespace vdet {

enum class ProposalMode { kSelectiveLite, kSliding };

struct ProposalConfig {
  std::size_t max_proposals = 2000;
  ProposalMode mode = ProposalMode::kSelectiveLite;
  std::vector<double> sliding_scales = {16, 24};
  std::vector<double> sliding_ratios = {0.5, 1, 2};
  double sliding_stride = 4;
  // Side of one initial superpixel, in pixels.
  int cell_size = 4;
  // Merges whose mean-color distance exceeds this are not performed.
  double merge_threshold = std::numeric_limits<double>::infinity();
};

inline void validate(const ProposalConfig& cfg) {
  if (cfg.max_proposals < 1) throw ConfigError("proposals: max_proposals must be >= 1");
  if (cfg.cell_size < 1) throw ConfigError("proposals: cell_size must be >= 1");
  if (!(cfg.sliding_stride > 0)) throw ConfigError("proposals: sliding_stride must be positive");
  if (cfg.sliding_scales.empty() || cfg.sliding_ratios.empty()) {
    throw ConfigError("proposals: sliding scales and ratios must be non-empty");
  }
  for (double v : cfg.sliding_scales) {
    if (!(v > 0)) throw ConfigError("proposals: sliding scales must be positive");
  }
  for (double v : cfg.sliding_ratios) {
    if (!(v > 0)) throw ConfigError("proposals: sliding ratios must be positive");
  }
  if (!(cfg.merge_threshold >= 0)) throw ConfigError("proposals: merge_threshold must be >= 0");
}

enum class ProposalRank { kInputOrder, kAreaDescending };

// Keeps the max_proposals best-ranked boxes. Survivors stay in input order;
// ties in rank resolve to the earlier box.
inline std::vector<BBox> cap_proposals(const std::vector<BBox>& boxes, std::size_t max_proposals,
                                       ProposalRank rank = ProposalRank::kInputOrder) {
  if (max_proposals < 1) throw ConfigError("cap_proposals: max_proposals must be >= 1");
  if (boxes.size() <= max_proposals) return boxes;
  if (rank == ProposalRank::kInputOrder) {
    return std::vector<BBox>(boxes.begin(), boxes.begin() + static_cast<std::ptrdiff_t>(max_proposals));
  }
  std::vector<std::size_t> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].area() > boxes[b].area(); });
  order.resize(max_proposals);
  std::sort(order.begin(), order.end());
  std::vector<BBox> out;
  out.reserve(max_proposals);
  for (std::size_t i : order) out.push_back(boxes[i]);
  return out;
}

// Every box of every (scale, ratio) that fits inside the image, on a grid of
// `sliding_stride` pixels. Ordered scale-major, then ratio, then row-major.
inline std::vector<BBox> sliding_window_proposals(int img_w, int img_h, const ProposalConfig& cfg) {
  validate(cfg);
  std::vector<BBox> out;
  for (double s : cfg.sliding_scales) {
    for (double r : cfg.sliding_ratios) {
      const double w = s / std::sqrt(r);
      const double h = s * std::sqrt(r);
      if (w > img_w || h > img_h) continue;
      const int nx = static_cast<int>(std::floor((img_w - w) / cfg.sliding_stride + 1e-9)) + 1;
      const int ny = static_cast<int>(std::floor((img_h - h) / cfg.sliding_stride + 1e-9)) + 1;
      for (int iy = 0; iy < ny; ++iy) {
        for (int ix = 0; ix < nx; ++ix) {
          out.push_back(BBox{ix * cfg.sliding_stride, iy * cfg.sliding_stride, w, h});
        }
      }
    }
  }
  return cap_proposals(out, cfg.max_proposals, ProposalRank::kInputOrder);
}

namespace detail {

struct Region {
  double x1, y1, x2, y2;
  double sum[3];
  double pixels;
  bool alive;
  std::set<int> neighbours;

  double mean(int c) const { return sum[c] / pixels; }
};

inline double color_distance(const Region& a, const Region& b) {
  double d = 0;
  for (int c = 0; c < 3; ++c) {
    const double diff = a.mean(c) - b.mean(c);
    d += diff * diff;
  }
  return std::sqrt(d);
}

}  // namespace detail

// Greedy hierarchical grouping over a regular grid of square superpixels.
// The adjacent pair with the smallest mean-color distance merges first
// (ties: lexicographically smallest (id_a, id_b)); the bounding box of every
// region ever formed is emitted, exact duplicates removed, and the result
// capped by area.
inline std::vector<BBox> selective_search_lite(const Image& image, const ProposalConfig& cfg) {
  validate(cfg);
  if (image.rank() != 3 || image.dim(0) != 3) throw ConfigError("selective_search_lite: expected RGB image");
  const int h = image_height(image), w = image_width(image);
  if (w < cfg.cell_size || h < cfg.cell_size) {
    return {BBox{0, 0, static_cast<double>(w), static_cast<double>(h)}};
  }
  const int gx = (w + cfg.cell_size - 1) / cfg.cell_size;
  const int gy = (h + cfg.cell_size - 1) / cfg.cell_size;
  const std::size_t plane = static_cast<std::size_t>(w) * h;

  std::vector<detail::Region> regions;
  regions.reserve(static_cast<std::size_t>(2 * gx * gy));
  for (int cy = 0; cy < gy; ++cy) {
    for (int cx = 0; cx < gx; ++cx) {
      const int x1 = cx * cfg.cell_size, y1 = cy * cfg.cell_size;
      const int x2 = std::min(w, x1 + cfg.cell_size), y2 = std::min(h, y1 + cfg.cell_size);
      detail::Region r{double(x1), double(y1), double(x2), double(y2), {0, 0, 0}, 0, true, {}};
      for (int y = y1; y < y2; ++y) {
        for (int x = x1; x < x2; ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * w + x;
          for (int c = 0; c < 3; ++c) r.sum[c] += image[static_cast<std::size_t>(c) * plane + i];
        }
      }
      r.pixels = double(x2 - x1) * (y2 - y1);
      const int id = cy * gx + cx;
      if (cx > 0) r.neighbours.insert(id - 1);
      if (cx + 1 < gx) r.neighbours.insert(id + 1);
      if (cy > 0) r.neighbours.insert(id - gx);
      if (cy + 1 < gy) r.neighbours.insert(id + gx);
      regions.push_back(std::move(r));
    }
  }

  using Candidate = std::tuple<double, int, int>;
  std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> queue;
  for (int a = 0; a < static_cast<int>(regions.size()); ++a) {
    for (int b : regions[static_cast<std::size_t>(a)].neighbours) {
      if (a < b) queue.emplace(detail::color_distance(regions[a], regions[b]), a, b);
    }
  }

  while (!queue.empty()) {
    const auto [dist, a, b] = queue.top();
    queue.pop();
    if (!regions[a].alive || !regions[b].alive) continue;
    if (dist > cfg.merge_threshold) break;
    detail::Region merged{std::min(regions[a].x1, regions[b].x1), std::min(regions[a].y1, regions[b].y1),
                          std::max(regions[a].x2, regions[b].x2), std::max(regions[a].y2, regions[b].y2),
                          {regions[a].sum[0] + regions[b].sum[0], regions[a].sum[1] + regions[b].sum[1],
                           regions[a].sum[2] + regions[b].sum[2]},
                          regions[a].pixels + regions[b].pixels,
                          true,
                          {}};
    const int id = static_cast<int>(regions.size());
    for (int src : {a, b}) {
      regions[src].alive = false;
      for (int n : regions[src].neighbours) {
        if (n == a || n == b) continue;
        merged.neighbours.insert(n);
        regions[n].neighbours.erase(src);
        regions[n].neighbours.insert(id);
      }
    }
    regions.push_back(std::move(merged));
    for (int n : regions.back().neighbours) {
      queue.emplace(detail::color_distance(regions[n], regions.back()), n, id);
    }
  }

  std::vector<BBox> boxes;
  std::set<std::tuple<double, double, double, double>> seen;
  for (const auto& r : regions) {
    if (seen.emplace(r.x1, r.y1, r.x2, r.y2).second) {
      boxes.push_back(BBox{r.x1, r.y1, r.x2 - r.x1, r.y2 - r.y1});
    }
  }
  return cap_proposals(boxes, cfg.max_proposals, ProposalRank::kAreaDescending);
}

inline std::vector<BBox> generate_proposals(const Image& image, const ProposalConfig& cfg) {
  if (cfg.mode == ProposalMode::kSliding) {
    return sliding_window_proposals(image_width(image), image_height(image), cfg);
  }
  return selective_search_lite(image, cfg);
}

}  // namespace vdet
