#pragma once

#include <algorithm>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "vdet/detection.hpp"
#include "vdet/geometry.hpp"
#include "vdet/image.hpp"
#include "vdet/tensor.hpp"

namespace vdet {

// Receives one human-readable line per training event (epoch losses, stage
// banners). The default sink drops everything.
using LogSink = std::function<void(const std::string&)>;

inline void log_line(const LogSink& sink, const std::string& line) {
  if (sink) sink(line);
}

inline std::string format_loss(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Both pipelines feed the network with pixel values centred on zero.
inline constexpr float kPixelMean = 0.5f;

template <typename T = float>
Tensor<T> image_input(const Image& img) {
  Tensor<T> x({1, img.dim(0), img.dim(1), img.dim(2)});
  for (std::size_t i = 0; i < img.size(); ++i) x[i] = static_cast<T>(img[i] - kPixelMean);
  return x;
}

// Greedy NMS applied independently per class; the result is sorted by
// descending score (ties keep input order).
inline std::vector<Detection> per_class_nms(const std::vector<Detection>& dets, double iou_thresh) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < dets.size(); ++i) by_class[dets[i].class_id].push_back(i);
  std::vector<std::size_t> kept;
  for (const auto& [cls, idx] : by_class) {
    std::vector<ScoredBox> boxes;
    boxes.reserve(idx.size());
    for (std::size_t i : idx) boxes.push_back({dets[i].box, dets[i].score});
    for (std::size_t k : nms(boxes, iou_thresh)) kept.push_back(idx[k]);
  }
  std::sort(kept.begin(), kept.end());
  std::stable_sort(kept.begin(), kept.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> out;
  out.reserve(kept.size());
  for (std::size_t i : kept) out.push_back(dets[i]);
  return out;
}

// Largest IoU between `box` and any ground truth of class `cls` (any class
// when cls < 0), with the index of that ground truth (-1 if none).
inline std::pair<double, int> best_overlap(const BBox& box, const std::vector<GroundTruth>& gts, int cls = -1) {
  double best = 0;
  int arg = -1;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (cls >= 0 && gts[g].class_id != cls) continue;
    const double o = iou(box, gts[g].box);
    if (arg < 0 || o > best) {
      best = o;
      arg = static_cast<int>(g);
    }
  }
  return {best, arg};
}

inline int max_class_id(const std::vector<std::vector<GroundTruth>>& gts) {
  int n = 0;
  for (const auto& image : gts) {
    for (const auto& g : image) n = std::max(n, g.class_id);
  }
  return n;
}

}  // namespace vdet
