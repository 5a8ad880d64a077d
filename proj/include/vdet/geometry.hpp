#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <vector>

#include "vdet/error.hpp"

namespace vdet {

// Axis-aligned box in continuous pixel coordinates: (x, y) is the top-left
// corner, w and h are strictly positive.
struct BBox {
  double x = 0;
  double y = 0;
  double w = 1;
  double h = 1;

  double x2() const { return x + w; }
  double y2() const { return y + h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double area() const { return w * h; }
  bool valid() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) &&
           std::isfinite(h) && w > 0 && h > 0;
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

struct ScoredBox {
  BBox box;
  double score = 0;
};

// Regression target of one box relative to a reference box.
struct BoxDelta {
  double dx = 0;
  double dy = 0;
  double dw = 0;
  double dh = 0;

  friend bool operator==(const BoxDelta&, const BoxDelta&) = default;
};

// Image-sized clip region [0, width) x [0, height).
struct ClipBounds {
  double width;
  double height;
};

inline double intersection_area(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x, b.x);
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y, b.y);
  if (iw <= 0 || ih <= 0) return 0.0;
  return iw * ih;
}

inline double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// Greedy non-maximum suppression. Returns kept indices in descending score
// order; equal scores are visited in ascending input index. A box is
// suppressed when its IoU with an already kept box exceeds iou_thresh.
inline std::vector<std::size_t> nms(const std::vector<ScoredBox>& dets,
                                    double iou_thresh) {
  if (!(iou_thresh >= 0.0 && iou_thresh <= 1.0)) {
    throw ConfigError("nms: iou_thresh must lie in [0, 1]");
  }
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });

  std::vector<std::size_t> keep;
  std::vector<char> suppressed(dets.size(), 0);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(dets[i].box, dets[j].box) > iou_thresh) {
        suppressed[j] = 1;
      }
    }
  }
  return keep;
}

inline BoxDelta encode_box(const BBox& target, const BBox& reference) {
  return BoxDelta{(target.cx() - reference.cx()) / reference.w,
                  (target.cy() - reference.cy()) / reference.h,
                  std::log(target.w / reference.w),
                  std::log(target.h / reference.h)};
}

inline BBox clip_box(const BBox& b, const ClipBounds& bounds) {
  const double x1 = std::clamp(b.x, 0.0, bounds.width);
  const double y1 = std::clamp(b.y, 0.0, bounds.height);
  const double x2 = std::clamp(b.x2(), 0.0, bounds.width);
  const double y2 = std::clamp(b.y2(), 0.0, bounds.height);
  return BBox{x1, y1, x2 - x1, y2 - y1};
}

// Inverse of encode_box. When `clip` is given the decoded box is clipped to
// the image; a box that collapses (or whose size overflows) throws
// DegenerateBoxError.
inline BBox decode_box(const BoxDelta& d, const BBox& reference,
                       std::optional<ClipBounds> clip = std::nullopt) {
  const double w = reference.w * std::exp(d.dw);
  const double h = reference.h * std::exp(d.dh);
  if (!std::isfinite(w) || !std::isfinite(h) || w <= 0 || h <= 0) {
    throw DegenerateBoxError("decode_box: size overflow or collapse");
  }
  const double cx = reference.cx() + d.dx * reference.w;
  const double cy = reference.cy() + d.dy * reference.h;
  BBox out{cx - 0.5 * w, cy - 0.5 * h, w, h};
  if (!out.valid()) throw DegenerateBoxError("decode_box: non-finite box");
  if (clip) {
    out = clip_box(out, *clip);
    if (!out.valid()) throw DegenerateBoxError("decode_box: box outside clip bounds");
  }
  return out;
}

struct AnchorGrid {
  int feat_w = 0;
  int feat_h = 0;
  double stride = 1;
  std::vector<double> scales;
  std::vector<double> ratios;
  // Ordered (row i, column j, scale, ratio) with ratio fastest.
  std::vector<BBox> anchors;

  std::size_t per_cell() const { return scales.size() * ratios.size(); }
  std::size_t index(int i, int j, std::size_t k) const {
    return (static_cast<std::size_t>(i) * feat_w + j) * per_cell() + k;
  }
};

// Anchors centered on cell centers ((j + 0.5) * stride, (i + 0.5) * stride).
// Each anchor has area scale^2 and aspect ratio h / w = ratio.
inline AnchorGrid generate_anchors(int feat_w, int feat_h, double stride,
                                   const std::vector<double>& scales,
                                   const std::vector<double>& ratios) {
  if (feat_w < 1 || feat_h < 1) throw ConfigError("generate_anchors: empty feature map");
  if (scales.empty() || ratios.empty()) {
    throw ConfigError("generate_anchors: scales and ratios must be non-empty");
  }
  for (double s : scales) {
    if (!(s > 0)) throw ConfigError("generate_anchors: scales must be positive");
  }
  for (double r : ratios) {
    if (!(r > 0)) throw ConfigError("generate_anchors: ratios must be positive");
  }
  AnchorGrid grid{feat_w, feat_h, stride, scales, ratios, {}};
  grid.anchors.reserve(static_cast<std::size_t>(feat_w) * feat_h * grid.per_cell());
  for (int i = 0; i < feat_h; ++i) {
    for (int j = 0; j < feat_w; ++j) {
      const double cx = (j + 0.5) * stride;
      const double cy = (i + 0.5) * stride;
      for (double s : scales) {
        for (double r : ratios) {
          const double w = s / std::sqrt(r);
          const double h = s * std::sqrt(r);
          grid.anchors.push_back(BBox{cx - 0.5 * w, cy - 0.5 * h, w, h});
        }
      }
    }
  }
  return grid;
}

}  // namespace vdet
