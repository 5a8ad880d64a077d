#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vdet/error.hpp"
#include "vdet/geometry.hpp"
#include "vdet/tensor.hpp"

namespace vdet {

template <typename T>
struct RoiPoolResult {
  Tensor<T> output;                  // R x C x out_h x out_w
  std::vector<std::int64_t> argmax;  // flat featmap index per output cell, -1 for empty bins
};

// Max-pools each RoI (image coordinates, mapped by spatial_scale) of a
// 1 x C x H x W feature map onto an out_h x out_w grid. Bin p along an axis
// covers [floor(s + p * len / n), ceil(s + (p + 1) * len / n)) clipped to the
// map; empty bins pool to 0.
template <typename T>
RoiPoolResult<T> roi_maxpool(const Tensor<T>& featmap, const std::vector<BBox>& rois,
                             double spatial_scale, int out_h, int out_w) {
  if (featmap.rank() != 4 || featmap.dim(0) != 1) {
    throw ConfigError("roi_maxpool: expected a 1 x C x H x W feature map");
  }
  if (out_h < 1 || out_w < 1) throw ConfigError("roi_maxpool: invalid output size");
  const int c = featmap.dim(1), h = featmap.dim(2), w = featmap.dim(3);
  const int r = static_cast<int>(rois.size());
  RoiPoolResult<T> res{Tensor<T>({r, c, out_h, out_w}), {}};
  res.argmax.assign(res.output.size(), -1);

  auto bin = [](double start, double len, int n, int p, int limit, int& lo, int& hi) {
    lo = static_cast<int>(std::floor(start + p * len / n));
    hi = static_cast<int>(std::ceil(start + (p + 1) * len / n));
    lo = std::clamp(lo, 0, limit);
    hi = std::clamp(hi, 0, limit);
  };

  std::size_t o = 0;
  for (int ri = 0; ri < r; ++ri) {
    const BBox& roi = rois[static_cast<std::size_t>(ri)];
    const double x1 = roi.x * spatial_scale, y1 = roi.y * spatial_scale;
    const double rw = roi.w * spatial_scale, rh = roi.h * spatial_scale;
    if (x1 >= w || y1 >= h || x1 + rw <= 0 || y1 + rh <= 0) {
      throw Error("roi_maxpool: RoI lies entirely outside the feature map");
    }
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = static_cast<std::size_t>(ch) * h * w;
      for (int py = 0; py < out_h; ++py) {
        int ylo, yhi;
        bin(y1, rh, out_h, py, h, ylo, yhi);
        for (int px = 0; px < out_w; ++px, ++o) {
          int xlo, xhi;
          bin(x1, rw, out_w, px, w, xlo, xhi);
          std::int64_t best = -1;
          for (int y = ylo; y < yhi; ++y) {
            for (int x = xlo; x < xhi; ++x) {
              const std::size_t idx = base + static_cast<std::size_t>(y) * w + x;
              if (best < 0 || featmap[idx] > featmap[static_cast<std::size_t>(best)]) {
                best = static_cast<std::int64_t>(idx);
              }
            }
          }
          res.argmax[o] = best;
          res.output[o] = best < 0 ? T(0) : featmap[static_cast<std::size_t>(best)];
        }
      }
    }
  }
  return res;
}

// Routes grad_out back to the argmax positions, accumulating into grad_featmap.
template <typename T>
void roi_maxpool_backward(const RoiPoolResult<T>& fwd, const Tensor<T>& grad_out,
                          Tensor<T>& grad_featmap) {
  if (grad_out.size() != fwd.argmax.size()) {
    throw ConfigError("roi_maxpool_backward: gradient size mismatch");
  }
  for (std::size_t i = 0; i < fwd.argmax.size(); ++i) {
    if (fwd.argmax[i] >= 0) grad_featmap[static_cast<std::size_t>(fwd.argmax[i])] += grad_out[i];
  }
}

}  // namespace vdet
