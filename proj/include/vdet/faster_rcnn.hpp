#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "vdet/detection.hpp"
#include "vdet/error.hpp"
#include "vdet/geometry.hpp"
#include "vdet/image.hpp"
#include "vdet/losses.hpp"
#include "vdet/network.hpp"
#include "vdet/optim.hpp"
#include "vdet/pipeline.hpp"
#include "vdet/rng.hpp"
#include "vdet/roi_pool.hpp"

namespace vdet {

// Which factor multiplies each regression term of the RPN loss: the anchor
// label (1 for positives) or the predicted objectness of the anchor.
enum class Eq2Multiplier { kLabel, kPrediction };

struct RpnConfig {
  int window = 3;
  int channels = 32;
  std::vector<double> anchor_scales = {12, 18, 26};
  std::vector<double> anchor_ratios = {0.5, 1, 2};
  std::size_t batch_anchors = 256;
  std::size_t max_positive = 128;
  double lambda = 10;
  double pos_iou = 0.7;
  double neg_iou = 0.3;
  std::size_t pre_nms_top = 600;
  std::size_t post_nms_top = 300;
  double nms_thresh = 0.7;
  double min_size = 1;
  Eq2Multiplier eq2_multiplier = Eq2Multiplier::kLabel;
};

inline void validate(const RpnConfig& c) {
  if (c.window < 1 || c.window % 2 == 0) throw ConfigError("rpn: window must be odd");
  if (c.channels < 1) throw ConfigError("rpn: channels must be >= 1");
  if (c.anchor_scales.empty() || c.anchor_ratios.empty()) throw ConfigError("rpn: anchor scales/ratios empty");
  for (double v : c.anchor_scales) {
    if (!(v > 0)) throw ConfigError("rpn: anchor scales must be positive");
  }
  for (double v : c.anchor_ratios) {
    if (!(v > 0)) throw ConfigError("rpn: anchor ratios must be positive");
  }
  if (c.batch_anchors < 1 || c.max_positive > c.batch_anchors) {
    throw ConfigError("rpn: need 1 <= max_positive <= batch_anchors");
  }
  if (!(c.lambda >= 0)) throw ConfigError("rpn: lambda must be >= 0");
  if (!(c.neg_iou >= 0 && c.neg_iou <= c.pos_iou && c.pos_iou <= 1)) {
    throw ConfigError("rpn: need 0 <= neg_iou <= pos_iou <= 1");
  }
  if (c.pre_nms_top < 1 || c.post_nms_top < 1) throw ConfigError("rpn: proposal counts must be >= 1");
  if (!(c.nms_thresh >= 0 && c.nms_thresh <= 1)) throw ConfigError("rpn: nms_thresh must lie in [0, 1]");
  if (!(c.min_size > 0)) throw ConfigError("rpn: min_size must be positive");
}

// n x n conv + relu over the shared feature map, then two sibling 1 x 1
// convs: 2k objectness logits (channel 2a is background, 2a + 1 object for
// anchor a of a cell) and 4k box deltas (channels 4a .. 4a + 3).
template <typename T>
struct RpnHead {
  Sequential<T> body;
  Sequential<T> cls;
  Sequential<T> reg;
  std::size_t anchors_per_cell = 0;

  std::vector<Param<T>*> params() {
    auto p = body.params();
    for (auto* q : cls.params()) p.push_back(q);
    for (auto* q : reg.params()) p.push_back(q);
    return p;
  }
  void zero_grad() {
    body.zero_grad();
    cls.zero_grad();
    reg.zero_grad();
  }
  void append_pattern(std::vector<std::uint32_t>& out) const {
    body.append_pattern(out);
    cls.append_pattern(out);
    reg.append_pattern(out);
  }
};

template <typename T>
RpnHead<T> make_rpn_head(int in_channels, const RpnConfig& cfg, Rng& rng) {
  validate(cfg);
  RpnHead<T> h;
  h.anchors_per_cell = cfg.anchor_scales.size() * cfg.anchor_ratios.size();
  const int k = static_cast<int>(h.anchors_per_cell);
  h.body.add(Conv2d<T>(in_channels, cfg.channels, cfg.window, 1, cfg.window / 2)).init(rng);
  h.body.add(Relu<T>());
  h.cls.add(Conv2d<T>(cfg.channels, 2 * k, 1, 1, 0)).init(rng);
  h.reg.add(Conv2d<T>(cfg.channels, 4 * k, 1, 1, 0)).init(rng);
  return h;
}

template <typename T>
struct RpnOutput {
  Tensor<T> cls;  // 1 x 2k x H x W
  Tensor<T> reg;  // 1 x 4k x H x W
};

template <typename T>
RpnOutput<T> rpn_infer(const RpnHead<T>& head, const Tensor<T>& featmap) {
  const Tensor<T> h = head.body.infer(featmap);
  return {head.cls.infer(h), head.reg.infer(h)};
}

template <typename T>
RpnOutput<T> rpn_forward(RpnHead<T>& head, const Tensor<T>& featmap) {
  const Tensor<T> h = head.body.forward(featmap);
  return {head.cls.forward(h), head.reg.forward(h)};
}

// Returns the gradient with respect to the feature map.
template <typename T>
Tensor<T> rpn_backward(RpnHead<T>& head, const Tensor<T>& grad_cls, const Tensor<T>& grad_reg) {
  Tensor<T> g = head.cls.backward(grad_cls);
  const Tensor<T> gr = head.reg.backward(grad_reg);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += gr[i];
  return head.body.backward(g);
}

// Per-anchor view of an RPN output, anchors ordered like AnchorGrid.
struct RpnPrediction {
  std::vector<double> objectness;
  std::vector<BoxDelta> deltas;
};

namespace detail {

// Flat offsets of the two logits and the four deltas of anchor n.
struct AnchorSlots {
  std::size_t bg, fg, d[4];
};

inline AnchorSlots anchor_slots(std::size_t n, std::size_t k, int h, int w) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t cell = n / k, a = n % k;
  AnchorSlots s{};
  s.bg = (2 * a) * plane + cell;
  s.fg = (2 * a + 1) * plane + cell;
  for (std::size_t q = 0; q < 4; ++q) s.d[q] = (4 * a + q) * plane + cell;
  return s;
}

inline double object_probability(double bg, double fg) { return 1.0 / (1.0 + std::exp(bg - fg)); }

}  // namespace detail

template <typename T>
RpnPrediction rpn_predictions(const RpnOutput<T>& out, std::size_t k) {
  const int h = out.cls.dim(2), w = out.cls.dim(3);
  const std::size_t n = static_cast<std::size_t>(h) * w * k;
  RpnPrediction p;
  p.objectness.resize(n);
  p.deltas.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = detail::anchor_slots(i, k, h, w);
    p.objectness[i] = detail::object_probability(out.cls[s.bg], out.cls[s.fg]);
    p.deltas[i] = {double(out.reg[s.d[0]]), double(out.reg[s.d[1]]), double(out.reg[s.d[2]]), double(out.reg[s.d[3]])};
  }
  return p;
}

inline constexpr int kAnchorIgnore = -1;
inline constexpr int kAnchorNegative = 0;
inline constexpr int kAnchorPositive = 1;

struct AnchorLabels {
  std::vector<int> label;  // kAnchorPositive / kAnchorNegative / kAnchorIgnore
  std::vector<int> gt;     // matched ground truth for positives, -1 otherwise

  std::size_t count(int which) const { return static_cast<std::size_t>(std::count(label.begin(), label.end(), which)); }
};

// Anchors crossing the image border are ignored. Among the rest: positive
// when IoU > pos_iou with some ground truth, or when the anchor attains the
// best IoU of some ground truth (ties included); negative when the best IoU
// is below neg_iou; ignored otherwise.
inline AnchorLabels label_anchors(const AnchorGrid& grid, const std::vector<GroundTruth>& gts, const ClipBounds& image,
                                  const RpnConfig& cfg) {
  const std::size_t n = grid.anchors.size();
  AnchorLabels l{std::vector<int>(n, kAnchorIgnore), std::vector<int>(n, -1)};
  std::vector<char> inside(n, 0);
  std::vector<double> best_for_gt(gts.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const BBox& a = grid.anchors[i];
    inside[i] = a.x >= -1e-9 && a.y >= -1e-9 && a.x2() <= image.width + 1e-9 && a.y2() <= image.height + 1e-9;
    if (!inside[i]) continue;
    const auto [o, g] = best_overlap(a, gts);
    if (g < 0 || o < cfg.neg_iou) l.label[i] = kAnchorNegative;
    if (g >= 0 && o > cfg.pos_iou) {
      l.label[i] = kAnchorPositive;
      l.gt[i] = g;
    }
    for (std::size_t j = 0; j < gts.size(); ++j) best_for_gt[j] = std::max(best_for_gt[j], iou(a, gts[j].box));
  }
  for (std::size_t j = 0; j < gts.size(); ++j) {
    if (best_for_gt[j] <= 0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      if (inside[i] && iou(grid.anchors[i], gts[j].box) == best_for_gt[j] && l.label[i] != kAnchorPositive) {
        l.label[i] = kAnchorPositive;
        l.gt[i] = static_cast<int>(j);
      }
    }
  }
  return l;
}

// Up to max_positive positives, the rest of batch_anchors from negatives;
// the batch shrinks when negatives run out. Positives come first.
inline std::vector<std::size_t> sample_rpn_batch(const AnchorLabels& labels, const RpnConfig& cfg, Rng& rng) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.label.size(); ++i) {
    if (labels.label[i] == kAnchorPositive) pos.push_back(i);
    if (labels.label[i] == kAnchorNegative) neg.push_back(i);
  }
  if (pos.empty() && neg.empty()) throw Error("sample_rpn_batch: every anchor is ignored");
  std::vector<std::size_t> out = rng.sample(pos, cfg.max_positive);
  const auto more = rng.sample(neg, cfg.batch_anchors - out.size());
  out.insert(out.end(), more.begin(), more.end());
  return out;
}

inline std::vector<BoxDelta> rpn_targets(const AnchorGrid& grid, const AnchorLabels& labels,
                                         const std::vector<GroundTruth>& gts) {
  std::vector<BoxDelta> t(grid.anchors.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (labels.label[i] == kAnchorPositive) t[i] = encode_box(gts[static_cast<std::size_t>(labels.gt[i])].box, grid.anchors[i]);
  }
  return t;
}

template <typename T>
struct RpnLoss {
  double loss = 0;
  double cls_loss = 0;
  double reg_loss = 0;
  Tensor<T> grad_cls;
  Tensor<T> grad_reg;
};

// L = 1/N_cls sum_i CE(p_i, p_i*) + lambda / N_reg sum_i m_i smoothL1(t_i - t_i*)
// over the sampled anchors, with N_cls = batch_anchors, N_reg = number of
// feature-map locations and m_i the label or predicted objectness of
// positive anchors (0 for negatives).
template <typename T>
RpnLoss<T> rpn_loss(const RpnOutput<T>& out, const AnchorLabels& labels, const std::vector<std::size_t>& sampled,
                    const std::vector<BoxDelta>& targets, const RpnConfig& cfg) {
  const int h = out.cls.dim(2), w = out.cls.dim(3);
  const std::size_t k = static_cast<std::size_t>(out.cls.dim(1)) / 2;
  if (out.reg.dim(1) != static_cast<int>(4 * k) || labels.label.size() != k * h * w || targets.size() != labels.label.size()) {
    throw ConfigError("rpn_loss: prediction / label shape mismatch");
  }
  RpnLoss<T> r{0, 0, 0, Tensor<T>(out.cls.shape()), Tensor<T>(out.reg.shape())};
  const double n_cls = static_cast<double>(cfg.batch_anchors);
  const double n_reg = static_cast<double>(h) * w;
  for (std::size_t n : sampled) {
    const int y = labels.label[n];
    if (y == kAnchorIgnore) continue;
    const auto s = detail::anchor_slots(n, k, h, w);
    const T logits[2] = {out.cls[s.bg], out.cls[s.fg]};
    const auto ce = softmax_ce_loss<T>(std::span<const T>(logits, 2), y);
    r.cls_loss += ce.loss / n_cls;
    r.grad_cls[s.bg] += static_cast<T>(ce.grad[0] / n_cls);
    r.grad_cls[s.fg] += static_cast<T>(ce.grad[1] / n_cls);
    if (y != kAnchorPositive) continue;
    const T pred[4] = {out.reg[s.d[0]], out.reg[s.d[1]], out.reg[s.d[2]], out.reg[s.d[3]]};
    const T tgt[4] = {T(targets[n].dx), T(targets[n].dy), T(targets[n].dw), T(targets[n].dh)};
    const auto sl = smooth_l1<T>(std::span<const T>(pred, 4), std::span<const T>(tgt, 4));
    double m = 1.0;
    if (cfg.eq2_multiplier == Eq2Multiplier::kPrediction) {
      m = detail::object_probability(logits[0], logits[1]);
      // d(m L)/dz_fg = L p (1 - p), d/dz_bg is its negative.
      const double dm = sl.loss * m * (1 - m) * cfg.lambda / n_reg;
      r.grad_cls[s.fg] += static_cast<T>(dm);
      r.grad_cls[s.bg] -= static_cast<T>(dm);
    }
    r.reg_loss += cfg.lambda * m * sl.loss / n_reg;
    for (std::size_t q = 0; q < 4; ++q) r.grad_reg[s.d[q]] += static_cast<T>(cfg.lambda * m * sl.grad[q] / n_reg);
  }
  r.loss = r.cls_loss + r.reg_loss;
  return r;
}

// Decodes every anchor, clips to the image, drops boxes thinner than
// min_size, keeps the pre_nms_top most object-like, applies NMS and keeps
// post_nms_top. Output is sorted by descending objectness.
template <typename T>
std::vector<ScoredBox> rpn_propose(const RpnOutput<T>& out, const AnchorGrid& grid, const ClipBounds& image,
                                   const RpnConfig& cfg) {
  const RpnPrediction p = rpn_predictions(out, grid.per_cell());
  std::vector<ScoredBox> boxes;
  boxes.reserve(grid.anchors.size());
  for (std::size_t i = 0; i < grid.anchors.size(); ++i) {
    try {
      const BBox b = decode_box(p.deltas[i], grid.anchors[i], image);
      if (b.w >= cfg.min_size && b.h >= cfg.min_size) boxes.push_back({b, p.objectness[i]});
    } catch (const DegenerateBoxError&) {
    }
  }
  std::stable_sort(boxes.begin(), boxes.end(), [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  if (boxes.size() > cfg.pre_nms_top) boxes.resize(cfg.pre_nms_top);
  std::vector<ScoredBox> out_boxes;
  for (std::size_t i : nms(boxes, cfg.nms_thresh)) {
    if (out_boxes.size() >= cfg.post_nms_top) break;
    out_boxes.push_back(boxes[i]);
  }
  return out_boxes;
}

struct DetHeadConfig {
  int roi_size = 4;
  int fc_dim = 64;
  std::size_t rois_per_image = 64;
  double fg_fraction = 0.25;
  double pos_iou = 0.6;
  double neg_iou = 0.3;
  std::array<double, 4> delta_std = {0.1, 0.1, 0.2, 0.2};
  double reg_lambda = 1;
  double score_thresh = 0.05;
  double nms_thresh = 0.3;
};

inline void validate(const DetHeadConfig& c) {
  if (c.roi_size < 1 || c.fc_dim < 1 || c.rois_per_image < 1) throw ConfigError("det: sizes must be >= 1");
  if (!(c.fg_fraction > 0 && c.fg_fraction <= 1)) throw ConfigError("det: fg_fraction must lie in (0, 1]");
  if (!(c.neg_iou >= 0 && c.neg_iou < c.pos_iou && c.pos_iou <= 1)) {
    throw ConfigError("det: need 0 <= neg_iou < pos_iou <= 1");
  }
  for (double s : c.delta_std) {
    if (!(s > 0)) throw ConfigError("det: delta_std must be positive");
  }
  if (!(c.reg_lambda >= 0)) throw ConfigError("det: reg_lambda must be >= 0");
  if (!(c.nms_thresh >= 0 && c.nms_thresh <= 1)) throw ConfigError("det: nms_thresh must lie in [0, 1]");
}

// RoI max-pool over the shared map, fc + relu, then (N + 1)-way class
// logits and 4 (N + 1) class-specific box deltas.
template <typename T>
struct DetHead {
  int roi_size = 4;
  int n_classes = 1;
  Sequential<T> body;
  Sequential<T> cls;
  Sequential<T> reg;

  std::vector<Param<T>*> params() {
    auto p = body.params();
    for (auto* q : cls.params()) p.push_back(q);
    for (auto* q : reg.params()) p.push_back(q);
    return p;
  }
  void zero_grad() {
    body.zero_grad();
    cls.zero_grad();
    reg.zero_grad();
  }
};

template <typename T>
DetHead<T> make_det_head(int channels, int n_classes, const DetHeadConfig& cfg, Rng& rng) {
  validate(cfg);
  DetHead<T> h;
  h.roi_size = cfg.roi_size;
  h.n_classes = n_classes;
  h.body.add(Fc<T>(channels * cfg.roi_size * cfg.roi_size, cfg.fc_dim)).init(rng);
  h.body.add(Relu<T>());
  h.cls.add(Fc<T>(cfg.fc_dim, n_classes + 1)).init(rng);
  h.reg.add(Fc<T>(cfg.fc_dim, 4 * (n_classes + 1))).init(rng);
  return h;
}

template <typename T>
struct DetOutput {
  RoiPoolResult<T> pooled;
  Tensor<T> cls;  // R x (N + 1)
  Tensor<T> reg;  // R x 4 (N + 1)
};

template <typename T>
DetOutput<T> det_infer(const DetHead<T>& head, const Tensor<T>& featmap, const std::vector<BBox>& rois, double scale) {
  DetOutput<T> o{roi_maxpool(featmap, rois, scale, head.roi_size, head.roi_size), {}, {}};
  const Tensor<T> h = head.body.infer(o.pooled.output);
  o.cls = head.cls.infer(h);
  o.reg = head.reg.infer(h);
  return o;
}

template <typename T>
DetOutput<T> det_forward(DetHead<T>& head, const Tensor<T>& featmap, const std::vector<BBox>& rois, double scale) {
  DetOutput<T> o{roi_maxpool(featmap, rois, scale, head.roi_size, head.roi_size), {}, {}};
  const Tensor<T> h = head.body.forward(o.pooled.output);
  o.cls = head.cls.forward(h);
  o.reg = head.reg.forward(h);
  return o;
}

// Returns the gradient with respect to the feature map.
template <typename T>
Tensor<T> det_backward(DetHead<T>& head, const DetOutput<T>& out, const Tensor<T>& grad_cls, const Tensor<T>& grad_reg,
                       const Shape& featmap_shape) {
  Tensor<T> g = head.cls.backward(grad_cls);
  const Tensor<T> gr = head.reg.backward(grad_reg);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += gr[i];
  const Tensor<T> gp = head.body.backward(g);
  Tensor<T> gf(featmap_shape);
  roi_maxpool_backward(out.pooled, gp, gf);
  return gf;
}

// Class for IoU >= pos_iou, background for IoU <= neg_iou, -1 (unused) in
// between.
inline int det_roi_label(const BBox& roi, const std::vector<GroundTruth>& gts, const DetHeadConfig& cfg) {
  const auto [o, g] = best_overlap(roi, gts);
  if (g >= 0 && o >= cfg.pos_iou) return gts[static_cast<std::size_t>(g)].class_id;
  if (g < 0 || o <= cfg.neg_iou) return kBackground;
  return -1;
}

struct RoiBatch {
  std::vector<BBox> rois;
  std::vector<int> labels;
  std::vector<BoxDelta> targets;  // unscaled, meaningful for foreground rows
};

inline RoiBatch sample_det_rois(const std::vector<BBox>& proposals, const std::vector<GroundTruth>& gts,
                                const DetHeadConfig& cfg, Rng& rng) {
  std::vector<std::size_t> fg, bg;
  std::vector<int> lab(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    lab[i] = det_roi_label(proposals[i], gts, cfg);
    if (lab[i] > 0) fg.push_back(i);
    if (lab[i] == kBackground) bg.push_back(i);
  }
  const auto n_fg = static_cast<std::size_t>(std::lround(cfg.fg_fraction * double(cfg.rois_per_image)));
  std::vector<std::size_t> pick = rng.sample(fg, std::min(n_fg, cfg.rois_per_image));
  const auto more = rng.sample(bg, cfg.rois_per_image - pick.size());
  pick.insert(pick.end(), more.begin(), more.end());
  RoiBatch b;
  for (std::size_t i : pick) {
    b.rois.push_back(proposals[i]);
    b.labels.push_back(lab[i]);
    const auto [o, g] = best_overlap(proposals[i], gts);
    b.targets.push_back(lab[i] > 0 ? encode_box(gts[static_cast<std::size_t>(g)].box, proposals[i]) : BoxDelta{});
  }
  return b;
}

template <typename T>
struct DetLoss {
  double loss = 0;
  Tensor<T> grad_cls;
  Tensor<T> grad_reg;
};

// Mean cross-entropy over the RoIs plus reg_lambda times the mean smooth-L1
// of the true class's deltas (targets divided by delta_std) over foreground
// RoIs.
template <typename T>
DetLoss<T> det_loss(const DetOutput<T>& out, const RoiBatch& batch, const DetHeadConfig& cfg) {
  const int r = out.cls.dim(0);
  DetLoss<T> l{0, Tensor<T>(out.cls.shape()), Tensor<T>(out.reg.shape())};
  l.loss = softmax_ce_rows(out.cls, batch.labels, double(r), l.grad_cls);
  const int nr = out.reg.dim(1);
  for (int i = 0; i < r; ++i) {
    const int c = batch.labels[static_cast<std::size_t>(i)];
    if (c <= 0) continue;
    const BoxDelta& d = batch.targets[static_cast<std::size_t>(i)];
    const T tgt[4] = {T(d.dx / cfg.delta_std[0]), T(d.dy / cfg.delta_std[1]), T(d.dw / cfg.delta_std[2]),
                      T(d.dh / cfg.delta_std[3])};
    const T* pred = out.reg.data() + static_cast<std::size_t>(i) * nr + 4 * c;
    const auto sl = smooth_l1<T>(std::span<const T>(pred, 4), std::span<const T>(tgt, 4));
    l.loss += cfg.reg_lambda * sl.loss / r;
    for (int q = 0; q < 4; ++q) {
      l.grad_reg[static_cast<std::size_t>(i) * nr + 4 * c + q] += static_cast<T>(cfg.reg_lambda * sl.grad[q] / r);
    }
  }
  return l;
}

struct FrcnnConfig {
  NetSpec net;
  RpnConfig rpn;
  DetHeadConfig det;
  double learning_rate = 0.01;
  double momentum = 0.9;
  int step1_epochs = 10;
  int step2_epochs = 10;
  int step3_epochs = 5;
  int step4_epochs = 5;
  std::uint64_t seed = 1;
};

inline void validate(const FrcnnConfig& c) {
  validate(c.net);
  validate(c.rpn);
  validate(c.det);
  if (!(c.learning_rate > 0) || !(c.momentum >= 0 && c.momentum < 1)) {
    throw ConfigError("frcnn: learning_rate must be > 0 and momentum in [0, 1)");
  }
  if (c.step1_epochs < 0 || c.step2_epochs < 0 || c.step3_epochs < 0 || c.step4_epochs < 0) {
    throw ConfigError("frcnn: epoch counts must be non-negative");
  }
}

struct FrcnnModel {
  NetSpec net;
  std::shared_ptr<Sequential<float>> trunk;  // shared by both heads
  RpnHead<float> rpn;
  DetHead<float> det;

  double stride() const { return net.trunk_stride(); }
};

inline AnchorGrid anchors_for(const Shape& featmap_shape, double stride, const RpnConfig& cfg) {
  return generate_anchors(featmap_shape[3], featmap_shape[2], stride, cfg.anchor_scales, cfg.anchor_ratios);
}

inline std::vector<ScoredBox> propose_from_featmap(const RpnHead<float>& rpn, const Tensor<float>& featmap,
                                                   double stride, const ClipBounds& bounds, const RpnConfig& cfg) {
  return rpn_propose(rpn_infer(rpn, featmap), anchors_for(featmap.shape(), stride, cfg), bounds, cfg);
}

inline std::vector<ScoredBox> rpn_propose(const Image& image, const FrcnnModel& model, const RpnConfig& cfg) {
  const Tensor<float> f = model.trunk->infer(image_input(image));
  return propose_from_featmap(model.rpn, f, model.stride(),
                              {double(image_width(image)), double(image_height(image))}, cfg);
}

// RoI head scoring of given proposals on a computed feature map.
inline std::vector<Detection> detect_on_featmap(const DetHead<float>& det, const Tensor<float>& featmap, double stride,
                                                const std::vector<ScoredBox>& proposals, const ClipBounds& bounds,
                                                const DetHeadConfig& cfg) {
  if (proposals.empty()) return {};
  std::vector<BBox> rois;
  rois.reserve(proposals.size());
  for (const auto& p : proposals) rois.push_back(p.box);
  const DetOutput<float> o = det_infer(det, featmap, rois, 1.0 / stride);
  const int nc = det.n_classes + 1;
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    const auto prob = softmax<float>(std::span<const float>(o.cls.data() + i * nc, static_cast<std::size_t>(nc)));
    for (int c = 1; c < nc; ++c) {
      const double score = prob[static_cast<std::size_t>(c)];
      if (!(score > cfg.score_thresh)) continue;
      const float* d = o.reg.data() + i * 4 * nc + 4 * c;
      const BoxDelta delta{d[0] * cfg.delta_std[0], d[1] * cfg.delta_std[1], d[2] * cfg.delta_std[2],
                           d[3] * cfg.delta_std[3]};
      BBox box;
      try {
        box = decode_box(delta, rois[i], bounds);
      } catch (const DegenerateBoxError&) {
        box = clip_box(rois[i], bounds);
      }
      if (box.valid()) dets.push_back({0, c, box, score});
    }
  }
  return per_class_nms(dets, cfg.nms_thresh);
}

// One trunk pass, RPN proposals, RoI head scoring, per-class NMS.
inline std::vector<Detection> frcnn_detect(const Image& image, const FrcnnModel& model, const FrcnnConfig& cfg) {
  const ClipBounds bounds{double(image_width(image)), double(image_height(image))};
  const Tensor<float> f = model.trunk->infer(image_input(image));
  const auto proposals = propose_from_featmap(model.rpn, f, model.stride(), bounds, cfg.rpn);
  return detect_on_featmap(model.det, f, model.stride(), proposals, bounds, cfg.det);
}

struct FrcnnTrainStats {
  std::array<std::vector<double>, 4> step_loss;  // mean loss per epoch of each step
};

namespace detail {

template <typename T>
std::vector<Param<T>*> concat_params(std::vector<Param<T>*> a, const std::vector<Param<T>*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

struct RpnImageData {
  AnchorGrid grid;
  AnchorLabels labels;
  std::vector<BoxDelta> targets;
};

inline RpnImageData rpn_image_data(const Shape& featmap_shape, const Image& img, const std::vector<GroundTruth>& gts,
                                   double stride, const RpnConfig& cfg) {
  RpnImageData d;
  d.grid = anchors_for(featmap_shape, stride, cfg);
  d.labels = label_anchors(d.grid, gts, {double(image_width(img)), double(image_height(img))}, cfg);
  d.targets = rpn_targets(d.grid, d.labels, gts);
  return d;
}

// Trains an RPN head, and the trunk too when `trunk` is non-null (otherwise
// `featmaps` holds the frozen trunk outputs).
inline std::vector<double> train_rpn(Sequential<float>* trunk, RpnHead<float>& rpn, const std::vector<Image>& images,
                                     const std::vector<std::vector<GroundTruth>>& gts,
                                     const std::vector<Tensor<float>>& featmaps, const FrcnnConfig& cfg, int epochs,
                                     Rng& rng, const LogSink& log, const std::string& tag) {
  SgdmState<float> opt{cfg.learning_rate, cfg.momentum, {}};
  std::vector<RpnImageData> data(images.size());
  std::vector<bool> ready(images.size(), false);
  std::vector<std::size_t> order(images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> history;
  for (int e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    double total = 0;
    for (std::size_t i : order) {
      if (trunk) trunk->zero_grad();
      rpn.zero_grad();
      const Tensor<float> f = trunk ? trunk->forward(image_input(images[i])) : featmaps[i];
      if (!ready[i]) {
        data[i] = rpn_image_data(f.shape(), images[i], gts[i], cfg.net.trunk_stride(), cfg.rpn);
        ready[i] = true;
      }
      const RpnOutput<float> out = rpn_forward(rpn, f);
      const auto sampled = sample_rpn_batch(data[i].labels, cfg.rpn, rng);
      const RpnLoss<float> l = rpn_loss(out, data[i].labels, sampled, data[i].targets, cfg.rpn);
      total += l.loss;
      const Tensor<float> gf = rpn_backward(rpn, l.grad_cls, l.grad_reg);
      if (trunk) {
        trunk->backward(gf);
        sgdm_step(concat_params(trunk->params(), rpn.params()), opt);
      } else {
        sgdm_step(rpn.params(), opt);
      }
    }
    history.push_back(total / double(images.size()));
    log_line(log, tag + " epoch " + std::to_string(e + 1) + " loss " + format_loss(history.back()));
  }
  return history;
}

inline std::vector<double> train_det(Sequential<float>* trunk, DetHead<float>& det, const std::vector<Image>& images,
                                     const std::vector<std::vector<GroundTruth>>& gts,
                                     const std::vector<std::vector<BBox>>& proposals,
                                     const std::vector<Tensor<float>>& featmaps, const FrcnnConfig& cfg, int epochs,
                                     Rng& rng, const LogSink& log, const std::string& tag) {
  SgdmState<float> opt{cfg.learning_rate, cfg.momentum, {}};
  std::vector<std::size_t> order(images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const double scale = 1.0 / cfg.net.trunk_stride();
  std::vector<double> history;
  for (int e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    double total = 0;
    std::size_t positives = 0, used = 0;
    for (std::size_t i : order) {
      const RoiBatch batch = sample_det_rois(proposals[i], gts[i], cfg.det, rng);
      if (batch.rois.empty()) continue;
      for (int lab : batch.labels) positives += lab > 0;
      if (trunk) trunk->zero_grad();
      det.zero_grad();
      const Tensor<float> f = trunk ? trunk->forward(image_input(images[i])) : featmaps[i];
      const DetOutput<float> out = det_forward(det, f, batch.rois, scale);
      const DetLoss<float> l = det_loss(out, batch, cfg.det);
      total += l.loss;
      ++used;
      const Tensor<float> gf = det_backward(det, out, l.grad_cls, l.grad_reg, f.shape());
      if (trunk) {
        trunk->backward(gf);
        sgdm_step(concat_params(trunk->params(), det.params()), opt);
      } else {
        sgdm_step(det.params(), opt);
      }
    }
    if (positives == 0) throw Error(tag + ": no positive proposals in epoch " + std::to_string(e + 1));
    history.push_back(total / double(used));
    log_line(log, tag + " epoch " + std::to_string(e + 1) + " loss " + format_loss(history.back()));
  }
  return history;
}

inline std::vector<std::vector<BBox>> training_proposals(const Sequential<float>& trunk, const RpnHead<float>& rpn,
                                                         const std::vector<Image>& images,
                                                         const std::vector<std::vector<GroundTruth>>& gts,
                                                         const std::vector<Tensor<float>>* featmaps,
                                                         const FrcnnConfig& cfg) {
  std::vector<std::vector<BBox>> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor<float> f = featmaps ? (*featmaps)[i] : trunk.infer(image_input(images[i]));
    const ClipBounds bounds{double(image_width(images[i])), double(image_height(images[i]))};
    for (const auto& g : gts[i]) out[i].push_back(g.box);
    for (const auto& p : propose_from_featmap(rpn, f, cfg.net.trunk_stride(), bounds, cfg.rpn)) {
      out[i].push_back(p.box);
    }
  }
  return out;
}

}  // namespace detail

// Four-step alternating training:
//   1. trunk A + RPN;
//   2. fresh trunk B + detection head on step-1 proposals (plus ground truth);
//   3. trunk B frozen, RPN head (initialised from step 1) fine-tuned;
//   4. trunk B frozen, detection head fine-tuned on step-3 proposals.
// The returned model's heads share trunk B.
inline FrcnnModel alternating_train(const std::vector<Image>& images, const std::vector<std::vector<GroundTruth>>& gts,
                                    const FrcnnConfig& cfg, const LogSink& log = {}, FrcnnTrainStats* stats = nullptr) {
  validate(cfg);
  if (images.empty() || images.size() != gts.size()) throw ConfigError("alternating_train: need images with ground truth");
  const int n_classes = std::max(1, max_class_id(gts));
  Rng rng(cfg.seed);
  FrcnnTrainStats local;
  FrcnnTrainStats& st = stats ? *stats : local;
  const int ch = cfg.net.conv_channels;

  log_line(log, "faster-rcnn step 1/4: train trunk and RPN");
  Sequential<float> trunk_a = make_conv_trunk<float>(cfg.net, rng);
  RpnHead<float> rpn1 = make_rpn_head<float>(ch, cfg.rpn, rng);
  st.step_loss[0] = detail::train_rpn(&trunk_a, rpn1, images, gts, {}, cfg, cfg.step1_epochs, rng, log, "step 1");

  log_line(log, "faster-rcnn step 2/4: train fresh trunk and detection head on step-1 proposals");
  const auto props1 = detail::training_proposals(trunk_a, rpn1, images, gts, nullptr, cfg);
  auto trunk_b = std::make_shared<Sequential<float>>(make_conv_trunk<float>(cfg.net, rng));
  DetHead<float> det2 = make_det_head<float>(ch, n_classes, cfg.det, rng);
  st.step_loss[1] = detail::train_det(trunk_b.get(), det2, images, gts, props1, {}, cfg, cfg.step2_epochs, rng, log, "step 2");

  log_line(log, "faster-rcnn step 3/4: fine-tune RPN head on frozen shared trunk");
  std::vector<Tensor<float>> featmaps;
  featmaps.reserve(images.size());
  for (const auto& img : images) featmaps.push_back(trunk_b->infer(image_input(img)));
  RpnHead<float> rpn3 = rpn1;
  st.step_loss[2] = detail::train_rpn(nullptr, rpn3, images, gts, featmaps, cfg, cfg.step3_epochs, rng, log, "step 3");

  log_line(log, "faster-rcnn step 4/4: fine-tune detection head on frozen shared trunk");
  const auto props3 = detail::training_proposals(*trunk_b, rpn3, images, gts, &featmaps, cfg);
  DetHead<float> det4 = det2;
  st.step_loss[3] = detail::train_det(nullptr, det4, images, gts, props3, featmaps, cfg, cfg.step4_epochs, rng, log, "step 4");

  trunk_b->reset_passes();
  return FrcnnModel{cfg.net, std::move(trunk_b), std::move(rpn3), std::move(det4)};
}

}  // namespace vdet
