#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "vdet/dataset.hpp"
#include "vdet/detection.hpp"
#include "vdet/error.hpp"
#include "vdet/geometry.hpp"
#include "vdet/image.hpp"
#include "vdet/losses.hpp"
#include "vdet/network.hpp"
#include "vdet/optim.hpp"
#include "vdet/pipeline.hpp"
#include "vdet/proposals.hpp"
#include "vdet/rng.hpp"

namespace vdet {

struct WarpConfig {
  double context_pixels = 16;
  int output_size = 32;
};

inline void validate(const WarpConfig& c) {
  if (c.output_size < 1) throw ConfigError("warp: output_size must be >= 1");
  if (!(c.context_pixels >= 0)) throw ConfigError("warp: context_pixels must be >= 0");
}

// Crops `box` plus context and resamples it to 3 x S x S. The box grows by
// context_pixels * (box side / S) on every side, so that the context spans
// context_pixels at output scale. Output pixel u samples the source at
// x0 + (u + 0.5) * w / S - 0.5 (pixel centres), bilinearly, with edge
// replication outside the image.
inline Tensor<float> warp_with_context(const Image& image, const BBox& box, const WarpConfig& cfg) {
  validate(cfg);
  const int iw = image_width(image), ih = image_height(image);
  if (intersection_area(box, BBox{0, 0, double(iw), double(ih)}) <= 0) {
    throw Error("warp_with_context: box does not intersect the image");
  }
  const int s = cfg.output_size;
  const double px = cfg.context_pixels * box.w / s;
  const double py = cfg.context_pixels * box.h / s;
  const double x0 = box.x - px, y0 = box.y - py;
  const double sx = (box.w + 2 * px) / s, sy = (box.h + 2 * py) / s;
  Tensor<float> out({3, s, s});
  for (int c = 0; c < 3; ++c) {
    for (int v = 0; v < s; ++v) {
      const double yy = y0 + (v + 0.5) * sy - 0.5;
      for (int u = 0; u < s; ++u) {
        out[(static_cast<std::size_t>(c) * s + v) * s + u] = sample_bilinear(image, c, yy, x0 + (u + 0.5) * sx - 0.5);
      }
    }
  }
  return out;
}

// N x 3 x S x S network input for boxes[begin, end), mean-subtracted.
inline Tensor<float> warp_batch(const Image& image, const std::vector<BBox>& boxes, std::size_t begin,
                                std::size_t end, const WarpConfig& cfg) {
  const int s = cfg.output_size;
  Tensor<float> x({static_cast<int>(end - begin), 3, s, s});
  const std::size_t per = 3 * static_cast<std::size_t>(s) * s;
  for (std::size_t i = begin; i < end; ++i) {
    const Tensor<float> p = warp_with_context(image, boxes[i], cfg);
    float* dst = x.data() + (i - begin) * per;
    for (std::size_t j = 0; j < per; ++j) dst[j] = p[j] - kPixelMean;
  }
  return x;
}

// Class of the best-overlapping ground truth when that IoU reaches pos_iou,
// background otherwise.
inline int label_for_finetune(const BBox& proposal, const std::vector<GroundTruth>& gts, double pos_iou = 0.5) {
  const auto [o, g] = best_overlap(proposal, gts);
  return (g >= 0 && o >= pos_iou) ? gts[static_cast<std::size_t>(g)].class_id : kBackground;
}

inline std::vector<int> label_for_finetune(const std::vector<BBox>& proposals, const std::vector<GroundTruth>& gts,
                                           double pos_iou = 0.5) {
  std::vector<int> labels;
  labels.reserve(proposals.size());
  for (const auto& p : proposals) labels.push_back(label_for_finetune(p, gts, pos_iou));
  return labels;
}

// Indices of a fine-tuning mini-batch drawn without replacement: up to
// `positives` foreground entries, the rest of `batch` from background.
// Positives come first in the result.
inline std::vector<std::size_t> sample_finetune_batch(const std::vector<int>& labels, Rng& rng,
                                                      std::size_t positives = 32, std::size_t batch = 128) {
  std::vector<std::size_t> pos, bg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == kBackground ? bg : pos).push_back(i);
  if (pos.empty() && bg.empty()) throw Error("sample_finetune_batch: empty pool");
  std::vector<std::size_t> out = rng.sample(pos, std::min(positives, batch));
  const auto more = rng.sample(bg, batch - out.size());
  out.insert(out.end(), more.begin(), more.end());
  return out;
}

// Linear hinge-loss classifier for one class: decision = w . x + b.
struct SvmClassifier {
  int class_id = kVehicle;
  Eigen::VectorXd weights;
  double bias = 0;

  double decision(const Eigen::Ref<const Eigen::VectorXd>& x) const { return weights.dot(x) + bias; }
};

struct SvmConfig {
  double lambda = 1e-4;
  int max_epochs = 2000;
  double tolerance = 1e-6;
};

struct SvmTrace {
  std::vector<double> objective;  // value after every accepted epoch, starting at w = 0
};

// Minimises lambda/2 |w|^2 + mean_i max(0, 1 - y_i (w . x_i + b)) by
// full-batch subgradient descent. Each step halves its length until the
// objective does not increase, so the trace is non-increasing. Rows of X
// are examples; labels are +1 / -1.
inline SvmClassifier train_svm(const Eigen::MatrixXd& x, const std::vector<int>& labels, int class_id,
                               const SvmConfig& cfg = {}, SvmTrace* trace = nullptr) {
  const auto n = x.rows();
  if (n == 0 || static_cast<std::size_t>(n) != labels.size()) throw ConfigError("train_svm: bad input sizes");
  Eigen::VectorXd y(n);
  bool has_pos = false, has_neg = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    if (l != 1 && l != -1) throw ConfigError("train_svm: labels must be +1 or -1");
    y[i] = l;
    (l > 0 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) throw ConfigError("train_svm: need both positive and negative examples");

  SvmClassifier svm{class_id, Eigen::VectorXd::Zero(x.cols()), 0.0};
  auto objective = [&](const Eigen::VectorXd& w, double b) {
    const Eigen::VectorXd margin = y.cwiseProduct((x * w).array().matrix() + Eigen::VectorXd::Constant(n, b));
    return 0.5 * cfg.lambda * w.squaredNorm() + (1.0 - margin.array()).max(0.0).sum() / double(n);
  };
  double j = objective(svm.weights, svm.bias);
  if (trace) trace->objective.push_back(j);
  double step = 1.0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const Eigen::VectorXd margin =
        y.cwiseProduct((x * svm.weights).array().matrix() + Eigen::VectorXd::Constant(n, svm.bias));
    Eigen::VectorXd coef(n);
    for (Eigen::Index i = 0; i < n; ++i) coef[i] = margin[i] < 1.0 ? -y[i] / double(n) : 0.0;
    const Eigen::VectorXd gw = cfg.lambda * svm.weights + x.transpose() * coef;
    const double gb = coef.sum();
    if (gw.squaredNorm() + gb * gb == 0) break;
    double j_new = std::numeric_limits<double>::infinity();
    Eigen::VectorXd w_new;
    double b_new = 0;
    while (step > 1e-12) {
      w_new = svm.weights - step * gw;
      b_new = svm.bias - step * gb;
      j_new = objective(w_new, b_new);
      if (j_new <= j) break;
      step *= 0.5;
    }
    if (!(j_new <= j)) break;
    const double decrease = j - j_new;
    svm.weights = w_new;
    svm.bias = b_new;
    j = j_new;
    if (trace) trace->objective.push_back(j);
    if (decrease < cfg.tolerance * std::max(1.0, j)) break;
    step *= 2.0;
  }
  return svm;
}

// Per-coordinate linear map from features to box deltas; column q of
// `weights` predicts coordinate q of (dx, dy, dw, dh).
struct RidgeWeights {
  int class_id = kVehicle;
  Eigen::MatrixXd weights;  // D x 4
  double lambda = 1000;

  BoxDelta predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    const Eigen::Vector4d d = weights.transpose() * x;
    return {d[0], d[1], d[2], d[3]};
  }
};

// Solves (X^T X + lambda I) w = X^T t for each delta coordinate.
inline RidgeWeights fit_bbox_ridge(const Eigen::MatrixXd& x, const std::vector<BoxDelta>& targets, double lambda,
                                   int class_id = kVehicle) {
  if (x.rows() < 1 || static_cast<std::size_t>(x.rows()) != targets.size()) {
    throw ConfigError("fit_bbox_ridge: need one target per feature row");
  }
  if (!(lambda >= 0)) throw ConfigError("fit_bbox_ridge: lambda must be >= 0");
  Eigen::MatrixXd t(x.rows(), 4);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const BoxDelta& d = targets[static_cast<std::size_t>(i)];
    t.row(i) << d.dx, d.dy, d.dw, d.dh;
  }
  Eigen::MatrixXd a = x.transpose() * x;
  a.diagonal().array() += lambda;
  const Eigen::MatrixXd rhs = x.transpose() * t;
  RidgeWeights r{class_id, {}, lambda};
  if (lambda == 0) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
    if (lu.rank() < a.rows()) throw SingularSystemError("fit_bbox_ridge: rank-deficient features with lambda = 0");
    r.weights = lu.solve(rhs);
  } else {
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success) throw SingularSystemError("fit_bbox_ridge: system not positive definite");
    r.weights = llt.solve(rhs);
  }
  return r;
}

// SVM role of a proposal for class k: -1 (negative) when its best IoU with a
// class-k ground truth is below neg_iou, 0 (left out) otherwise. Ground-truth
// boxes themselves are the positives.
inline int svm_region_label(const BBox& proposal, const std::vector<GroundTruth>& gts, int k, double neg_iou) {
  const auto [o, g] = best_overlap(proposal, gts, k);
  return (g < 0 || o < neg_iou) ? -1 : 0;
}

struct RcnnConfig {
  NetSpec net;
  WarpConfig warp;
  ProposalConfig proposals;
  double learning_rate = 0.001;
  double momentum = 0.9;
  int batches_per_epoch = 50;
  int pretrain_epochs = 4;
  std::size_t pretrain_batch = 64;
  int finetune_epochs = 12;
  std::size_t finetune_positives = 32;
  std::size_t finetune_batch = 128;
  double finetune_pos_iou = 0.5;
  double svm_neg_iou = 0.3;
  std::size_t svm_negatives_per_image = 40;
  SvmConfig svm;
  double ridge_lambda = 1000;
  double ridge_min_iou = 0.6;
  double score_thresh = 0;
  double nms_thresh = 0.3;
  std::size_t feature_batch = 64;
  std::uint64_t seed = 1;
};

inline void validate(const RcnnConfig& c) {
  validate(c.net);
  validate(c.warp);
  validate(c.proposals);
  if (c.net.input_size != c.warp.output_size) {
    throw ConfigError("rcnn: net input size must equal warp output size");
  }
  if (!(c.learning_rate > 0) || !(c.momentum >= 0 && c.momentum < 1)) {
    throw ConfigError("rcnn: learning_rate must be > 0 and momentum in [0, 1)");
  }
  if (c.batches_per_epoch < 1 || c.pretrain_epochs < 0 || c.finetune_epochs < 0) {
    throw ConfigError("rcnn: epoch counts must be non-negative");
  }
  if (c.pretrain_batch < 2 || c.finetune_batch < 1 || c.finetune_positives > c.finetune_batch) {
    throw ConfigError("rcnn: invalid batch sizes");
  }
  if (c.feature_batch < 1) throw ConfigError("rcnn: feature_batch must be >= 1");
  for (double v : {c.finetune_pos_iou, c.svm_neg_iou, c.ridge_min_iou, c.nms_thresh}) {
    if (!(v >= 0 && v <= 1)) throw ConfigError("rcnn: IoU thresholds must lie in [0, 1]");
  }
  if (!(c.ridge_lambda >= 0) || !(c.svm.lambda > 0)) throw ConfigError("rcnn: invalid regularisation");
}

struct RcnnModel {
  NetSpec net;
  WarpConfig warp;
  Network<float> network;  // backbone plus the "cls" head
  std::vector<SvmClassifier> svms;
  std::vector<RidgeWeights> ridges;
};

// Backbone features (rows) for every box, computed in batches.
inline Eigen::MatrixXd extract_features(const Network<float>& net, const Image& image, const std::vector<BBox>& boxes,
                                        const WarpConfig& warp, std::size_t batch = 64) {
  const int dim = net.feature_shape().back();
  Eigen::MatrixXd f(static_cast<Eigen::Index>(boxes.size()), dim);
  for (std::size_t b = 0; b < boxes.size(); b += batch) {
    const std::size_t e = std::min(boxes.size(), b + batch);
    const Tensor<float> y = net.features(warp_batch(image, boxes, b, e, warp));
    for (std::size_t i = b; i < e; ++i) {
      for (int d = 0; d < dim; ++d) {
        f(static_cast<Eigen::Index>(i), d) = y[(i - b) * static_cast<std::size_t>(dim) + d];
      }
    }
  }
  return f;
}

// Feature row with a trailing constant 1, the input of the ridge regressor.
inline Eigen::VectorXd with_bias(const Eigen::Ref<const Eigen::VectorXd>& f) {
  Eigen::VectorXd x(f.size() + 1);
  x << f, 1.0;
  return x;
}

inline std::vector<Detection> rcnn_detect(const Image& image, const RcnnModel& model, const RcnnConfig& cfg) {
  const std::vector<BBox> proposals = generate_proposals(image, cfg.proposals);
  if (proposals.empty()) return {};
  const Eigen::MatrixXd f = extract_features(model.network, image, proposals, model.warp, cfg.feature_batch);
  const ClipBounds bounds{double(image_width(image)), double(image_height(image))};
  std::vector<Detection> dets;
  for (std::size_t k = 0; k < model.svms.size(); ++k) {
    const SvmClassifier& svm = model.svms[k];
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      const Eigen::VectorXd row = f.row(static_cast<Eigen::Index>(i)).transpose();
      const double score = svm.decision(row);
      if (!(score > cfg.score_thresh)) continue;
      BBox box = clip_box(proposals[i], bounds);
      if (k < model.ridges.size()) {
        try {
          box = decode_box(model.ridges[k].predict(with_bias(row)), proposals[i], bounds);
        } catch (const DegenerateBoxError&) {
        }
      }
      if (box.valid()) dets.push_back({0, svm.class_id, box, score});
    }
  }
  return per_class_nms(dets, cfg.nms_thresh);
}

namespace detail {

struct PoolEntry {
  std::uint32_t image;
  BBox box;
  int label;
};

inline BBox random_box(Rng& rng, int iw, int ih, double min_side, double max_side) {
  const double w = rng.uniform(min_side, std::min<double>(max_side, iw));
  const double h = rng.uniform(min_side, std::min<double>(max_side, ih));
  return {rng.uniform(0, iw - w), rng.uniform(0, ih - h), w, h};
}

// One SGDM step of the patch classifier on a labelled batch; returns the
// mean cross-entropy.
inline double classifier_step(Network<float>& net, const Tensor<float>& x, const std::vector<int>& labels,
                              SgdmState<float>& opt) {
  net.zero_grad();
  const auto ys = net.forward(x);
  Tensor<float> g;
  const double loss = softmax_ce_rows(ys[0], labels, static_cast<double>(labels.size()), g);
  net.backward({g});
  sgdm_step(net.params(), opt);
  return loss;
}

}  // namespace detail

// Pre-training stand-in: a 2-way vehicle / clutter classifier on patches cut
// from freshly generated synthetic scenes (independent of the dataset).
inline std::vector<double> pretrain_backbone(Network<float>& net, const RcnnConfig& cfg, Rng& rng,
                                             const LogSink& log = {}) {
  SgdmState<float> opt{cfg.learning_rate, cfg.momentum, {}};
  SynthConfig sc;
  std::vector<double> history;
  for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    double total = 0;
    for (int it = 0; it < cfg.batches_per_epoch; ++it) {
      std::vector<BBox> boxes;
      std::vector<int> labels;
      std::vector<Image> scenes;
      std::vector<std::size_t> owner;
      while (boxes.size() < cfg.pretrain_batch) {
        SynthScene s = synth_scene(rng, sc);
        for (const auto& g : s.gts) {
          if (boxes.size() >= cfg.pretrain_batch) break;
          boxes.push_back(g.box);
          labels.push_back(1);
          owner.push_back(scenes.size());
          BBox neg;
          for (int t = 0; t < 50; ++t) {
            neg = detail::random_box(rng, sc.width, sc.height, 8, 40);
            if (best_overlap(neg, s.gts).first < cfg.svm_neg_iou) break;
          }
          if (boxes.size() >= cfg.pretrain_batch) break;
          boxes.push_back(neg);
          labels.push_back(0);
          owner.push_back(scenes.size());
        }
        scenes.push_back(std::move(s.image));
      }
      const int s = cfg.warp.output_size;
      Tensor<float> x({static_cast<int>(boxes.size()), 3, s, s});
      const std::size_t per = 3 * static_cast<std::size_t>(s) * s;
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        const Tensor<float> p = warp_with_context(scenes[owner[i]], boxes[i], cfg.warp);
        for (std::size_t j = 0; j < per; ++j) x[i * per + j] = p[j] - kPixelMean;
      }
      total += detail::classifier_step(net, x, labels, opt);
    }
    history.push_back(total / cfg.batches_per_epoch);
    log_line(log, "rcnn pretrain epoch " + std::to_string(epoch + 1) + " loss " + format_loss(history.back()));
  }
  return history;
}

// Replaces the classification head by a fresh (n_classes + 1)-way layer and
// trains on 32 + 96 batches drawn from the labelled region pool.
inline std::vector<double> finetune_backbone(Network<float>& net, const std::vector<Image>& images,
                                             const std::vector<std::vector<GroundTruth>>& gts,
                                             const std::vector<std::vector<BBox>>& proposals, int n_classes,
                                             const RcnnConfig& cfg, Rng& rng, const LogSink& log = {}) {
  if (n_classes < 1) throw ConfigError("finetune_backbone: need at least one object class");
  net.replace_head("cls", make_linear_head<float>(cfg.net.fc_dim, n_classes + 1, rng));
  std::vector<detail::PoolEntry> pool;
  std::vector<int> labels;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (const auto& g : gts[i]) {
      pool.push_back({static_cast<std::uint32_t>(i), g.box, g.class_id});
    }
    for (const auto& p : proposals[i]) {
      pool.push_back({static_cast<std::uint32_t>(i), p, label_for_finetune(p, gts[i], cfg.finetune_pos_iou)});
    }
  }
  for (const auto& e : pool) labels.push_back(e.label);
  SgdmState<float> opt{cfg.learning_rate, cfg.momentum, {}};
  const int s = cfg.warp.output_size;
  const std::size_t per = 3 * static_cast<std::size_t>(s) * s;
  std::vector<double> history;
  for (int epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
    double total = 0;
    for (int it = 0; it < cfg.batches_per_epoch; ++it) {
      const auto batch = sample_finetune_batch(labels, rng, cfg.finetune_positives, cfg.finetune_batch);
      Tensor<float> x({static_cast<int>(batch.size()), 3, s, s});
      std::vector<int> y;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& e = pool[batch[b]];
        const Tensor<float> p = warp_with_context(images[e.image], e.box, cfg.warp);
        for (std::size_t j = 0; j < per; ++j) x[b * per + j] = p[j] - kPixelMean;
        y.push_back(e.label);
      }
      total += detail::classifier_step(net, x, y, opt);
    }
    history.push_back(total / cfg.batches_per_epoch);
    log_line(log, "rcnn finetune epoch " + std::to_string(epoch + 1) + " loss " + format_loss(history.back()));
  }
  return history;
}

struct RcnnTrainStats {
  std::vector<double> pretrain_loss;
  std::vector<double> finetune_loss;
  std::vector<SvmTrace> svm_traces;
  std::size_t ridge_pairs = 0;
};

// The whole R-CNN training path on already decoded images: pre-train,
// fine-tune, per-class SVMs, per-class ridge box regression.
inline RcnnModel train_rcnn(const std::vector<Image>& images, const std::vector<std::vector<GroundTruth>>& gts,
                            const RcnnConfig& cfg, const LogSink& log = {}, RcnnTrainStats* stats = nullptr) {
  validate(cfg);
  if (images.empty() || images.size() != gts.size()) throw ConfigError("train_rcnn: need images with ground truth");
  const int n_classes = std::max(1, max_class_id(gts));
  Rng rng(cfg.seed);
  RcnnModel model{cfg.net, cfg.warp, {}, {}, {}};
  const int in = cfg.net.input_size;
  model.network = Network<float>({cfg.net.in_channels, in, in}, make_backbone<float>(cfg.net, rng));
  model.network.add_head("cls", make_linear_head<float>(cfg.net.fc_dim, 2, rng));

  RcnnTrainStats local;
  RcnnTrainStats& st = stats ? *stats : local;
  log_line(log, "rcnn stage: pretrain");
  st.pretrain_loss = pretrain_backbone(model.network, cfg, rng, log);

  log_line(log, "rcnn stage: proposals");
  std::vector<std::vector<BBox>> proposals;
  proposals.reserve(images.size());
  for (const auto& img : images) proposals.push_back(generate_proposals(img, cfg.proposals));

  log_line(log, "rcnn stage: finetune");
  st.finetune_loss = finetune_backbone(model.network, images, gts, proposals, n_classes, cfg, rng, log);

  log_line(log, "rcnn stage: svm and box regression");
  for (int k = 1; k <= n_classes; ++k) {
    std::vector<Eigen::VectorXd> svm_x, ridge_x;
    std::vector<int> svm_y;
    std::vector<BoxDelta> ridge_t;
    for (std::size_t i = 0; i < images.size(); ++i) {
      std::vector<BBox> boxes;
      std::vector<int> kind;  // +1 positive, -1 negative, 0 ridge only
      std::vector<BoxDelta> deltas;
      std::vector<std::size_t> negatives;
      for (const auto& g : gts[i]) {
        if (g.class_id != k) continue;
        boxes.push_back(g.box);
        kind.push_back(1);
        deltas.push_back({});
      }
      for (std::size_t p = 0; p < proposals[i].size(); ++p) {
        const auto [o, g] = best_overlap(proposals[i][p], gts[i], k);
        if (svm_region_label(proposals[i][p], gts[i], k, cfg.svm_neg_iou) < 0) negatives.push_back(p);
        if (g >= 0 && o >= cfg.ridge_min_iou) {
          boxes.push_back(proposals[i][p]);
          kind.push_back(0);
          deltas.push_back(encode_box(gts[i][static_cast<std::size_t>(g)].box, proposals[i][p]));
        }
      }
      for (std::size_t p : rng.sample(negatives, cfg.svm_negatives_per_image)) {
        boxes.push_back(proposals[i][p]);
        kind.push_back(-1);
        deltas.push_back({});
      }
      if (boxes.empty()) continue;
      const Eigen::MatrixXd f = extract_features(model.network, images[i], boxes, cfg.warp, cfg.feature_batch);
      for (std::size_t b = 0; b < boxes.size(); ++b) {
        const Eigen::VectorXd row = f.row(static_cast<Eigen::Index>(b)).transpose();
        if (kind[b] != 0) {
          svm_x.push_back(row);
          svm_y.push_back(kind[b]);
        } else {
          ridge_x.push_back(with_bias(row));
          ridge_t.push_back(deltas[b]);
        }
      }
    }
    auto stack = [](const std::vector<Eigen::VectorXd>& rows) {
      Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : rows[0].size());
      for (std::size_t r = 0; r < rows.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
      return m;
    };
    SvmTrace trace;
    model.svms.push_back(train_svm(stack(svm_x), svm_y, k, cfg.svm, &trace));
    log_line(log, "rcnn svm class " + std::to_string(k) + " examples " + std::to_string(svm_y.size()) +
                      " objective " + format_loss(trace.objective.back()));
    st.svm_traces.push_back(std::move(trace));
    if (!ridge_x.empty()) {
      model.ridges.push_back(fit_bbox_ridge(stack(ridge_x), ridge_t, cfg.ridge_lambda, k));
    } else {
      model.ridges.push_back({k, Eigen::MatrixXd::Zero(cfg.net.fc_dim + 1, 4), cfg.ridge_lambda});
    }
    st.ridge_pairs += ridge_t.size();
    log_line(log, "rcnn ridge class " + std::to_string(k) + " pairs " + std::to_string(ridge_t.size()));
  }
  return model;
}

}  // namespace vdet
