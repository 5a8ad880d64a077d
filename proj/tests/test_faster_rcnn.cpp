#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "vdet/dataset.hpp"
#include "vdet/faster_rcnn.hpp"
#include "vdet/gradcheck.hpp"
#include "vdet/serialize.hpp"

using namespace vdet;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// One-anchor RPN output with logits (bg, fg) and the given deltas.
RpnOutput<double> one_anchor(double bg, double fg, const BoxDelta& d) {
  RpnOutput<double> o{Tensor<double>({1, 2, 1, 1}), Tensor<double>({1, 4, 1, 1})};
  o.cls[0] = bg;
  o.cls[1] = fg;
  o.reg[0] = d.dx;
  o.reg[1] = d.dy;
  o.reg[2] = d.dw;
  o.reg[3] = d.dh;
  return o;
}

AnchorLabels labels_of(std::vector<int> l) {
  std::vector<int> gt(l.size(), -1);
  for (std::size_t i = 0; i < l.size(); ++i) {
    if (l[i] == kAnchorPositive) gt[i] = 0;
  }
  return {std::move(l), std::move(gt)};
}

struct SynthSet {
  std::vector<Image> images;
  std::vector<std::vector<GroundTruth>> gts;
};

SynthSet synth_set(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  SynthSet s;
  for (std::size_t i = 0; i < n; ++i) {
    SynthScene scene = synth_scene(rng, SynthConfig{});
    s.images.push_back(std::move(scene.image));
    s.gts.push_back(std::move(scene.gts));
  }
  return s;
}

std::vector<std::uint8_t> model_bytes(const FrcnnModel& m) {
  ModelFile f{"faster-rcnn", "", {}, {}};
  f.sequentials.emplace_back("trunk", *m.trunk);
  f.sequentials.emplace_back("rpn.body", m.rpn.body);
  f.sequentials.emplace_back("rpn.cls", m.rpn.cls);
  f.sequentials.emplace_back("rpn.reg", m.rpn.reg);
  f.sequentials.emplace_back("det.body", m.det.body);
  f.sequentials.emplace_back("det.cls", m.det.cls);
  f.sequentials.emplace_back("det.reg", m.det.reg);
  return encode_model_file(f);
}

}  // namespace

TEST(RpnHead, OutputGridShape) {
  Rng rng(1);
  RpnConfig cfg;
  const auto head = make_rpn_head<double>(5, cfg, rng);
  const auto out = rpn_infer(head, random_tensor({1, 5, 6, 7}, rng));
  EXPECT_EQ(out.cls.shape(), (Shape{1, 18, 6, 7}));
  EXPECT_EQ(out.reg.shape(), (Shape{1, 36, 6, 7}));
  const RpnPrediction p = rpn_predictions(out, head.anchors_per_cell);
  EXPECT_EQ(p.objectness.size(), 7u * 6u * 9u);
  EXPECT_EQ(p.deltas.size(), p.objectness.size());
}

TEST(RpnHead, ObjectnessIsAProbability) {
  Rng rng(2);
  const auto head = make_rpn_head<double>(4, RpnConfig{}, rng);
  const auto out = rpn_infer(head, random_tensor({1, 4, 5, 5}, rng, -3, 3));
  const RpnPrediction p = rpn_predictions(out, head.anchors_per_cell);
  for (std::size_t n = 0; n < p.objectness.size(); ++n) {
    const auto s = detail::anchor_slots(n, 9, 5, 5);
    const double bg = 1 / (1 + std::exp(out.cls[s.fg] - out.cls[s.bg]));
    EXPECT_GT(p.objectness[n], 0);
    EXPECT_LT(p.objectness[n], 1);
    EXPECT_NEAR(p.objectness[n] + bg, 1.0, 1e-12);
  }
}

TEST(RpnHead, ChannelMismatchIsConfigError) {
  Rng rng(3);
  const auto head = make_rpn_head<double>(4, RpnConfig{}, rng);
  EXPECT_THROW(rpn_infer(head, random_tensor({1, 3, 5, 5}, rng)), ConfigError);
}

TEST(RpnConfig, ValidationRejectsBadValues) {
  RpnConfig c;
  c.window = 2;
  EXPECT_THROW(validate(c), ConfigError);
  c = RpnConfig{};
  c.max_positive = 300;
  EXPECT_THROW(validate(c), ConfigError);
  c = RpnConfig{};
  c.anchor_scales.clear();
  EXPECT_THROW(validate(c), ConfigError);
  EXPECT_NO_THROW(validate(RpnConfig{}));
}

TEST(RpnLoss, SingleAnchorHandCase) {
  const RpnConfig cfg;
  const BoxDelta t{0.1, -0.2, 0.3, 0.05};
  const auto l = rpn_loss(one_anchor(0, 0, t), labels_of({kAnchorPositive}), {0}, {t}, cfg);
  EXPECT_NEAR(l.loss, std::log(2.0) / 256, 1e-9);
  EXPECT_EQ(l.reg_loss, 0.0);
}

TEST(RpnLoss, SingleAnchorWithRegressionError) {
  // u = 0.5 on dx: smooth-L1 0.125, lambda 10, one anchor location.
  RpnConfig cfg;
  const BoxDelta t{0, 0, 0, 0};
  const auto out = one_anchor(0, 0, {0.5, 0, 0, 0});
  const auto l = rpn_loss(out, labels_of({kAnchorPositive}), {0}, {t}, cfg);
  EXPECT_NEAR(l.loss, std::log(2.0) / 256 + 1.25, 1e-9);
  cfg.eq2_multiplier = Eq2Multiplier::kPrediction;
  const auto lp = rpn_loss(out, labels_of({kAnchorPositive}), {0}, {t}, cfg);
  EXPECT_NEAR(lp.loss, std::log(2.0) / 256 + 0.625, 1e-9);
}

TEST(RpnLoss, ZeroPositivesLeavesOnlyClassification) {
  Rng rng(4);
  const RpnConfig cfg;
  RpnOutput<double> out{random_tensor({1, 18, 3, 3}, rng), random_tensor({1, 36, 3, 3}, rng)};
  std::vector<int> lab(81, kAnchorNegative);
  std::vector<std::size_t> sampled(81);
  double expected = 0;
  for (std::size_t n = 0; n < 81; ++n) {
    sampled[n] = n;
    const auto s = detail::anchor_slots(n, 9, 3, 3);
    // -log(softmax_bg)
    expected += std::log1p(std::exp(out.cls[s.fg] - out.cls[s.bg])) / 256;
  }
  const auto l = rpn_loss(out, labels_of(lab), sampled, std::vector<BoxDelta>(81), cfg);
  EXPECT_EQ(l.reg_loss, 0.0);
  EXPECT_NEAR(l.loss, expected, 1e-9);
  for (double g : l.grad_reg.values()) EXPECT_EQ(g, 0.0);
}

TEST(RpnLoss, PerfectPredictionsGiveTinyLoss) {
  const RpnConfig cfg;
  RpnOutput<double> out{Tensor<double>({1, 4, 1, 1}), Tensor<double>({1, 8, 1, 1})};
  const BoxDelta t{0.2, 0.1, -0.3, 0.4};
  // anchor 0 positive: fg logit high; anchor 1 negative: bg logit high
  out.cls[0] = -10;
  out.cls[1] = 10;
  out.cls[2] = 10;
  out.cls[3] = -10;
  out.reg[0] = t.dx;
  out.reg[1] = t.dy;
  out.reg[2] = t.dw;
  out.reg[3] = t.dh;
  const auto l = rpn_loss(out, labels_of({kAnchorPositive, kAnchorNegative}), {0, 1}, {t, {}}, cfg);
  EXPECT_LT(l.loss, 1e-3);
  EXPECT_GE(l.loss, 0);
}

TEST(RpnLoss, IgnoredAndUnsampledAnchorsContributeNothing) {
  const RpnConfig cfg;
  RpnOutput<double> out{Tensor<double>({1, 4, 1, 1}), Tensor<double>({1, 8, 1, 1})};
  const auto l = rpn_loss(out, labels_of({kAnchorIgnore, kAnchorNegative}), {0}, {{}, {}}, cfg);
  EXPECT_EQ(l.loss, 0.0);
}

class RpnGradient : public ::testing::TestWithParam<Eq2Multiplier> {};

TEST_P(RpnGradient, LossMatchesFiniteDifferencesThroughBothHeads) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(100 + seed);
    RpnConfig cfg;
    cfg.channels = 6;
    cfg.anchor_scales = {3, 5};
    cfg.anchor_ratios = {1};
    cfg.eq2_multiplier = GetParam();
    RpnHead<double> head = make_rpn_head<double>(3, cfg, rng);
    Tensor<double> fmap = random_tensor({1, 3, 4, 4}, rng);
    const std::size_t n = 4 * 4 * 2;
    std::vector<int> lab(n);
    std::vector<BoxDelta> targets(n);
    std::vector<std::size_t> sampled;
    for (std::size_t i = 0; i < n; ++i) {
      lab[i] = static_cast<int>(rng.uniform_int(-1, 1));
      targets[i] = {rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)};
      if (lab[i] != kAnchorIgnore) sampled.push_back(i);
    }
    const AnchorLabels labels = labels_of(lab);
    auto loss = [&]() { return rpn_loss(rpn_forward(head, fmap), labels, sampled, targets, cfg).loss; };
    auto pattern = [&]() {
      std::vector<std::uint32_t> p;
      head.append_pattern(p);
      // Smooth-L1 band membership of every regression coordinate.
      const auto out = rpn_infer(head, fmap);
      for (std::size_t i = 0; i < n; ++i) {
        const auto s = detail::anchor_slots(i, 2, 4, 4);
        const double t[4] = {targets[i].dx, targets[i].dy, targets[i].dw, targets[i].dh};
        for (int q = 0; q < 4; ++q) p.push_back(std::abs(out.reg[s.d[q]] - t[q]) < 1);
      }
      return p;
    };
    head.zero_grad();
    const auto l = rpn_loss(rpn_forward(head, fmap), labels, sampled, targets, cfg);
    const Tensor<double> gf = rpn_backward(head, l.grad_cls, l.grad_reg);
    std::vector<GradTarget> t;
    auto params = head.params();
    for (std::size_t i = 0; i < params.size(); ++i) t.push_back({"p" + std::to_string(i), &params[i]->value, params[i]->grad});
    t.push_back({"featmap", &fmap, gf});
    const auto r = finite_difference_check(t, loss, pattern, 1e-4, {.abs_floor = 1e-8});
    EXPECT_TRUE(r.passed) << "seed " << seed << " max rel error " << r.max_rel_error();
    for (const auto& e : r.entries) EXPECT_GT(e.checked, 0u) << e.name;
  }
}

INSTANTIATE_TEST_SUITE_P(Multipliers, RpnGradient, ::testing::Values(Eq2Multiplier::kLabel, Eq2Multiplier::kPrediction));

TEST(LabelAnchors, AnchorEqualToGroundTruthIsPositive) {
  const auto grid = generate_anchors(4, 4, 8, {16}, {1});
  const BBox a = grid.anchors[grid.index(1, 1, 0)];
  const auto l = label_anchors(grid, {{kVehicle, a}}, {32, 32}, RpnConfig{});
  EXPECT_EQ(l.label[grid.index(1, 1, 0)], kAnchorPositive);
  EXPECT_EQ(l.gt[grid.index(1, 1, 0)], 0);
}

TEST(LabelAnchors, NoGroundTruthMakesInBoundsAnchorsNegative) {
  const auto grid = generate_anchors(4, 4, 8, {16}, {1});
  const auto l = label_anchors(grid, {}, {32, 32}, RpnConfig{});
  for (std::size_t i = 0; i < grid.anchors.size(); ++i) {
    const BBox& a = grid.anchors[i];
    const bool inside = a.x >= 0 && a.y >= 0 && a.x2() <= 32 && a.y2() <= 32;
    EXPECT_EQ(l.label[i], inside ? kAnchorNegative : kAnchorIgnore) << i;
  }
  EXPECT_EQ(l.count(kAnchorPositive), 0u);
}

TEST(LabelAnchors, ArgmaxRuleRescuesWeakMatch) {
  // Single anchor (8, 8, 16, 16); ground truth overlaps it with IoU 0.4.
  const auto grid = generate_anchors(1, 1, 32, {16}, {1});
  const GroundTruth g{kVehicle, {8, 8, 16, 6.4}};
  ASSERT_NEAR(iou(grid.anchors[0], g.box), 0.4, 1e-12);
  const auto l = label_anchors(grid, {g}, {32, 32}, RpnConfig{});
  EXPECT_EQ(l.label[0], kAnchorPositive);
  EXPECT_EQ(l.gt[0], 0);
}

TEST(LabelAnchors, ArgmaxTiesAreAllPositive) {
  // Two anchors side by side, GT centred between them.
  const auto grid = generate_anchors(2, 1, 16, {16}, {1});
  const GroundTruth g{kVehicle, {8, 0, 16, 16}};
  const auto l = label_anchors(grid, {g}, {32, 16}, RpnConfig{});
  EXPECT_EQ(l.label[0], kAnchorPositive);
  EXPECT_EQ(l.label[1], kAnchorPositive);
}

TEST(LabelAnchors, CrossBoundaryAnchorsIgnored) {
  const auto grid = generate_anchors(2, 2, 8, {12}, {1});
  // anchors are centred at 4 or 12 with half side 6, so those at 4 cross
  const auto l = label_anchors(grid, {{kVehicle, {0, 0, 12, 12}}}, {18, 18}, RpnConfig{});
  EXPECT_EQ(l.label[grid.index(0, 0, 0)], kAnchorIgnore);
  EXPECT_EQ(l.label[grid.index(0, 1, 0)], kAnchorIgnore);
  EXPECT_EQ(l.label[grid.index(1, 0, 0)], kAnchorIgnore);
  EXPECT_NE(l.label[grid.index(1, 1, 0)], kAnchorIgnore);
}

TEST(LabelAnchors, MiddleBandIsIgnored) {
  AnchorGrid grid;
  grid.anchors = {{0, 0, 16, 16}, {4, 0, 16, 16}, {12, 0, 16, 16}};
  const auto l = label_anchors(grid, {{kVehicle, {0, 0, 16, 16}}}, {32, 16}, RpnConfig{});
  EXPECT_EQ(l.label[0], kAnchorPositive);
  EXPECT_EQ(l.label[1], kAnchorIgnore);    // IoU 0.6
  EXPECT_EQ(l.label[2], kAnchorNegative);  // IoU 0.14
}

TEST(SampleRpnBatch, CapsPositivesAt128) {
  std::vector<int> lab(1000, kAnchorNegative);
  for (int i = 0; i < 200; ++i) lab[static_cast<std::size_t>(i) * 5] = kAnchorPositive;
  Rng rng(5);
  const auto labels = labels_of(lab);
  const auto s = sample_rpn_batch(labels, RpnConfig{}, rng);
  std::size_t pos = 0;
  for (std::size_t i : s) pos += lab[i] == kAnchorPositive;
  EXPECT_EQ(s.size(), 256u);
  EXPECT_EQ(pos, 128u);
  EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), s.size());
}

TEST(SampleRpnBatch, FewPositivesFilledWithNegatives) {
  std::vector<int> lab(1000, kAnchorNegative);
  for (int i = 0; i < 10; ++i) lab[static_cast<std::size_t>(i)] = kAnchorPositive;
  Rng rng(6);
  const auto s = sample_rpn_batch(labels_of(lab), RpnConfig{}, rng);
  std::size_t pos = 0;
  for (std::size_t i : s) pos += lab[i] == kAnchorPositive;
  EXPECT_EQ(pos, 10u);
  EXPECT_EQ(s.size(), 256u);
}

TEST(SampleRpnBatch, NoPositivesGivesAllNegatives) {
  Rng rng(7);
  const auto s = sample_rpn_batch(labels_of(std::vector<int>(500, kAnchorNegative)), RpnConfig{}, rng);
  EXPECT_EQ(s.size(), 256u);
}

TEST(SampleRpnBatch, ShrinksWhenNegativesRunOut) {
  std::vector<int> lab(100, kAnchorIgnore);
  for (int i = 0; i < 5; ++i) lab[static_cast<std::size_t>(i)] = kAnchorPositive;
  for (int i = 5; i < 45; ++i) lab[static_cast<std::size_t>(i)] = kAnchorNegative;
  Rng rng(8);
  EXPECT_EQ(sample_rpn_batch(labels_of(lab), RpnConfig{}, rng).size(), 45u);
}

TEST(SampleRpnBatch, AllIgnoredIsAnError) {
  Rng rng(9);
  EXPECT_THROW(sample_rpn_batch(labels_of(std::vector<int>(10, kAnchorIgnore)), RpnConfig{}, rng), Error);
}

TEST(RpnPropose, CappedSortedAndInsideImage) {
  Rng rng(10);
  RpnConfig cfg;
  cfg.post_nms_top = 40;
  const auto head = make_rpn_head<float>(4, cfg, rng);
  Tensor<float> f({1, 4, 8, 8});
  for (auto& v : f.values()) v = static_cast<float>(rng.uniform(-1, 1));
  const auto grid = anchors_for(f.shape(), 4, cfg);
  const auto p = rpn_propose(rpn_infer(head, f), grid, {32, 32}, cfg);
  EXPECT_LE(p.size(), 40u);
  EXPECT_FALSE(p.empty());
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_GE(p[i].box.x, 0);
    EXPECT_GE(p[i].box.y, 0);
    EXPECT_LE(p[i].box.x2(), 32 + 1e-9);
    EXPECT_LE(p[i].box.y2(), 32 + 1e-9);
    if (i) {
      EXPECT_GE(p[i - 1].score, p[i].score);
    }
  }
}

TEST(RpnPropose, LargerBudgetKeepsEarlierProposals) {
  Rng rng(11);
  RpnConfig cfg;
  const auto head = make_rpn_head<float>(4, cfg, rng);
  Tensor<float> f({1, 4, 16, 16});
  for (auto& v : f.values()) v = static_cast<float>(rng.uniform(-1, 1));
  const auto out = rpn_infer(head, f);
  const auto grid = anchors_for(f.shape(), 4, cfg);
  std::vector<ScoredBox> prev;
  for (std::size_t top : {1, 5, 20, 100, 300, 600}) {
    cfg.post_nms_top = top;
    const auto p = rpn_propose(out, grid, {64, 64}, cfg);
    ASSERT_GE(p.size(), prev.size());
    for (std::size_t i = 0; i < prev.size(); ++i) {
      EXPECT_EQ(p[i].box, prev[i].box);
      EXPECT_EQ(p[i].score, prev[i].score);
    }
    prev = p;
  }
}

TEST(RpnPropose, UntrainedHeadIsDeterministicPerSeed) {
  auto run = [] {
    Rng rng(12);
    const RpnConfig cfg;
    const auto head = make_rpn_head<float>(4, cfg, rng);
    Tensor<float> f({1, 4, 16, 16});
    for (auto& v : f.values()) v = static_cast<float>(rng.uniform(-1, 1));
    return rpn_propose(rpn_infer(head, f), anchors_for(f.shape(), 4, cfg), {64, 64}, cfg);
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].box, b[i].box);
    EXPECT_EQ(a[i].score, b[i].score);
  }
}

TEST(DetRoiLabel, BoundariesOfTheTwoRanges) {
  const DetHeadConfig cfg;
  const std::vector<GroundTruth> gts{{kVehicle, {0, 0, 10, 10}}};
  // Same-height boxes sliding right: IoU = (10 - s) / (10 + s).
  auto shifted = [](double iou_target) {
    const double s = 10 * (1 - iou_target) / (1 + iou_target);
    return BBox{s, 0, 10, 10};
  };
  ASSERT_NEAR(iou(shifted(0.6), gts[0].box), 0.6, 1e-12);
  EXPECT_EQ(det_roi_label(BBox{2.5, 0, 10, 10}, gts, cfg), kVehicle);  // exactly 0.6
  EXPECT_EQ(det_roi_label(shifted(0.45), gts, cfg), -1);
  EXPECT_EQ(det_roi_label(BBox{0, 0, 10, 3}, gts, cfg), kBackground);  // exactly 0.3
  EXPECT_EQ(det_roi_label(BBox{20, 20, 5, 5}, gts, cfg), kBackground);
}

TEST(SampleDetRois, ForegroundFractionAndSize) {
  Rng rng(13);
  const std::vector<GroundTruth> gts{{kVehicle, {10, 10, 20, 20}}};
  std::vector<BBox> props;
  for (int i = 0; i < 40; ++i) props.push_back({10.0 + i * 0.01, 10, 20, 20});
  for (int i = 0; i < 100; ++i) props.push_back({40, 40 + i * 0.1, 10, 10});
  const auto b = sample_det_rois(props, gts, DetHeadConfig{}, rng);
  std::size_t fg = 0;
  for (int l : b.labels) fg += l > 0;
  EXPECT_EQ(fg, 16u);
  EXPECT_EQ(b.rois.size(), 64u);
  for (std::size_t i = 0; i < b.rois.size(); ++i) {
    if (b.labels[i] > 0) {
      EXPECT_NEAR(b.targets[i].dx, encode_box(gts[0].box, b.rois[i]).dx, 1e-15);
    }
  }
}

TEST(DetHead, LossMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(200 + seed);
    DetHeadConfig cfg;
    cfg.roi_size = 2;
    cfg.fc_dim = 5;
    DetHead<double> head = make_det_head<double>(3, 2, cfg, rng);
    Tensor<double> fmap = random_tensor({1, 3, 6, 6}, rng);
    RoiBatch batch;
    for (int i = 0; i < 5; ++i) {
      batch.rois.push_back({rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(6, 13), rng.uniform(6, 13)});
      batch.labels.push_back(static_cast<int>(rng.uniform_int(0, 2)));
      batch.targets.push_back({rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.1, 0.1),
                               rng.uniform(-0.1, 0.1)});
    }
    const double scale = 0.25;
    auto loss = [&]() { return det_loss(det_forward(head, fmap, batch.rois, scale), batch, cfg).loss; };
    auto pattern = [&]() {
      std::vector<std::uint32_t> p;
      head.body.append_pattern(p);
      const auto o = det_infer(head, fmap, batch.rois, scale);
      for (auto a : o.pooled.argmax) p.push_back(static_cast<std::uint32_t>(a));
      const int nr = o.reg.dim(1);
      for (std::size_t i = 0; i < batch.rois.size(); ++i) {
        const int c = batch.labels[i];
        if (c <= 0) continue;
        const double t[4] = {batch.targets[i].dx / 0.1, batch.targets[i].dy / 0.1, batch.targets[i].dw / 0.2,
                             batch.targets[i].dh / 0.2};
        for (int q = 0; q < 4; ++q) p.push_back(std::abs(o.reg[i * nr + 4 * c + q] - t[q]) < 1);
      }
      return p;
    };
    head.zero_grad();
    const auto out = det_forward(head, fmap, batch.rois, scale);
    const auto l = det_loss(out, batch, cfg);
    const Tensor<double> gf = det_backward(head, out, l.grad_cls, l.grad_reg, fmap.shape());
    std::vector<GradTarget> t;
    auto params = head.params();
    for (std::size_t i = 0; i < params.size(); ++i) t.push_back({"p" + std::to_string(i), &params[i]->value, params[i]->grad});
    t.push_back({"featmap", &fmap, gf});
    const auto r = finite_difference_check(t, loss, pattern, 1e-4, {.abs_floor = 1e-8});
    EXPECT_TRUE(r.passed) << "seed " << seed << " max rel error " << r.max_rel_error();
  }
}

TEST(TrainDet, EpochWithoutPositivesIsAnError) {
  const SynthSet s = synth_set(3, 14);
  FrcnnConfig cfg;
  Rng rng(14);
  auto trunk = make_conv_trunk<float>(cfg.net, rng);
  auto det = make_det_head<float>(cfg.net.conv_channels, 1, cfg.det, rng);
  // Proposals far from every vehicle.
  std::vector<std::vector<BBox>> props(3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (double x = 0; x < 64; x += 4) {
      const BBox b{x, 0, 4, 4};
      if (best_overlap(b, s.gts[i]).first <= 0.3) props[i].push_back(b);
    }
  }
  EXPECT_THROW(detail::train_det(&trunk, det, s.images, s.gts, props, {}, cfg, 1, rng, {}, "t"), Error);
}

class AlternatingTraining : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new SynthSet(synth_set(250, 15));
    cfg_ = new FrcnnConfig();
    log_ = new std::vector<std::string>();
    stats_ = new FrcnnTrainStats();
    model_ = new FrcnnModel(alternating_train(data_->images, data_->gts, *cfg_,
                                              [](const std::string& l) { log_->push_back(l); }, stats_));
  }
  static void TearDownTestSuite() {
    delete model_;
    delete stats_;
    delete log_;
    delete cfg_;
    delete data_;
  }
  static SynthSet* data_;
  static FrcnnConfig* cfg_;
  static std::vector<std::string>* log_;
  static FrcnnTrainStats* stats_;
  static FrcnnModel* model_;
};

SynthSet* AlternatingTraining::data_ = nullptr;
FrcnnConfig* AlternatingTraining::cfg_ = nullptr;
std::vector<std::string>* AlternatingTraining::log_ = nullptr;
FrcnnTrainStats* AlternatingTraining::stats_ = nullptr;
FrcnnModel* AlternatingTraining::model_ = nullptr;

TEST_F(AlternatingTraining, LogsFourStageBanners) {
  int banners = 0;
  for (const auto& l : *log_) banners += l.rfind("faster-rcnn step ", 0) == 0;
  EXPECT_EQ(banners, 4);
}

TEST_F(AlternatingTraining, EachStepLossDecreasesOverFirstThreeEpochs) {
  for (int s = 0; s < 4; ++s) {
    const auto& h = stats_->step_loss[static_cast<std::size_t>(s)];
    ASSERT_GE(h.size(), 3u);
    EXPECT_GT(h[0], h[1]) << "step " << s + 1;
    EXPECT_GT(h[1], h[2]) << "step " << s + 1;
  }
}

TEST_F(AlternatingTraining, HeadsShareTheTrunk) {
  FrcnnModel m = *model_;
  const Image& img = data_->images[0];
  const auto f0 = m.trunk->infer(image_input(img));
  const auto rpn0 = rpn_infer(m.rpn, f0);
  const auto det0 = det_infer(m.det, f0, {{8, 8, 24, 24}}, 0.25);
  // Perturb the shared trunk in place; both heads see the change.
  for (auto* p : m.trunk->params()) {
    for (auto& v : p->value.values()) v *= 1.5f;
  }
  const auto f1 = m.trunk->infer(image_input(img));
  EXPECT_NE(rpn_infer(m.rpn, f1).cls.vector(), rpn0.cls.vector());
  EXPECT_NE(det_infer(m.det, f1, {{8, 8, 24, 24}}, 0.25).cls.vector(), det0.cls.vector());
}

TEST_F(AlternatingTraining, DetectRunsTheTrunkOnce) {
  model_->trunk->reset_passes();
  for (std::size_t i = 0; i < 5; ++i) frcnn_detect(data_->images[i], *model_, *cfg_);
  EXPECT_EQ(model_->trunk->passes(), 5u);
}

TEST_F(AlternatingTraining, FindsTheVehicleInOneVehicleScenes) {
  const SynthSet test = synth_set(40, 99);
  int checked = 0, found = 0;
  for (std::size_t i = 0; i < test.images.size() && checked < 10; ++i) {
    if (test.gts[i].size() != 1) continue;
    ++checked;
    const auto dets = frcnn_detect(test.images[i], *model_, *cfg_);
    bool hit = false;
    for (const auto& d : dets) hit = hit || iou(d.box, test.gts[i][0].box) >= 0.5;
    found += hit;
  }
  EXPECT_EQ(checked, 10);
  EXPECT_EQ(found, checked);
}

TEST_F(AlternatingTraining, DetectionsSortedAndInsideImage) {
  const auto dets = frcnn_detect(data_->images[1], *model_, *cfg_);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    EXPECT_GE(dets[i].box.x, 0);
    EXPECT_LE(dets[i].box.x2(), 64 + 1e-9);
    EXPECT_GT(dets[i].score, cfg_->det.score_thresh);
    if (i) {
      EXPECT_GE(dets[i - 1].score, dets[i].score);
    }
  }
}

TEST(AlternatingTrainingDeterminism, SameSeedGivesIdenticalModel) {
  const SynthSet s = synth_set(12, 16);
  FrcnnConfig cfg;
  cfg.step1_epochs = cfg.step2_epochs = 2;
  cfg.step3_epochs = cfg.step4_epochs = 1;
  const auto a = alternating_train(s.images, s.gts, cfg);
  const auto b = alternating_train(s.images, s.gts, cfg);
  EXPECT_EQ(model_bytes(a), model_bytes(b));
  cfg.seed = 2;
  EXPECT_NE(model_bytes(alternating_train(s.images, s.gts, cfg)), model_bytes(a));
}
