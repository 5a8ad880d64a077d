#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "vdet/detection.hpp"
#include "vdet/error.hpp"
#include "vdet/geometry.hpp"
#include "vdet/image.hpp"
#include "vdet/pipeline.hpp"

namespace vdet {

enum class ApMode { kAllPoints, kElevenPoint };

inline std::string ap_mode_name(ApMode m) { return m == ApMode::kAllPoints ? "all_points" : "eleven_point"; }

struct EvalConfig {
  double iou_thresh = 0.5;
  ApMode ap_mode = ApMode::kAllPoints;
};

struct Matching {
  std::vector<std::size_t> order;  // detection indices, descending score (ties: input order)
  std::vector<char> tp;            // per detection, indexed like the input
};

// Greedy matching of one class: detections are visited in descending score;
// each takes the unmatched same-class ground truth of its image with the
// largest IoU, and is a true positive iff that IoU reaches iou_thresh.
inline Matching match_detections(const std::vector<Detection>& dets,
                                 const std::vector<std::vector<GroundTruth>>& gts, int class_id,
                                 double iou_thresh = 0.5) {
  Matching m;
  m.tp.assign(dets.size(), 0);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].class_id == class_id) m.order.push_back(i);
  }
  std::stable_sort(m.order.begin(), m.order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<std::vector<char>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), 0);
  for (std::size_t d : m.order) {
    const Detection& det = dets[d];
    if (det.image >= gts.size()) continue;
    double best = -1;
    std::size_t arg = 0;
    for (std::size_t g = 0; g < gts[det.image].size(); ++g) {
      const GroundTruth& gt = gts[det.image][g];
      if (gt.class_id != class_id || used[det.image][g]) continue;
      const double o = iou(det.box, gt.box);
      if (o > best) {
        best = o;
        arg = g;
      }
    }
    if (best >= iou_thresh) {
      used[det.image][arg] = 1;
      m.tp[d] = 1;
    }
  }
  return m;
}

struct PrPoint {
  double recall = 0;
  double precision = 0;
};

struct PrCurve {
  std::vector<PrPoint> points;
  std::size_t n_gt = 0;
};

// Point k is (TP_k / n_gt, TP_k / k) after the k-th detection.
inline PrCurve precision_recall_curve(const std::vector<char>& flags, std::size_t n_gt) {
  if (n_gt == 0) throw ConfigError("precision_recall_curve: no ground truth, recall undefined");
  PrCurve c{{}, n_gt};
  c.points.reserve(flags.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < flags.size(); ++k) {
    tp += flags[k] ? 1 : 0;
    c.points.push_back({double(tp) / double(n_gt), double(tp) / double(k + 1)});
  }
  return c;
}

inline double average_precision(const PrCurve& curve, ApMode mode = ApMode::kAllPoints) {
  const auto& p = curve.points;
  if (mode == ApMode::kElevenPoint) {
    double sum = 0;
    for (int t = 0; t <= 10; ++t) {
      double best = 0;
      for (const auto& pt : p) {
        if (pt.recall >= t / 10.0 - 1e-12) best = std::max(best, pt.precision);
      }
      sum += best;
    }
    return sum / 11.0;
  }
  std::vector<double> env(p.size());
  double run = 0;
  for (std::size_t k = p.size(); k-- > 0;) {
    run = std::max(run, p[k].precision);
    env[k] = run;
  }
  double ap = 0, prev = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    ap += (p[k].recall - prev) * env[k];
    prev = p[k].recall;
  }
  return ap;
}

struct ClassResult {
  int class_id = kVehicle;
  double ap = 0;
  std::size_t n_gt = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  PrCurve curve;
};

struct EvalReport {
  std::vector<ClassResult> classes;
  double map = 0;
  std::size_t images = 0;
  std::size_t detections = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  double mean_seconds = 0;
  double median_seconds = 0;
  std::vector<double> seconds;  // per image, detection call only
};

// Scores a fixed set of detections (Detection::image indexes `gts`).
inline EvalReport score_detections(const std::vector<Detection>& dets,
                                   const std::vector<std::vector<GroundTruth>>& gts, const EvalConfig& cfg = {}) {
  EvalReport r;
  r.images = gts.size();
  r.detections = dets.size();
  const int n_classes = max_class_id(gts);
  if (n_classes < 1) throw ConfigError("evaluate: no ground truth in the evaluated set");
  for (int k = 1; k <= n_classes; ++k) {
    std::size_t n_gt = 0;
    for (const auto& img : gts) {
      for (const auto& g : img) n_gt += g.class_id == k;
    }
    if (n_gt == 0) continue;
    const Matching m = match_detections(dets, gts, k, cfg.iou_thresh);
    std::vector<char> flags;
    for (std::size_t d : m.order) flags.push_back(m.tp[d]);
    ClassResult c{k, 0, n_gt, 0, 0, precision_recall_curve(flags, n_gt)};
    for (char f : flags) (f ? c.tp : c.fp) += 1;
    c.ap = average_precision(c.curve, cfg.ap_mode);
    r.tp += c.tp;
    r.fp += c.fp;
    r.classes.push_back(std::move(c));
  }
  double sum = 0;
  for (const auto& c : r.classes) sum += c.ap;
  r.map = sum / double(r.classes.size());
  return r;
}

using DetectFn = std::function<std::vector<Detection>(const Image&)>;

// Runs `detect` on every image, timing only the call itself on a monotonic
// clock, then scores the pooled detections.
inline EvalReport evaluate(const DetectFn& detect, const std::vector<Image>& images,
                           const std::vector<std::vector<GroundTruth>>& gts, const EvalConfig& cfg = {}) {
  if (images.empty() || images.size() != gts.size()) throw ConfigError("evaluate: need one ground-truth list per image");
  std::vector<Detection> all;
  std::vector<double> seconds;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Detection> dets = detect(images[i]);
    const auto t1 = std::chrono::steady_clock::now();
    seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
    for (auto& d : dets) {
      d.image = i;
      all.push_back(d);
    }
  }
  EvalReport r = score_detections(all, gts, cfg);
  r.seconds = seconds;
  r.mean_seconds = std::accumulate(seconds.begin(), seconds.end(), 0.0) / double(seconds.size());
  std::vector<double> s = seconds;
  std::sort(s.begin(), s.end());
  const std::size_t n = s.size();
  r.median_seconds = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  return r;
}

inline std::string class_name(int class_id) {
  return class_id == kVehicle ? "vehicle" : "class" + std::to_string(class_id);
}

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<unsigned char>(text.begin(), text.end()));
}

}  // namespace detail

inline std::string pr_curve_csv(const PrCurve& c) {
  std::string out = "recall,precision\n";
  for (const auto& p : c.points) out += detail::fmt("%.6f", p.recall) + "," + detail::fmt("%.6f", p.precision) + "\n";
  return out;
}

inline PrCurve parse_pr_curve_csv(const std::string& text) {
  PrCurve c;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != "recall,precision") throw FormatError("PR csv: bad header");
      header = false;
      continue;
    }
    double r = 0, p = 0;
    if (std::sscanf(line.c_str(), "%lf,%lf", &r, &p) != 2) throw FormatError("PR csv: bad line '" + line + "'");
    c.points.push_back({r, p});
  }
  if (header) throw FormatError("PR csv: missing header");
  return c;
}

// Self-contained SVG plot of precision against recall.
inline std::string pr_curve_svg(const PrCurve& c, const std::string& title) {
  const double left = 60, top = 40, size = 400;
  auto x = [&](double r) { return detail::fmt("%.2f", left + r * size); };
  auto y = [&](double p) { return detail::fmt("%.2f", top + (1 - p) * size); };
  std::string s =
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"500\" height=\"500\" viewBox=\"0 0 500 500\">\n"
      "<rect x=\"0\" y=\"0\" width=\"500\" height=\"500\" fill=\"white\"/>\n"
      "<text x=\"250\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" +
      title + "</text>\n";
  s += "<rect x=\"" + x(0) + "\" y=\"" + y(1) + "\" width=\"400\" height=\"400\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 10; t += 2) {
    const double v = t / 10.0;
    s += "<text x=\"" + x(v) + "\" y=\"" + detail::fmt("%.2f", top + size + 18) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + detail::fmt("%.1f", v) + "</text>\n";
    s += "<text x=\"" + detail::fmt("%.2f", left - 8) + "\" y=\"" + y(v) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + detail::fmt("%.1f", v) + "</text>\n";
  }
  s += "<text x=\"" + x(0.5) + "\" y=\"" + detail::fmt("%.2f", top + size + 40) +
       "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">recall</text>\n";
  s += "<text x=\"16\" y=\"" + y(0.5) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
       "transform=\"rotate(-90 16 " + y(0.5) + ")\">precision</text>\n";
  if (!c.points.empty()) {
    s += "<polyline fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < c.points.size(); ++i) {
      if (i) s += ' ';
      s += x(c.points[i].recall) + "," + y(c.points[i].precision);
    }
    s += "\"/>\n";
  }
  s += "</svg>\n";
  return s;
}

// Flat key = value summary. Timing is left out so that the file only
// depends on the model and the data.
inline std::string report_text(const EvalReport& r, const EvalConfig& cfg, const std::string& method) {
  std::string s;
  s += "method = " + method + "\n";
  s += "images = " + std::to_string(r.images) + "\n";
  s += "iou_threshold = " + detail::fmt("%.6f", cfg.iou_thresh) + "\n";
  s += "ap_mode = " + ap_mode_name(cfg.ap_mode) + "\n";
  for (const auto& c : r.classes) {
    const std::string n = class_name(c.class_id);
    s += "ap_" + n + " = " + detail::fmt("%.6f", c.ap) + "\n";
    s += "gt_" + n + " = " + std::to_string(c.n_gt) + "\n";
  }
  s += "map = " + detail::fmt("%.6f", r.map) + "\n";
  s += "detections = " + std::to_string(r.detections) + "\n";
  s += "true_positives = " + std::to_string(r.tp) + "\n";
  s += "false_positives = " + std::to_string(r.fp) + "\n";
  return s;
}

inline std::string timing_text(const EvalReport& r) {
  return "mean_seconds_per_image = " + detail::fmt("%.9f", r.mean_seconds) +
         "\nmedian_seconds_per_image = " + detail::fmt("%.9f", r.median_seconds) + "\n";
}

// Writes report.txt, timing.txt and pr_<class>.csv / .svg under out_dir.
inline void emit_report(const EvalReport& r, const EvalConfig& cfg, const std::string& method,
                        const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
  detail::write_text(out_dir / "report.txt", report_text(r, cfg, method));
  detail::write_text(out_dir / "timing.txt", timing_text(r));
  for (const auto& c : r.classes) {
    const std::string n = class_name(c.class_id);
    detail::write_text(out_dir / ("pr_" + n + ".csv"), pr_curve_csv(c.curve));
    detail::write_text(out_dir / ("pr_" + n + ".svg"),
                       pr_curve_svg(c.curve, method + " " + n + " AP " + detail::fmt("%.3f", c.ap)));
  }
}

}  // namespace vdet
