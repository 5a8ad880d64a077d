#pragma once

#include <charconv>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "vdet/dataset.hpp"
#include "vdet/error.hpp"
#include "vdet/evalkit.hpp"
#include "vdet/faster_rcnn.hpp"
#include "vdet/image.hpp"
#include "vdet/rcnn.hpp"

namespace vdet {

// Every tunable of a run. The conv trunk layout (net.*) is shared by both
// detectors; warp.output_size doubles as the R-CNN network input size.
struct RunConfig {
  SplitSpec split;
  RcnnConfig rcnn;
  FrcnnConfig frcnn;
  EvalConfig eval;
};

inline void validate(const RunConfig& c) {
  if (!(c.split.train_fraction > 0 && c.split.train_fraction < 1)) {
    throw ConfigError("split.train_fraction must lie in (0, 1)");
  }
  validate(c.rcnn);
  validate(c.frcnn);
  if (!(c.eval.iou_thresh > 0 && c.eval.iou_thresh <= 1)) throw ConfigError("eval.iou_thresh must lie in (0, 1]");
}

namespace detail {

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  double v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": not a number: '" + s + "'");
  return v;
}

template <typename I>
I parse_int(const std::string& key, const std::string& s) {
  I v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": not an integer: '" + s + "'");
  return v;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct ConfigKey {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename F>
ConfigKey real_key(std::string name, F field) {
  return {name, [field](const RunConfig& c) { return fmt_double(field(c)); },
          [name, field](RunConfig& c, const std::string& v) { field(c) = parse_double(name, v); }};
}

template <typename F>
ConfigKey int_key(std::string name, F field) {
  return {name, [field](const RunConfig& c) { return std::to_string(field(c)); },
          [name, field](RunConfig& c, const std::string& v) {
            using I = std::remove_reference_t<decltype(field(c))>;
            field(c) = parse_int<I>(name, v);
          }};
}

template <typename F>
ConfigKey list_key(std::string name, F field) {
  return {name,
          [field](const RunConfig& c) {
            std::string out;
            for (double v : field(c)) out += (out.empty() ? "" : ",") + fmt_double(v);
            return out;
          },
          [name, field](RunConfig& c, const std::string& v) {
            std::vector<double> vals;
            std::stringstream ss(v);
            std::string item;
            while (std::getline(ss, item, ',')) vals.push_back(parse_double(name, trim(item)));
            field(c) = vals;
          }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(real_key("split.train_fraction", [](auto& c) -> auto& { return c.split.train_fraction; }));
    k.push_back(int_key("split.seed", [](auto& c) -> auto& { return c.split.seed; }));

    // Trunk layout applies to both detectors.
    auto net_int = [&](const std::string& name, int NetSpec::*member) {
      k.push_back({name, [member](const RunConfig& c) { return std::to_string(c.rcnn.net.*member); },
                   [name, member](RunConfig& c, const std::string& v) {
                     c.rcnn.net.*member = c.frcnn.net.*member = parse_int<int>(name, v);
                   }});
    };
    net_int("net.conv_blocks", &NetSpec::conv_blocks);
    net_int("net.conv_channels", &NetSpec::conv_channels);
    net_int("net.kernel", &NetSpec::kernel);
    net_int("net.fc_dim", &NetSpec::fc_dim);

    k.push_back(real_key("warp.context_pixels", [](auto& c) -> auto& { return c.rcnn.warp.context_pixels; }));
    k.push_back({"warp.output_size", [](const RunConfig& c) { return std::to_string(c.rcnn.warp.output_size); },
                 [](RunConfig& c, const std::string& v) {
                   c.rcnn.warp.output_size = c.rcnn.net.input_size = c.frcnn.net.input_size =
                       parse_int<int>("warp.output_size", v);
                 }});

    k.push_back(int_key("proposals.max_proposals", [](auto& c) -> auto& { return c.rcnn.proposals.max_proposals; }));
    k.push_back({"proposals.mode",
                 [](const RunConfig& c) {
                   return std::string(c.rcnn.proposals.mode == ProposalMode::kSliding ? "sliding" : "selective_lite");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "sliding") {
                     c.rcnn.proposals.mode = ProposalMode::kSliding;
                   } else if (v == "selective_lite") {
                     c.rcnn.proposals.mode = ProposalMode::kSelectiveLite;
                   } else {
                     throw ConfigError("proposals.mode: expected selective_lite or sliding, got '" + v + "'");
                   }
                 }});
    k.push_back(list_key("proposals.sliding_scales", [](auto& c) -> auto& { return c.rcnn.proposals.sliding_scales; }));
    k.push_back(list_key("proposals.sliding_ratios", [](auto& c) -> auto& { return c.rcnn.proposals.sliding_ratios; }));
    k.push_back(real_key("proposals.sliding_stride", [](auto& c) -> auto& { return c.rcnn.proposals.sliding_stride; }));
    k.push_back(int_key("proposals.cell_size", [](auto& c) -> auto& { return c.rcnn.proposals.cell_size; }));
    k.push_back(real_key("proposals.merge_threshold", [](auto& c) -> auto& { return c.rcnn.proposals.merge_threshold; }));

    k.push_back(real_key("rcnn.learning_rate", [](auto& c) -> auto& { return c.rcnn.learning_rate; }));
    k.push_back(real_key("rcnn.momentum", [](auto& c) -> auto& { return c.rcnn.momentum; }));
    k.push_back(int_key("rcnn.batches_per_epoch", [](auto& c) -> auto& { return c.rcnn.batches_per_epoch; }));
    k.push_back(int_key("rcnn.pretrain_epochs", [](auto& c) -> auto& { return c.rcnn.pretrain_epochs; }));
    k.push_back(int_key("rcnn.pretrain_batch", [](auto& c) -> auto& { return c.rcnn.pretrain_batch; }));
    k.push_back(int_key("rcnn.finetune_epochs", [](auto& c) -> auto& { return c.rcnn.finetune_epochs; }));
    k.push_back(int_key("rcnn.finetune_positives", [](auto& c) -> auto& { return c.rcnn.finetune_positives; }));
    k.push_back(int_key("rcnn.finetune_batch", [](auto& c) -> auto& { return c.rcnn.finetune_batch; }));
    k.push_back(real_key("rcnn.finetune_pos_iou", [](auto& c) -> auto& { return c.rcnn.finetune_pos_iou; }));
    k.push_back(real_key("rcnn.svm_neg_iou", [](auto& c) -> auto& { return c.rcnn.svm_neg_iou; }));
    k.push_back(int_key("rcnn.svm_negatives_per_image", [](auto& c) -> auto& { return c.rcnn.svm_negatives_per_image; }));
    k.push_back(real_key("svm.lambda", [](auto& c) -> auto& { return c.rcnn.svm.lambda; }));
    k.push_back(int_key("svm.max_epochs", [](auto& c) -> auto& { return c.rcnn.svm.max_epochs; }));
    k.push_back(real_key("svm.tolerance", [](auto& c) -> auto& { return c.rcnn.svm.tolerance; }));
    k.push_back(real_key("ridge.lambda", [](auto& c) -> auto& { return c.rcnn.ridge_lambda; }));
    k.push_back(real_key("ridge.min_iou", [](auto& c) -> auto& { return c.rcnn.ridge_min_iou; }));
    k.push_back(real_key("rcnn.score_thresh", [](auto& c) -> auto& { return c.rcnn.score_thresh; }));
    k.push_back(real_key("rcnn.nms_thresh", [](auto& c) -> auto& { return c.rcnn.nms_thresh; }));
    k.push_back(int_key("rcnn.feature_batch", [](auto& c) -> auto& { return c.rcnn.feature_batch; }));
    k.push_back(int_key("rcnn.seed", [](auto& c) -> auto& { return c.rcnn.seed; }));

    k.push_back(int_key("rpn.window", [](auto& c) -> auto& { return c.frcnn.rpn.window; }));
    k.push_back(int_key("rpn.channels", [](auto& c) -> auto& { return c.frcnn.rpn.channels; }));
    k.push_back(list_key("rpn.anchor_scales", [](auto& c) -> auto& { return c.frcnn.rpn.anchor_scales; }));
    k.push_back(list_key("rpn.anchor_ratios", [](auto& c) -> auto& { return c.frcnn.rpn.anchor_ratios; }));
    k.push_back(int_key("rpn.batch_anchors", [](auto& c) -> auto& { return c.frcnn.rpn.batch_anchors; }));
    k.push_back(int_key("rpn.max_positive", [](auto& c) -> auto& { return c.frcnn.rpn.max_positive; }));
    k.push_back(real_key("rpn.lambda", [](auto& c) -> auto& { return c.frcnn.rpn.lambda; }));
    k.push_back(real_key("rpn.pos_iou", [](auto& c) -> auto& { return c.frcnn.rpn.pos_iou; }));
    k.push_back(real_key("rpn.neg_iou", [](auto& c) -> auto& { return c.frcnn.rpn.neg_iou; }));
    k.push_back(int_key("rpn.pre_nms_top", [](auto& c) -> auto& { return c.frcnn.rpn.pre_nms_top; }));
    k.push_back(int_key("rpn.post_nms_top", [](auto& c) -> auto& { return c.frcnn.rpn.post_nms_top; }));
    k.push_back(real_key("rpn.nms_thresh", [](auto& c) -> auto& { return c.frcnn.rpn.nms_thresh; }));
    k.push_back(real_key("rpn.min_size", [](auto& c) -> auto& { return c.frcnn.rpn.min_size; }));
    k.push_back({"rpn.eq2_multiplier",
                 [](const RunConfig& c) {
                   return std::string(c.frcnn.rpn.eq2_multiplier == Eq2Multiplier::kLabel ? "label" : "prediction");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "label") {
                     c.frcnn.rpn.eq2_multiplier = Eq2Multiplier::kLabel;
                   } else if (v == "prediction") {
                     c.frcnn.rpn.eq2_multiplier = Eq2Multiplier::kPrediction;
                   } else {
                     throw ConfigError("rpn.eq2_multiplier: expected label or prediction, got '" + v + "'");
                   }
                 }});

    k.push_back(int_key("det.roi_size", [](auto& c) -> auto& { return c.frcnn.det.roi_size; }));
    k.push_back(int_key("det.fc_dim", [](auto& c) -> auto& { return c.frcnn.det.fc_dim; }));
    k.push_back(int_key("det.rois_per_image", [](auto& c) -> auto& { return c.frcnn.det.rois_per_image; }));
    k.push_back(real_key("det.fg_fraction", [](auto& c) -> auto& { return c.frcnn.det.fg_fraction; }));
    k.push_back(real_key("det.pos_iou", [](auto& c) -> auto& { return c.frcnn.det.pos_iou; }));
    k.push_back(real_key("det.neg_iou", [](auto& c) -> auto& { return c.frcnn.det.neg_iou; }));
    k.push_back({"det.delta_std",
                 [](const RunConfig& c) {
                   std::string out;
                   for (double v : c.frcnn.det.delta_std) out += (out.empty() ? "" : ",") + fmt_double(v);
                   return out;
                 },
                 [](RunConfig& c, const std::string& v) {
                   std::vector<double> vals;
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) vals.push_back(parse_double("det.delta_std", trim(item)));
                   if (vals.size() != 4) throw ConfigError("det.delta_std: expected 4 values");
                   for (std::size_t i = 0; i < 4; ++i) c.frcnn.det.delta_std[i] = vals[i];
                 }});
    k.push_back(real_key("det.reg_lambda", [](auto& c) -> auto& { return c.frcnn.det.reg_lambda; }));
    k.push_back(real_key("det.score_thresh", [](auto& c) -> auto& { return c.frcnn.det.score_thresh; }));
    k.push_back(real_key("det.nms_thresh", [](auto& c) -> auto& { return c.frcnn.det.nms_thresh; }));

    k.push_back(real_key("frcnn.learning_rate", [](auto& c) -> auto& { return c.frcnn.learning_rate; }));
    k.push_back(real_key("frcnn.momentum", [](auto& c) -> auto& { return c.frcnn.momentum; }));
    k.push_back(int_key("frcnn.step1_epochs", [](auto& c) -> auto& { return c.frcnn.step1_epochs; }));
    k.push_back(int_key("frcnn.step2_epochs", [](auto& c) -> auto& { return c.frcnn.step2_epochs; }));
    k.push_back(int_key("frcnn.step3_epochs", [](auto& c) -> auto& { return c.frcnn.step3_epochs; }));
    k.push_back(int_key("frcnn.step4_epochs", [](auto& c) -> auto& { return c.frcnn.step4_epochs; }));
    k.push_back(int_key("frcnn.seed", [](auto& c) -> auto& { return c.frcnn.seed; }));

    k.push_back(real_key("eval.iou_thresh", [](auto& c) -> auto& { return c.eval.iou_thresh; }));
    k.push_back({"eval.ap_mode", [](const RunConfig& c) { return ap_mode_name(c.eval.ap_mode); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "all_points") {
                     c.eval.ap_mode = ApMode::kAllPoints;
                   } else if (v == "eleven_point") {
                     c.eval.ap_mode = ApMode::kElevenPoint;
                   } else {
                     throw ConfigError("eval.ap_mode: expected all_points or eleven_point, got '" + v + "'");
                   }
                 }});
    return k;
  }();
  return keys;
}

}  // namespace detail

inline std::vector<std::string> config_key_names() {
  std::vector<std::string> out;
  for (const auto& k : detail::config_keys()) out.push_back(k.name);
  return out;
}

// Sets one key; unknown keys and unparsable values throw ConfigError.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (k.name == key) {
      k.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  for (const auto& k : detail::config_keys()) {
    if (k.name == key) return k.get(c);
  }
  throw ConfigError("unknown config key '" + key + "'");
}

// Applies `key = value` lines on top of `base`. Blank lines and lines
// starting with '#' are skipped. Does not validate.
inline RunConfig apply_config_text(RunConfig base, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig c = apply_config_text(RunConfig{}, text);
  validate(c);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

// Every key in a fixed order; parse_config(dump_config(c)) reproduces c
// exactly.
inline std::string dump_config(const RunConfig& c) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

}  // namespace vdet
