#pragma once

#include <filesystem>
#include <string>

#include "vdet/config.hpp"
#include "vdet/error.hpp"
#include "vdet/faster_rcnn.hpp"
#include "vdet/rcnn.hpp"
#include "vdet/serialize.hpp"

namespace vdet {

inline constexpr const char* kMethodRcnn = "rcnn";
inline constexpr const char* kMethodFasterRcnn = "faster-rcnn";

template <typename M>
struct LoadedModel {
  M model;
  RunConfig config;
};

namespace detail {

inline RunConfig config_of(const ModelFile& f) {
  try {
    return parse_config(f.config_text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model file holds an invalid config: ") + e.what());
  }
}

inline void expect_method(const ModelFile& f, const std::string& method) {
  if (f.method != method) {
    throw MethodMismatchError("model file holds a '" + f.method + "' model, expected '" + method + "'");
  }
}

inline int fc_out(const Sequential<float>& seq) {
  if (seq.empty() || seq.layer(seq.size() - 1).kind() != LayerKind::kFc) {
    throw FormatError("model block does not end in a fully connected layer");
  }
  return seq.layer(seq.size() - 1).hyper()[1];
}

}  // namespace detail

inline ModelFile rcnn_model_file(const RcnnModel& m, const RunConfig& cfg) {
  ModelFile f{kMethodRcnn, dump_config(cfg), {}, {}};
  f.sequentials.emplace_back("backbone", m.network.backbone());
  f.sequentials.emplace_back("head.cls", m.network.head("cls").layers);
  for (const auto& s : m.svms) {
    Eigen::MatrixXd w(s.weights.size() + 1, 1);
    w << s.weights, s.bias;
    f.matrices.emplace_back("svm." + std::to_string(s.class_id), w);
  }
  for (const auto& r : m.ridges) {
    f.matrices.emplace_back("ridge." + std::to_string(r.class_id), r.weights);
    f.matrices.emplace_back("ridge." + std::to_string(r.class_id) + ".lambda", Eigen::MatrixXd::Constant(1, 1, r.lambda));
  }
  return f;
}

inline LoadedModel<RcnnModel> rcnn_from_file(const ModelFile& f) {
  detail::expect_method(f, kMethodRcnn);
  LoadedModel<RcnnModel> out{{}, detail::config_of(f)};
  RcnnModel& m = out.model;
  m.net = out.config.rcnn.net;
  m.warp = out.config.rcnn.warp;
  try {
    const int s = m.warp.output_size;
    m.network = Network<float>({m.net.in_channels, s, s}, f.sequential("backbone"));
    m.network.add_head("cls", f.sequential("head.cls"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model network does not match its config: ") + e.what());
  }
  const auto dim = static_cast<Eigen::Index>(m.network.feature_shape().back());
  for (const auto& [name, mat] : f.matrices) {
    if (name.rfind("svm.", 0) == 0) {
      if (mat.rows() != dim + 1 || mat.cols() != 1) throw FormatError("block '" + name + "' has the wrong shape");
      SvmClassifier s;
      s.class_id = std::stoi(name.substr(4));
      s.weights = mat.col(0).head(dim);
      s.bias = mat(dim, 0);
      m.svms.push_back(std::move(s));
    } else if (name.rfind("ridge.", 0) == 0 && name.find(".lambda") == std::string::npos) {
      if (mat.rows() != dim + 1 || mat.cols() != 4) throw FormatError("block '" + name + "' has the wrong shape");
      RidgeWeights r;
      r.class_id = std::stoi(name.substr(6));
      r.weights = mat;
      r.lambda = f.matrix(name + ".lambda")(0, 0);
      m.ridges.push_back(std::move(r));
    }
  }
  return out;
}

inline ModelFile frcnn_model_file(const FrcnnModel& m, const RunConfig& cfg) {
  ModelFile f{kMethodFasterRcnn, dump_config(cfg), {}, {}};
  f.sequentials.emplace_back("trunk", *m.trunk);
  f.sequentials.emplace_back("rpn.body", m.rpn.body);
  f.sequentials.emplace_back("rpn.cls", m.rpn.cls);
  f.sequentials.emplace_back("rpn.reg", m.rpn.reg);
  f.sequentials.emplace_back("det.body", m.det.body);
  f.sequentials.emplace_back("det.cls", m.det.cls);
  f.sequentials.emplace_back("det.reg", m.det.reg);
  return f;
}

inline LoadedModel<FrcnnModel> frcnn_from_file(const ModelFile& f) {
  detail::expect_method(f, kMethodFasterRcnn);
  LoadedModel<FrcnnModel> out{{}, detail::config_of(f)};
  FrcnnModel& m = out.model;
  const FrcnnConfig& c = out.config.frcnn;
  m.net = c.net;
  m.trunk = std::make_shared<Sequential<float>>(f.sequential("trunk"));
  m.rpn.body = f.sequential("rpn.body");
  m.rpn.cls = f.sequential("rpn.cls");
  m.rpn.reg = f.sequential("rpn.reg");
  m.rpn.anchors_per_cell = c.rpn.anchor_scales.size() * c.rpn.anchor_ratios.size();
  m.det.body = f.sequential("det.body");
  m.det.cls = f.sequential("det.cls");
  m.det.reg = f.sequential("det.reg");
  m.det.roi_size = c.det.roi_size;
  m.det.n_classes = detail::fc_out(m.det.cls) - 1;
  try {
    const Shape fm = m.trunk->output_shape({1, c.net.in_channels, 64, 64});
    const Shape h = m.rpn.body.output_shape(fm);
    const auto k = static_cast<int>(m.rpn.anchors_per_cell);
    if (m.rpn.cls.output_shape(h)[1] != 2 * k || m.rpn.reg.output_shape(h)[1] != 4 * k) {
      throw ConfigError("RPN heads do not match the anchor count");
    }
    const Shape pooled{1, fm[1], c.det.roi_size, c.det.roi_size};
    const Shape d = m.det.body.output_shape(pooled);
    if (detail::fc_out(m.det.reg) != 4 * (m.det.n_classes + 1)) throw ConfigError("box head width");
    m.det.cls.output_shape(d);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model network does not match its config: ") + e.what());
  }
  return out;
}

inline void save_model(const RcnnModel& m, const RunConfig& cfg, const std::filesystem::path& path) {
  write_model_file(rcnn_model_file(m, cfg), path);
}

inline void save_model(const FrcnnModel& m, const RunConfig& cfg, const std::filesystem::path& path) {
  write_model_file(frcnn_model_file(m, cfg), path);
}

inline LoadedModel<RcnnModel> load_rcnn_model(const std::filesystem::path& path) {
  return rcnn_from_file(read_model_file(path));
}

inline LoadedModel<FrcnnModel> load_frcnn_model(const std::filesystem::path& path) {
  return frcnn_from_file(read_model_file(path));
}

// A loaded detector of either kind behind one detection call.
struct AnyDetector {
  std::string method;
  RunConfig config;
  std::shared_ptr<const RcnnModel> rcnn;
  std::shared_ptr<const FrcnnModel> frcnn;

  std::vector<Detection> detect(const Image& image) const {
    return rcnn ? rcnn_detect(image, *rcnn, config.rcnn) : frcnn_detect(image, *frcnn, config.frcnn);
  }
};

inline AnyDetector load_any_model(const std::filesystem::path& path) {
  const ModelFile f = read_model_file(path);
  AnyDetector d;
  d.method = f.method;
  if (f.method == kMethodRcnn) {
    auto l = rcnn_from_file(f);
    d.config = l.config;
    d.rcnn = std::make_shared<const RcnnModel>(std::move(l.model));
  } else if (f.method == kMethodFasterRcnn) {
    auto l = frcnn_from_file(f);
    d.config = l.config;
    d.frcnn = std::make_shared<const FrcnnModel>(std::move(l.model));
  } else {
    throw FormatError("model file has unknown method tag '" + f.method + "'");
  }
  return d;
}

}  // namespace vdet
