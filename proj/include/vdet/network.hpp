#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "vdet/error.hpp"
#include "vdet/layers.hpp"
#include "vdet/rng.hpp"

namespace vdet {

// Layout of the convolutional backbone: `conv_blocks` repetitions of
// [conv k x k (same padding), relu, maxpool 2x2], then fc + relu.
struct NetSpec {
  int in_channels = 3;
  int input_size = 32;
  int conv_blocks = 2;
  int conv_channels = 32;
  int kernel = 3;
  int fc_dim = 64;

  int trunk_stride() const { return 1 << conv_blocks; }
};

inline void validate(const NetSpec& s) {
  if (s.in_channels < 1 || s.conv_blocks < 1 || s.conv_channels < 1 || s.fc_dim < 1) {
    throw ConfigError("NetSpec: channel counts and depths must be positive");
  }
  if (s.kernel < 1 || s.kernel % 2 == 0) throw ConfigError("NetSpec: kernel must be odd");
  if (s.input_size < s.trunk_stride()) {
    throw ConfigError("NetSpec: input_size " + std::to_string(s.input_size) +
                      " too small for " + std::to_string(s.conv_blocks) + " pooling blocks");
  }
}

template <typename T>
Sequential<T> make_conv_trunk(const NetSpec& spec, Rng& rng) {
  validate(spec);
  Sequential<T> seq;
  int ch = spec.in_channels;
  for (int b = 0; b < spec.conv_blocks; ++b) {
    seq.add(Conv2d<T>(ch, spec.conv_channels, spec.kernel, 1, spec.kernel / 2)).init(rng);
    seq.add(Relu<T>());
    seq.add(MaxPool<T>(2, 2));
    ch = spec.conv_channels;
  }
  return seq;
}

// Backbone used for patch classification: conv trunk, fc, relu. Its output
// is the per-region feature vector.
template <typename T>
Sequential<T> make_backbone(const NetSpec& spec, Rng& rng) {
  Sequential<T> seq = make_conv_trunk<T>(spec, rng);
  const Shape out = seq.output_shape({1, spec.in_channels, spec.input_size, spec.input_size});
  const int flat = static_cast<int>(shape_size(out));
  seq.add(Fc<T>(flat, spec.fc_dim)).init(rng);
  seq.add(Relu<T>());
  return seq;
}

template <typename T>
Sequential<T> make_linear_head(int in_dim, int out_dim, Rng& rng) {
  Sequential<T> seq;
  seq.add(Fc<T>(in_dim, out_dim)).init(rng);
  return seq;
}

// Rebuilds a layer from its serialized kind and hyper-parameters
// (parameters zero-initialised).
template <typename T>
std::unique_ptr<Layer<T>> make_layer(LayerKind kind, const std::vector<int>& hyper) {
  auto need = [&](std::size_t n) {
    if (hyper.size() != n) throw FormatError("layer record: wrong hyper-parameter count");
  };
  switch (kind) {
    case LayerKind::kConv2d:
      need(5);
      return std::make_unique<Conv2d<T>>(hyper[0], hyper[1], hyper[2], hyper[3], hyper[4]);
    case LayerKind::kRelu:
      need(0);
      return std::make_unique<Relu<T>>();
    case LayerKind::kMaxPool:
      need(2);
      return std::make_unique<MaxPool<T>>(hyper[0], hyper[1]);
    case LayerKind::kFc:
      need(2);
      return std::make_unique<Fc<T>>(hyper[0], hyper[1]);
    default:
      throw FormatError("layer record: kind " + std::to_string(static_cast<int>(kind)) +
                        " is not a stackable layer");
  }
}

template <typename To, typename From>
Sequential<To> convert(const Sequential<From>& src) {
  Sequential<To> dst;
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst.add(make_layer<To>(src.layer(i).kind(), src.layer(i).hyper()));
  }
  copy_params(src, dst);
  return dst;
}

template <typename T>
struct Head {
  std::string name;
  Sequential<T> layers;
};

// Backbone with zero or more named heads reading the backbone output.
template <typename T>
class Network {
 public:
  Network() = default;
  Network(Shape input_shape, Sequential<T> backbone)
      : input_shape_(std::move(input_shape)), backbone_(std::move(backbone)) {
    if (input_shape_.size() != 3) throw ConfigError("Network: input shape must be C x H x W");
    backbone_.output_shape(batched(1));
  }

  const Shape& input_shape() const { return input_shape_; }
  Sequential<T>& backbone() { return backbone_; }
  const Sequential<T>& backbone() const { return backbone_; }
  std::vector<Head<T>>& heads() { return heads_; }
  const std::vector<Head<T>>& heads() const { return heads_; }

  Shape feature_shape() const { return backbone_.output_shape(batched(1)); }

  void add_head(std::string name, Sequential<T> layers) {
    for (const auto& h : heads_) {
      if (h.name == name) throw ConfigError("Network: duplicate head '" + name + "'");
    }
    layers.output_shape(feature_shape());
    heads_.push_back({std::move(name), std::move(layers)});
  }

  // Swaps the layers of an existing head; the backbone is left untouched.
  void replace_head(const std::string& name, Sequential<T> layers) {
    layers.output_shape(feature_shape());
    head(name).layers = std::move(layers);
  }

  Head<T>& head(const std::string& name) {
    for (auto& h : heads_) {
      if (h.name == name) return h;
    }
    throw ConfigError("Network: no head named '" + name + "'");
  }
  const Head<T>& head(const std::string& name) const {
    return const_cast<Network*>(this)->head(name);
  }

  std::vector<Tensor<T>> infer(const Tensor<T>& x) const {
    check_input(x);
    const Tensor<T> f = backbone_.infer(x);
    std::vector<Tensor<T>> out;
    for (const auto& h : heads_) out.push_back(h.layers.infer(f));
    return out;
  }

  Tensor<T> features(const Tensor<T>& x) const {
    check_input(x);
    return backbone_.infer(x);
  }

  std::vector<Tensor<T>> forward(const Tensor<T>& x) {
    check_input(x);
    last_batch_shape_ = x.shape();
    const Tensor<T> f = backbone_.forward(x);
    std::vector<Tensor<T>> out;
    for (auto& h : heads_) out.push_back(h.layers.forward(f));
    forwarded_ = true;
    return out;
  }

  // One upstream gradient per head (an empty tensor means "no gradient").
  // Returns the gradient with respect to the network input.
  Tensor<T> backward(const std::vector<Tensor<T>>& head_grads) {
    if (!forwarded_) throw UsageError("Network::backward called before forward");
    if (head_grads.size() != heads_.size()) {
      throw ConfigError("Network::backward: expected one gradient per head");
    }
    Tensor<T> gf(backbone_.output_shape(last_batch_shape_));
    for (std::size_t i = 0; i < heads_.size(); ++i) {
      if (head_grads[i].empty()) continue;
      const Tensor<T> g = heads_[i].layers.backward(head_grads[i]);
      for (std::size_t j = 0; j < gf.size(); ++j) gf[j] += g[j];
    }
    return backbone_.backward(gf);
  }

  std::vector<Param<T>*> params() {
    auto out = backbone_.params();
    for (auto& h : heads_) {
      for (Param<T>* p : h.layers.params()) out.push_back(p);
    }
    return out;
  }

  void zero_grad() {
    backbone_.zero_grad();
    for (auto& h : heads_) h.layers.zero_grad();
  }

  void append_pattern(std::vector<std::uint32_t>& out) const {
    backbone_.append_pattern(out);
    for (const auto& h : heads_) h.layers.append_pattern(out);
  }

 private:
  Shape batched(int n) const {
    Shape s = input_shape_;
    s.insert(s.begin(), n);
    return s;
  }

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != input_shape_) {
      throw ConfigError("Network: input " + shape_str(x.shape()) + " does not match N x " +
                        shape_str(input_shape_));
    }
  }

  Shape input_shape_;
  Sequential<T> backbone_;
  std::vector<Head<T>> heads_;
  Shape last_batch_shape_;
  bool forwarded_ = false;
};

}  // namespace vdet
