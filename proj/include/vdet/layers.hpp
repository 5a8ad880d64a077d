#pragma once

#include <Eigen/Core>

#include <atomic>
#include <concepts>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "vdet/error.hpp"
#include "vdet/rng.hpp"
#include "vdet/tensor.hpp"

namespace vdet {

// Stable on-disk identifiers; do not renumber.
enum class LayerKind : std::uint8_t {
  kConv2d = 1,
  kRelu = 2,
  kMaxPool = 3,
  kFc = 4,
  kSoftmaxCe = 5,
  kRoiMaxPool = 6,
};

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

// A differentiable layer over NCHW (or N x D) batches.
//
// infer() is pure and safe to call concurrently. forward() additionally
// caches its input so that backward() can route gradients; backward()
// accumulates into the parameter gradients and returns the input gradient.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Tensor<T> infer(const Tensor<T>& x) const = 0;
  virtual std::vector<int> hyper() const { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;

  virtual std::vector<Param<T>*> params() { return {}; }
  virtual std::vector<const Param<T>*> params() const { return {}; }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    has_input_ = true;
    return infer(x);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (!has_input_) throw UsageError("backward called before forward");
    return backward_impl(input_, grad_out);
  }

  // Discrete decisions taken during the last forward (relu signs, pool
  // argmax). Gradient checks skip coordinates that flip any of them.
  virtual void append_pattern(std::vector<std::uint32_t>&) const {}

  void zero_grad() {
    for (Param<T>* p : params()) p->grad.fill(T(0));
  }

 protected:
  virtual Tensor<T> backward_impl(const Tensor<T>& x, const Tensor<T>& grad_out) = 0;

  const Tensor<T>& cached_input() const { return input_; }
  bool has_cached_input() const { return has_input_; }

 private:
  Tensor<T> input_;
  bool has_input_ = false;
};

// Glorot-uniform initialisation: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
void glorot_uniform(Tensor<T>& w, int fan_in, int fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-a, a));
}

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(pad) {
    if (in_ < 1 || out_ < 1 || k_ < 1 || stride_ < 1 || pad_ < 0) {
      throw ConfigError("Conv2d: invalid hyper-parameters");
    }
    weight_.value = Tensor<T>({out_, in_, k_, k_});
    weight_.grad = Tensor<T>({out_, in_, k_, k_});
    bias_.value = Tensor<T>({out_});
    bias_.grad = Tensor<T>({out_});
  }

  void init(Rng& rng) {
    glorot_uniform(weight_.value, in_ * k_ * k_, out_ * k_ * k_, rng);
    bias_.value.fill(T(0));
  }

  LayerKind kind() const override { return LayerKind::kConv2d; }
  std::vector<int> hyper() const override { return {in_, out_, k_, stride_, pad_}; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  const Param<T>& weight() const { return weight_; }
  const Param<T>& bias() const { return bias_; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 4 || in[1] != in_) {
      throw ConfigError("Conv2d: expected N x " + std::to_string(in_) + " x H x W input, got " +
                        shape_str(in));
    }
    const int ho = (in[2] + 2 * pad_ - k_) / stride_ + 1;
    const int wo = (in[3] + 2 * pad_ - k_) / stride_ + 1;
    if (in[2] + 2 * pad_ < k_ || in[3] + 2 * pad_ < k_) {
      throw ConfigError("Conv2d: input " + shape_str(in) + " smaller than kernel");
    }
    return {in[0], out_, ho, wo};
  }

  Tensor<T> infer(const Tensor<T>& x) const override {
    const Shape os = output_shape(x.shape());
    Tensor<T> y(os);
    const int n_batch = os[0], ho = os[2], wo = os[3];
    const int rows = in_ * k_ * k_;
    const int cols = ho * wo;
    RowMatrix<T> col(rows, cols);
    ConstMatrixMap<T> w(weight_.value.data(), out_, rows);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias_.value.data(), out_);
    for (int n = 0; n < n_batch; ++n) {
      im2col(x, n, ho, wo, col);
      MatrixMap<T> yn(y.data() + static_cast<std::size_t>(n) * out_ * cols, out_, cols);
      yn.noalias() = w * col;
      yn.colwise() += b;
    }
    return y;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  std::vector<const Param<T>*> params() const override { return {&weight_, &bias_}; }

 protected:
  Tensor<T> backward_impl(const Tensor<T>& x, const Tensor<T>& gy) override {
    const Shape os = output_shape(x.shape());
    if (gy.shape() != os) throw ConfigError("Conv2d::backward: gradient shape mismatch");
    const int n_batch = os[0], ho = os[2], wo = os[3];
    const int rows = in_ * k_ * k_;
    const int cols = ho * wo;
    Tensor<T> gx(x.shape());
    RowMatrix<T> col(rows, cols);
    RowMatrix<T> gcol(rows, cols);
    ConstMatrixMap<T> w(weight_.value.data(), out_, rows);
    MatrixMap<T> gw(weight_.grad.data(), out_, rows);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(bias_.grad.data(), out_);
    for (int n = 0; n < n_batch; ++n) {
      ConstMatrixMap<T> gyn(gy.data() + static_cast<std::size_t>(n) * out_ * cols, out_, cols);
      im2col(x, n, ho, wo, col);
      gw.noalias() += gyn * col.transpose();
      gb += gyn.rowwise().sum();
      gcol.noalias() = w.transpose() * gyn;
      col2im(gcol, n, ho, wo, gx);
    }
    return gx;
  }

 private:
  void im2col(const Tensor<T>& x, int n, int ho, int wo, RowMatrix<T>& col) const {
    const int h = x.dim(2), w = x.dim(3);
    const T* src = x.data() + static_cast<std::size_t>(n) * in_ * h * w;
    for (int c = 0; c < in_; ++c) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          T* dst = col.data() + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * ho * wo;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            T* row = dst + static_cast<std::size_t>(oy) * wo;
            if (iy < 0 || iy >= h) {
              std::fill(row, row + wo, T(0));
              continue;
            }
            const T* srow = src + (static_cast<std::size_t>(c) * h + iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              row[ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const RowMatrix<T>& col, int n, int ho, int wo, Tensor<T>& gx) const {
    const int h = gx.dim(2), w = gx.dim(3);
    T* dst = gx.data() + static_cast<std::size_t>(n) * in_ * h * w;
    for (int c = 0; c < in_; ++c) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const T* src = col.data() + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * ho * wo;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) continue;
            T* drow = dst + (static_cast<std::size_t>(c) * h + iy) * w;
            const T* srow = src + static_cast<std::size_t>(oy) * wo;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < w) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }

  int in_, out_, k_, stride_, pad_;
  Param<T> weight_;
  Param<T> bias_;
};

template <typename T>
class Relu final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::kRelu; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Relu>(*this); }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> infer(const Tensor<T>& x) const override {
    Tensor<T> y = x;
    for (auto& v : y.values()) v = v > T(0) ? v : T(0);
    return y;
  }

  void append_pattern(std::vector<std::uint32_t>& out) const override {
    if (!this->has_cached_input()) return;
    for (T v : this->cached_input().values()) out.push_back(v > T(0) ? 1u : 0u);
  }

 protected:
  Tensor<T> backward_impl(const Tensor<T>& x, const Tensor<T>& gy) override {
    if (gy.shape() != x.shape()) throw ConfigError("Relu::backward: gradient shape mismatch");
    Tensor<T> gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (!(x[i] > T(0))) gx[i] = T(0);
    }
    return gx;
  }
};

// Max pooling without padding; output extent floor((H - window) / stride) + 1.
template <typename T>
class MaxPool final : public Layer<T> {
 public:
  MaxPool(int window, int stride) : window_(window), stride_(stride) {
    if (window_ < 1 || stride_ < 1) throw ConfigError("MaxPool: invalid hyper-parameters");
  }

  LayerKind kind() const override { return LayerKind::kMaxPool; }
  std::vector<int> hyper() const override { return {window_, stride_}; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool>(*this); }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 4) throw ConfigError("MaxPool: expected NCHW input, got " + shape_str(in));
    if (in[2] < window_ || in[3] < window_) {
      throw ConfigError("MaxPool: input " + shape_str(in) + " smaller than window");
    }
    return {in[0], in[1], (in[2] - window_) / stride_ + 1, (in[3] - window_) / stride_ + 1};
  }

  Tensor<T> infer(const Tensor<T>& x) const override {
    Tensor<T> y(output_shape(x.shape()));
    pool(x, &y, nullptr);
    return y;
  }

  void append_pattern(std::vector<std::uint32_t>& out) const override {
    if (!this->has_cached_input()) return;
    std::vector<std::size_t> arg;
    pool(this->cached_input(), nullptr, &arg);
    for (std::size_t a : arg) out.push_back(static_cast<std::uint32_t>(a));
  }

 protected:
  Tensor<T> backward_impl(const Tensor<T>& x, const Tensor<T>& gy) override {
    if (gy.shape() != output_shape(x.shape())) {
      throw ConfigError("MaxPool::backward: gradient shape mismatch");
    }
    std::vector<std::size_t> arg;
    pool(x, nullptr, &arg);
    Tensor<T> gx(x.shape());
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += gy[i];
    return gx;
  }

 private:
  // Ties resolve to the first maximum in row-major window order.
  void pool(const Tensor<T>& x, Tensor<T>* y, std::vector<std::size_t>* arg) const {
    const Shape os = output_shape(x.shape());
    const int h = x.dim(2), w = x.dim(3);
    if (arg) arg->resize(shape_size(os));
    std::size_t o = 0;
    for (int n = 0; n < os[0]; ++n) {
      for (int c = 0; c < os[1]; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * os[1] + c) * h * w;
        for (int oy = 0; oy < os[2]; ++oy) {
          for (int ox = 0; ox < os[3]; ++ox, ++o) {
            std::size_t best = base + static_cast<std::size_t>(oy * stride_) * w + ox * stride_;
            for (int ky = 0; ky < window_; ++ky) {
              for (int kx = 0; kx < window_; ++kx) {
                const std::size_t idx =
                    base + static_cast<std::size_t>(oy * stride_ + ky) * w + ox * stride_ + kx;
                if (x[idx] > x[best]) best = idx;
              }
            }
            if (y) (*y)[o] = x[best];
            if (arg) (*arg)[o] = best;
          }
        }
      }
    }
  }

  int window_, stride_;
};

// Fully connected layer; flattens everything after the batch dimension.
template <typename T>
class Fc final : public Layer<T> {
 public:
  Fc(int in_dim, int out_dim) : in_(in_dim), out_(out_dim) {
    if (in_ < 1 || out_ < 1) throw ConfigError("Fc: invalid dimensions");
    weight_.value = Tensor<T>({out_, in_});
    weight_.grad = Tensor<T>({out_, in_});
    bias_.value = Tensor<T>({out_});
    bias_.grad = Tensor<T>({out_});
  }

  void init(Rng& rng) {
    glorot_uniform(weight_.value, in_, out_, rng);
    bias_.value.fill(T(0));
  }

  LayerKind kind() const override { return LayerKind::kFc; }
  std::vector<int> hyper() const override { return {in_, out_}; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Fc>(*this); }

  int in_dim() const { return in_; }
  int out_dim() const { return out_; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  const Param<T>& weight() const { return weight_; }
  const Param<T>& bias() const { return bias_; }

  Shape output_shape(const Shape& in) const override {
    if (in.empty()) throw ConfigError("Fc: scalar input");
    const std::size_t d = shape_size(in) / static_cast<std::size_t>(std::max(in[0], 1));
    if (static_cast<int>(d) != in_) {
      throw ConfigError("Fc: expected " + std::to_string(in_) + " features per sample, got " +
                        shape_str(in));
    }
    return {in[0], out_};
  }

  Tensor<T> infer(const Tensor<T>& x) const override {
    const Shape os = output_shape(x.shape());
    Tensor<T> y(os);
    ConstMatrixMap<T> xm(x.data(), os[0], in_);
    ConstMatrixMap<T> w(weight_.value.data(), out_, in_);
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias_.value.data(), out_);
    MatrixMap<T> ym(y.data(), os[0], out_);
    ym.noalias() = xm * w.transpose();
    ym.rowwise() += b;
    return y;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  std::vector<const Param<T>*> params() const override { return {&weight_, &bias_}; }

 protected:
  Tensor<T> backward_impl(const Tensor<T>& x, const Tensor<T>& gy) override {
    const Shape os = output_shape(x.shape());
    if (gy.shape() != os) throw ConfigError("Fc::backward: gradient shape mismatch");
    ConstMatrixMap<T> xm(x.data(), os[0], in_);
    ConstMatrixMap<T> gym(gy.data(), os[0], out_);
    ConstMatrixMap<T> w(weight_.value.data(), out_, in_);
    MatrixMap<T> gw(weight_.grad.data(), out_, in_);
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(bias_.grad.data(), out_);
    gw.noalias() += gym.transpose() * xm;
    gb += gym.colwise().sum();
    Tensor<T> gx(x.shape());
    MatrixMap<T> gxm(gx.data(), os[0], in_);
    gxm.noalias() = gym * w;
    return gx;
  }

 private:
  int in_, out_;
  Param<T> weight_;
  Param<T> bias_;
};

// Ordered stack of layers.
template <typename T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& other) : passes_(other.passes()) {
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  Sequential& operator=(const Sequential& other) {
    if (this != &other) {
      Sequential copy(other);
      layers_ = std::move(copy.layers_);
      passes_.store(other.passes());
    }
    return *this;
  }
  Sequential(Sequential&& other) noexcept
      : layers_(std::move(other.layers_)), passes_(other.passes()) {}
  Sequential& operator=(Sequential&& other) noexcept {
    layers_ = std::move(other.layers_);
    passes_.store(other.passes());
    return *this;
  }

  template <typename L>
    requires std::derived_from<L, Layer<T>>
  L& add(L layer) {
    auto p = std::make_unique<L>(std::move(layer));
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }
  void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }

  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

  Shape output_shape(Shape s) const {
    for (const auto& l : layers_) s = l->output_shape(s);
    return s;
  }

  Tensor<T> infer(const Tensor<T>& x) const {
    passes_.fetch_add(1, std::memory_order_relaxed);
    Tensor<T> h = x;
    for (const auto& l : layers_) h = l->infer(h);
    return h;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    passes_.fetch_add(1, std::memory_order_relaxed);
    Tensor<T> h = x;
    for (auto& l : layers_) h = l->forward(h);
    return h;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& l : layers_) {
      for (Param<T>* p : l->params()) out.push_back(p);
    }
    return out;
  }
  std::vector<const Param<T>*> params() const {
    std::vector<const Param<T>*> out;
    for (const auto& l : layers_) {
      for (const Param<T>* p : std::as_const(*l).params()) out.push_back(p);
    }
    return out;
  }

  void zero_grad() {
    for (auto& l : layers_) l->zero_grad();
  }

  void append_pattern(std::vector<std::uint32_t>& out) const {
    for (const auto& l : layers_) l->append_pattern(out);
  }

  // Number of forward/infer passes executed through this stack.
  std::uint64_t passes() const { return passes_.load(std::memory_order_relaxed); }
  void reset_passes() { passes_.store(0); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  mutable std::atomic<std::uint64_t> passes_{0};
};

// Copies parameter values between two structurally identical stacks,
// converting scalar type where needed.
template <typename To, typename From>
void copy_params(const Sequential<From>& src, Sequential<To>& dst) {
  auto s = src.params();
  auto d = dst.params();
  if (s.size() != d.size()) throw ConfigError("copy_params: parameter count mismatch");
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i]->value.shape() != d[i]->value.shape()) {
      throw ConfigError("copy_params: parameter shape mismatch");
    }
    for (std::size_t j = 0; j < s[i]->value.size(); ++j) {
      d[i]->value[j] = static_cast<To>(s[i]->value[j]);
    }
  }
}

}  // namespace vdet
