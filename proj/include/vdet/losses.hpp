#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "vdet/error.hpp"
#include "vdet/tensor.hpp"

namespace vdet {

template <typename T>
struct LossResult {
  double loss = 0;
  std::vector<T> grad;
};

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> p(logits.size());
  if (logits.empty()) return p;
  const T m = *std::max_element(logits.begin(), logits.end());
  T sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

// -ln softmax(logits)[label], computed with log-sum-exp; gradient is
// softmax - onehot(label).
template <typename T>
LossResult<T> softmax_ce_loss(std::span<const T> logits, int label) {
  if (logits.size() < 2) throw ConfigError("softmax_ce_loss: need at least two classes");
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw ConfigError("softmax_ce_loss: label " + std::to_string(label) + " out of range");
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0;
  for (T v : logits) sum += std::exp(static_cast<double>(v) - m);
  const double lse = m + std::log(sum);
  LossResult<T> r;
  r.loss = lse - static_cast<double>(logits[static_cast<std::size_t>(label)]);
  r.grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    r.grad[i] = static_cast<T>(std::exp(static_cast<double>(logits[i]) - lse));
  }
  r.grad[static_cast<std::size_t>(label)] -= T(1);
  return r;
}

// Row-wise cross-entropy over an N x C logit matrix. Rows with label < 0 are
// ignored. Loss and gradient are scaled by 1 / normalizer.
template <typename T>
double softmax_ce_rows(const Tensor<T>& logits, const std::vector<int>& labels, double normalizer,
                       Tensor<T>& grad) {
  const int n = logits.dim(0);
  const int c = static_cast<int>(logits.size() / static_cast<std::size_t>(n));
  if (static_cast<int>(labels.size()) != n) throw ConfigError("softmax_ce_rows: label count");
  if (grad.shape() != logits.shape()) grad = Tensor<T>(logits.shape());
  double total = 0;
  for (int i = 0; i < n; ++i) {
    if (labels[static_cast<std::size_t>(i)] < 0) continue;
    std::span<const T> row(logits.data() + static_cast<std::size_t>(i) * c, static_cast<std::size_t>(c));
    auto r = softmax_ce_loss(row, labels[static_cast<std::size_t>(i)]);
    total += r.loss;
    for (int j = 0; j < c; ++j) {
      grad[static_cast<std::size_t>(i) * c + j] += static_cast<T>(r.grad[static_cast<std::size_t>(j)] / normalizer);
    }
  }
  return total / normalizer;
}

// Elementwise smooth-L1 on u = pred - target: 0.5 u^2 for |u| < 1, |u| - 0.5
// otherwise, summed. Gradient is u inside the unit band and sign(u) outside.
template <typename T>
LossResult<T> smooth_l1(std::span<const T> pred, std::span<const T> target) {
  if (pred.size() != target.size()) throw ConfigError("smooth_l1: length mismatch");
  LossResult<T> r;
  r.grad.resize(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double u = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    const double a = std::abs(u);
    if (a < 1.0) {
      r.loss += 0.5 * u * u;
      r.grad[i] = static_cast<T>(u);
    } else {
      r.loss += a - 0.5;
      r.grad[i] = static_cast<T>(u > 0 ? 1.0 : -1.0);
    }
  }
  return r;
}

}  // namespace vdet
