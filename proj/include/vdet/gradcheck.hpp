#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vdet/network.hpp"
#include "vdet/rng.hpp"

namespace vdet {

struct GradCheckOptions {
  double epsilon = 1e-5;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double abs_floor = 1e-6;
  // 0 checks every coordinate; otherwise a seeded random subset per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  std::size_t checked = 0;
  // Coordinates whose perturbation flipped a relu sign or pool argmax.
  std::size_t skipped = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0;
  bool passed = false;

  double max_rel_error() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
};

// One tensor to perturb together with the analytic gradient computed for it.
struct GradTarget {
  std::string name;
  Tensor<double>* value;
  Tensor<double> analytic;
};

// Central-difference comparison against analytic gradients. `loss` must run
// a fresh forward pass and return the scalar objective; `pattern` returns the
// discrete decisions of that pass (kink detection).
inline GradCheckReport finite_difference_check(
    std::vector<GradTarget>& targets, const std::function<double()>& loss,
    const std::function<std::vector<std::uint32_t>()>& pattern, double tolerance,
    const GradCheckOptions& opts = {}) {
  Rng rng(opts.seed);
  loss();
  const std::vector<std::uint32_t> base = pattern ? pattern() : std::vector<std::uint32_t>{};
  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto& t : targets) {
    GradCheckEntry e{t.name, 0, 0, 0};
    std::vector<std::size_t> coords(t.value->size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opts.max_coords_per_tensor > 0 && coords.size() > opts.max_coords_per_tensor) {
      coords = rng.sample(coords, opts.max_coords_per_tensor);
    }
    for (std::size_t i : coords) {
      double& v = (*t.value)[i];
      const double saved = v;
      v = saved + opts.epsilon;
      const double lp = loss();
      const bool kink_p = pattern && pattern() != base;
      v = saved - opts.epsilon;
      const double lm = loss();
      const bool kink_m = pattern && pattern() != base;
      v = saved;
      if (kink_p || kink_m) {
        ++e.skipped;
        continue;
      }
      const double numeric = (lp - lm) / (2 * opts.epsilon);
      const double analytic = t.analytic[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), opts.abs_floor});
      e.max_rel_error = std::max(e.max_rel_error, std::abs(numeric - analytic) / denom);
      ++e.checked;
    }
    report.entries.push_back(e);
  }
  loss();
  report.passed = report.max_rel_error() < tolerance;
  return report;
}

// Checks every parameter (and the input) of a double-precision network
// against the scalar objective sum_h <r_h, y_h> with fixed random weights r_h.
inline GradCheckReport grad_check(Network<double>& net, const Tensor<double>& input,
                                  double tolerance, const GradCheckOptions& opts = {}) {
  // A network without heads is checked through its backbone output.
  const bool headless = net.heads().empty();
  auto run = [&](const Tensor<double>& x) {
    return headless ? std::vector<Tensor<double>>{net.backbone().forward(x)} : net.forward(x);
  };

  Rng rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Tensor<double>> weights;
  for (const auto& y : headless ? std::vector<Tensor<double>>{net.features(input)} : net.infer(input)) {
    Tensor<double> r(y.shape());
    for (auto& v : r.values()) v = rng.uniform(-1, 1);
    weights.push_back(std::move(r));
  }
  Tensor<double> x = input;

  auto loss = [&]() {
    const auto ys = run(x);
    double l = 0;
    for (std::size_t h = 0; h < ys.size(); ++h) {
      for (std::size_t i = 0; i < ys[h].size(); ++i) l += ys[h][i] * weights[h][i];
    }
    return l;
  };
  auto pattern = [&]() {
    std::vector<std::uint32_t> p;
    net.append_pattern(p);
    return p;
  };

  net.zero_grad();
  loss();
  Tensor<double> gx = headless ? net.backbone().backward(weights.front()) : net.backward(weights);

  std::vector<GradTarget> targets;
  auto params = net.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    targets.push_back({"param" + std::to_string(i) + shape_str(params[i]->value.shape()),
                       &params[i]->value, params[i]->grad});
  }
  targets.push_back({"input", &x, gx});
  return finite_difference_check(targets, loss, pattern, tolerance, opts);
}

}  // namespace vdet
