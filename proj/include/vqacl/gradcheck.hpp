#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vqacl/tensor.hpp"

namespace vqacl {

struct BlockCheck {
  std::string name;
  double max_rel_err = 0.0;
  std::int64_t checked = 0;
  std::int64_t skipped_kinks = 0;
};

struct GradCheckReport {
  std::vector<BlockCheck> blocks;

  double worst() const {
    double w = 0.0;
    for (const BlockCheck& b : blocks) w = std::max(w, b.max_rel_err);
    return w;
  }

  bool pass(double tolerance) const { return worst() < tolerance; }
};

// Central-difference check of analytic gradients, elementwise over every
// parameter block.
//
//   loss_fn  pure forward evaluation reading the blocks' current values
//   grad_fn  analytic gradient per block name (typically one taped backward)
//
// Elements whose stencil straddles a non-differentiable point are detected by
// comparing the forward and backward one-sided differences (the left and
// right slopes disagree at a kink) and excluded from the error maximum
// (counted in skipped_kinks). Non-determinism of loss_fn is an error,
// detected by double evaluation.
inline GradCheckReport finite_diff_check(
    const std::function<double()>& loss_fn,
    const std::function<std::map<std::string, Tensor>()>& grad_fn,
    const std::vector<std::pair<std::string, Tensor*>>& blocks,
    double step = 1e-5, double tolerance = 1e-4) {
  if (!(step >= 1e-7 && step <= 1e-3))
    throw std::invalid_argument("finite_diff_check: step must be in [1e-7, 1e-3]");
  (void)tolerance;

  const double l0 = loss_fn();
  const double l1 = loss_fn();
  if (!(l0 == l1))
    throw std::runtime_error("finite_diff_check: loss_fn is not deterministic");

  const std::map<std::string, Tensor> analytic = grad_fn();

  GradCheckReport report;
  for (const auto& [name, tensor] : blocks) {
    const auto it = analytic.find(name);
    if (it == analytic.end())
      throw std::invalid_argument("finite_diff_check: no analytic gradient for block '" +
                                  name + "'");
    const Tensor& grad = it->second;
    if (grad.shape() != tensor->shape())
      throw std::invalid_argument("finite_diff_check: gradient shape mismatch for '" +
                                  name + "'");

    BlockCheck block;
    block.name = name;
    const std::int64_t n = tensor->numel();
    for (std::int64_t i = 0; i < n; ++i) {
      double* p = tensor->mutable_data();
      const double saved = p[i];

      p[i] = saved + step;
      const double fp = loss_fn();
      tensor->mutable_data()[i] = saved - step;
      const double fm = loss_fn();
      tensor->mutable_data()[i] = saved;

      const double d_fwd = (fp - l0) / step;
      const double d_bwd = (l0 - fm) / step;
      const double slope_gap = std::abs(d_fwd - d_bwd) /
                               std::max({std::abs(d_fwd), std::abs(d_bwd), 1e-8});
      if (slope_gap > 1e-3) {
        // left and right slopes disagree: the stencil crosses a kink, or the
        // slope sits below what the stencil can resolve
        ++block.skipped_kinks;
        continue;
      }

      const double d_central = (fp - fm) / (2.0 * step);
      const double a = grad.at(i);
      const double rel = std::abs(d_central - a) /
                         std::max({std::abs(a), std::abs(d_central), 1e-8});
      block.max_rel_err = std::max(block.max_rel_err, rel);
      ++block.checked;
    }
    report.blocks.push_back(std::move(block));
  }
  return report;
}

}  // namespace vqacl
