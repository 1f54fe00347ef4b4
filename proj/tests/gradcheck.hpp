#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "bevfuse/rng.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse::testing {

struct GradCheckResult {
  bool ok = true;
  double worst_rel = 0.0;
  std::string worst_at;
};

// Central-difference check of d(loss)/d(leaf) for every listed leaf tensor.
// `loss_fn` must rebuild the graph from the leaves' current values on each
// call. Checks up to `samples` coordinates per leaf (seeded subset when the
// leaf is larger). Tolerance: |a-f| <= rel*max(|a|,|f|) + abs_floor.
inline GradCheckResult grad_check(const std::function<ad::Tensor()>& loss_fn,
                                  std::vector<ad::Tensor> leaves, double rel = 1e-4,
                                  double abs_floor = 1e-8, int samples = 24,
                                  std::uint64_t seed = 12345, double h = 1e-5) {
  GradCheckResult res;
  for (auto& leaf : leaves) leaf.zero_grad();
  ad::Tensor loss = loss_fn();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves)
    analytic.push_back(leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.numel(), 0.0));

  Rng rng(seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    ad::Tensor& leaf = leaves[li];
    const std::size_t n = leaf.numel();
    std::vector<std::size_t> idx;
    if (static_cast<int>(n) <= samples) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (int s = 0; s < samples; ++s) idx.push_back(rng.uniform_index(n));
    }
    for (std::size_t i : idx) {
      const double orig = leaf.data()[i];
      const double step = h * (1.0 + std::abs(orig));
      leaf.data()[i] = orig + step;
      const double fp = loss_fn().value();
      leaf.data()[i] = orig - step;
      const double fm = loss_fn().value();
      leaf.data()[i] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = analytic[li][i];
      const double err = std::abs(an - fd);
      const double tol = rel * std::max(std::abs(an), std::abs(fd)) + abs_floor;
      const double relerr = err / std::max({std::abs(an), std::abs(fd), abs_floor});
      if (relerr > res.worst_rel) {
        res.worst_rel = relerr;
        res.worst_at = "leaf " + std::to_string(li) + " idx " + std::to_string(i) + " analytic " +
                       std::to_string(an) + " fd " + std::to_string(fd);
      }
      if (err > tol) res.ok = false;
    }
  }
  return res;
}

}  // namespace bevfuse::testing
