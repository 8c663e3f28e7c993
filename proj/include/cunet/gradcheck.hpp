#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cunet/rng.hpp"
#include "cunet/tensor.hpp"

namespace cunet {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;     // number of coordinates compared
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

// Compares autodiff gradients of a scalar-valued `loss_fn` against central
// differences for the listed leaf tensors. Relative error per coordinate is
// |a - n| / max(1, |a|, |n|). When `sample` is set, only that many randomly
// chosen coordinates (across all tensors) are probed.
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> wrt,
                           double eps = 1e-5, std::optional<std::size_t> sample = std::nullopt,
                           std::uint64_t sample_seed = 0);

// Single-input form: `fn(input)` must return a scalar.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& fn, Tensor input,
                           double eps = 1e-5);

}  // namespace cunet

namespace cunet {

struct SuiteOptions {
  double eps = 1e-5;
  double op_tolerance = 1e-4;
  double net_tolerance = 1e-3;
  std::size_t net_samples = 20;
  std::uint64_t seed = 0;
};

struct SuiteEntry {
  std::string name;
  GradCheckResult result;
  double tolerance = 0.0;

  bool passed() const { return result.max_rel_error < tolerance; }
};

// Finite-difference checks of every differentiable op on several shapes, a
// dense block, a RIB, and a tiny full network (base 2, depth 2, 8^3 patch).
std::vector<SuiteEntry> run_gradcheck_suite(const SuiteOptions& opts = {});

}  // namespace cunet
