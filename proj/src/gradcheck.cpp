#include "cunet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "cunet/error.hpp"

namespace cunet {

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> wrt,
                           double eps, std::optional<std::size_t> sample,
                           std::uint64_t sample_seed) {
  for (Tensor& t : wrt) {
    if (!t.is_leaf()) throw ContractError("grad_check: tensors must be leaves");
    t.set_requires_grad(true);
    t.zero_grad();
  }
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (Tensor& t : wrt) {
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.numel(), 0.0));
    t.zero_grad();
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti)
    for (std::size_t i = 0; i < wrt[ti].numel(); ++i) coords.emplace_back(ti, i);
  if (sample && *sample < coords.size()) {
    Rng rng(sample_seed);
    for (std::size_t i = 0; i < *sample; ++i) {
      std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    }
    coords.resize(*sample);
  }

  GradCheckResult res;
  NoGradGuard no_grad;
  for (const auto& [ti, i] : coords) {
    auto values = wrt[ti].mutable_data();
    const double orig = values[i];
    values[i] = orig + eps;
    const double plus = loss_fn().item();
    values[i] = orig - eps;
    const double minus = loss_fn().item();
    values[i] = orig;
    const double numeric = (plus - minus) / (2.0 * eps);
    const double a = analytic[ti][i];
    const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > res.max_rel_error || res.checked == 0) {
      res.max_rel_error = std::max(res.max_rel_error, rel);
      res.worst_tensor = ti;
      res.worst_index = i;
    }
    ++res.checked;
  }
  return res;
}

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& fn, Tensor input,
                           double eps) {
  return grad_check([&] { return fn(input); }, {input}, eps);
}

}  // namespace cunet
