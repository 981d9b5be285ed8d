#include "flat/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace flat::nn {

GradCheckReport grad_check_tensors(
    const std::function<Tensor()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor>>& inputs,
    double tolerance, double step) {
  double first = loss_fn().item();
  double second = loss_fn().item();
  if (first != second)
    fail("grad_check: forward pass is non-deterministic (" +
         std::to_string(first) + " vs " + std::to_string(second) +
         "); disable dropout or fix the rng");

  for (const auto& [name, t] : inputs) {
    (void)name;
    t.node()->grad.assign(t.size(), 0.0);
  }
  Tensor loss = loss_fn();
  backward(loss);

  GradCheckReport report;
  for (const auto& [name, t] : inputs) {
    std::vector<double> analytic = t.node()->grad;
    if (analytic.empty()) analytic.assign(t.size(), 0.0);
    double worst = 0.0;
    std::vector<double>& v = t.node()->value;
    for (int i = 0; i < t.size(); ++i) {
      double saved = v[i];
      v[i] = saved + step;
      double up = loss_fn().item();
      v[i] = saved - step;
      double down = loss_fn().item();
      v[i] = saved;
      double numeric = (up - down) / (2.0 * step);
      double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    report.entries.push_back({name, worst});
    report.max_rel_err = std::max(report.max_rel_err, worst);
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           ParameterStore& params, double tolerance,
                           double step) {
  std::vector<std::pair<std::string, Tensor>> inputs;
  for (const std::string& name : params.names())
    inputs.emplace_back(name, params.get(name));
  return grad_check_tensors(loss_fn, inputs, tolerance, step);
}

}  // namespace flat::nn
