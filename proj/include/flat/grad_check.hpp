#pragma once

#include <functional>
#include <string>
#include <vector>

#include "flat/tensor.hpp"

namespace flat::nn {

struct GradCheckReport {
  struct Entry {
    std::string name;
    double max_rel_err = 0.0;
  };
  std::vector<Entry> entries;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Compares analytic gradients of a scalar loss against central finite
// differences for each listed tensor. The loss function must be
// deterministic; two disagreeing forward runs abort with a diagnostic.
GradCheckReport grad_check_tensors(
    const std::function<Tensor()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor>>& inputs,
    double tolerance, double step = 1e-5);

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           ParameterStore& params, double tolerance,
                           double step = 1e-5);

}  // namespace flat::nn
