#pragma once

#include <functional>
#include <string>
#include <vector>

#include "irformer/tensor.hpp"

namespace irformer {

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_diff = 0.0;
  std::string worst_coord;
  std::size_t coords_checked = 0;
  double tol = 0.0;
  bool pass = true;
};

// Central finite differences, (f(x+eps*e) - f(x-eps*e)) / (2*eps), against
// tape gradients for every coordinate of every checked input. Runs in double
// precision. The error at a coordinate is |fd - analytic| normalized by
// max(1, |fd|, |analytic|); the report carries the worst coordinate and
// passes iff max_rel_err <= tol.
//
// f must be a deterministic scalar-valued function of the inputs.
GradCheckReport grad_check(
    const std::function<TensorD(const std::vector<TensorD>&)>& f,
    std::vector<TensorD> inputs, double eps, double tol);

}  // namespace irformer
