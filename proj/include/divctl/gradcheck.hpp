#pragma once

#include <functional>
#include <string>
#include <vector>

#include "divctl/tensor.hpp"

namespace divctl {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    bool passed = false;
};

// Compares backward() gradients of `f` against central differences, one
// parameter tensor at a time. The relative error of a tensor is
// ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2), and 0 when
// both are exactly zero.
GradCheckReport finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                  double h = 1e-5, double tol = 1e-5);

struct OpCheck {
    std::string name;
    // Builds one randomized probe from a seed: a scalar objective and the
    // leaves it should be differentiated against.
    std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>(std::uint64_t seed)> build;
};

// Every differentiable op in ops.hpp, each wrapped as sum(op(...) * R) with a
// random fixed R so that all output entries contribute.
const std::vector<OpCheck>& registered_op_checks();

}  // namespace divctl
