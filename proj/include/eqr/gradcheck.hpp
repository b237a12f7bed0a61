#pragma once

#include <functional>
#include <string>
#include <vector>

#include "eqr/tensor.hpp"

namespace eqr {

// Central finite differences against tape gradients. The forward callable
// rebuilds the graph from the current parameter values each call; the checker
// evaluates it twice per element (no tape) and accumulates the difference in
// f64. Relative error is |g - fd| / max(1, |g|, |fd|).
//
// corrupt_first_grad simulates a broken backward rule for harness tests: the
// first tape gradient is shifted before comparison.
double fd_max_rel_err(const std::vector<Tensor>& params, const std::function<Tensor()>& forward,
                      double h = 1e-3, bool corrupt_first_grad = false);

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

// One entry per registered differentiable op, plus composite scenarios
// ("composite_net", "full_model"). corrupt_op != "" poisons that entry.
std::vector<GradCheckReport> run_gradcheck_suite(double tolerance, const std::string& corrupt_op = "");

}  // namespace eqr
