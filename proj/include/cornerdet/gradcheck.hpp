#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cornerdet/autodiff.hpp"

namespace cornerdet {

/// Scalar loss over the given leaves.
using LossBuilder = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

/// |a - n| / max(|a|, |n|, 1e-3).
double relative_error(double analytic, double numeric);

/// Largest relative error between backward and central differences over every
/// coordinate of `inputs`.
double gradient_check(const LossBuilder& f, const std::vector<Tensor<double>>& inputs, double h = 1e-5);

struct GradCheckResult {
  std::string op;
  int trials = 0;
  std::size_t coordinates = 0;  // compared
  std::size_t skipped = 0;      // perturbation crossed a ReLU or max switch
  double max_rel_error = 0;
  double tolerance = 0;
  bool passed() const { return coordinates > 0 && max_rel_error < tolerance; }
};

/// Names accepted by run_gradient_suite, including "model".
std::vector<std::string> gradient_suite_ops();

/// Runs `trials` random checks per op; `only` empty means every op.
/// Throws std::invalid_argument for an unknown op name.
std::vector<GradCheckResult> run_gradient_suite(const std::string& only = "", int trials = 20,
                                                std::uint64_t seed = 1);

std::string gradient_report(const std::vector<GradCheckResult>& results);

}  // namespace cornerdet
