#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lkconv/autodiff.hpp"

namespace lkc {

/// Builds a scalar loss on `tape` from one Var per checked parameter (same order).
using ScalarGraph = std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double h = 0.0;
  double tol = 0.0;
  bool pass = false;

  double worst() const;
  std::string to_json() const;
};

/// Compares tape gradients against central differences for every parameter. The error
/// per parameter is
///   max|analytic - numeric| / max(|analytic|_inf, |numeric|_inf, floor)
/// where floor = floor_fraction * (largest |analytic|_inf over all parameters). The floor
/// keeps parameters whose true gradient is almost zero (a scale-invariant weight in front
/// of batch norm) from being judged on finite-difference noise alone.
/// f is evaluated twice at the base point first; differing bits abort with DomainError.
GradCheckReport finite_diff_check(const ScalarGraph& f, const std::vector<std::pair<std::string, Tensor<double>>>& params,
                                  double h = 1e-5, double tol = 1e-5, double floor_fraction = 1e-3);

}  // namespace lkc
