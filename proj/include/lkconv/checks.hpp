#pragma once

#include <string>
#include <vector>

#include "lkconv/gradcheck.hpp"

namespace lkc {

struct NamedGradCheck {
  std::string name;
  GradCheckReport report;
};

/// Finite-difference checks of every differentiable op and of a 2-stage toy network
/// (4 channels, k=3, 8^3 inputs, batch 2) in each conv mode. float64 throughout.
std::vector<NamedGradCheck> gradcheck_suite(double h = 1e-5, double tol = 1e-5);

bool all_pass(const std::vector<NamedGradCheck>& suite);
std::string suite_json(const std::vector<NamedGradCheck>& suite);

}  // namespace lkc
