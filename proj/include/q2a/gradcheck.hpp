#pragma once

#include <string>
#include <vector>

#include "q2a/tensor.hpp"

namespace q2a {

struct NamedGradCheck {
  std::string name;
  GradCheckReport report;
};

// Finite-difference verification of every differentiable block at tiny dims:
// core ops, attention, encoder/decoder layers, fusion, loss, full model.
std::vector<NamedGradCheck> run_gradcheck_suite(double h = 1e-5,
                                                double tol = 1e-4);

bool all_pass(const std::vector<NamedGradCheck>& checks);

}  // namespace q2a
