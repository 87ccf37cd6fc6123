#pragma once

#include <string>
#include <vector>

namespace ect {

struct GradCheckCase {
    std::string name;
    double max_rel_error = 0.0;
};

// Finite-difference verification of every differentiable layer plus the
// end-to-end two-block network (compound loss, lambda parameters included).
// 64-bit precision, central differences with the given step.
std::vector<GradCheckCase> run_gradient_suite(double step = 1e-5);

}  // namespace ect
