#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace veinmatch {

struct GradCheckResult {
    std::string name;
    double max_error = 0.0;
};

// Finite-difference verification of every tape primitive and of the
// multi-task loss at theta 0 / 0.3 / 1 on random 4-sample batches.
// Inputs are drawn away from RELU kinks and zero norms.
std::vector<GradCheckResult> run_gradcheck_suite(std::size_t trials, std::uint64_t seed,
                                                 double eps = 1e-4);

// Worst error across the whole suite.
double gradcheck_suite_max(const std::vector<GradCheckResult>& results);

} // namespace veinmatch
