#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fsa/tensor.hpp"

namespace fsa {

struct FdReport {
    std::string name;
    double max_rel = 0;
    bool pass = true;
};

// Central finite differences (step h) of f() against the recorded backward
// pass, over every element of every leaf. The error of one element is
// |analytic - numeric| / max(1, |analytic|, |numeric|); the report carries the
// worst one.
FdReport fd_check(const std::string& name, const std::function<Tensor()>& f,
                  std::vector<Tensor> leaves, double h = 1e-3, double tol = 1e-3);

// The whole finite-difference suite: every differentiable tensor op, the
// composite blocks, the full FSA module, and the detection loss on a tiny
// head set. Deterministic under `seed`.
std::vector<FdReport> run_gradient_checks(uint64_t seed);

bool all_pass(const std::vector<FdReport>& reports);

} // namespace fsa
