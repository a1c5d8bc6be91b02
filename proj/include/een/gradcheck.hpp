#pragma once

#include <functional>
#include <string>
#include <vector>

#include "een/tensor.hpp"

namespace een {

struct GradCheckRow {
    std::string op;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckRow> rows;
    double threshold = 1e-4;
    bool pass() const;
};

// Appends a fixture to the registry; this is how tests smuggle in a
// deliberately broken op. Duplicate names throw ConfigError.
void gradcheck_register(const std::string& op, std::function<double()> fn);

// scope is "all" or one registered op name; unknown names throw ConfigError.
// Every builtin differentiable op has exactly one registry entry.
GradCheckReport gradcheck_run(const std::string& scope);

// Shared harness. Runs fwd once with autodiff, projects the output onto
// fixed random weights, then compares every input gradient against central
// finite differences. Inputs must be leaves with requires_grad set. Returns
// the worst elementwise relative error (absolute below magnitude 1).
double gradcheck_max_err(const std::vector<Tensor>& inputs, const std::function<Tensor()>& fwd,
                         Rng& rng, double h = 1e-5);

}  // namespace een
