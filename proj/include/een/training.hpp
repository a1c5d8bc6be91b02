#pragma once

#include <cstdint>
#include <vector>

#include "een/adam.hpp"
#include "een/datasets.hpp"
#include "een/model.hpp"

namespace een {

struct PhaseSchedule {
    std::size_t epochs_deterministic = 200;
    std::size_t epochs_conditional = 200;
    std::size_t batch_size = 32;
    LossNorm loss_norm = LossNorm::L2;
    double lr = 0.0005;
    std::uint64_t seed = 1;
    // stop a phase when the held-out loss has not improved this many epochs;
    // 0 disables
    std::size_t early_stop_patience = 20;
};

struct AltMinConfig {
    double alpha = 0.1;          // inner latent step size
    double beta = 0.0005;        // parameter step size
    std::size_t inner_iters = 10;  // K
    std::size_t epochs = 200;
    std::size_t batch_size = 32;
    LossNorm loss_norm = LossNorm::L2;
    std::uint64_t seed = 1;
    bool plain_sgd = false;  // literal pseudocode parameter step instead of ADAM
    std::size_t early_stop_patience = 20;
};

struct TrainReport {
    std::vector<double> train_loss;  // per epoch, the minimized objective
    std::vector<double> val_loss;
    std::vector<double> comp_deterministic;  // joint training only
    std::vector<double> comp_conditional;    // joint training only
    std::vector<double> inner_descent_frac;  // alternating only
    std::vector<double> wall_ms;
    double initial_loss = 0.0;  // eval-mode objective before the first update
    std::size_t epochs_run = 0;
    std::uint64_t final_checksum = 0;
};

// Minimizes |y - f(x, 0)|. W and phi are untouched (the z=0 path never
// reaches them).
TrainReport train_deterministic(ModelBundle& b, const DataView& train, const DataView& val,
                                const PhaseSchedule& s, Adam& opt);

// Two passes per batch: detached residual through the snapshot (or live
// weights in joint mode), then |y - f(x, phi(residual))| through the live
// weights. Updates theta, W, and phi.
TrainReport train_conditional(ModelBundle& b, const DataView& train, const DataView& val,
                              const PhaseSchedule& s, Adam& opt);

// Single-phase sum of both objectives on a joint-mode bundle; the residual
// pass reuses the live deterministic prediction, detached.
TrainReport train_joint(ModelBundle& b, const DataView& train, const DataView& val,
                        const PhaseSchedule& s, Adam& opt);

// Alternating minimization: per batch draw z ~ N(0,1) per sample, take K
// inner steps z <- z - alpha dL/dz with parameters frozen, then one parameter
// step at the final z. phi is not involved.
TrainReport train_alternating(ModelBundle& b, const DataView& train, const DataView& val,
                              const AltMinConfig& cfg, Adam& opt);

// Post-training latent inference, Algorithm-1 style: K gradient steps on z
// per sample against the eval-mode network. Returns count * latent_dim
// values, row-major.
std::vector<double> infer_latents_altmin(ModelBundle& b, const DataView& data,
                                         const AltMinConfig& cfg, std::uint64_t seed);

// Mean per-sample eval-mode loss, deterministic (z omitted) or conditional
// (z = phi(residual)).
double eval_deterministic_loss(ModelBundle& b, const DataView& data, LossNorm norm,
                               std::size_t batch_size = 64);
double eval_conditional_loss(ModelBundle& b, const DataView& data, LossNorm norm,
                             std::size_t batch_size = 64);

}  // namespace een
