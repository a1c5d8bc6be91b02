#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "een/tensor.hpp"

namespace een {

// x ~ U[-1,1]^d, m ~ U{0..M-1}, y = A x + c_m + noise. Offsets default to
// antipodal sign patterns (pairwise distinct, zero mean over modes, every
// element +-1) so the deterministic-optimum MSE is exactly 1.0 before the
// mixing term. Targets are rescaled by 1/max(1, max|y|) after generation.
struct ModeOffsetSpec {
    std::size_t input_dim = 4;
    std::size_t target_dim = 8;
    std::size_t mode_count = 4;
    double a_scale = 0.25;  // mixing map entries ~ U[-a_scale, a_scale]
    double noise_sigma = 0.01;
    std::size_t sample_count = 10000;
    std::uint64_t seed = 1;
    // optional explicit values; filled from the defaults above when empty
    std::vector<std::vector<double>> offsets;  // mode_count rows of target_dim
    std::vector<double> mixing;                // target_dim x input_dim, row-major
};

// Bouncing ball (deterministic, diagonal, reflects off walls, confined above
// the paddle row) plus a paddle on row G-2 taking uniform {-1,0,+1} moves
// clamped at the walls. Context frames become input channels. Pixels are
// emitted in [-1,1] (0 background -> -1, drawn pixel -> +1).
struct DotWorldSpec {
    std::size_t grid = 16;
    std::size_t context = 4;
    std::size_t horizon = 1;
    std::size_t episode_count = 200;
    std::size_t episode_length = 24;
    std::uint64_t seed = 1;
};

// Training code receives this view: samples without annotations.
struct DataView {
    Shape x_item, y_item;  // per-sample shapes
    const double* x_data = nullptr;
    const double* y_data = nullptr;
    std::size_t count = 0;

    std::size_t x_numel() const { return numel(x_item); }
    std::size_t y_numel() const { return numel(y_item); }
    Tensor batch_x(const std::vector<std::size_t>& idx) const;
    Tensor batch_y(const std::vector<std::size_t>& idx) const;
    Tensor one_x(std::size_t i) const { return batch_x({i}); }
    Tensor one_y(std::size_t i) const { return batch_y({i}); }
};

struct Dataset {
    Shape x_item, y_item;
    std::vector<double> x, y;        // size() * item numel each
    std::vector<int> labels;         // evaluation-only ground truth
    std::vector<std::size_t> group;  // split unit: episode id, or sample index
    std::uint64_t spec_hash = 0;

    std::size_t size() const { return group.size(); }
    DataView view() const {
        return DataView{x_item, y_item, x.data(), y.data(), size()};
    }
    // mode index / paddle move; never consumed by training code
    int eval_label(std::size_t i) const { return labels.at(i); }
};

Dataset gen_mode_offset(const ModeOffsetSpec& spec);
Dataset gen_dot_world(const DotWorldSpec& spec);

struct SplitResult {
    Dataset train, val, test;
};

// Seed-deterministic partition by group (episodes stay whole). Fractions must
// sum to 1 and every partition must come out non-empty.
SplitResult split(const Dataset& d, const std::array<double, 3>& fractions, std::uint64_t seed);

}  // namespace een
