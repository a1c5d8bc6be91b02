#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "een/datasets.hpp"
#include "een/model.hpp"
#include "een/training.hpp"

namespace een {

// Full declarative description of one run. Every field has a default, so an
// empty config file is a valid experiment.
struct ExperimentConfig {
    // [run]
    std::string model = "een";  // deterministic | een | een-joint | altmin
    std::uint64_t seed = 1;
    std::string out;  // resolved by the CLI: --out, then this, then $EEN_OUT, then "runs"

    // [dataset]
    std::string dataset = "mode_offset";  // mode_offset | dot_world
    std::array<double, 3> split{0.8, 0.1, 0.1};
    std::uint64_t split_seed = 1;
    ModeOffsetSpec mode_offset;
    DotWorldSpec dot_world;

    // [arch] free knobs; geometry comes from the dataset
    std::size_t hidden_dim = 64;
    std::size_t feature_maps = 64;
    std::size_t latent_dim = 2;
    std::size_t phi_hidden = 64;

    // [train]
    PhaseSchedule schedule;
    bool phase2_fresh = false;  // reinitialize the live weights before the conditional phase

    // [altmin]
    AltMinConfig altmin;

    // [eval]
    std::vector<std::size_t> ks{1, 2, 4, 8};
    std::uint64_t eval_seed = 1;
};

// Parses the TOML-style text. Unknown keys and malformed values throw
// ConfigError naming the offender. A `seed` under [run] flows into any
// section seed the file does not set itself.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Canonical resolved form: every field, fixed order, shortest round-trip
// doubles. Reparsing the emitted text yields an identical config.
std::string emit_config(const ExperimentConfig& cfg);

// FNV-1a over the canonical form minus the output directory (which cannot
// affect results). Stamped into every output file.
std::string config_hash(const ExperimentConfig& cfg);

// Overrides every seed field at once; used by the --seed flag.
void reseed(ExperimentConfig& cfg, std::uint64_t seed);

// Architecture implied by the config: fc over mode_offset vectors, conv over
// dot_world frames (context as input channels, horizon as output channels).
ArchSpec make_arch(const ExperimentConfig& cfg);

void validate(const ExperimentConfig& cfg);

}  // namespace een
