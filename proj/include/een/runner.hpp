#pragma once

#include <cstdint>
#include <string>

#include "een/config.hpp"
#include "een/eval.hpp"
#include "een/store.hpp"

namespace een {

struct RunPaths {
    std::string dir;
    std::string resolved_config;
    std::string checkpoint;
    std::string bank;
    std::string train_metrics;
    std::string eval_metrics;
    std::string panels;  // directory
};

RunPaths run_paths(const std::string& out_dir);

SplitResult build_splits(const ExperimentConfig& cfg);

// Full training pipeline for cfg.model. Writes the resolved config, a
// checkpoint after every phase, the latent bank (every kind except
// deterministic), and train_metrics.csv into cfg.out. resume=true picks up
// after the last completed phase of an interrupted run, re-running the
// interrupted phase from its start; outputs match an uninterrupted run.
RunPaths run_train(const ExperimentConfig& cfg, bool resume = false);

// Best-of-k sweep over the test split using the checkpoint (and, except for
// the deterministic kind, the bank saved alongside it). Writes
// eval_metrics.csv into out_dir and returns the curve.
EvalCurve run_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                   const std::string& out_dir);

// Panel dump for test sample `index` into <out_dir>/panels: context, truth,
// deterministic prediction, residual (truth minus deterministic), and k
// generations. PGM images for dot_world, one CSV of vectors for mode_offset.
void run_generate(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                  const std::string& out_dir, std::size_t index, std::size_t k,
                  std::uint64_t seed);

}  // namespace een
