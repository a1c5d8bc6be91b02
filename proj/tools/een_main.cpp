#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "een/gradcheck.hpp"
#include "een/runner.hpp"
#include "een/training.hpp"

namespace {

een::ExperimentConfig load_or_default(const std::string& path) {
    if (path.empty()) {
        een::ExperimentConfig cfg;
        een::validate(cfg);
        return cfg;
    }
    return een::load_config(path);
}

std::string resolve_out(const std::string& flag, const std::string& from_config) {
    if (!flag.empty()) return flag;
    if (!from_config.empty()) return from_config;
    if (const char* env = std::getenv("EEN_OUT"); env && *env) return env;
    return "runs";
}

std::string resolve_checkpoint(const std::string& flag, const std::string& out) {
    return flag.empty() ? een::run_paths(out).checkpoint : flag;
}

int cmd_train(const std::string& config_path, const std::string& model, bool have_seed,
              std::uint64_t seed, const std::string& out, bool resume) {
    een::ExperimentConfig cfg = load_or_default(config_path);
    if (!model.empty()) cfg.model = model;
    if (have_seed) een::reseed(cfg, seed);
    cfg.out = resolve_out(out, cfg.out);
    een::validate(cfg);

    const een::RunPaths paths = een::run_train(cfg, resume);
    std::printf("model %s trained into %s\n", cfg.model.c_str(), paths.dir.c_str());
    std::printf("  checkpoint %s\n", paths.checkpoint.c_str());
    if (cfg.model != "deterministic") std::printf("  latent bank %s\n", paths.bank.c_str());
    std::printf("  metrics    %s\n", paths.train_metrics.c_str());
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint, bool have_seed,
             std::uint64_t seed, const std::string& out) {
    een::ExperimentConfig cfg = load_or_default(config_path);
    if (have_seed) cfg.eval_seed = seed;
    cfg.out = resolve_out(out, cfg.out);
    const std::string ckpt = resolve_checkpoint(checkpoint, cfg.out);

    const een::EvalCurve curve = een::run_eval(cfg, ckpt, cfg.out);
    for (std::size_t i = 0; i < curve.ks.size(); ++i)
        std::printf("k=%zu  loss %.6f +- %.6f  psnr %.3f +- %.3f\n", curve.ks[i],
                    curve.loss_mean[i], curve.loss_stderr[i], curve.psnr_mean[i],
                    curve.psnr_stderr[i]);
    std::printf("wrote %s\n", een::run_paths(cfg.out).eval_metrics.c_str());
    return 0;
}

int cmd_generate(const std::string& config_path, const std::string& checkpoint, bool have_seed,
                 std::uint64_t seed, const std::string& out, std::size_t index, std::size_t k) {
    een::ExperimentConfig cfg = load_or_default(config_path);
    cfg.out = resolve_out(out, cfg.out);
    const std::string ckpt = resolve_checkpoint(checkpoint, cfg.out);

    een::run_generate(cfg, ckpt, cfg.out, index, k, have_seed ? seed : cfg.eval_seed);
    std::printf("wrote panel for test sample %zu to %s\n", index,
                een::run_paths(cfg.out).panels.c_str());
    return 0;
}

int cmd_gradcheck(const std::string& scope) {
    const een::GradCheckReport rep = een::gradcheck_run(scope);
    for (const auto& row : rep.rows)
        std::printf("%-22s max relative error %.3e%s\n", row.op.c_str(), row.max_rel_err,
                    row.max_rel_err < rep.threshold ? "" : "  FAIL");
    if (!rep.pass()) {
        std::printf("gradcheck FAILED (threshold %.0e)\n", rep.threshold);
        return 2;
    }
    std::printf("gradcheck passed, %zu ops (threshold %.0e)\n", rep.rows.size(), rep.threshold);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"error encoding networks: train, evaluate, and inspect"};
    app.require_subcommand(1);

    std::string config_path, model, checkpoint, out, scope = "all";
    std::uint64_t seed = 0;
    std::size_t index = 0, k = 3;
    bool resume = false;

    auto* tr = app.add_subcommand("train", "train the configured model end to end");
    tr->add_option("--config", config_path, "experiment config file (defaults throughout)");
    tr->add_option("--model", model, "deterministic|een|een-joint|altmin");
    auto* tr_seed = tr->add_option("--seed", seed, "override every seed in the config");
    tr->add_option("--out", out, "output directory (default $EEN_OUT or ./runs)");
    tr->add_flag("--resume", resume, "continue an interrupted run from its checkpoint");

    auto* ev = app.add_subcommand("eval", "best-of-k sweep over the test split");
    ev->add_option("--config", config_path, "experiment config file");
    ev->add_option("--checkpoint", checkpoint, "checkpoint (default <out>/checkpoint.eenstore)");
    auto* ev_seed = ev->add_option("--seed", seed, "latent draw seed");
    ev->add_option("--out", out, "output directory");

    auto* ge = app.add_subcommand("generate", "panel dump for one test sample");
    ge->add_option("--config", config_path, "experiment config file");
    ge->add_option("--checkpoint", checkpoint, "checkpoint (default <out>/checkpoint.eenstore)");
    ge->add_option("--index", index, "test sample index");
    ge->add_option("--k", k, "number of generations");
    auto* ge_seed = ge->add_option("--seed", seed, "latent draw seed");
    ge->add_option("--out", out, "output directory");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of every op");
    gc->add_option("scope", scope, "all, or one op name");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (tr->parsed())
            return cmd_train(config_path, model, tr_seed->count() > 0, seed, out, resume);
        if (ev->parsed())
            return cmd_eval(config_path, checkpoint, ev_seed->count() > 0, seed, out);
        if (ge->parsed())
            return cmd_generate(config_path, checkpoint, ge_seed->count() > 0, seed, out, index,
                                k);
        return cmd_gradcheck(scope);
    } catch (const een::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
