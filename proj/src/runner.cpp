#include <algorithm>
#include <filesystem>
#include <optional>

#include "een/pgm.hpp"
#include "een/runner.hpp"
#include "een/training.hpp"

namespace fs = std::filesystem;

namespace een {

namespace {

constexpr std::uint64_t kWeightInitTag = 0xB007ull;
constexpr std::uint64_t kFreshPhase2Tag = 0xF2E5ull;
constexpr std::uint64_t kAltminBankTag = 0xBA2Cull;

std::vector<std::string> phases_for(const std::string& kind) {
    if (kind == "deterministic") return {"deterministic"};
    if (kind == "een") return {"deterministic", "conditional"};
    if (kind == "een-joint") return {"deterministic", "joint"};
    return {"altmin"};
}

WeightMode mode_for(const std::string& kind) {
    return kind == "een-joint" || kind == "altmin" ? WeightMode::Joint : WeightMode::Snapshot;
}

InjectionInit inj_for(const std::string& kind) {
    // altmin needs dL/dz != 0 from the first inner step; the phased kinds
    // start with a dead injection so phase 1 is exactly the z=0 objective
    return kind == "altmin" ? InjectionInit::Uniform : InjectionInit::Zero;
}

// Redraws the live weights (and resets phi, W, running stats) while keeping
// the snapshot copy, for the fresh-phase-2 variant.
void reinit_live(ModelBundle& b, const ExperimentConfig& cfg) {
    Rng rng(Rng::mix(cfg.seed, kFreshPhase2Tag));
    ModelBundle fresh =
        ModelBundle::create(make_arch(cfg), b.mode(), rng, inj_for(cfg.model));
    auto src = fresh.state_arrays();
    for (auto& dst : b.state_arrays()) {
        if (dst.name.rfind("theta_minus", 0) == 0) continue;
        auto it = std::find_if(src.begin(), src.end(),
                               [&](const auto& a) { return a.name == dst.name; });
        if (it == src.end()) throw LifecycleError("reinit: no fresh source for " + dst.name);
        std::copy(it->data.begin(), it->data.end(), dst.data.begin());
    }
}

std::string train_csv(const std::vector<std::pair<std::string, TrainReport>>& phases,
                      const std::string& hash) {
    std::string s = "# een metrics v1 config=" + hash + "\n";
    s += "phase,epoch,train_loss,val_loss,comp_deterministic,comp_conditional,inner_descent_"
         "frac\n";
    for (const auto& [name, rep] : phases) {
        for (std::size_t e = 0; e < rep.train_loss.size(); ++e) {
            s += name + "," + std::to_string(e) + "," + fmt_double(rep.train_loss[e]) + "," +
                 fmt_double(rep.val_loss[e]) + ",";
            if (e < rep.comp_deterministic.size()) s += fmt_double(rep.comp_deterministic[e]);
            s += ",";
            if (e < rep.comp_conditional.size()) s += fmt_double(rep.comp_conditional[e]);
            s += ",";
            if (e < rep.inner_descent_frac.size()) s += fmt_double(rep.inner_descent_frac[e]);
            s += "\n";
        }
    }
    return s;
}

void stash_report(std::map<std::string, std::string>& meta,
                  std::map<std::string, Store::Entry>& arrays, const std::string& phase,
                  const TrainReport& rep) {
    const std::string p = "metrics." + phase + ".";
    auto put = [&](const std::string& field, const std::vector<double>& v) {
        if (!v.empty()) arrays[p + field] = {Shape{v.size()}, v};
    };
    put("train_loss", rep.train_loss);
    put("val_loss", rep.val_loss);
    put("comp_deterministic", rep.comp_deterministic);
    put("comp_conditional", rep.comp_conditional);
    put("inner_descent_frac", rep.inner_descent_frac);
    meta[p + "initial_loss"] = fmt_double(rep.initial_loss);
    meta[p + "final_checksum"] = std::to_string(rep.final_checksum);
}

TrainReport recover_report(const Store& s, const std::string& phase) {
    const std::string p = "metrics." + phase + ".";
    TrainReport rep;
    auto get = [&](const std::string& field, std::vector<double>& v) {
        auto it = s.arrays.find(p + field);
        if (it != s.arrays.end()) v = it->second.data;
    };
    get("train_loss", rep.train_loss);
    get("val_loss", rep.val_loss);
    get("comp_deterministic", rep.comp_deterministic);
    get("comp_conditional", rep.comp_conditional);
    get("inner_descent_frac", rep.inner_descent_frac);
    rep.initial_loss = std::stod(s.meta.at(p + "initial_loss"));
    rep.final_checksum = std::stoull(s.meta.at(p + "final_checksum"));
    rep.epochs_run = rep.train_loss.size();
    return rep;
}

LossNorm norm_for(const ExperimentConfig& cfg, const std::string& kind) {
    return kind == "altmin" ? cfg.altmin.loss_norm : cfg.schedule.loss_norm;
}

}  // namespace

RunPaths run_paths(const std::string& out_dir) {
    const fs::path d(out_dir);
    RunPaths p;
    p.dir = d.string();
    p.resolved_config = (d / "resolved.toml").string();
    p.checkpoint = (d / "checkpoint.eenstore").string();
    p.bank = (d / "bank.eenstore").string();
    p.train_metrics = (d / "train_metrics.csv").string();
    p.eval_metrics = (d / "eval_metrics.csv").string();
    p.panels = (d / "panels").string();
    return p;
}

SplitResult build_splits(const ExperimentConfig& cfg) {
    Dataset d = cfg.dataset == "dot_world" ? gen_dot_world(cfg.dot_world)
                                           : gen_mode_offset(cfg.mode_offset);
    return split(d, cfg.split, cfg.split_seed);
}

RunPaths run_train(const ExperimentConfig& cfg, bool resume) {
    validate(cfg);
    if (cfg.out.empty()) throw ConfigError("config: run.out: empty output directory");
    const RunPaths paths = run_paths(cfg.out);
    fs::create_directories(paths.dir);
    const std::string hash = config_hash(cfg);

    SplitResult splits = build_splits(cfg);
    const DataView train = splits.train.view();
    const DataView val = splits.val.view();
    const auto phases = phases_for(cfg.model);

    std::optional<ModelBundle> bundle;
    Adam opt;
    std::vector<std::pair<std::string, TrainReport>> done;
    std::size_t next_phase = 0;

    if (resume && fs::exists(paths.checkpoint)) {
        const Store raw = store_read(paths.checkpoint);
        LoadedCheckpoint lc = load_checkpoint(paths.checkpoint);
        if (lc.meta.at("config") != hash)
            throw ConfigError("resume: checkpoint in " + paths.dir +
                              " was written by a different config");
        const std::string& prog = lc.meta.at("progress");
        std::size_t completed = 0;
        if (prog == "done") {
            completed = phases.size();
        } else {
            const auto it = std::find(phases.begin(), phases.end(), prog);
            if (it == phases.end())
                throw DataError("resume: checkpoint progress '" + prog +
                                "' is not a phase of model kind " + cfg.model);
            completed = static_cast<std::size_t>(it - phases.begin()) + 1;
        }
        for (std::size_t i = 0; i < completed; ++i)
            done.emplace_back(phases[i], recover_report(raw, phases[i]));
        bundle.emplace(std::move(lc.bundle));
        opt = std::move(lc.opt);
        next_phase = completed;
    }
    if (!bundle) {
        Rng wrng(Rng::mix(cfg.seed, kWeightInitTag));
        bundle.emplace(
            ModelBundle::create(make_arch(cfg), mode_for(cfg.model), wrng, inj_for(cfg.model)));
    }

    for (std::size_t pi = next_phase; pi < phases.size(); ++pi) {
        const std::string& phase = phases[pi];
        TrainReport rep;
        if (phase == "deterministic") {
            rep = train_deterministic(*bundle, train, val, cfg.schedule, opt);
        } else if (phase == "conditional") {
            bundle->snapshot();
            if (cfg.phase2_fresh) reinit_live(*bundle, cfg);
            rep = train_conditional(*bundle, train, val, cfg.schedule, opt);
        } else if (phase == "joint") {
            rep = train_joint(*bundle, train, val, cfg.schedule, opt);
        } else {
            rep = train_alternating(*bundle, train, val, cfg.altmin, opt);
        }
        done.emplace_back(phase, std::move(rep));

        std::map<std::string, std::string> meta;
        meta["kind"] = cfg.model;
        meta["config"] = hash;
        meta["dataset"] = hex64(splits.train.spec_hash);
        meta["progress"] = pi + 1 == phases.size() ? "done" : phase;
        std::map<std::string, Store::Entry> metric_arrays;
        for (const auto& [name, r] : done) stash_report(meta, metric_arrays, name, r);
        save_checkpoint(paths.checkpoint, *bundle, opt, std::move(meta),
                        std::move(metric_arrays));
    }

    if (cfg.model == "een" || cfg.model == "een-joint") {
        save_bank(paths.bank, extract_latents(*bundle, train, 64, cfg.model), hash);
    } else if (cfg.model == "altmin") {
        auto vals = infer_latents_altmin(*bundle, train, cfg.altmin,
                                         Rng::mix(cfg.altmin.seed, kAltminBankTag));
        save_bank(paths.bank, LatentBank::from_raw(std::move(vals), cfg.latent_dim, "altmin"),
                  hash);
    }
    write_text_atomic(paths.resolved_config, emit_config(cfg));
    write_text_atomic(paths.train_metrics, train_csv(done, hash));
    return paths;
}

EvalCurve run_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                   const std::string& out_dir) {
    validate(cfg);
    LoadedCheckpoint lc = load_checkpoint(checkpoint_path);
    const std::string kind = lc.meta.count("kind") ? lc.meta.at("kind") : "deterministic";
    const std::string hash = config_hash(cfg);

    LatentBank bank;
    const bool zero_token = kind == "deterministic";
    if (!zero_token) {
        const std::string bank_path =
            (fs::path(checkpoint_path).parent_path() / "bank.eenstore").string();
        if (!fs::exists(bank_path))
            throw LifecycleError("eval: model kind " + kind + " needs a latent bank, and " +
                                 bank_path + " does not exist");
        bank = load_bank(bank_path);
    }

    SplitResult splits = build_splits(cfg);
    EvalCurve curve = best_of_k(lc.bundle, splits.test.view(), bank, cfg.ks,
                                norm_for(cfg, kind), cfg.eval_seed, zero_token);

    fs::create_directories(out_dir);
    write_text_atomic(run_paths(out_dir).eval_metrics, curve_csv(curve, kind, hash));
    return curve;
}

void run_generate(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                  const std::string& out_dir, std::size_t index, std::size_t k,
                  std::uint64_t seed) {
    validate(cfg);
    if (k < 1) throw ConfigError("generate: k must be >= 1");
    LoadedCheckpoint lc = load_checkpoint(checkpoint_path);
    const std::string kind = lc.meta.count("kind") ? lc.meta.at("kind") : "deterministic";
    const std::string hash = config_hash(cfg);

    SplitResult splits = build_splits(cfg);
    const DataView test = splits.test.view();
    if (index >= test.count)
        throw DataError("generate: index " + std::to_string(index) + " out of range, test has " +
                        std::to_string(test.count) + " samples");

    const Tensor x = test.one_x(index);
    const Tensor y = test.one_y(index);
    NoGradGuard ng;
    const Tensor det = lc.bundle.forward(x, std::nullopt, BnMode::Eval);
    const Tensor res = sub(y, det);

    std::vector<Tensor> gens;
    if (kind == "deterministic") {
        // no latent source; every draw is the deterministic prediction
        for (std::size_t j = 0; j < k; ++j) gens.push_back(det);
    } else {
        const std::string bank_path =
            (fs::path(checkpoint_path).parent_path() / "bank.eenstore").string();
        if (!fs::exists(bank_path))
            throw LifecycleError("generate: model kind " + kind + " needs a latent bank, and " +
                                 bank_path + " does not exist");
        gens = generate(lc.bundle, x, load_bank(bank_path), k, seed);
    }

    const fs::path pdir = fs::path(out_dir) / "panels";
    fs::create_directories(pdir);
    const std::string stem = "panel_" + std::to_string(index);

    if (cfg.dataset == "dot_world") {
        const std::size_t G = cfg.dot_world.grid;
        auto dump = [&](const std::string& name, const double* plane) {
            pgm_write((pdir / (stem + "_" + name + ".pgm")).string(), to_pgm(plane, G, G));
        };
        auto dump_frames = [&](const std::string& name, const Tensor& t) {
            const std::size_t frames = t.size() / (G * G);
            for (std::size_t f = 0; f < frames; ++f) {
                const std::string suffix = frames > 1 ? name + std::to_string(f) : name;
                dump(suffix, t.data().data() + f * G * G);
            }
        };
        for (std::size_t c = 0; c < cfg.dot_world.context; ++c)
            dump("ctx" + std::to_string(c), x.data().data() + c * G * G);
        dump_frames("truth", y);
        dump_frames("deterministic", det);
        dump_frames("residual", res);
        for (std::size_t j = 0; j < gens.size(); ++j)
            dump_frames("gen" + std::to_string(j), gens[j]);
    } else {
        std::string s = "# een panel v1 config=" + hash + "\n";
        auto row = [&](const std::string& name, const Tensor& t) {
            s += name;
            for (double v : t.data()) s += "," + fmt_double(v);
            s += "\n";
        };
        row("input", x);
        row("truth", y);
        row("deterministic", det);
        row("residual", res);
        for (std::size_t j = 0; j < gens.size(); ++j) row("gen" + std::to_string(j), gens[j]);
        write_text_atomic((pdir / (stem + ".csv")).string(), s);
    }
}

}  // namespace een
