#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "een/config.hpp"
#include "een/store.hpp"

using namespace een;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
    static fs::path dir = [] {
        fs::path p = fs::temp_directory_path() /
                     ("een_cli_" + std::to_string(static_cast<unsigned>(::getpid())));
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

std::string tmp_path(const std::string& name) { return (tmp_dir() / name).string(); }

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(bool(out));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct CliResult {
    int code = -1;
    std::string out;
};

// env can carry "VAR=value " prefixes for the shell
CliResult run_cli(const std::string& args, const std::string& env = "") {
    static int n = 0;
    const std::string cap = tmp_path("cli_out_" + std::to_string(n++) + ".txt");
    const std::string cmd = env + std::string(EEN_CLI_PATH) + " " + args + " >" + cap + " 2>&1";
    const int st = std::system(cmd.c_str());
    CliResult r;
    if (st != -1 && WIFEXITED(st)) r.code = WEXITSTATUS(st);
    r.out = slurp(cap);
    return r;
}

// small fc experiment that trains in a fraction of a second
const char* kFastConfig =
    "[run]\n"
    "model = \"een\"\n"
    "seed = 1\n"
    "[mode_offset]\n"
    "input_dim = 2\n"
    "target_dim = 3\n"
    "mode_count = 2\n"
    "a_scale = 0.1\n"
    "noise_sigma = 0.01\n"
    "sample_count = 200\n"
    "[arch]\n"
    "hidden_dim = 8\n"
    "latent_dim = 1\n"
    "phi_hidden = 8\n"
    "[train]\n"
    "epochs_deterministic = 3\n"
    "epochs_conditional = 3\n"
    "batch_size = 32\n"
    "lr = 0.01\n"
    "early_stop_patience = 0\n"
    "[eval]\n"
    "ks = [1, 2]\n";

std::string fast_config_path() {
    static std::string path = [] {
        const std::string p = tmp_path("fast.toml");
        spit(p, kFastConfig);
        return p;
    }();
    return path;
}

std::map<std::string, std::vector<double>> parse_panel_csv(const std::string& path) {
    std::map<std::string, std::vector<double>> rows;
    std::istringstream in(slurp(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line.front() == '#') continue;
        std::istringstream ls(line);
        std::string name, tok;
        std::getline(ls, name, ',');
        std::vector<double> vals;
        while (std::getline(ls, tok, ',')) vals.push_back(std::strtod(tok.c_str(), nullptr));
        rows[name] = std::move(vals);
    }
    return rows;
}

}  // namespace

TEST_CASE("train writes the full product set with provenance") {
    const std::string dir = tmp_path("run_een");
    CliResult r = run_cli("train --config " + fast_config_path() + " --out " + dir);
    INFO(r.out);
    REQUIRE(r.code == 0);

    REQUIRE(fs::exists(dir + "/resolved.toml"));
    REQUIRE(fs::exists(dir + "/checkpoint.eenstore"));
    REQUIRE(fs::exists(dir + "/bank.eenstore"));
    REQUIRE(fs::exists(dir + "/train_metrics.csv"));

    // the resolved config re-parses to the same run and hash
    ExperimentConfig cfg = load_config(dir + "/resolved.toml");
    CHECK(cfg.model == "een");
    CHECK(cfg.schedule.lr == 0.01);
    const std::string hash = config_hash(cfg);

    const std::string metrics = slurp(dir + "/train_metrics.csv");
    CHECK(metrics.rfind("# een metrics v1 config=" + hash, 0) == 0);
    CHECK(metrics.find("phase,epoch,train_loss,val_loss") != std::string::npos);
    CHECK(metrics.find("deterministic,0,") != std::string::npos);
    CHECK(metrics.find("conditional,0,") != std::string::npos);

    // checkpoint and bank carry the hash too
    CHECK(store_read(dir + "/checkpoint.eenstore").meta.at("config") == hash);
    CHECK(store_read(dir + "/bank.eenstore").meta.at("config") == hash);

    // eval over the same run
    CliResult e = run_cli("eval --config " + fast_config_path() + " --out " + dir);
    INFO(e.out);
    REQUIRE(e.code == 0);
    CHECK(e.out.find("k=1") != std::string::npos);
    CHECK(e.out.find("k=2") != std::string::npos);
    const std::string em = slurp(dir + "/eval_metrics.csv");
    CHECK(em.rfind("# een metrics v1 config=" + hash, 0) == 0);
    CHECK(em.find("model,k,loss_mean") != std::string::npos);
    CHECK(em.find("een,1,") != std::string::npos);
}

std::string drop_out_line(const std::string& toml) {
    std::istringstream in(toml);
    std::string line, kept;
    while (std::getline(in, line))
        if (line.rfind("out = ", 0) != 0) kept += line + "\n";
    return kept;
}

TEST_CASE("repeated runs produce byte-identical outputs") {
    const std::string a = tmp_path("rep_a"), b = tmp_path("rep_b");
    REQUIRE(run_cli("train --config " + fast_config_path() + " --out " + a).code == 0);
    REQUIRE(run_cli("train --config " + fast_config_path() + " --out " + b).code == 0);
    CHECK(slurp(a + "/train_metrics.csv") == slurp(b + "/train_metrics.csv"));

    // resolved configs agree on everything except the output directory itself
    CHECK(drop_out_line(slurp(a + "/resolved.toml")) == drop_out_line(slurp(b + "/resolved.toml")));

    REQUIRE(run_cli("eval --config " + fast_config_path() + " --out " + a).code == 0);
    REQUIRE(run_cli("eval --config " + fast_config_path() + " --out " + b).code == 0);
    CHECK(slurp(a + "/eval_metrics.csv") == slurp(b + "/eval_metrics.csv"));
}

TEST_CASE("deterministic kind trains without a bank and evals flat") {
    const std::string dir = tmp_path("run_det");
    CliResult r =
        run_cli("train --config " + fast_config_path() + " --model deterministic --out " + dir);
    INFO(r.out);
    REQUIRE(r.code == 0);
    CHECK(!fs::exists(dir + "/bank.eenstore"));

    CliResult e = run_cli("eval --config " + fast_config_path() + " --out " + dir);
    INFO(e.out);
    REQUIRE(e.code == 0);

    // both k rows carry the same loss: the latent is ignored
    std::istringstream in(slurp(dir + "/eval_metrics.csv"));
    std::string line;
    std::vector<std::string> loss;
    while (std::getline(in, line)) {
        if (line.rfind("deterministic,", 0) != 0) continue;
        std::istringstream ls(line);
        std::string tok;
        std::getline(ls, tok, ',');
        std::getline(ls, tok, ',');
        std::getline(ls, tok, ',');
        loss.push_back(tok);
    }
    REQUIRE(loss.size() == 2);
    CHECK(loss[0] == loss[1]);
}

TEST_CASE("eval demands the bank an een checkpoint depends on") {
    const std::string dir = tmp_path("run_nobank");
    REQUIRE(run_cli("train --config " + fast_config_path() + " --out " + dir).code == 0);
    fs::remove(dir + "/bank.eenstore");
    CliResult e = run_cli("eval --config " + fast_config_path() + " --out " + dir);
    CHECK(e.code == 2);
    CHECK(e.out.find("bank") != std::string::npos);
}

TEST_CASE("exit codes separate usage, validation, and runtime failures") {
    // usage problems from the argument parser
    CHECK(run_cli("").code == 1);
    CHECK(run_cli("train --banana").code == 1);

    // validation problems from the config layer
    const std::string bad = tmp_path("bad.toml");
    spit(bad, "[run]\nbanana = 1\n");
    CliResult r = run_cli("train --config " + bad);
    CHECK(r.code == 1);
    CHECK(r.out.find("unknown key run.banana") != std::string::npos);

    CHECK(run_cli("train --config " + fast_config_path() + " --model banana --out " +
                  tmp_path("x"))
              .code == 1);
    CHECK(run_cli("train --config " + tmp_path("missing.toml")).code == 1);

    // runtime problems: evaluating a checkpoint that does not exist
    CliResult e = run_cli("eval --config " + fast_config_path() + " --out " + tmp_path("void"));
    CHECK(e.code == 2);
}

TEST_CASE("the seed flag reseeds every section of the resolved config") {
    const std::string dir = tmp_path("run_seeded");
    REQUIRE(run_cli("train --config " + fast_config_path() + " --seed 99 --out " + dir).code ==
            0);
    ExperimentConfig cfg = load_config(dir + "/resolved.toml");
    CHECK(cfg.seed == 99);
    CHECK(cfg.split_seed == 99);
    CHECK(cfg.mode_offset.seed == 99);
    CHECK(cfg.schedule.seed == 99);
    CHECK(cfg.altmin.seed == 99);
    CHECK(cfg.eval_seed == 99);
}

TEST_CASE("the default output root comes from the environment") {
    const std::string root = tmp_path("env_root");
    CliResult r = run_cli("train --config " + fast_config_path(), "EEN_OUT=" + root + " ");
    INFO(r.out);
    REQUIRE(r.code == 0);
    CHECK(fs::exists(root + "/checkpoint.eenstore"));
}

TEST_CASE("resolved config records the documented default learning rate") {
    const std::string cfg_path = tmp_path("default_lr.toml");
    spit(cfg_path,
         "[run]\nmodel = \"deterministic\"\n"
         "[mode_offset]\ninput_dim = 2\ntarget_dim = 3\nsample_count = 120\n"
         "[arch]\nhidden_dim = 8\nlatent_dim = 1\nphi_hidden = 8\n"
         "[train]\nepochs_deterministic = 1\nepochs_conditional = 1\nbatch_size = 32\n");
    const std::string dir = tmp_path("run_default_lr");
    REQUIRE(run_cli("train --config " + cfg_path + " --out " + dir).code == 0);
    CHECK(load_config(dir + "/resolved.toml").schedule.lr == 0.0005);
}

TEST_CASE("resume is idempotent on a finished run and rejects other configs") {
    const std::string dir = tmp_path("run_resume");
    REQUIRE(run_cli("train --config " + fast_config_path() + " --out " + dir).code == 0);
    const std::string metrics = slurp(dir + "/train_metrics.csv");
    const std::string bank = slurp(dir + "/bank.eenstore");

    CliResult r = run_cli("train --config " + fast_config_path() + " --resume --out " + dir);
    INFO(r.out);
    REQUIRE(r.code == 0);
    CHECK(slurp(dir + "/train_metrics.csv") == metrics);
    CHECK(slurp(dir + "/bank.eenstore") == bank);

    // a different seed is a different run; the checkpoint must not be reused
    CliResult bad =
        run_cli("train --config " + fast_config_path() + " --resume --seed 2 --out " + dir);
    CHECK(bad.code == 1);
    CHECK(bad.out.find("different config") != std::string::npos);
}

TEST_CASE("generate dumps a vector panel whose residual is truth minus prediction") {
    const std::string dir = tmp_path("run_gen");
    REQUIRE(run_cli("train --config " + fast_config_path() + " --out " + dir).code == 0);
    CliResult g = run_cli("generate --config " + fast_config_path() + " --index 1 --k 3 --out " +
                          dir);
    INFO(g.out);
    REQUIRE(g.code == 0);

    const std::string panel = dir + "/panels/panel_1.csv";
    REQUIRE(fs::exists(panel));
    auto rows = parse_panel_csv(panel);
    REQUIRE(rows.count("input"));
    REQUIRE(rows.count("truth"));
    REQUIRE(rows.count("deterministic"));
    REQUIRE(rows.count("residual"));
    REQUIRE(rows.count("gen0"));
    REQUIRE(rows.count("gen2"));
    CHECK(!rows.count("gen3"));
    REQUIRE(rows["truth"].size() == 3);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(rows["residual"][i] == rows["truth"][i] - rows["deterministic"][i]);

    CHECK(run_cli("generate --config " + fast_config_path() + " --index 9999 --out " + dir)
              .code == 2);
}

TEST_CASE("generate dumps the image panel set for dot worlds") {
    const std::string cfg_path = tmp_path("dots.toml");
    spit(cfg_path,
         "[run]\nmodel = \"een\"\nseed = 3\n"
         "[dataset]\nkind = \"dot_world\"\n"
         "[dot_world]\ngrid = 8\ncontext = 2\nhorizon = 1\nepisode_count = 10\nepisode_length = "
         "8\n"
         "[arch]\nfeature_maps = 4\nlatent_dim = 2\nphi_hidden = 8\n"
         "[train]\nepochs_deterministic = 1\nepochs_conditional = 1\nbatch_size = 16\nlr = "
         "0.005\nearly_stop_patience = 0\n"
         "[eval]\nks = [1, 2]\n");
    const std::string dir = tmp_path("run_dots");
    CliResult t = run_cli("train --config " + cfg_path + " --out " + dir);
    INFO(t.out);
    REQUIRE(t.code == 0);

    CliResult g = run_cli("generate --config " + cfg_path + " --index 0 --k 2 --out " + dir);
    INFO(g.out);
    REQUIRE(g.code == 0);

    // 2 context + truth + deterministic + residual + 2 generations
    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(dir + "/panels"))
        names.insert(e.path().filename().string());
    const std::set<std::string> expect{
        "panel_0_ctx0.pgm",          "panel_0_ctx1.pgm", "panel_0_truth.pgm",
        "panel_0_deterministic.pgm", "panel_0_residual.pgm", "panel_0_gen0.pgm",
        "panel_0_gen1.pgm"};
    CHECK(names == expect);
}

TEST_CASE("gradcheck subcommand reports every op and honors exit codes") {
    CliResult all = run_cli("gradcheck");
    INFO(all.out);
    CHECK(all.code == 0);
    CHECK(all.out.find("gradcheck passed, 17 ops") != std::string::npos);
    CHECK(all.out.find("conv_transpose2d") != std::string::npos);
    CHECK(all.out.find("FAIL") == std::string::npos);

    CliResult one = run_cli("gradcheck batch_norm");
    CHECK(one.code == 0);
    // exactly one report row plus the summary line
    CHECK(std::count(one.out.begin(), one.out.end(), '\n') == 2);

    CHECK(run_cli("gradcheck banana").code == 1);
}

TEST_CASE("training code never touches evaluation labels") {
    // the annotation quarantine: files implementing models, training, and
    // evaluation math must not mention the label channel at all
    for (const char* name : {"training.cpp", "model.cpp", "adam.cpp", "tensor.cpp", "conv.cpp",
                             "batchnorm.cpp", "eval.cpp", "runner.cpp"}) {
        const std::string body = slurp(std::string(EEN_SOURCE_DIR) + "/src/" + name);
        INFO(name);
        CHECK(body.find("label") == std::string::npos);
        CHECK(body.find("eval_label") == std::string::npos);
    }
}
