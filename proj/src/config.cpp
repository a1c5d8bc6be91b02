#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "een/config.hpp"

namespace een {

namespace {

struct Value {
    enum Kind { Str, Num, Bool, Arr } kind;
    std::string str;               // Str
    std::string num;               // Num, raw token so u64 seeds keep full precision
    bool flag = false;             // Bool
    std::vector<std::string> arr;  // Arr, raw numeric tokens
};

[[noreturn]] void bad(std::size_t line_no, const std::string& msg) {
    throw ConfigError("config line " + std::to_string(line_no) + ": " + msg);
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Cuts a trailing comment, respecting quoted strings.
std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') quoted = !quoted;
        if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
}

Value parse_value(const std::string& raw, std::size_t line_no) {
    Value v;
    if (raw.empty()) bad(line_no, "missing value");
    if (raw.front() == '"') {
        if (raw.size() < 2 || raw.back() != '"') bad(line_no, "unterminated string " + raw);
        v.kind = Value::Str;
        v.str = raw.substr(1, raw.size() - 2);
        if (v.str.find('"') != std::string::npos) bad(line_no, "embedded quote in " + raw);
        return v;
    }
    if (raw == "true" || raw == "false") {
        v.kind = Value::Bool;
        v.flag = raw == "true";
        return v;
    }
    if (raw.front() == '[') {
        if (raw.back() != ']') bad(line_no, "unterminated array " + raw);
        v.kind = Value::Arr;
        std::string body = raw.substr(1, raw.size() - 2);
        std::string tok;
        std::istringstream bs(body);
        while (std::getline(bs, tok, ',')) {
            tok = trim(tok);
            if (tok.empty()) bad(line_no, "empty array element in " + raw);
            v.arr.push_back(tok);
        }
        return v;
    }
    v.kind = Value::Num;
    v.num = raw;
    return v;
}

double to_double(const std::string& tok, const std::string& key) {
    std::size_t used = 0;
    double d = 0;
    try {
        d = std::stod(tok, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != tok.size()) throw ConfigError("config: " + key + ": not a number: " + tok);
    return d;
}

std::uint64_t to_u64(const std::string& tok, const std::string& key) {
    std::size_t used = 0;
    std::uint64_t u = 0;
    try {
        u = std::stoull(tok, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != tok.size() || tok.front() == '-')
        throw ConfigError("config: " + key + ": not a non-negative integer: " + tok);
    return u;
}

LossNorm to_loss(const std::string& s, const std::string& key) {
    if (s == "l1") return LossNorm::L1;
    if (s == "l2") return LossNorm::L2;
    throw ConfigError("config: " + key + ": expected \"l1\" or \"l2\", got \"" + s + "\"");
}

using Setter = std::function<void(ExperimentConfig&, const Value&, const std::string&)>;

void expect(const Value& v, Value::Kind k, const std::string& key) {
    if (v.kind != k) {
        static const char* names[] = {"string", "number", "bool", "array"};
        throw ConfigError("config: " + key + ": expected a " + names[k]);
    }
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto str = [&](const std::string& key, std::string ExperimentConfig::* f) {
            t[key] = [f](ExperimentConfig& c, const Value& v, const std::string& k) {
                expect(v, Value::Str, k);
                c.*f = v.str;
            };
        };
        auto u64 = [&](const std::string& key, auto f) {
            t[key] = [f](ExperimentConfig& c, const Value& v, const std::string& k) {
                expect(v, Value::Num, k);
                f(c) = to_u64(v.num, k);
            };
        };
        auto szt = [&](const std::string& key, auto f) {
            t[key] = [f](ExperimentConfig& c, const Value& v, const std::string& k) {
                expect(v, Value::Num, k);
                f(c) = static_cast<std::size_t>(to_u64(v.num, k));
            };
        };
        auto dbl = [&](const std::string& key, auto f) {
            t[key] = [f](ExperimentConfig& c, const Value& v, const std::string& k) {
                expect(v, Value::Num, k);
                f(c) = to_double(v.num, k);
            };
        };
        auto bln = [&](const std::string& key, auto f) {
            t[key] = [f](ExperimentConfig& c, const Value& v, const std::string& k) {
                expect(v, Value::Bool, k);
                f(c) = v.flag;
            };
        };
        auto lss = [&](const std::string& key, auto f) {
            t[key] = [f](ExperimentConfig& c, const Value& v, const std::string& k) {
                expect(v, Value::Str, k);
                f(c) = to_loss(v.str, k);
            };
        };

        str("run.model", &ExperimentConfig::model);
        u64("run.seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.seed; });
        str("run.out", &ExperimentConfig::out);

        str("dataset.kind", &ExperimentConfig::dataset);
        t["dataset.split"] = [](ExperimentConfig& c, const Value& v, const std::string& k) {
            expect(v, Value::Arr, k);
            if (v.arr.size() != 3) throw ConfigError("config: " + k + ": expected 3 fractions");
            for (std::size_t i = 0; i < 3; ++i) c.split[i] = to_double(v.arr[i], k);
        };
        u64("dataset.split_seed",
            [](ExperimentConfig& c) -> std::uint64_t& { return c.split_seed; });

        szt("mode_offset.input_dim",
            [](ExperimentConfig& c) -> std::size_t& { return c.mode_offset.input_dim; });
        szt("mode_offset.target_dim",
            [](ExperimentConfig& c) -> std::size_t& { return c.mode_offset.target_dim; });
        szt("mode_offset.mode_count",
            [](ExperimentConfig& c) -> std::size_t& { return c.mode_offset.mode_count; });
        dbl("mode_offset.a_scale",
            [](ExperimentConfig& c) -> double& { return c.mode_offset.a_scale; });
        dbl("mode_offset.noise_sigma",
            [](ExperimentConfig& c) -> double& { return c.mode_offset.noise_sigma; });
        szt("mode_offset.sample_count",
            [](ExperimentConfig& c) -> std::size_t& { return c.mode_offset.sample_count; });
        u64("mode_offset.seed",
            [](ExperimentConfig& c) -> std::uint64_t& { return c.mode_offset.seed; });

        szt("dot_world.grid", [](ExperimentConfig& c) -> std::size_t& { return c.dot_world.grid; });
        szt("dot_world.context",
            [](ExperimentConfig& c) -> std::size_t& { return c.dot_world.context; });
        szt("dot_world.horizon",
            [](ExperimentConfig& c) -> std::size_t& { return c.dot_world.horizon; });
        szt("dot_world.episode_count",
            [](ExperimentConfig& c) -> std::size_t& { return c.dot_world.episode_count; });
        szt("dot_world.episode_length",
            [](ExperimentConfig& c) -> std::size_t& { return c.dot_world.episode_length; });
        u64("dot_world.seed",
            [](ExperimentConfig& c) -> std::uint64_t& { return c.dot_world.seed; });

        szt("arch.hidden_dim", [](ExperimentConfig& c) -> std::size_t& { return c.hidden_dim; });
        szt("arch.feature_maps",
            [](ExperimentConfig& c) -> std::size_t& { return c.feature_maps; });
        szt("arch.latent_dim", [](ExperimentConfig& c) -> std::size_t& { return c.latent_dim; });
        szt("arch.phi_hidden", [](ExperimentConfig& c) -> std::size_t& { return c.phi_hidden; });

        szt("train.epochs_deterministic",
            [](ExperimentConfig& c) -> std::size_t& { return c.schedule.epochs_deterministic; });
        szt("train.epochs_conditional",
            [](ExperimentConfig& c) -> std::size_t& { return c.schedule.epochs_conditional; });
        szt("train.batch_size",
            [](ExperimentConfig& c) -> std::size_t& { return c.schedule.batch_size; });
        lss("train.loss", [](ExperimentConfig& c) -> LossNorm& { return c.schedule.loss_norm; });
        dbl("train.lr", [](ExperimentConfig& c) -> double& { return c.schedule.lr; });
        u64("train.seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.schedule.seed; });
        szt("train.early_stop_patience",
            [](ExperimentConfig& c) -> std::size_t& { return c.schedule.early_stop_patience; });
        bln("train.phase2_fresh", [](ExperimentConfig& c) -> bool& { return c.phase2_fresh; });

        dbl("altmin.alpha", [](ExperimentConfig& c) -> double& { return c.altmin.alpha; });
        dbl("altmin.beta", [](ExperimentConfig& c) -> double& { return c.altmin.beta; });
        szt("altmin.inner_iters",
            [](ExperimentConfig& c) -> std::size_t& { return c.altmin.inner_iters; });
        szt("altmin.epochs", [](ExperimentConfig& c) -> std::size_t& { return c.altmin.epochs; });
        szt("altmin.batch_size",
            [](ExperimentConfig& c) -> std::size_t& { return c.altmin.batch_size; });
        lss("altmin.loss", [](ExperimentConfig& c) -> LossNorm& { return c.altmin.loss_norm; });
        u64("altmin.seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.altmin.seed; });
        bln("altmin.plain_sgd", [](ExperimentConfig& c) -> bool& { return c.altmin.plain_sgd; });
        szt("altmin.early_stop_patience",
            [](ExperimentConfig& c) -> std::size_t& { return c.altmin.early_stop_patience; });

        t["eval.ks"] = [](ExperimentConfig& c, const Value& v, const std::string& k) {
            expect(v, Value::Arr, k);
            c.ks.clear();
            for (const auto& tok : v.arr)
                c.ks.push_back(static_cast<std::size_t>(to_u64(tok, k)));
        };
        u64("eval.seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.eval_seed; });
        return t;
    }();
    return table;
}

const char* loss_name(LossNorm n) { return n == LossNorm::L1 ? "l1" : "l2"; }

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::string section;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') bad(line_no, "unterminated section header " + line);
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) bad(line_no, "empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) bad(line_no, "expected key = value, got " + line);
        const std::string name = trim(line.substr(0, eq));
        if (name.empty()) bad(line_no, "empty key");
        const std::string key = section.empty() ? name : section + "." + name;
        const auto& table = setters();
        const auto it = table.find(key);
        if (it == table.end()) bad(line_no, "unknown key " + key);
        it->second(cfg, parse_value(trim(line.substr(eq + 1)), line_no), key);
        seen.insert(key);
    }

    // run.seed flows into every section seed the file left alone
    if (!seen.count("dataset.split_seed")) cfg.split_seed = cfg.seed;
    if (!seen.count("mode_offset.seed")) cfg.mode_offset.seed = cfg.seed;
    if (!seen.count("dot_world.seed")) cfg.dot_world.seed = cfg.seed;
    if (!seen.count("train.seed")) cfg.schedule.seed = cfg.seed;
    if (!seen.count("altmin.seed")) cfg.altmin.seed = cfg.seed;
    if (!seen.count("eval.seed")) cfg.eval_seed = cfg.seed;

    validate(cfg);
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

void reseed(ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.seed = seed;
    cfg.split_seed = seed;
    cfg.mode_offset.seed = seed;
    cfg.dot_world.seed = seed;
    cfg.schedule.seed = seed;
    cfg.altmin.seed = seed;
    cfg.eval_seed = seed;
}

namespace {

std::string emit(const ExperimentConfig& c, bool for_hash) {
    std::ostringstream o;
    o << "# een config v1\n";
    o << "[run]\n";
    o << "model = \"" << c.model << "\"\n";
    o << "seed = " << c.seed << "\n";
    if (!for_hash) o << "out = \"" << c.out << "\"\n";
    o << "\n[dataset]\n";
    o << "kind = \"" << c.dataset << "\"\n";
    o << "split = [" << fmt_double(c.split[0]) << ", " << fmt_double(c.split[1]) << ", "
      << fmt_double(c.split[2]) << "]\n";
    o << "split_seed = " << c.split_seed << "\n";
    o << "\n[mode_offset]\n";
    o << "input_dim = " << c.mode_offset.input_dim << "\n";
    o << "target_dim = " << c.mode_offset.target_dim << "\n";
    o << "mode_count = " << c.mode_offset.mode_count << "\n";
    o << "a_scale = " << fmt_double(c.mode_offset.a_scale) << "\n";
    o << "noise_sigma = " << fmt_double(c.mode_offset.noise_sigma) << "\n";
    o << "sample_count = " << c.mode_offset.sample_count << "\n";
    o << "seed = " << c.mode_offset.seed << "\n";
    o << "\n[dot_world]\n";
    o << "grid = " << c.dot_world.grid << "\n";
    o << "context = " << c.dot_world.context << "\n";
    o << "horizon = " << c.dot_world.horizon << "\n";
    o << "episode_count = " << c.dot_world.episode_count << "\n";
    o << "episode_length = " << c.dot_world.episode_length << "\n";
    o << "seed = " << c.dot_world.seed << "\n";
    o << "\n[arch]\n";
    o << "hidden_dim = " << c.hidden_dim << "\n";
    o << "feature_maps = " << c.feature_maps << "\n";
    o << "latent_dim = " << c.latent_dim << "\n";
    o << "phi_hidden = " << c.phi_hidden << "\n";
    o << "\n[train]\n";
    o << "epochs_deterministic = " << c.schedule.epochs_deterministic << "\n";
    o << "epochs_conditional = " << c.schedule.epochs_conditional << "\n";
    o << "batch_size = " << c.schedule.batch_size << "\n";
    o << "loss = \"" << loss_name(c.schedule.loss_norm) << "\"\n";
    o << "lr = " << fmt_double(c.schedule.lr) << "\n";
    o << "seed = " << c.schedule.seed << "\n";
    o << "early_stop_patience = " << c.schedule.early_stop_patience << "\n";
    o << "phase2_fresh = " << (c.phase2_fresh ? "true" : "false") << "\n";
    o << "\n[altmin]\n";
    o << "alpha = " << fmt_double(c.altmin.alpha) << "\n";
    o << "beta = " << fmt_double(c.altmin.beta) << "\n";
    o << "inner_iters = " << c.altmin.inner_iters << "\n";
    o << "epochs = " << c.altmin.epochs << "\n";
    o << "batch_size = " << c.altmin.batch_size << "\n";
    o << "loss = \"" << loss_name(c.altmin.loss_norm) << "\"\n";
    o << "seed = " << c.altmin.seed << "\n";
    o << "plain_sgd = " << (c.altmin.plain_sgd ? "true" : "false") << "\n";
    o << "early_stop_patience = " << c.altmin.early_stop_patience << "\n";
    o << "\n[eval]\n";
    o << "ks = [";
    for (std::size_t i = 0; i < c.ks.size(); ++i) o << (i ? ", " : "") << c.ks[i];
    o << "]\n";
    o << "seed = " << c.eval_seed << "\n";
    return o.str();
}

}  // namespace

std::string emit_config(const ExperimentConfig& cfg) { return emit(cfg, false); }

std::string config_hash(const ExperimentConfig& cfg) { return hex64(fnv1a(emit(cfg, true))); }

ArchSpec make_arch(const ExperimentConfig& cfg) {
    ArchSpec a;
    a.hidden_dim = cfg.hidden_dim;
    a.feature_maps = cfg.feature_maps;
    a.latent_dim = cfg.latent_dim;
    a.phi_hidden = cfg.phi_hidden;
    if (cfg.dataset == "dot_world") {
        a.kind = ArchKind::Conv;
        a.in_channels = cfg.dot_world.context;
        a.out_channels = cfg.dot_world.horizon;
        a.image_size = cfg.dot_world.grid;
    } else {
        a.kind = ArchKind::Fc;
        a.input_dim = cfg.mode_offset.input_dim;
        a.target_dim = cfg.mode_offset.target_dim;
    }
    return a;
}

void validate(const ExperimentConfig& cfg) {
    static const std::set<std::string> kinds{"deterministic", "een", "een-joint", "altmin"};
    if (!kinds.count(cfg.model))
        throw ConfigError("config: run.model: unknown kind \"" + cfg.model +
                          "\" (expected deterministic|een|een-joint|altmin)");
    if (cfg.dataset != "mode_offset" && cfg.dataset != "dot_world")
        throw ConfigError("config: dataset.kind: unknown kind \"" + cfg.dataset +
                          "\" (expected mode_offset|dot_world)");
    double total = 0;
    for (double f : cfg.split) {
        if (f <= 0) throw ConfigError("config: dataset.split: fractions must be positive");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw ConfigError("config: dataset.split: fractions must sum to 1");
    if (cfg.ks.empty()) throw ConfigError("config: eval.ks: must not be empty");
    for (std::size_t i = 0; i < cfg.ks.size(); ++i) {
        if (cfg.ks[i] < 1) throw ConfigError("config: eval.ks: every k must be >= 1");
        if (i && cfg.ks[i] <= cfg.ks[i - 1])
            throw ConfigError("config: eval.ks: must be strictly increasing");
    }
    if (cfg.hidden_dim < 1) throw ConfigError("config: arch.hidden_dim: must be >= 1");
    if (cfg.feature_maps < 1) throw ConfigError("config: arch.feature_maps: must be >= 1");
    if (cfg.latent_dim < 1) throw ConfigError("config: arch.latent_dim: must be >= 1");
    if (cfg.phi_hidden < 1) throw ConfigError("config: arch.phi_hidden: must be >= 1");
    if (cfg.schedule.lr <= 0) throw ConfigError("config: train.lr: must be positive");
    if (cfg.schedule.batch_size < 1) throw ConfigError("config: train.batch_size: must be >= 1");
    if (cfg.altmin.alpha <= 0) throw ConfigError("config: altmin.alpha: must be positive");
    if (cfg.altmin.beta <= 0) throw ConfigError("config: altmin.beta: must be positive");
    if (cfg.altmin.inner_iters < 1) throw ConfigError("config: altmin.inner_iters: must be >= 1");
    if (cfg.altmin.batch_size < 1) throw ConfigError("config: altmin.batch_size: must be >= 1");
}

}  // namespace een
