#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "een/store.hpp"

static_assert(std::endian::native == std::endian::little,
              "store payload is little-endian float64");

namespace een {

namespace {

constexpr const char* kMagic = "EENSTORE v1";

void write_file_atomic(const std::string& path, const void* data, std::size_t len,
                       const void* data2, std::size_t len2) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("store: cannot open '" + tmp + "' for writing");
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
        if (len2) out.write(static_cast<const char*>(data2), static_cast<std::streamsize>(len2));
        if (!out) throw DataError("store: write to '" + tmp + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

std::size_t parse_size(const std::string& tok, const std::string& what) {
    try {
        return static_cast<std::size_t>(std::stoull(tok));
    } catch (const std::exception&) {
        throw DataError("store: bad " + what + " '" + tok + "'");
    }
}

ArchSpec arch_from_meta(const std::map<std::string, std::string>& meta) {
    auto get = [&](const std::string& k) -> const std::string& {
        auto it = meta.find(k);
        if (it == meta.end()) throw DataError("checkpoint: missing meta key '" + k + "'");
        return it->second;
    };
    ArchSpec a;
    const std::string& kind = get("arch.kind");
    if (kind == "conv")
        a.kind = ArchKind::Conv;
    else if (kind == "fc")
        a.kind = ArchKind::Fc;
    else
        throw DataError("checkpoint: unknown arch.kind '" + kind + "'");
    a.input_dim = parse_size(get("arch.input_dim"), "arch.input_dim");
    a.target_dim = parse_size(get("arch.target_dim"), "arch.target_dim");
    a.hidden_dim = parse_size(get("arch.hidden_dim"), "arch.hidden_dim");
    a.in_channels = parse_size(get("arch.in_channels"), "arch.in_channels");
    a.out_channels = parse_size(get("arch.out_channels"), "arch.out_channels");
    a.image_size = parse_size(get("arch.image_size"), "arch.image_size");
    a.feature_maps = parse_size(get("arch.feature_maps"), "arch.feature_maps");
    a.latent_dim = parse_size(get("arch.latent_dim"), "arch.latent_dim");
    a.phi_hidden = parse_size(get("arch.phi_hidden"), "arch.phi_hidden");
    return a;
}

}  // namespace

void store_write(const std::string& path, const Store& s) {
    std::string header = std::string(kMagic) + "\n";
    for (const auto& [k, v] : s.meta) {
        if (k.find_first_of(" =\n") != std::string::npos || v.find('\n') != std::string::npos)
            throw DataError("store: meta key/value with forbidden character: '" + k + "'");
        header += "meta " + k + "=" + v + "\n";
    }
    std::size_t offset = 0;
    std::vector<double> payload;
    for (const auto& [name, e] : s.arrays) {
        if (name.find_first_of(" \n") != std::string::npos)
            throw DataError("store: array name with forbidden character: '" + name + "'");
        if (numel(e.shape) != e.data.size())
            throw DataError("store: array '" + name + "' shape " + shape_str(e.shape) +
                            " does not match " + std::to_string(e.data.size()) + " values");
        header += "array " + name + " " + std::to_string(offset) + " " +
                  std::to_string(e.shape.size());
        for (std::size_t d : e.shape) header += " " + std::to_string(d);
        header += "\n";
        offset += e.data.size() * sizeof(double);
        payload.insert(payload.end(), e.data.begin(), e.data.end());
    }
    header += "payload " + std::to_string(offset) + "\n\n";
    write_file_atomic(path, header.data(), header.size(), payload.data(),
                      payload.size() * sizeof(double));
}

Store store_read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("store: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line != kMagic)
        throw DataError("store: '" + path + "' is not an " + kMagic + " file");

    Store s;
    struct Pending {
        std::string name;
        Shape shape;
        std::size_t offset;
    };
    std::vector<Pending> pending;
    std::size_t payload_bytes = 0;
    bool saw_payload = false;
    while (std::getline(in, line)) {
        if (line.empty()) break;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "meta") {
            std::string rest;
            std::getline(ls, rest);
            if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
            const auto eq = rest.find('=');
            if (eq == std::string::npos) throw DataError("store: bad meta line '" + line + "'");
            s.meta[rest.substr(0, eq)] = rest.substr(eq + 1);
        } else if (tag == "array") {
            Pending p;
            std::string tok;
            ls >> p.name >> tok;
            p.offset = parse_size(tok, "array offset");
            ls >> tok;
            const std::size_t rank = parse_size(tok, "array rank");
            for (std::size_t i = 0; i < rank; ++i) {
                if (!(ls >> tok)) throw DataError("store: truncated array line '" + line + "'");
                p.shape.push_back(parse_size(tok, "array dim"));
            }
            if (s.arrays.count(p.name) ||
                std::any_of(pending.begin(), pending.end(),
                            [&](const Pending& q) { return q.name == p.name; }))
                throw DataError("store: duplicate array '" + p.name + "'");
            pending.push_back(std::move(p));
        } else if (tag == "payload") {
            std::string tok;
            ls >> tok;
            payload_bytes = parse_size(tok, "payload size");
            saw_payload = true;
        } else {
            throw DataError("store: unknown manifest line '" + line + "'");
        }
    }
    if (!saw_payload) throw DataError("store: manifest missing payload size");

    std::vector<double> payload(payload_bytes / sizeof(double));
    if (payload_bytes % sizeof(double) != 0)
        throw DataError("store: payload size not a multiple of 8");
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload_bytes));
    if (static_cast<std::size_t>(in.gcount()) != payload_bytes)
        throw DataError("store: truncated payload in '" + path + "'");

    std::size_t expect = 0;
    for (auto& p : pending) {
        const std::size_t n = numel(p.shape);
        if (p.offset != expect)
            throw DataError("store: array '" + p.name + "' offset " + std::to_string(p.offset) +
                            " does not match cumulative layout");
        if (p.offset + n * sizeof(double) > payload_bytes)
            throw DataError("store: array '" + p.name + "' overruns payload");
        Store::Entry e;
        e.shape = std::move(p.shape);
        const std::size_t start = p.offset / sizeof(double);
        e.data.assign(payload.begin() + static_cast<std::ptrdiff_t>(start),
                      payload.begin() + static_cast<std::ptrdiff_t>(start + n));
        s.arrays.emplace(std::move(p.name), std::move(e));
        expect = p.offset + n * sizeof(double);
    }
    if (expect != payload_bytes)
        throw DataError("store: payload has " + std::to_string(payload_bytes - expect) +
                        " unclaimed trailing bytes");
    return s;
}

void write_text_atomic(const std::string& path, const std::string& content) {
    write_file_atomic(path, content.data(), content.size(), nullptr, 0);
}

void save_checkpoint(const std::string& path, ModelBundle& b, const Adam& opt,
                     std::map<std::string, std::string> meta,
                     std::map<std::string, Store::Entry> extra) {
    Store s;
    s.meta = std::move(meta);
    s.arrays = std::move(extra);
    const ArchSpec& a = b.arch();
    s.meta["format"] = "een-checkpoint-v1";
    s.meta["arch.kind"] = a.kind == ArchKind::Conv ? "conv" : "fc";
    s.meta["arch.input_dim"] = std::to_string(a.input_dim);
    s.meta["arch.target_dim"] = std::to_string(a.target_dim);
    s.meta["arch.hidden_dim"] = std::to_string(a.hidden_dim);
    s.meta["arch.in_channels"] = std::to_string(a.in_channels);
    s.meta["arch.out_channels"] = std::to_string(a.out_channels);
    s.meta["arch.image_size"] = std::to_string(a.image_size);
    s.meta["arch.feature_maps"] = std::to_string(a.feature_maps);
    s.meta["arch.latent_dim"] = std::to_string(a.latent_dim);
    s.meta["arch.phi_hidden"] = std::to_string(a.phi_hidden);
    s.meta["mode"] = b.mode() == WeightMode::Joint ? "joint" : "snapshot";
    s.meta["has_snapshot"] = b.has_snapshot() ? "1" : "0";
    s.meta["conditional_trained"] = b.conditional_trained ? "1" : "0";
    s.meta["adam.lr"] = fmt_double(opt.config().lr);
    s.meta["adam.beta1"] = fmt_double(opt.config().beta1);
    s.meta["adam.beta2"] = fmt_double(opt.config().beta2);
    s.meta["adam.eps"] = fmt_double(opt.config().eps);
    for (const auto& [name, slot] : opt.slots()) {
        s.arrays["adam." + name + ".m"] = {Shape{slot.m.size()}, slot.m};
        s.arrays["adam." + name + ".v"] = {Shape{slot.v.size()}, slot.v};
        s.meta["adam." + name + ".t"] = std::to_string(slot.t);
    }
    for (const auto& ar : b.state_arrays())
        s.arrays[ar.name] = {ar.shape, std::vector<double>(ar.data.begin(), ar.data.end())};
    store_write(path, s);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    Store s = store_read(path);
    auto fmt = s.meta.find("format");
    if (fmt == s.meta.end() || fmt->second != "een-checkpoint-v1")
        throw DataError("checkpoint: '" + path + "' is not an een checkpoint");
    const ArchSpec a = arch_from_meta(s.meta);
    const WeightMode mode =
        s.meta.at("mode") == "joint" ? WeightMode::Joint : WeightMode::Snapshot;

    Rng scratch(0);  // every value is overwritten below
    ModelBundle b = ModelBundle::create(a, mode, scratch, InjectionInit::Uniform);
    if (s.meta.at("has_snapshot") == "1") b.snapshot();
    b.conditional_trained = s.meta.at("conditional_trained") == "1";
    for (auto& ar : b.state_arrays()) {
        auto it = s.arrays.find(ar.name);
        if (it == s.arrays.end()) throw DataError("checkpoint: missing array '" + ar.name + "'");
        if (it->second.shape != ar.shape)
            throw DataError("checkpoint: array '" + ar.name + "' has shape " +
                            shape_str(it->second.shape) + ", model expects " + shape_str(ar.shape));
        std::copy(it->second.data.begin(), it->second.data.end(), ar.data.begin());
    }

    AdamConfig ac;
    ac.lr = std::stod(s.meta.at("adam.lr"));
    ac.beta1 = std::stod(s.meta.at("adam.beta1"));
    ac.beta2 = std::stod(s.meta.at("adam.beta2"));
    ac.eps = std::stod(s.meta.at("adam.eps"));
    Adam opt(ac);
    for (const auto& [name, e] : s.arrays) {
        if (name.rfind("adam.", 0) != 0 || name.size() < 8) continue;
        if (name.substr(name.size() - 2) != ".m") continue;
        const std::string pname = name.substr(5, name.size() - 7);
        Adam::Slot slot;
        slot.m = e.data;
        auto vit = s.arrays.find("adam." + pname + ".v");
        if (vit == s.arrays.end())
            throw DataError("checkpoint: adam slot '" + pname + "' missing v array");
        slot.v = vit->second.data;
        auto tit = s.meta.find("adam." + pname + ".t");
        if (tit == s.meta.end())
            throw DataError("checkpoint: adam slot '" + pname + "' missing step count");
        slot.t = static_cast<std::uint64_t>(std::stoull(tit->second));
        opt.set_slot(pname, std::move(slot));
    }
    return LoadedCheckpoint{std::move(b), std::move(opt), std::move(s.meta)};
}

void save_bank(const std::string& path, const LatentBank& bank, const std::string& config_hash) {
    Store s;
    s.meta["format"] = "een-bank-v1";
    s.meta["latent_dim"] = std::to_string(bank.latent_dim);
    s.meta["source"] = bank.source.empty() ? "-" : bank.source;
    s.meta["checksum"] = hex64(bank.checksum);
    s.meta["config"] = config_hash;
    s.arrays["latents"] = {Shape{bank.size(), bank.latent_dim}, bank.values};
    store_write(path, s);
}

LatentBank load_bank(const std::string& path) {
    Store s = store_read(path);
    auto fmt = s.meta.find("format");
    if (fmt == s.meta.end() || fmt->second != "een-bank-v1")
        throw DataError("bank: '" + path + "' is not an een latent bank");
    auto it = s.arrays.find("latents");
    if (it == s.arrays.end()) throw DataError("bank: missing latents array");
    const std::size_t L = parse_size(s.meta.at("latent_dim"), "latent_dim");
    LatentBank bank =
        LatentBank::from_raw(std::move(it->second.data), L,
                             s.meta.at("source") == "-" ? "" : s.meta.at("source"));
    if (hex64(bank.checksum) != s.meta.at("checksum"))
        throw DataError("bank: checksum mismatch, file is corrupt");
    return bank;
}

}  // namespace een
