#pragma once

#include <map>
#include <string>
#include <vector>

#include "een/adam.hpp"
#include "een/eval.hpp"
#include "een/model.hpp"

namespace een {

// Text manifest (format line, meta key=value lines, array directory) followed
// by raw little-endian float64 payload. Writes are atomic: temp file in the
// same directory, then rename.
struct Store {
    struct Entry {
        Shape shape;
        std::vector<double> data;
    };
    std::map<std::string, std::string> meta;
    std::map<std::string, Entry> arrays;
};

void store_write(const std::string& path, const Store& s);
Store store_read(const std::string& path);

// Plain text, atomic like store_write.
void write_text_atomic(const std::string& path, const std::string& content);

// Checkpoint = bundle state + optimizer slots + caller meta (progress
// markers, config hash) + any extra arrays (per-epoch metric traces).
void save_checkpoint(const std::string& path, ModelBundle& b, const Adam& opt,
                     std::map<std::string, std::string> meta,
                     std::map<std::string, Store::Entry> extra = {});

struct LoadedCheckpoint {
    ModelBundle bundle;
    Adam opt;
    std::map<std::string, std::string> meta;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

void save_bank(const std::string& path, const LatentBank& bank,
               const std::string& config_hash);
LatentBank load_bank(const std::string& path);

}  // namespace een
