#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "een/tensor.hpp"

namespace een {

struct AdamConfig {
    double lr = 0.0005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// ADAM with bias correction. Moment slots are keyed by parameter name so a
// checkpoint can restore them onto a freshly built model.
class Adam {
  public:
    struct Slot {
        std::vector<double> m, v;
        std::uint64_t t = 0;
    };

    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // Applies one update to every listed parameter and clears its gradient.
    // Throws OptimError if a parameter arrives without a gradient or its size
    // changed under a previously seen name.
    void step(const std::vector<std::pair<std::string, Tensor>>& params);

    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

    const std::map<std::string, Slot>& slots() const { return slots_; }
    void set_slot(const std::string& name, Slot slot) { slots_[name] = std::move(slot); }
    void reset() { slots_.clear(); }

  private:
    AdamConfig cfg_;
    std::map<std::string, Slot> slots_;
};

}  // namespace een
