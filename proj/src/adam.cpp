#include <cmath>
#include <string>

#include "een/adam.hpp"

namespace een {

void Adam::step(const std::vector<std::pair<std::string, Tensor>>& params) {
    for (const auto& [name, p] : params) {
        Tensor t = p;
        if (!t.has_grad())
            throw OptimError("adam: parameter '" + name + "' has no gradient");
        auto& slot = slots_[name];
        const std::size_t n = t.size();
        if (slot.m.empty()) {
            slot.m.assign(n, 0.0);
            slot.v.assign(n, 0.0);
        } else if (slot.m.size() != n) {
            throw OptimError("adam: parameter '" + name + "' changed size from " +
                             std::to_string(slot.m.size()) + " to " + std::to_string(n));
        }
        slot.t += 1;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(slot.t));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(slot.t));
        auto value = t.mutable_data();
        auto grad = t.grad();
        for (std::size_t i = 0; i < n; ++i) {
            const double g = grad[i];
            slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g;
            slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = slot.m[i] / bc1;
            const double vhat = slot.v[i] / bc2;
            value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        t.zero_grad();
    }
}

}  // namespace een
