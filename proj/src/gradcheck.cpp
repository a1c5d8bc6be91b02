#include <algorithm>
#include <cmath>
#include <mutex>

#include "een/gradcheck.hpp"

namespace een {

namespace {

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Scalar projection sum_i w[i]*y[i] as a recorded op, so one backward pass
// covers outputs of any shape with a reproducible seed direction.
Tensor project(const Tensor& y, const std::vector<double>& w) {
    auto py = y.data();
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * py[i];
    return make_op(Shape{1}, {s}, {y}, [w](detail::TensorNode& self) {
        auto& yn = *self.parents[0];
        if (!yn.needs_grad) return;
        yn.ensure_grad();
        for (std::size_t i = 0; i < w.size(); ++i) yn.grad[i] += w[i] * self.grad[0];
    });
}

}  // namespace

double gradcheck_max_err(const std::vector<Tensor>& inputs, const std::function<Tensor()>& fwd,
                         Rng& rng, double h) {
    for (const auto& in : inputs) const_cast<Tensor&>(in).zero_grad();
    Tensor y = fwd();
    std::vector<double> w(y.size());
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    backward(project(y, w));

    std::vector<std::vector<double>> ad;
    for (const auto& in : inputs) {
        if (!in.has_grad())
            throw TapeError("gradcheck: an input received no gradient; fixture is miswired");
        auto g = in.grad();
        ad.emplace_back(g.begin(), g.end());
    }

    NoGradGuard guard;
    auto probe = [&]() {
        const Tensor out = fwd();
        auto po = out.data();
        double s = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * po[i];
        return s;
    };
    double worst = 0.0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto px = const_cast<Tensor&>(inputs[t]).mutable_data();
        for (std::size_t j = 0; j < px.size(); ++j) {
            const double keep = px[j];
            px[j] = keep + h;
            const double up = probe();
            px[j] = keep - h;
            const double dn = probe();
            px[j] = keep;
            worst = std::max(worst, rel_err(ad[t][j], (up - dn) / (2.0 * h)));
        }
    }
    return worst;
}

namespace {

Tensor leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor::uniform(std::move(shape), rng, lo, hi).set_requires_grad(true);
}

// Magnitudes in [0.3, 1.3] with random signs keep relu and l1 probes a safe
// distance from their kinks under the 1e-5 step.
Tensor kink_free_leaf(Shape shape, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    auto p = t.mutable_data();
    for (auto& v : p) v = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.3, 1.3);
    t.set_requires_grad(true);
    return t;
}

struct Registry {
    std::vector<std::pair<std::string, std::function<double()>>> entries;
    std::mutex mu;
};

Registry& registry() {
    static Registry r;
    return r;
}

void add_builtin(Registry& r, const std::string& op, std::function<double()> fn) {
    r.entries.emplace_back(op, std::move(fn));
}

void ensure_builtins() {
    Registry& r = registry();
    std::lock_guard<std::mutex> lock(r.mu);
    if (!r.entries.empty()) return;

    add_builtin(r, "add", [] {
        Rng rng(101);
        Tensor a = leaf({2, 3}, rng), b = leaf({2, 3}, rng);
        return gradcheck_max_err({a, b}, [&] { return add(a, b); }, rng);
    });
    add_builtin(r, "sub", [] {
        Rng rng(102);
        Tensor a = leaf({2, 3}, rng), b = leaf({2, 3}, rng);
        return gradcheck_max_err({a, b}, [&] { return sub(a, b); }, rng);
    });
    add_builtin(r, "scale", [] {
        Rng rng(103);
        Tensor a = leaf({2, 3}, rng);
        return gradcheck_max_err({a}, [&] { return scale(a, 1.7); }, rng);
    });
    add_builtin(r, "sum", [] {
        Rng rng(104);
        Tensor a = leaf({2, 3}, rng);
        return gradcheck_max_err({a}, [&] { return sum(a); }, rng);
    });
    add_builtin(r, "reshape", [] {
        Rng rng(105);
        Tensor a = leaf({2, 6}, rng);
        return gradcheck_max_err({a}, [&] { return reshape(a, {3, 4}); }, rng);
    });
    add_builtin(r, "flatten", [] {
        Rng rng(106);
        Tensor a = leaf({2, 3, 4}, rng);
        return gradcheck_max_err({a}, [&] { return flatten(a); }, rng);
    });
    add_builtin(r, "linear", [] {
        Rng rng(107);
        Tensor x = leaf({2, 3}, rng), w = leaf({4, 3}, rng), b = leaf({4}, rng);
        return gradcheck_max_err({x, w, b}, [&] { return linear(x, w, b); }, rng);
    });
    add_builtin(r, "matmul_nt", [] {
        Rng rng(108);
        Tensor x = leaf({2, 3}, rng), w = leaf({4, 3}, rng);
        return gradcheck_max_err({x, w}, [&] { return matmul_nt(x, w); }, rng);
    });
    add_builtin(r, "add_channel_bias", [] {
        Rng rng(109);
        Tensor x = leaf({2, 3, 4, 4}, rng);
        Tensor shared = leaf({3}, rng);
        const double e1 =
            gradcheck_max_err({x, shared}, [&] { return add_channel_bias(x, shared); }, rng);
        Tensor rows = leaf({2, 3}, rng);
        const double e2 =
            gradcheck_max_err({x, rows}, [&] { return add_channel_bias(x, rows); }, rng);
        return std::max(e1, e2);
    });
    add_builtin(r, "conv2d", [] {
        Rng rng(110);
        Tensor x = leaf({1, 2, 6, 6}, rng), k = leaf({3, 2, 3, 3}, rng);
        return gradcheck_max_err({x, k}, [&] { return conv2d(x, k, 2, 1); }, rng);
    });
    add_builtin(r, "conv_transpose2d", [] {
        Rng rng(111);
        Tensor x = leaf({1, 3, 3, 3}, rng), k = leaf({3, 2, 3, 3}, rng);
        return gradcheck_max_err({x, k}, [&] { return conv_transpose2d(x, k, 2, 1); }, rng);
    });
    add_builtin(r, "batch_norm", [] {
        Rng rng(112);
        double worst = 0.0;
        for (Shape shape : {Shape{5, 3}, Shape{2, 3, 4, 4}}) {
            Tensor x = leaf(shape, rng), g = leaf({3}, rng, 0.5, 1.5), b = leaf({3}, rng);
            BatchNormState st(3);
            for (auto& m : st.running_mean) m = rng.uniform(-0.5, 0.5);
            for (auto& v : st.running_var) v = rng.uniform(0.5, 1.5);
            worst = std::max(worst, gradcheck_max_err(
                                        {x, g, b},
                                        [&] { return batch_norm(x, g, b, st, BnMode::TrainFrozen); },
                                        rng));
            worst = std::max(worst, gradcheck_max_err(
                                        {x, g, b},
                                        [&] { return batch_norm(x, g, b, st, BnMode::Eval); }, rng));
        }
        return worst;
    });
    add_builtin(r, "relu", [] {
        Rng rng(113);
        Tensor x = kink_free_leaf({2, 5}, rng);
        return gradcheck_max_err({x}, [&] { return activation(x, Activation::Relu); }, rng);
    });
    add_builtin(r, "tanh", [] {
        Rng rng(114);
        Tensor x = leaf({2, 5}, rng, -2.0, 2.0);
        return gradcheck_max_err({x}, [&] { return activation(x, Activation::Tanh); }, rng);
    });
    add_builtin(r, "difference_loss_l1", [] {
        Rng rng(115);
        Tensor pred = leaf({2, 4}, rng);
        Tensor target = pred.clone();
        {
            auto p = target.mutable_data();
            for (auto& v : p) v += (rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.3, 1.0);
        }
        target.set_requires_grad(true);
        return gradcheck_max_err(
            {pred, target}, [&] { return difference_loss(pred, target, LossNorm::L1); }, rng);
    });
    add_builtin(r, "difference_loss_l2", [] {
        Rng rng(116);
        Tensor pred = leaf({2, 4}, rng), target = leaf({2, 4}, rng);
        return gradcheck_max_err(
            {pred, target}, [&] { return difference_loss(pred, target, LossNorm::L2); }, rng);
    });
    add_builtin(r, "composite", [] {
        Rng rng(117);
        Tensor x = Tensor::uniform({4, 3}, rng, -1.0, 1.0);
        Tensor target = Tensor::uniform({4, 2}, rng, -1.0, 1.0);
        Tensor w0 = leaf({8, 3}, rng), b0 = leaf({8}, rng);
        Tensor w1 = leaf({8, 8}, rng), b1 = leaf({8}, rng);
        Tensor w2 = leaf({2, 8}, rng), b2 = leaf({2}, rng);
        auto net = [&] {
            Tensor h = activation(linear(x, w0, b0), Activation::Tanh);
            h = activation(linear(h, w1, b1), Activation::Tanh);
            return difference_loss(linear(h, w2, b2), target, LossNorm::L2);
        };
        return gradcheck_max_err({w0, b0, w1, b1, w2, b2}, net, rng);
    });
}

}  // namespace

bool GradCheckReport::pass() const {
    return std::all_of(rows.begin(), rows.end(),
                       [&](const GradCheckRow& r) { return r.max_rel_err < threshold; });
}

void gradcheck_register(const std::string& op, std::function<double()> fn) {
    ensure_builtins();
    Registry& r = registry();
    std::lock_guard<std::mutex> lock(r.mu);
    for (const auto& [name, _] : r.entries)
        if (name == op) throw ConfigError("gradcheck: duplicate op '" + op + "'");
    r.entries.emplace_back(op, std::move(fn));
}

GradCheckReport gradcheck_run(const std::string& scope) {
    ensure_builtins();
    Registry& r = registry();
    GradCheckReport rep;
    bool found = false;
    for (const auto& [name, fn] : r.entries) {
        if (scope != "all" && scope != name) continue;
        found = true;
        rep.rows.push_back({name, fn()});
    }
    if (!found) throw ConfigError("gradcheck: unknown op '" + scope + "'");
    return rep;
}

}  // namespace een
