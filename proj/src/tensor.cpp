#include "een/tensor.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <unordered_set>

namespace een {

std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string fmt_double(double v) {
    char buf[40];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw Error("fmt_double: conversion failed");
    return std::string(buf, end);
}

std::string Rng::state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
}

void Rng::set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw DataError("rng: malformed engine state");
}

std::uint64_t Rng::mix(std::uint64_t seed, std::uint64_t tag) {
    // splitmix64 over the combined value
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double v) {
    auto n = std::make_shared<detail::TensorNode>();
    n->value.assign(numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    if (numel(shape) != data.size())
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return from(std::move(shape), std::move(v));
}

Tensor Tensor::randn(Shape shape, Rng& rng) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.normal();
    return from(std::move(shape), std::move(v));
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
}

std::span<const double> Tensor::grad() const {
    if (!node_ || node_->grad.empty()) return {};
    return node_->grad;
}

Tensor& Tensor::set_requires_grad(bool v) {
    if (!node_->is_leaf) throw TapeError("requires_grad may only be toggled on leaf tensors");
    node_->requires_grad = v;
    node_->needs_grad = v;
    return *this;
}

Tensor Tensor::clone() const {
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(std::move(n));
}

Tensor Tensor::detach() const { return clone(); }

// ---------------------------------------------------------------------------
// Autograd machinery
// ---------------------------------------------------------------------------

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
               std::function<void(detail::TensorNode&)> backward_fn) {
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (n->value.size() != numel(n->shape))
        throw ShapeError("make_op: value length does not match shape " + shape_str(n->shape));

    bool needs = false;
    if (g_grad_enabled) {
        for (const Tensor& t : inputs) {
            if (t.node() && t.node()->needs_grad) {
                needs = true;
                break;
            }
        }
    }
    if (needs) {
        n->is_leaf = false;
        n->needs_grad = true;
        n->parents.reserve(inputs.size());
        for (const Tensor& t : inputs) n->parents.push_back(t.shared_node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

Tape Tape::trace(const Tensor& root) {
    using detail::TensorNode;
    Tape tape;
    TensorNode* r = root.node();
    if (!r->backward_fn && !(r->is_leaf && r->requires_grad))
        throw TapeError("backward: tensor is not attached to a differentiation tape");

    // Iterative post-order DFS; inputs finish before their consumers, so the
    // reversed list runs each consumer before its inputs.
    std::vector<std::pair<std::shared_ptr<TensorNode>, std::size_t>> stack;
    std::unordered_set<TensorNode*> visited;
    stack.emplace_back(root.shared_node(), 0);
    visited.insert(r);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            const std::shared_ptr<TensorNode>& p = node->parents[idx++];
            if (p->needs_grad && !visited.count(p.get())) {
                visited.insert(p.get());
                stack.emplace_back(p, 0);
            }
        } else {
            tape.order_.push_back(std::move(node));
            stack.pop_back();
        }
    }
    std::reverse(tape.order_.begin(), tape.order_.end());
    return tape;
}

void Tape::run_backward() {
    for (const auto& n : order_) {
        if (n->backward_fn) n->backward_fn(*n);
    }
    // The tape is consumed: recorded rules and graph edges are dropped so a
    // second traversal cannot double-count. order_ keeps every node alive
    // while the edges fall away.
    for (const auto& n : order_) {
        if (!n->is_leaf) {
            n->backward_fn = nullptr;
            n->parents.clear();
            n->needs_grad = false;
        }
    }
}

void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw TapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    Tape tape = Tape::trace(loss);
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    tape.run_backward();
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
}

void accumulate(detail::TensorNode& dst, std::span<const double> g, double sign = 1.0) {
    dst.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst.grad[i] += sign * g[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    auto pa = a.data(), pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& self) {
        for (int s = 0; s < 2; ++s)
            if (self.parents[s]->needs_grad) accumulate(*self.parents[s], self.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    auto pa = a.data(), pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& self) {
        if (self.parents[0]->needs_grad) accumulate(*self.parents[0], self.grad);
        if (self.parents[1]->needs_grad) accumulate(*self.parents[1], self.grad, -1.0);
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    auto pa = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * pa[i];
    return make_op(a.shape(), std::move(out), {a}, [c](detail::TensorNode& self) {
        if (!self.parents[0]->needs_grad) return;
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
    });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_op({1}, {s}, {a}, [](detail::TensorNode& self) {
        if (!self.parents[0]->needs_grad) return;
        auto& p = *self.parents[0];
        p.ensure_grad();
        const double g = self.grad[0];
        for (double& x : p.grad) x += g;
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_op(std::move(shape), std::move(out), {a}, [](detail::TensorNode& self) {
        if (self.parents[0]->needs_grad) accumulate(*self.parents[0], self.grad);
    });
}

Tensor flatten(const Tensor& a) {
    if (a.shape().empty()) throw ShapeError("flatten: undefined on rank-0 tensor");
    const std::size_t n = a.shape()[0];
    return reshape(a, {n, a.size() / n});
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

Tensor matmul_nt(const Tensor& x, const Tensor& weight) {
    if (x.shape().size() != 2 || weight.shape().size() != 2 || x.shape()[1] != weight.shape()[1])
        throw ShapeError("matmul: inner extents of " + shape_str(x.shape()) + " and " +
                         shape_str(weight.shape()) + " disagree");
    const std::size_t N = x.shape()[0], I = x.shape()[1], O = weight.shape()[0];
    std::vector<double> out(N * O, 0.0);
    auto px = x.data(), pw = weight.data();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t o = 0; o < O; ++o) {
            double acc = 0.0;
            const double* xr = &px[n * I];
            const double* wr = &pw[o * I];
            for (std::size_t i = 0; i < I; ++i) acc += xr[i] * wr[i];
            out[n * O + o] = acc;
        }
    }
    return make_op({N, O}, std::move(out), {x, weight}, [N, I, O](detail::TensorNode& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        if (xn.needs_grad) {
            xn.ensure_grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) {
                    const double g = self.grad[n * O + o];
                    for (std::size_t i = 0; i < I; ++i) xn.grad[n * I + i] += g * wn.value[o * I + i];
                }
        }
        if (wn.needs_grad) {
            wn.ensure_grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) {
                    const double g = self.grad[n * O + o];
                    for (std::size_t i = 0; i < I; ++i) wn.grad[o * I + i] += g * xn.value[n * I + i];
                }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.shape().size() != 2 || weight.shape().size() != 2 || x.shape()[1] != weight.shape()[1])
        throw ShapeError("linear: inner extents of " + shape_str(x.shape()) + " and " +
                         shape_str(weight.shape()) + " disagree");
    if (bias.shape().size() != 1 || bias.shape()[0] != weight.shape()[0])
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    const std::size_t N = x.shape()[0], I = x.shape()[1], O = weight.shape()[0];
    std::vector<double> out(N * O);
    auto px = x.data(), pw = weight.data(), pb = bias.data();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t o = 0; o < O; ++o) {
            double acc = pb[o];
            const double* xr = &px[n * I];
            const double* wr = &pw[o * I];
            for (std::size_t i = 0; i < I; ++i) acc += xr[i] * wr[i];
            out[n * O + o] = acc;
        }
    }
    return make_op({N, O}, std::move(out), {x, weight, bias}, [N, I, O](detail::TensorNode& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        auto& bn = *self.parents[2];
        if (xn.needs_grad) {
            xn.ensure_grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) {
                    const double g = self.grad[n * O + o];
                    for (std::size_t i = 0; i < I; ++i) xn.grad[n * I + i] += g * wn.value[o * I + i];
                }
        }
        if (wn.needs_grad) {
            wn.ensure_grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) {
                    const double g = self.grad[n * O + o];
                    for (std::size_t i = 0; i < I; ++i) wn.grad[o * I + i] += g * xn.value[n * I + i];
                }
        }
        if (bn.needs_grad) {
            bn.ensure_grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) bn.grad[o] += self.grad[n * O + o];
        }
    });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    const Shape& xs = x.shape();
    if (xs.size() != 4 && xs.size() != 2)
        throw ShapeError("add_channel_bias: expected rank 2 or 4 input, got " + shape_str(xs));
    if (xs.size() == 2) return add(x, bias);
    const Shape& bs = bias.shape();
    // bias is either per-sample [N, C] or a shared parameter [C]
    const bool per_sample = bs.size() == 2;
    if (per_sample ? (bs[0] != xs[0] || bs[1] != xs[1]) : (bs.size() != 1 || bs[0] != xs[1]))
        throw ShapeError("add_channel_bias: bias " + shape_str(bs) + " does not match input " +
                         shape_str(xs));
    const std::size_t N = xs[0], C = xs[1], HW = xs[2] * xs[3];
    std::vector<double> out(x.size());
    auto px = x.data(), pb = bias.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const double b = pb[per_sample ? n * C + c : c];
            const double* src = &px[(n * C + c) * HW];
            double* dst = &out[(n * C + c) * HW];
            for (std::size_t i = 0; i < HW; ++i) dst[i] = src[i] + b;
        }
    return make_op(xs, std::move(out), {x, bias}, [N, C, HW, per_sample](detail::TensorNode& self) {
        auto& xn = *self.parents[0];
        auto& bn = *self.parents[1];
        if (xn.needs_grad) accumulate(xn, self.grad);
        if (bn.needs_grad) {
            bn.ensure_grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    double acc = 0.0;
                    const double* g = &self.grad[(n * C + c) * HW];
                    for (std::size_t i = 0; i < HW; ++i) acc += g[i];
                    bn.grad[per_sample ? n * C + c : c] += acc;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// Activations and losses
// ---------------------------------------------------------------------------

Tensor activation(const Tensor& x, Activation kind) {
    std::vector<double> out(x.size());
    auto px = x.data();
    if (kind == Activation::Relu) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] > 0.0 ? px[i] : 0.0;
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(px[i]);
    }
    return make_op(x.shape(), std::move(out), {x}, [kind](detail::TensorNode& self) {
        if (!self.parents[0]->needs_grad) return;
        auto& p = *self.parents[0];
        p.ensure_grad();
        if (kind == Activation::Relu) {
            // derivative at exactly 0 is 0
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (p.value[i] > 0.0) p.grad[i] += self.grad[i];
        } else {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double t = self.value[i];
                p.grad[i] += self.grad[i] * (1.0 - t * t);
            }
        }
    });
}

Tensor difference_loss(const Tensor& pred, const Tensor& target, LossNorm norm) {
    check_same_shape(pred, target, "difference_loss");
    const std::size_t n = pred.size();
    auto pp = pred.data(), pt = target.data();
    double acc = 0.0;
    if (norm == LossNorm::L2) {
        for (std::size_t i = 0; i < n; ++i) {
            const double d = pp[i] - pt[i];
            acc += d * d;
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) acc += std::abs(pp[i] - pt[i]);
    }
    acc /= static_cast<double>(n);
    return make_op({1}, {acc}, {pred, target}, [norm, n](detail::TensorNode& self) {
        const double g = self.grad[0] / static_cast<double>(n);
        auto& pn = *self.parents[0];
        auto& tn = *self.parents[1];
        auto apply = [&](detail::TensorNode& dst, double sign) {
            dst.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double d = pn.value[i] - tn.value[i];
                double gi;
                if (norm == LossNorm::L2) {
                    gi = 2.0 * d * g;
                } else {
                    // subgradient at 0 is 0
                    gi = (d > 0.0 ? g : (d < 0.0 ? -g : 0.0));
                }
                dst.grad[i] += sign * gi;
            }
        };
        if (pn.needs_grad) apply(pn, 1.0);
        if (tn.needs_grad) apply(tn, -1.0);
    });
}

std::vector<double> per_sample_loss(const Tensor& pred, const Tensor& target, LossNorm norm) {
    check_same_shape(pred, target, "per_sample_loss");
    if (pred.shape().empty()) throw ShapeError("per_sample_loss: rank-0 input");
    const std::size_t N = pred.shape()[0];
    const std::size_t per = pred.size() / N;
    std::vector<double> out(N, 0.0);
    auto pp = pred.data(), pt = target.data();
    for (std::size_t s = 0; s < N; ++s) {
        double acc = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
            const double d = pp[s * per + i] - pt[s * per + i];
            acc += norm == LossNorm::L2 ? d * d : std::abs(d);
        }
        out[s] = acc / static_cast<double>(per);
    }
    return out;
}

}  // namespace een
