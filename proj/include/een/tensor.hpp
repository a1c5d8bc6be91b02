#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "een/common.hpp"
#include "een/rng.hpp"

namespace een {

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    bool needs_grad = false;  // true if a backward pass must visit this node
    bool is_leaf = true;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

// Dense 64-bit tensor handle. Copies alias the same storage; clone() makes a
// deep copy. Ops executed while gradients are enabled record backward rules
// on the output node; backward() replays them in reverse and then consumes
// the recorded graph.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor scalar(double v) { return from({1}, {v}); }
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);
    static Tensor randn(Shape shape, Rng& rng);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    double item() const;

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }
    std::span<const double> grad() const;
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool v);
    bool is_leaf() const { return node_->is_leaf; }

    // Deep copy of values only; result is a detached leaf.
    Tensor clone() const;
    // Same values, no graph edges, no gradient flow.
    Tensor detach() const;

    detail::TensorNode* node() const { return node_.get(); }
    std::shared_ptr<detail::TensorNode> shared_node() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// ---------------------------------------------------------------------------
// Autograd control
// ---------------------------------------------------------------------------

bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Reverse traversal of the recorded operations reachable from a root, in an
// order where every node runs before its inputs. Running it populates leaf
// gradients (summed across fan-out) and clears the recorded rules.
class Tape {
public:
    static Tape trace(const Tensor& root);
    void run_backward();
    std::size_t node_count() const { return order_.size(); }

private:
    // owning: consuming the tape drops graph edges, which would otherwise
    // free interior nodes mid-traversal
    std::vector<std::shared_ptr<detail::TensorNode>> order_;
};

// Scalar loss -> gradients on every reachable leaf with requires_grad.
void backward(const Tensor& loss);

// Op constructor used by all built-in ops; exposed so tests can build custom
// recorded ops. The backward callback reads self.grad and self.parents.
Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
               std::function<void(detail::TensorNode&)> backward_fn);

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

enum class Activation { Relu, Tanh };
enum class LossNorm { L1, L2 };

// Batch-norm execution mode. TrainFrozen normalizes with batch statistics
// like TrainUpdate but leaves the running statistics untouched (inner-loop
// latent optimization, finite-difference probes).
enum class BnMode { TrainUpdate, TrainFrozen, Eval };

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(std::size_t channels = 0)
        : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor sum(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
// [N, d0, d1, ...] -> [N, d0*d1*...]
Tensor flatten(const Tensor& a);

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// weight layout [O, I]; no bias (used by the latent injection)
Tensor matmul_nt(const Tensor& x, const Tensor& weight);

// x [N,C,H,W] + bias broadcast over spatial positions; bias is per-sample
// [N,C] or a shared parameter [C] (also broadcast over the batch)
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

// x [N,C,H,W], kernel [F,C,kH,kW], zero padding, cross-correlation
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad);
// x [N,C,H,W], kernel [C,F,kH,kW]; adjoint of conv2d for equal stride/pad
Tensor conv_transpose2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad);

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  BnMode mode);

Tensor activation(const Tensor& x, Activation kind);

// Mean over all elements of the elementwise difference penalty.
Tensor difference_loss(const Tensor& pred, const Tensor& target, LossNorm norm);

// Per-sample mean loss without graph recording, for reporting. Returns one
// value per row of the leading dimension.
std::vector<double> per_sample_loss(const Tensor& pred, const Tensor& target, LossNorm norm);

}  // namespace een
