#include <cmath>
#include <string>
#include <vector>

#include "een/tensor.hpp"

namespace een {

// Per-channel normalization over (N, H, W) for rank-4 input or over N for
// rank-2. Train modes normalize with biased batch variance; TrainUpdate also
// folds unbiased variance into the running EMA. Eval normalizes with the
// running statistics and treats them as constants in the backward pass.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  BnMode mode) {
    const Shape& s = x.shape();
    if (s.size() != 2 && s.size() != 4)
        throw ShapeError("batch_norm: expected rank-2 or rank-4 input, got " + shape_str(s));
    const std::size_t N = s[0], C = s[1];
    const std::size_t plane = s.size() == 4 ? s[2] * s[3] : 1;
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
        throw ShapeError("batch_norm: gamma/beta must have shape (" + std::to_string(C) +
                         "), got " + shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    if (state.running_mean.size() != C || state.running_var.size() != C)
        throw ShapeError("batch_norm: state tracks " + std::to_string(state.running_mean.size()) +
                         " channels, input has " + std::to_string(C));

    const std::size_t m = N * plane;
    const bool train = mode != BnMode::Eval;
    if (train && m < 2)
        throw DegenerateBatchError(
            "batch_norm: need at least 2 values per channel to estimate variance, got " +
            std::to_string(m));

    const auto& xv = x.data();
    std::vector<double> mean(C, 0.0), var(C, 0.0);
    if (train) {
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const double* p = xv.data() + (n * C + c) * plane;
                double acc = 0.0;
                for (std::size_t i = 0; i < plane; ++i) acc += p[i];
                mean[c] += acc;
            }
        for (std::size_t c = 0; c < C; ++c) mean[c] /= static_cast<double>(m);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const double* p = xv.data() + (n * C + c) * plane;
                double acc = 0.0;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = p[i] - mean[c];
                    acc += d * d;
                }
                var[c] += acc;
            }
        for (std::size_t c = 0; c < C; ++c) var[c] /= static_cast<double>(m);
        if (mode == BnMode::TrainUpdate) {
            const double mom = state.momentum;
            for (std::size_t c = 0; c < C; ++c) {
                const double unbiased = var[c] * static_cast<double>(m) / static_cast<double>(m - 1);
                state.running_mean[c] = (1.0 - mom) * state.running_mean[c] + mom * mean[c];
                state.running_var[c] = (1.0 - mom) * state.running_var[c] + mom * unbiased;
            }
        }
    } else {
        mean = state.running_mean;
        var = state.running_var;
    }

    std::vector<double> inv_std(C);
    for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + state.eps);

    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    std::vector<double> xhat(xv.size());
    std::vector<double> out(xv.size());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (n * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double h = (xv[base + i] - mean[c]) * inv_std[c];
                xhat[base + i] = h;
                out[base + i] = gv[c] * h + bv[c];
            }
        }

    return make_op(
        s, std::move(out), {x, gamma, beta},
        [xhat = std::move(xhat), inv_std = std::move(inv_std), N, C, plane,
         train](detail::TensorNode& self) {
            auto& xn = *self.parents[0];
            auto& gn = *self.parents[1];
            auto& bn = *self.parents[2];
            const double m = static_cast<double>(N * plane);
            // Channel sums of g and g*xhat feed both the affine grads and the
            // batch-statistic terms of the input grad.
            std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t base = (n * C + c) * plane;
                    double a = 0.0, b = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) {
                        a += self.grad[base + i];
                        b += self.grad[base + i] * xhat[base + i];
                    }
                    sum_g[c] += a;
                    sum_gx[c] += b;
                }
            if (gn.needs_grad) {
                gn.ensure_grad();
                for (std::size_t c = 0; c < C; ++c) gn.grad[c] += sum_gx[c];
            }
            if (bn.needs_grad) {
                bn.ensure_grad();
                for (std::size_t c = 0; c < C; ++c) bn.grad[c] += sum_g[c];
            }
            if (xn.needs_grad) {
                xn.ensure_grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t base = (n * C + c) * plane;
                        const double k = gn.value[c] * inv_std[c];
                        if (train) {
                            const double mg = sum_g[c] / m;
                            const double mgx = sum_gx[c] / m;
                            for (std::size_t i = 0; i < plane; ++i)
                                xn.grad[base + i] +=
                                    k * (self.grad[base + i] - mg - xhat[base + i] * mgx);
                        } else {
                            for (std::size_t i = 0; i < plane; ++i)
                                xn.grad[base + i] += k * self.grad[base + i];
                        }
                    }
            }
        });
}

}  // namespace een
