#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "een/datasets.hpp"
#include "een/model.hpp"

namespace een {

struct LatentBank {
    std::size_t latent_dim = 0;
    std::vector<double> values;  // size() * latent_dim, row-major
    std::uint64_t checksum = 0;
    std::string source;

    std::size_t size() const { return latent_dim ? values.size() / latent_dim : 0; }
    static LatentBank from_raw(std::vector<double> values, std::size_t latent_dim,
                               std::string source);
};

// One z = phi(y - f(x, 0)) per sample, single pass, batch-independent.
LatentBank extract_latents(ModelBundle& b, const DataView& data, std::size_t batch_size = 64,
                           const std::string& source = "");

// k latents drawn uniformly with replacement from the bank; one prediction
// per draw for a single input x.
std::vector<Tensor> generate(ModelBundle& b, const Tensor& x, const LatentBank& bank,
                             std::size_t k, std::uint64_t seed);

struct EvalCurve {
    std::vector<std::size_t> ks;
    std::vector<double> loss_mean, loss_stderr, psnr_mean, psnr_stderr;
};

// Per test sample, min loss over the first k of kmax nested uniform draws, so
// every per-sample curve is exactly non-increasing. PSNR is taken from the
// per-sample best prediction, then averaged. force_zero_token evaluates the
// deterministic setting f(x, 0) instead of drawing latents (the bank may be
// empty in that case); the curve is then exactly flat.
EvalCurve best_of_k(ModelBundle& b, const DataView& test, const LatentBank& bank,
                    const std::vector<std::size_t>& ks, LossNorm norm, std::uint64_t seed,
                    bool force_zero_token = false);

// 10 log10(peak^2 / MSE) in dB, ceiling 100 (also the MSE=0 value).
double psnr(const Tensor& pred, const Tensor& target, double peak);

// CSV with a versioned provenance header; no timestamps, so identical runs
// produce identical bytes.
std::string curve_csv(const EvalCurve& c, const std::string& model_name,
                      const std::string& config_hash);

}  // namespace een
