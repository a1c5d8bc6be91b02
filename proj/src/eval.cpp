#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "een/eval.hpp"

namespace een {

namespace {

constexpr double kPsnrCeiling = 100.0;

Tensor bank_rows(const LatentBank& bank, const std::vector<std::size_t>& rows) {
    std::vector<double> out(rows.size() * bank.latent_dim);
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(bank.values.begin() + static_cast<std::ptrdiff_t>(rows[i] * bank.latent_dim),
                    bank.latent_dim, out.begin() + static_cast<std::ptrdiff_t>(i * bank.latent_dim));
    return Tensor::from({rows.size(), bank.latent_dim}, std::move(out));
}

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stderr_of(const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    const double var = acc / static_cast<double>(v.size() - 1);
    return std::sqrt(var / static_cast<double>(v.size()));
}

}  // namespace

LatentBank LatentBank::from_raw(std::vector<double> values, std::size_t latent_dim,
                                std::string source) {
    if (latent_dim == 0 || values.size() % latent_dim != 0)
        throw LatentError("latent bank: " + std::to_string(values.size()) +
                          " values do not tile latent_dim " + std::to_string(latent_dim));
    LatentBank b;
    b.latent_dim = latent_dim;
    b.values = std::move(values);
    b.source = std::move(source);
    b.checksum = fnv1a(b.values);
    for (double v : b.values)
        if (!std::isfinite(v)) throw LatentError("latent bank: non-finite entry");
    return b;
}

LatentBank extract_latents(ModelBundle& b, const DataView& data, std::size_t batch_size,
                           const std::string& source) {
    if (!b.conditional_trained)
        throw LifecycleError("extract_latents: phi has not been trained on this bundle");
    if (data.count == 0) throw DataError("extract_latents: empty dataset");
    const std::size_t L = b.arch().latent_dim;
    std::vector<double> values(data.count * L);
    NoGradGuard ng;
    for (std::size_t start = 0; start < data.count; start += batch_size) {
        const std::size_t stop = std::min(data.count, start + batch_size);
        std::vector<std::size_t> idx(stop - start);
        std::iota(idx.begin(), idx.end(), start);
        Tensor x = data.batch_x(idx), y = data.batch_y(idx);
        Tensor z = b.encode_error(b.residual(x, y));
        auto zv = z.data();
        std::copy(zv.begin(), zv.end(), values.begin() + static_cast<std::ptrdiff_t>(start * L));
    }
    return LatentBank::from_raw(std::move(values), L, source);
}

std::vector<Tensor> generate(ModelBundle& b, const Tensor& x, const LatentBank& bank,
                             std::size_t k, std::uint64_t seed) {
    if (k < 1) throw ConfigError("generate: k must be >= 1");
    if (bank.size() == 0) throw LifecycleError("generate: empty latent bank");
    if (bank.latent_dim != b.arch().latent_dim)
        throw LatentError("generate: bank latent_dim " + std::to_string(bank.latent_dim) +
                          " does not match model " + std::to_string(b.arch().latent_dim));
    const std::size_t n = x.shape()[0];
    NoGradGuard ng;
    Rng rng(Rng::mix(seed, 0x9E4ull));
    std::vector<Tensor> out;
    out.reserve(k);
    for (std::size_t j = 0; j < k; ++j) {
        // one draw per input row
        std::vector<std::size_t> rows(n);
        for (auto& r : rows) r = rng.below(bank.size());
        out.push_back(b.forward(x, bank_rows(bank, rows), BnMode::Eval));
    }
    return out;
}

EvalCurve best_of_k(ModelBundle& b, const DataView& test, const LatentBank& bank,
                    const std::vector<std::size_t>& ks, LossNorm norm, std::uint64_t seed,
                    bool force_zero_token) {
    if (ks.empty()) throw ConfigError("best_of_k: no k values");
    for (std::size_t i = 0; i < ks.size(); ++i) {
        if (ks[i] < 1) throw ConfigError("best_of_k: k values must be >= 1");
        if (i > 0 && ks[i] <= ks[i - 1])
            throw ConfigError("best_of_k: k values must be strictly increasing");
    }
    if (test.count == 0) throw DataError("best_of_k: empty test set");
    if (!force_zero_token) {
        if (bank.size() == 0) throw LifecycleError("best_of_k: empty latent bank");
        if (bank.latent_dim != b.arch().latent_dim)
            throw LatentError("best_of_k: bank latent_dim mismatch");
    }

    const std::size_t kmax = ks.back();
    const std::size_t n = test.count;
    // nested draws: sample i uses the prefix of its own stream, so the k=4
    // set extends the k=1 set
    std::vector<std::size_t> draws(force_zero_token ? 0 : n * kmax);
    if (!force_zero_token)
        for (std::size_t i = 0; i < n; ++i) {
            Rng rng(Rng::mix(seed, i));
            for (std::size_t j = 0; j < kmax; ++j) draws[i * kmax + j] = rng.below(bank.size());
        }

    // loss and mse per (sample, draw)
    std::vector<double> loss_ij(n * kmax), mse_ij(n * kmax);
    NoGradGuard ng;
    const std::size_t bs = 64;
    for (std::size_t start = 0; start < n; start += bs) {
        const std::size_t stop = std::min(n, start + bs);
        std::vector<std::size_t> idx(stop - start);
        std::iota(idx.begin(), idx.end(), start);
        Tensor x = test.batch_x(idx), y = test.batch_y(idx);
        for (std::size_t j = 0; j < kmax; ++j) {
            Tensor pred;
            if (force_zero_token) {
                if (j > 0) {
                    // identical by construction; reuse draw 0
                    for (std::size_t i = start; i < stop; ++i) {
                        loss_ij[i * kmax + j] = loss_ij[i * kmax];
                        mse_ij[i * kmax + j] = mse_ij[i * kmax];
                    }
                    continue;
                }
                pred = b.forward(x, std::nullopt, BnMode::Eval);
            } else {
                std::vector<std::size_t> rows(idx.size());
                for (std::size_t i = 0; i < idx.size(); ++i) rows[i] = draws[idx[i] * kmax + j];
                pred = b.forward(x, bank_rows(bank, rows), BnMode::Eval);
            }
            const auto ls = per_sample_loss(pred, y, norm);
            const auto ms = norm == LossNorm::L2 ? ls : per_sample_loss(pred, y, LossNorm::L2);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                loss_ij[idx[i] * kmax + j] = ls[i];
                mse_ij[idx[i] * kmax + j] = ms[i];
            }
        }
    }

    const double peak = 2.0;  // targets live in [-1, 1]
    EvalCurve curve;
    curve.ks = ks;
    for (std::size_t k : ks) {
        std::vector<double> best_loss(n), best_psnr(n);
        for (std::size_t i = 0; i < n; ++i) {
            double bl = std::numeric_limits<double>::infinity();
            double bm = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                const double l = loss_ij[i * kmax + j];
                if (l < bl) {
                    bl = l;
                    bm = mse_ij[i * kmax + j];
                }
            }
            best_loss[i] = bl;
            best_psnr[i] = bm == 0.0 ? kPsnrCeiling
                                     : std::min(kPsnrCeiling, 10.0 * std::log10(peak * peak / bm));
        }
        const double lm = mean_of(best_loss), pm = mean_of(best_psnr);
        curve.loss_mean.push_back(lm);
        curve.loss_stderr.push_back(stderr_of(best_loss, lm));
        curve.psnr_mean.push_back(pm);
        curve.psnr_stderr.push_back(stderr_of(best_psnr, pm));
    }
    return curve;
}

double psnr(const Tensor& pred, const Tensor& target, double peak) {
    if (pred.shape() != target.shape())
        throw ShapeError("psnr: shapes " + shape_str(pred.shape()) + " and " +
                         shape_str(target.shape()) + " differ");
    if (peak <= 0.0) throw ConfigError("psnr: peak must be > 0");
    auto pp = pred.data();
    auto pt = target.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < pp.size(); ++i) {
        const double d = pp[i] - pt[i];
        acc += d * d;
    }
    const double mse = acc / static_cast<double>(pp.size());
    if (mse == 0.0) return kPsnrCeiling;
    return std::min(kPsnrCeiling, 10.0 * std::log10(peak * peak / mse));
}

std::string curve_csv(const EvalCurve& c, const std::string& model_name,
                      const std::string& config_hash) {
    std::string out = "# een metrics v1 config=" + config_hash + "\n";
    out += "model,k,loss_mean,loss_stderr,psnr_mean,psnr_stderr\n";
    for (std::size_t i = 0; i < c.ks.size(); ++i) {
        out += model_name;
        out += ',';
        out += std::to_string(c.ks[i]);
        out += ',';
        out += fmt_double(c.loss_mean[i]);
        out += ',';
        out += fmt_double(c.loss_stderr[i]);
        out += ',';
        out += fmt_double(c.psnr_mean[i]);
        out += ',';
        out += fmt_double(c.psnr_stderr[i]);
        out += '\n';
    }
    return out;
}

}  // namespace een
