#include <algorithm>
#include <chrono>
#include <limits>
#include <numeric>
#include <string>

#include "een/training.hpp"

namespace een {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void check_schedule(const PhaseSchedule& s, std::size_t epochs) {
    if (epochs < 1) throw ConfigError("training: epoch count must be >= 1");
    if (s.batch_size < 1) throw ConfigError("training: batch_size must be >= 1");
    if (s.lr < 0.0) throw ConfigError("training: lr must be >= 0");
}

// Shuffled full batches; a trailing partial batch is dropped. A dataset
// smaller than one batch becomes a single batch.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t bs, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> out;
    if (bs >= n) {
        out.push_back(std::move(order));
        return out;
    }
    for (std::size_t i = 0; i + bs <= n; i += bs)
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(i + bs));
    return out;
}

// Deterministic-phase parameters: the live coder without injection or phi.
std::vector<std::pair<std::string, Tensor>> coder_only_params(ModelBundle& b) {
    auto all = b.named_parameters();
    std::erase_if(all, [](const auto& p) {
        return p.first.rfind("phi.", 0) == 0 || p.first == "theta.inject.w";
    });
    return all;
}

// Coder plus injection; alternating minimization has no phi.
std::vector<std::pair<std::string, Tensor>> altmin_params(ModelBundle& b) {
    auto all = b.named_parameters();
    std::erase_if(all, [](const auto& p) { return p.first.rfind("phi.", 0) == 0; });
    return all;
}

class ParamFreeze {
  public:
    explicit ParamFreeze(std::vector<std::pair<std::string, Tensor>> params)
        : params_(std::move(params)) {
        for (auto& [n, t] : params_) t.set_requires_grad(false);
    }
    ~ParamFreeze() {
        for (auto& [n, t] : params_) t.set_requires_grad(true);
    }
    ParamFreeze(const ParamFreeze&) = delete;
    ParamFreeze& operator=(const ParamFreeze&) = delete;

  private:
    std::vector<std::pair<std::string, Tensor>> params_;
};

struct EarlyStop {
    double best = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    std::size_t patience;

    explicit EarlyStop(std::size_t p) : patience(p) {}
    bool update(double v) {
        if (v < best - 1e-12) {
            best = v;
            since_best = 0;
        } else {
            ++since_best;
        }
        return patience > 0 && since_best >= patience;
    }
};

}  // namespace

double eval_deterministic_loss(ModelBundle& b, const DataView& data, LossNorm norm,
                               std::size_t batch_size) {
    if (data.count == 0) throw DataError("eval: empty dataset");
    NoGradGuard ng;
    double acc = 0.0;
    for (std::size_t start = 0; start < data.count; start += batch_size) {
        const std::size_t stop = std::min(data.count, start + batch_size);
        std::vector<std::size_t> idx(stop - start);
        std::iota(idx.begin(), idx.end(), start);
        Tensor pred = b.forward(data.batch_x(idx), std::nullopt, BnMode::Eval);
        for (double v : per_sample_loss(pred, data.batch_y(idx), norm)) acc += v;
    }
    return acc / static_cast<double>(data.count);
}

double eval_conditional_loss(ModelBundle& b, const DataView& data, LossNorm norm,
                             std::size_t batch_size) {
    if (data.count == 0) throw DataError("eval: empty dataset");
    NoGradGuard ng;
    double acc = 0.0;
    for (std::size_t start = 0; start < data.count; start += batch_size) {
        const std::size_t stop = std::min(data.count, start + batch_size);
        std::vector<std::size_t> idx(stop - start);
        std::iota(idx.begin(), idx.end(), start);
        Tensor x = data.batch_x(idx), y = data.batch_y(idx);
        Tensor z = b.encode_error(b.residual(x, y));
        Tensor pred = b.forward(x, z, BnMode::Eval);
        for (double v : per_sample_loss(pred, y, norm)) acc += v;
    }
    return acc / static_cast<double>(data.count);
}

TrainReport train_deterministic(ModelBundle& b, const DataView& train, const DataView& val,
                                const PhaseSchedule& s, Adam& opt) {
    check_schedule(s, s.epochs_deterministic);
    if (train.count == 0) throw DataError("train_deterministic: empty dataset");
    auto params = coder_only_params(b);
    opt.set_lr(s.lr);

    TrainReport rep;
    rep.initial_loss = eval_deterministic_loss(b, train, s.loss_norm);
    Rng shuffle_rng(Rng::mix(s.seed, 0xD37ull));
    EarlyStop stop(s.early_stop_patience);
    for (std::size_t epoch = 0; epoch < s.epochs_deterministic; ++epoch) {
        const auto t0 = Clock::now();
        auto batches = make_batches(train.count, s.batch_size, shuffle_rng);
        double acc = 0.0;
        for (const auto& bi : batches) {
            Tensor pred = b.forward(train.batch_x(bi), std::nullopt, BnMode::TrainUpdate);
            Tensor loss = difference_loss(pred, train.batch_y(bi), s.loss_norm);
            acc += loss.item();
            backward(loss);
            opt.step(params);
        }
        rep.train_loss.push_back(acc / static_cast<double>(batches.size()));
        rep.val_loss.push_back(val.count ? eval_deterministic_loss(b, val, s.loss_norm)
                                         : rep.train_loss.back());
        rep.wall_ms.push_back(ms_since(t0));
        ++rep.epochs_run;
        if (stop.update(rep.val_loss.back())) break;
    }
    rep.final_checksum = b.checksum();
    return rep;
}

TrainReport train_conditional(ModelBundle& b, const DataView& train, const DataView& val,
                              const PhaseSchedule& s, Adam& opt) {
    check_schedule(s, s.epochs_conditional);
    if (train.count == 0) throw DataError("train_conditional: empty dataset");
    if (b.mode() == WeightMode::Snapshot && !b.has_snapshot())
        throw LifecycleError("train_conditional: snapshot mode requires snapshot() first");
    auto params = b.named_parameters();
    opt.set_lr(s.lr);

    TrainReport rep;
    rep.initial_loss = eval_conditional_loss(b, train, s.loss_norm);
    Rng shuffle_rng(Rng::mix(s.seed, 0xC0Dull));
    EarlyStop stop(s.early_stop_patience);
    for (std::size_t epoch = 0; epoch < s.epochs_conditional; ++epoch) {
        const auto t0 = Clock::now();
        auto batches = make_batches(train.count, s.batch_size, shuffle_rng);
        double acc = 0.0;
        for (const auto& bi : batches) {
            Tensor x = train.batch_x(bi), y = train.batch_y(bi);
            Tensor z = b.encode_error(b.residual(x, y));
            Tensor pred = b.forward(x, z, BnMode::TrainUpdate);
            Tensor loss = difference_loss(pred, y, s.loss_norm);
            acc += loss.item();
            backward(loss);
            opt.step(params);
        }
        rep.train_loss.push_back(acc / static_cast<double>(batches.size()));
        rep.val_loss.push_back(val.count ? eval_conditional_loss(b, val, s.loss_norm)
                                         : rep.train_loss.back());
        rep.wall_ms.push_back(ms_since(t0));
        ++rep.epochs_run;
        if (stop.update(rep.val_loss.back())) break;
    }
    b.conditional_trained = true;
    rep.final_checksum = b.checksum();
    return rep;
}

TrainReport train_joint(ModelBundle& b, const DataView& train, const DataView& val,
                        const PhaseSchedule& s, Adam& opt) {
    check_schedule(s, s.epochs_conditional);
    if (train.count == 0) throw DataError("train_joint: empty dataset");
    if (b.mode() != WeightMode::Joint)
        throw LifecycleError("train_joint: bundle was built in snapshot mode");
    auto params = b.named_parameters();
    opt.set_lr(s.lr);

    TrainReport rep;
    rep.initial_loss = eval_deterministic_loss(b, train, s.loss_norm) +
                       eval_conditional_loss(b, train, s.loss_norm);
    Rng shuffle_rng(Rng::mix(s.seed, 0x107ull));
    EarlyStop stop(s.early_stop_patience);
    for (std::size_t epoch = 0; epoch < s.epochs_conditional; ++epoch) {
        const auto t0 = Clock::now();
        auto batches = make_batches(train.count, s.batch_size, shuffle_rng);
        double acc = 0.0, acc_d = 0.0, acc_c = 0.0;
        for (const auto& bi : batches) {
            Tensor x = train.batch_x(bi), y = train.batch_y(bi);
            Tensor pred_d = b.forward(x, std::nullopt, BnMode::TrainUpdate);
            Tensor loss_d = difference_loss(pred_d, y, s.loss_norm);
            Tensor z = b.encode_error(sub(y, pred_d.detach()));
            Tensor pred_c = b.forward(x, z, BnMode::TrainUpdate);
            Tensor loss_c = difference_loss(pred_c, y, s.loss_norm);
            Tensor loss = add(loss_d, loss_c);
            acc += loss.item();
            acc_d += loss_d.item();
            acc_c += loss_c.item();
            backward(loss);
            opt.step(params);
        }
        const auto nb = static_cast<double>(batches.size());
        rep.train_loss.push_back(acc / nb);
        rep.comp_deterministic.push_back(acc_d / nb);
        rep.comp_conditional.push_back(acc_c / nb);
        rep.val_loss.push_back(val.count
                                   ? eval_deterministic_loss(b, val, s.loss_norm) +
                                         eval_conditional_loss(b, val, s.loss_norm)
                                   : rep.train_loss.back());
        rep.wall_ms.push_back(ms_since(t0));
        ++rep.epochs_run;
        if (stop.update(rep.val_loss.back())) break;
    }
    b.conditional_trained = true;
    rep.final_checksum = b.checksum();
    return rep;
}

namespace {

void check_altmin(const AltMinConfig& c) {
    if (c.inner_iters < 1) throw ConfigError("altmin: inner_iters must be >= 1");
    if (c.alpha <= 0.0 || c.beta <= 0.0) throw ConfigError("altmin: alpha and beta must be > 0");
    if (c.epochs < 1 || c.batch_size < 1)
        throw ConfigError("altmin: epochs and batch_size must be >= 1");
}

void descend_latent(ModelBundle& b, const Tensor& x, const Tensor& y, Tensor& z,
                    const AltMinConfig& cfg, BnMode mode, std::vector<double>* first_losses) {
    // z_i only touches sample i, so rescaling the batch mean by N gives every
    // row the per-sample gradient the pseudocode prescribes, independent of
    // batch size
    const auto n = static_cast<double>(x.shape()[0]);
    for (std::size_t k = 0; k < cfg.inner_iters; ++k) {
        Tensor pred = b.forward(x, z, mode);
        if (k == 0 && first_losses) *first_losses = per_sample_loss(pred, y, cfg.loss_norm);
        Tensor loss = scale(difference_loss(pred, y, cfg.loss_norm), n);
        backward(loss);
        auto zv = z.mutable_data();
        auto zg = z.grad();
        for (std::size_t i = 0; i < zv.size(); ++i) zv[i] -= cfg.alpha * zg[i];
        z.zero_grad();
    }
}

}  // namespace

TrainReport train_alternating(ModelBundle& b, const DataView& train, const DataView& val,
                              const AltMinConfig& cfg, Adam& opt) {
    check_altmin(cfg);
    if (train.count == 0) throw DataError("train_alternating: empty dataset");
    auto params = altmin_params(b);
    opt.set_lr(cfg.beta);
    const std::size_t L = b.arch().latent_dim;

    TrainReport rep;
    Rng shuffle_rng(Rng::mix(cfg.seed, 0xA17ull));
    Rng zrng(Rng::mix(cfg.seed, 0x5EEDull));
    EarlyStop stop(cfg.early_stop_patience);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = Clock::now();
        auto batches = make_batches(train.count, cfg.batch_size, shuffle_rng);
        double acc = 0.0;
        std::size_t desc_ok = 0, desc_n = 0;
        for (const auto& bi : batches) {
            Tensor x = train.batch_x(bi), y = train.batch_y(bi);
            Tensor z = Tensor::randn({bi.size(), L}, zrng).set_requires_grad(true);
            std::vector<double> loss0;
            {
                ParamFreeze freeze(params);
                descend_latent(b, x, y, z, cfg, BnMode::Eval, &loss0);
                // measure the inner-loop descent in the same (eval) statistics
                NoGradGuard ng;
                Tensor peval = b.forward(x, z, BnMode::Eval);
                const auto lossk = per_sample_loss(peval, y, cfg.loss_norm);
                for (std::size_t i = 0; i < lossk.size(); ++i) {
                    desc_ok += lossk[i] <= loss0[i] + 1e-12 ? 1 : 0;
                    ++desc_n;
                }
            }
            Tensor pred = b.forward(x, z, BnMode::TrainUpdate);
            Tensor loss = difference_loss(pred, y, cfg.loss_norm);
            acc += loss.item();
            backward(loss);
            if (cfg.plain_sgd) {
                for (auto& [name, p] : params) {
                    if (!p.has_grad())
                        throw OptimError("altmin: parameter '" + name + "' has no gradient");
                    auto pv = p.mutable_data();
                    auto pg = p.grad();
                    for (std::size_t i = 0; i < pv.size(); ++i) pv[i] -= cfg.beta * pg[i];
                    p.zero_grad();
                }
            } else {
                opt.step(params);
            }
            z.zero_grad();
        }
        rep.train_loss.push_back(acc / static_cast<double>(batches.size()));
        rep.inner_descent_frac.push_back(desc_n ? static_cast<double>(desc_ok) /
                                                      static_cast<double>(desc_n)
                                                : 1.0);
        // held-out loss via the same K-step inference the method uses at test
        // time: frozen parameters, eval-mode statistics
        double vloss = rep.train_loss.back();
        if (val.count) {
            ParamFreeze freeze(params);
            Rng vrng(Rng::mix(cfg.seed, 0xE7A1ull + epoch));
            double vacc = 0.0;
            for (std::size_t start = 0; start < val.count; start += cfg.batch_size) {
                const std::size_t vstop = std::min(val.count, start + cfg.batch_size);
                std::vector<std::size_t> idx(vstop - start);
                std::iota(idx.begin(), idx.end(), start);
                Tensor x = val.batch_x(idx), y = val.batch_y(idx);
                Tensor z = Tensor::randn({idx.size(), L}, vrng).set_requires_grad(true);
                descend_latent(b, x, y, z, cfg, BnMode::Eval, nullptr);
                NoGradGuard ng;
                Tensor pred = b.forward(x, z, BnMode::Eval);
                for (double v : per_sample_loss(pred, y, cfg.loss_norm)) vacc += v;
            }
            vloss = vacc / static_cast<double>(val.count);
        }
        rep.val_loss.push_back(vloss);
        rep.wall_ms.push_back(ms_since(t0));
        ++rep.epochs_run;
        if (stop.update(rep.val_loss.back())) break;
    }
    rep.final_checksum = b.checksum();
    return rep;
}

std::vector<double> infer_latents_altmin(ModelBundle& b, const DataView& data,
                                         const AltMinConfig& cfg, std::uint64_t seed) {
    check_altmin(cfg);
    if (data.count == 0) throw DataError("infer_latents_altmin: empty dataset");
    const std::size_t L = b.arch().latent_dim;
    std::vector<double> out(data.count * L);
    ParamFreeze freeze(b.named_parameters());
    Rng zrng(Rng::mix(seed, 0x1A7E27ull));
    for (std::size_t start = 0; start < data.count; start += cfg.batch_size) {
        const std::size_t stop = std::min(data.count, start + cfg.batch_size);
        std::vector<std::size_t> idx(stop - start);
        std::iota(idx.begin(), idx.end(), start);
        Tensor x = data.batch_x(idx), y = data.batch_y(idx);
        Tensor z = Tensor::randn({idx.size(), L}, zrng).set_requires_grad(true);
        descend_latent(b, x, y, z, cfg, BnMode::Eval, nullptr);
        auto zv = z.data();
        std::copy(zv.begin(), zv.end(), out.begin() + static_cast<std::ptrdiff_t>(start * L));
    }
    return out;
}

}  // namespace een
