#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "een/eval.hpp"
#include "een/training.hpp"

using namespace een;

namespace {

// four modes with mixed pair distances (0.75 / 1.5 / 2.25 mean squared), so
// the oracle best-of-k ratio has slack under the coverage bound
constexpr double kOffsets[4][3] = {{0.75, 0.75, 0.75},
                                   {0.75, -0.75, 0.75},
                                   {-0.75, 0.75, -0.75},
                                   {-0.75, -0.75, -0.75}};

// four well-separated modes, no input mixing, light noise; max|y| < 1 so the
// generator's rescale is a no-op and y = c_m + noise exactly
struct TrainedEen {
    SplitResult data;
    ModelBundle bundle;
    LatentBank bank;
};

TrainedEen& fixture() {
    static TrainedEen t = [] {
        ModeOffsetSpec spec;
        spec.input_dim = 1;
        spec.target_dim = 3;
        spec.mode_count = 4;
        spec.a_scale = 0.0;
        spec.noise_sigma = 0.01;
        spec.sample_count = 800;
        spec.seed = 7;
        spec.offsets.assign(4, std::vector<double>(3));
        for (std::size_t m = 0; m < 4; ++m)
            for (std::size_t j = 0; j < 3; ++j) spec.offsets[m][j] = kOffsets[m][j];
        SplitResult data = split(gen_mode_offset(spec), {0.8, 0.1, 0.1}, 7);

        ArchSpec a;
        a.input_dim = 1;
        a.target_dim = 3;
        a.hidden_dim = 16;
        a.latent_dim = 2;
        a.phi_hidden = 16;
        Rng rng(7);
        ModelBundle b = ModelBundle::create(a, WeightMode::Snapshot, rng, InjectionInit::Zero);

        PhaseSchedule s;
        s.epochs_deterministic = 150;
        s.epochs_conditional = 400;
        s.batch_size = 64;
        s.lr = 0.01;
        s.seed = 7;
        s.early_stop_patience = 30;
        Adam opt;
        train_deterministic(b, data.train.view(), data.val.view(), s, opt);
        b.snapshot();
        opt.reset();
        train_conditional(b, data.train.view(), data.val.view(), s, opt);

        LatentBank bank = extract_latents(b, data.train.view(), 64, "fixture");
        return TrainedEen{std::move(data), std::move(b), std::move(bank)};
    }();
    return t;
}

ModelBundle untrained_bundle() {
    ArchSpec a;
    a.input_dim = 1;
    a.target_dim = 3;
    a.hidden_dim = 16;
    a.latent_dim = 2;
    a.phi_hidden = 16;
    Rng rng(3);
    return ModelBundle::create(a, WeightMode::Snapshot, rng, InjectionInit::Zero);
}

bool same_doubles(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

double mean_sq_gap(const Tensor& a, const Tensor& b) {
    auto pa = a.data();
    auto pb = b.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i) acc += (pa[i] - pb[i]) * (pa[i] - pb[i]);
    return acc / static_cast<double>(pa.size());
}

}  // namespace

TEST_CASE("psnr formula, ceiling, and validation") {
    // MSE 0.01 at peak 1 is exactly 20 dB
    Tensor t = Tensor::from({4}, {0.0, 0.0, 0.0, 0.0});
    Tensor p = Tensor::from({4}, {0.1, 0.1, 0.1, 0.1});
    CHECK(psnr(p, t, 1.0) == doctest::Approx(20.0).epsilon(1e-12));

    // identical tensors return the declared ceiling, not infinity
    CHECK(psnr(t, t, 1.0) == 100.0);
    CHECK(psnr(t.clone(), t, 2.0) == 100.0);

    // a tiny but nonzero error also clips at the ceiling
    Tensor near = Tensor::from({4}, {1e-12, 0.0, 0.0, 0.0});
    CHECK(psnr(near, t, 2.0) == 100.0);

    CHECK_THROWS_AS(psnr(Tensor::from({3}, {0, 0, 0}), t, 1.0), ShapeError);
    CHECK_THROWS_AS(psnr(p, t, 0.0), ConfigError);
    CHECK_THROWS_AS(psnr(p, t, -1.0), ConfigError);
}

TEST_CASE("psnr strictly decreases as the error grows") {
    Tensor t = Tensor::from({8}, std::vector<double>(8, 0.25));
    double prev = 100.0;
    for (double d : {1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0}) {
        std::vector<double> v(8, 0.25 + d);
        const double cur = psnr(Tensor::from({8}, std::move(v)), t, 2.0);
        CHECK(cur < prev);
        prev = cur;
    }
    // peak 2 with MSE 4 lands at 0 dB, so large errors go negative
    CHECK(prev < 1.0);
}

TEST_CASE("latent bank construction validates and checksums") {
    LatentBank b = LatentBank::from_raw({1.0, 2.0, 3.0, 4.0}, 2, "run");
    CHECK(b.size() == 2);
    CHECK(b.latent_dim == 2);
    CHECK(b.source == "run");
    CHECK(b.checksum == LatentBank::from_raw({1.0, 2.0, 3.0, 4.0}, 2, "other").checksum);
    CHECK(b.checksum != LatentBank::from_raw({1.0, 2.0, 3.0, 4.5}, 2, "run").checksum);

    CHECK_THROWS_AS(LatentBank::from_raw({1.0, 2.0, 3.0}, 2, ""), LatentError);
    CHECK_THROWS_AS(LatentBank::from_raw({1.0}, 0, ""), LatentError);
    const double nan = std::nan("");
    CHECK_THROWS_AS(LatentBank::from_raw({1.0, nan}, 2, ""), LatentError);
}

TEST_CASE("extraction requires a trained phi and a non-empty dataset") {
    auto& t = fixture();
    ModelBundle fresh = untrained_bundle();
    CHECK_THROWS_AS(extract_latents(fresh, t.data.train.view()), LifecycleError);

    DataView empty;
    CHECK_THROWS_AS(extract_latents(t.bundle, empty), DataError);
}

TEST_CASE("extraction is deterministic and batch independent") {
    auto& t = fixture();
    CHECK(t.bank.size() == t.data.train.size());
    CHECK(t.bank.latent_dim == 2);

    LatentBank again = extract_latents(t.bundle, t.data.train.view(), 64, "fixture");
    CHECK(again.checksum == t.bank.checksum);
    CHECK(same_doubles(again.values, t.bank.values));

    // a different batching must not change any latent
    LatentBank odd = extract_latents(t.bundle, t.data.train.view(), 7, "fixture");
    CHECK(same_doubles(odd.values, t.bank.values));
}

TEST_CASE("generation is seeded and validates its inputs") {
    auto& t = fixture();
    Tensor x = t.data.test.view().one_x(0);

    auto a = generate(t.bundle, x, t.bank, 4, 21);
    auto b = generate(t.bundle, x, t.bank, 4, 21);
    REQUIRE(a.size() == 4);
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(a[j].shape() == Shape{1, 3});
        CHECK(mean_sq_gap(a[j], b[j]) == 0.0);
    }
    auto c = generate(t.bundle, x, t.bank, 4, 22);
    double gap = 0.0;
    for (std::size_t j = 0; j < 4; ++j) gap += mean_sq_gap(a[j], c[j]);
    CHECK(gap > 0.0);

    CHECK_THROWS_AS(generate(t.bundle, x, t.bank, 0, 21), ConfigError);
    CHECK_THROWS_AS(generate(t.bundle, x, LatentBank{}, 1, 21), LifecycleError);
    LatentBank wrong = LatentBank::from_raw({1.0, 2.0, 3.0}, 3, "");
    CHECK_THROWS_AS(generate(t.bundle, x, wrong, 1, 21), LatentError);
}

TEST_CASE("a single-entry bank pins generation to one latent") {
    auto& t = fixture();
    Tensor x = t.data.test.view().one_x(3);
    LatentBank one = LatentBank::from_raw({0.3, -0.2}, 2, "one");

    auto gen = generate(t.bundle, x, one, 1, 99);
    REQUIRE(gen.size() == 1);
    NoGradGuard ng;
    Tensor direct = t.bundle.forward(x, Tensor::from({1, 2}, {0.3, -0.2}), BnMode::Eval);
    CHECK(mean_sq_gap(gen[0], direct) == 0.0);
}

TEST_CASE("a trained model generates visibly distinct modes") {
    auto& t = fixture();
    Tensor x = t.data.test.view().one_x(0);
    auto gens = generate(t.bundle, x, t.bank, 8, 5);
    REQUIRE(gens.size() == 8);

    std::size_t distinct_pairs = 0;
    for (std::size_t i = 0; i < gens.size(); ++i)
        for (std::size_t j = i + 1; j < gens.size(); ++j)
            if (mean_sq_gap(gens[i], gens[j]) > 0.01) ++distinct_pairs;
    CHECK(distinct_pairs >= 1);
}

TEST_CASE("best-of-k is monotone, nested, and deterministic") {
    auto& t = fixture();
    auto test = t.data.test.view();
    EvalCurve c = best_of_k(t.bundle, test, t.bank, {1, 2, 3, 4, 6, 8}, LossNorm::L2, 11);

    REQUIRE(c.ks == std::vector<std::size_t>{1, 2, 3, 4, 6, 8});
    REQUIRE(c.loss_mean.size() == 6);
    for (std::size_t i = 1; i < c.loss_mean.size(); ++i) {
        CHECK(c.loss_mean[i] <= c.loss_mean[i - 1] + 1e-12);
        CHECK(c.psnr_mean[i] >= c.psnr_mean[i - 1] - 1e-12);
    }

    // bitwise repeatability of the whole curve
    EvalCurve c2 = best_of_k(t.bundle, test, t.bank, {1, 2, 3, 4, 6, 8}, LossNorm::L2, 11);
    CHECK(same_doubles(c.loss_mean, c2.loss_mean));
    CHECK(same_doubles(c.loss_stderr, c2.loss_stderr));
    CHECK(same_doubles(c.psnr_mean, c2.psnr_mean));
    CHECK(same_doubles(c.psnr_stderr, c2.psnr_stderr));

    // another seed draws other latents
    EvalCurve c3 = best_of_k(t.bundle, test, t.bank, {1, 2, 3, 4, 6, 8}, LossNorm::L2, 12);
    CHECK(c.loss_mean[0] != c3.loss_mean[0]);

    // shared k values agree across different k lists: per-sample draw streams
    // do not depend on how far they are read
    EvalCurve cs = best_of_k(t.bundle, test, t.bank, {1, 2}, LossNorm::L2, 11);
    CHECK(cs.loss_mean[0] == c.loss_mean[0]);
    CHECK(cs.loss_mean[1] == c.loss_mean[1]);
    CHECK(cs.psnr_mean[0] == c.psnr_mean[0]);
    CHECK(cs.psnr_mean[1] == c.psnr_mean[1]);
}

TEST_CASE("best-of-k aggregation matches an independent recomputation") {
    auto& t = fixture();
    auto test = t.data.test.view();
    // one bank entry makes the draws irrelevant: every k gives the same
    // prediction, so mean, stderr, and psnr can be recomputed sample by sample
    LatentBank one = LatentBank::from_raw({0.3, -0.2}, 2, "one");
    EvalCurve c = best_of_k(t.bundle, test, one, {1, 5}, LossNorm::L2, 4);
    CHECK(c.loss_mean[0] == c.loss_mean[1]);
    CHECK(c.psnr_stderr[0] == c.psnr_stderr[1]);

    NoGradGuard ng;
    Tensor z = Tensor::from({1, 2}, {0.3, -0.2});
    std::vector<double> losses(test.count), psnrs(test.count);
    for (std::size_t i = 0; i < test.count; ++i) {
        Tensor x = test.one_x(i), y = test.one_y(i);
        Tensor pred = t.bundle.forward(x, z, BnMode::Eval);
        losses[i] = per_sample_loss(pred, y, LossNorm::L2)[0];
        psnrs[i] = psnr(pred, y, 2.0);
    }
    const auto n = static_cast<double>(test.count);
    double lm = 0.0, pm = 0.0;
    for (std::size_t i = 0; i < test.count; ++i) {
        lm += losses[i];
        pm += psnrs[i];
    }
    lm /= n;
    pm /= n;
    double lv = 0.0, pv = 0.0;
    for (std::size_t i = 0; i < test.count; ++i) {
        lv += (losses[i] - lm) * (losses[i] - lm);
        pv += (psnrs[i] - pm) * (psnrs[i] - pm);
    }
    const double lse = std::sqrt(lv / (n - 1.0) / n);
    const double pse = std::sqrt(pv / (n - 1.0) / n);
    CHECK(c.loss_mean[0] == doctest::Approx(lm).epsilon(1e-12));
    CHECK(c.loss_stderr[0] == doctest::Approx(lse).epsilon(1e-12));
    CHECK(c.psnr_mean[0] == doctest::Approx(pm).epsilon(1e-12));
    CHECK(c.psnr_stderr[0] == doctest::Approx(pse).epsilon(1e-12));

    // l1 scoring changes the loss column but psnr still reports squared error
    EvalCurve l1 = best_of_k(t.bundle, test, one, {1, 5}, LossNorm::L1, 4);
    std::vector<double> l1losses(test.count);
    double l1m = 0.0;
    for (std::size_t i = 0; i < test.count; ++i) {
        Tensor pred = t.bundle.forward(test.one_x(i), z, BnMode::Eval);
        l1m += per_sample_loss(pred, test.one_y(i), LossNorm::L1)[0];
    }
    l1m /= n;
    CHECK(l1.loss_mean[0] == doctest::Approx(l1m).epsilon(1e-12));
    CHECK(l1.psnr_mean[0] == doctest::Approx(pm).epsilon(1e-12));
}

TEST_CASE("a deterministic bundle yields an exactly flat curve") {
    auto& t = fixture();
    auto test = t.data.test.view();
    EvalCurve c = best_of_k(t.bundle, test, LatentBank{}, {1, 2, 4, 8}, LossNorm::L2, 3, true);
    for (std::size_t i = 1; i < c.ks.size(); ++i) {
        CHECK(c.loss_mean[i] == c.loss_mean[0]);
        CHECK(c.loss_stderr[i] == c.loss_stderr[0]);
        CHECK(c.psnr_mean[i] == c.psnr_mean[0]);
        CHECK(c.psnr_stderr[i] == c.psnr_stderr[0]);
    }
    // the flat level is the plain deterministic evaluation
    const double det = eval_deterministic_loss(t.bundle, test, LossNorm::L2);
    CHECK(c.loss_mean[0] == doctest::Approx(det).epsilon(1e-9));
}

TEST_CASE("four-mode coverage follows the brute-force sampling oracle") {
    auto& t = fixture();
    auto test = t.data.test.view();

    // oracle: a perfect mode-covering model outputs exactly c_m for a
    // uniformly drawn mode, so per sample the best-of-k expectation is the
    // order-statistic sum over the four candidate losses
    std::vector<std::array<double, 4>> v(test.count);
    for (std::size_t i = 0; i < test.count; ++i) {
        Tensor ty = test.one_y(i);
        auto y = ty.data();
        for (std::size_t m = 0; m < 4; ++m) {
            double acc = 0.0;
            for (std::size_t j = 0; j < 3; ++j) {
                const double d = y[j] - kOffsets[m][j];
                acc += d * d;
            }
            v[i][m] = acc / 3.0;
        }
    }
    auto oracle = [&](std::size_t k) {
        double acc = 0.0;
        for (auto vals : v) {
            std::sort(vals.begin(), vals.end());
            for (std::size_t r = 0; r < 4; ++r) {
                const double hi = std::pow((4.0 - static_cast<double>(r)) / 4.0,
                                           static_cast<double>(k));
                const double lo = std::pow((3.0 - static_cast<double>(r)) / 4.0,
                                           static_cast<double>(k));
                acc += vals[r] * (hi - (r == 3 ? 0.0 : lo));
            }
        }
        return acc / static_cast<double>(test.count);
    };
    const double ok1 = oracle(1);
    // sanity of the closed form itself: coverage 1-(3/4)^k forces the k=8
    // level an order of magnitude under k=1
    CHECK(oracle(8) < 0.13 * ok1);
    CHECK(oracle(4) < 0.40 * ok1);

    EvalCurve c = best_of_k(t.bundle, test, t.bank, {1, 2, 4, 8}, LossNorm::L2, 11);

    // the trained model tracks the perfect-model oracle closely at every k
    for (std::size_t i = 0; i < c.ks.size(); ++i)
        CHECK(std::abs(c.loss_mean[i] - oracle(c.ks[i])) < 0.25 * ok1);

    // headline coverage margin
    CHECK(c.loss_mean[3] < 0.15 * c.loss_mean[0]);

    // the k=1 -> k=4 drop clears three standard errors with room
    CHECK(c.loss_mean[0] - c.loss_mean[2] > 3.0 * (c.loss_stderr[0] + c.loss_stderr[2]));
}

TEST_CASE("best-of-k validates its configuration") {
    auto& t = fixture();
    auto test = t.data.test.view();
    CHECK_THROWS_AS(best_of_k(t.bundle, test, t.bank, {}, LossNorm::L2, 1), ConfigError);
    CHECK_THROWS_AS(best_of_k(t.bundle, test, t.bank, {2, 2}, LossNorm::L2, 1), ConfigError);
    CHECK_THROWS_AS(best_of_k(t.bundle, test, t.bank, {4, 2}, LossNorm::L2, 1), ConfigError);
    CHECK_THROWS_AS(best_of_k(t.bundle, test, t.bank, {0, 2}, LossNorm::L2, 1), ConfigError);
    CHECK_THROWS_AS(best_of_k(t.bundle, test, LatentBank{}, {1}, LossNorm::L2, 1),
                    LifecycleError);
    LatentBank wrong = LatentBank::from_raw({1.0, 2.0, 3.0}, 3, "");
    CHECK_THROWS_AS(best_of_k(t.bundle, test, wrong, {1}, LossNorm::L2, 1), LatentError);
    DataView empty;
    CHECK_THROWS_AS(best_of_k(t.bundle, empty, t.bank, {1}, LossNorm::L2, 1), DataError);
}

TEST_CASE("curve csv emits stable bytes") {
    EvalCurve c;
    c.ks = {1, 4};
    c.loss_mean = {0.5, 0.25};
    c.loss_stderr = {0.0, 0.125};
    c.psnr_mean = {20.0, 100.0};
    c.psnr_stderr = {1.5, 0.0};
    const std::string expect =
        "# een metrics v1 config=cafe\n"
        "model,k,loss_mean,loss_stderr,psnr_mean,psnr_stderr\n"
        "een,1,0.5,0,20,1.5\n"
        "een,4,0.25,0.125,100,0\n";
    CHECK(curve_csv(c, "een", "cafe") == expect);
    CHECK(curve_csv(c, "een", "cafe") == curve_csv(c, "een", "cafe"));
}
