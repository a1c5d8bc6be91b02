#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <string>
#include <unordered_map>

#include "een/datasets.hpp"

namespace een {

namespace {

// rng stream tags; far above any sample or episode index
constexpr std::uint64_t kMixingTag = 0xA0000000000001ull;

std::uint64_t hash_spec(const ModeOffsetSpec& s) {
    std::uint64_t h = fnv1a("mode_offset");
    auto mix = [&](std::uint64_t v) { h = fnv1a(&v, sizeof v, h); };
    mix(s.input_dim);
    mix(s.target_dim);
    mix(s.mode_count);
    mix(s.sample_count);
    mix(s.seed);
    h = fnv1a(std::vector<double>{s.a_scale, s.noise_sigma}, h);
    for (const auto& row : s.offsets) h = fnv1a(row, h);
    h = fnv1a(s.mixing, h);
    return h;
}

std::uint64_t hash_spec(const DotWorldSpec& s) {
    std::uint64_t h = fnv1a("dot_world");
    auto mix = [&](std::uint64_t v) { h = fnv1a(&v, sizeof v, h); };
    mix(s.grid);
    mix(s.context);
    mix(s.horizon);
    mix(s.episode_count);
    mix(s.episode_length);
    mix(s.seed);
    return h;
}

// Antipodal sign-pattern offsets: rows 2i and 2i+1 are +-p_i where
// p_i(j) = (-1)^popcount(i & j). Pairwise distinct, zero column means for
// even mode counts, all entries +-1.
std::vector<std::vector<double>> default_offsets(std::size_t modes, std::size_t dim) {
    std::vector<std::vector<double>> out(modes, std::vector<double>(dim));
    for (std::size_t m = 0; m < modes; ++m) {
        const std::size_t base = m / 2;
        const double sign = (m % 2 == 0) ? 1.0 : -1.0;
        for (std::size_t j = 0; j < dim; ++j) {
            const int bits = std::popcount(base & j);
            out[m][j] = sign * ((bits % 2 == 0) ? 1.0 : -1.0);
        }
    }
    return out;
}

Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx) {
    Dataset out;
    out.x_item = d.x_item;
    out.y_item = d.y_item;
    out.spec_hash = d.spec_hash;
    const std::size_t xn = numel(d.x_item), yn = numel(d.y_item);
    out.x.resize(idx.size() * xn);
    out.y.resize(idx.size() * yn);
    out.labels.reserve(idx.size());
    out.group.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::memcpy(out.x.data() + i * xn, d.x.data() + idx[i] * xn, xn * sizeof(double));
        std::memcpy(out.y.data() + i * yn, d.y.data() + idx[i] * yn, yn * sizeof(double));
        out.labels.push_back(d.labels[idx[i]]);
        out.group.push_back(d.group[idx[i]]);
    }
    return out;
}

}  // namespace

Tensor DataView::batch_x(const std::vector<std::size_t>& idx) const {
    Shape s{idx.size()};
    s.insert(s.end(), x_item.begin(), x_item.end());
    const std::size_t n = x_numel();
    std::vector<double> out(idx.size() * n);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= count)
            throw DataError("batch_x: index " + std::to_string(idx[i]) + " out of range " +
                            std::to_string(count));
        std::memcpy(out.data() + i * n, x_data + idx[i] * n, n * sizeof(double));
    }
    return Tensor::from(std::move(s), std::move(out));
}

Tensor DataView::batch_y(const std::vector<std::size_t>& idx) const {
    Shape s{idx.size()};
    s.insert(s.end(), y_item.begin(), y_item.end());
    const std::size_t n = y_numel();
    std::vector<double> out(idx.size() * n);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= count)
            throw DataError("batch_y: index " + std::to_string(idx[i]) + " out of range " +
                            std::to_string(count));
        std::memcpy(out.data() + i * n, y_data + idx[i] * n, n * sizeof(double));
    }
    return Tensor::from(std::move(s), std::move(out));
}

Dataset gen_mode_offset(const ModeOffsetSpec& spec) {
    const std::size_t d = spec.input_dim, t = spec.target_dim, M = spec.mode_count;
    if (d < 1 || t < 1) throw ConfigError("mode_offset: input_dim and target_dim must be >= 1");
    if (M < 2) throw ConfigError("mode_offset: mode_count must be >= 2");
    if (spec.noise_sigma < 0.0) throw ConfigError("mode_offset: noise_sigma must be >= 0");
    if (spec.sample_count < 1) throw ConfigError("mode_offset: sample_count must be >= 1");

    auto offsets = spec.offsets.empty() ? default_offsets(M, t) : spec.offsets;
    if (offsets.size() != M) throw ConfigError("mode_offset: need one offset per mode");
    for (const auto& row : offsets)
        if (row.size() != t) throw ConfigError("mode_offset: offsets must have target_dim entries");
    for (std::size_t a = 0; a < M; ++a)
        for (std::size_t b = a + 1; b < M; ++b)
            if (offsets[a] == offsets[b])
                throw ConfigError("mode_offset: offsets " + std::to_string(a) + " and " +
                                  std::to_string(b) + " coincide");

    std::vector<double> mixing = spec.mixing;
    if (mixing.empty()) {
        mixing.resize(t * d);
        Rng mrng(Rng::mix(spec.seed, kMixingTag));
        for (auto& v : mixing) v = mrng.uniform(-spec.a_scale, spec.a_scale);
    } else if (mixing.size() != t * d) {
        throw ConfigError("mode_offset: mixing map must be target_dim x input_dim");
    }

    Dataset out;
    out.x_item = {d};
    out.y_item = {t};
    const std::size_t n = spec.sample_count;
    out.x.resize(n * d);
    out.y.resize(n * t);
    out.labels.resize(n);
    out.group.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(Rng::mix(spec.seed, i));
        double* xi = out.x.data() + i * d;
        double* yi = out.y.data() + i * t;
        for (std::size_t j = 0; j < d; ++j) xi[j] = rng.uniform(-1.0, 1.0);
        const std::size_t m = rng.below(M);
        for (std::size_t r = 0; r < t; ++r) {
            double acc = offsets[m][r];
            for (std::size_t j = 0; j < d; ++j) acc += mixing[r * d + j] * xi[j];
            if (spec.noise_sigma > 0.0) acc += spec.noise_sigma * rng.normal();
            yi[r] = acc;
        }
        out.labels[i] = static_cast<int>(m);
        out.group[i] = i;
    }

    double maxabs = 0.0;
    for (double v : out.y) maxabs = std::max(maxabs, std::abs(v));
    const double scale = 1.0 / std::max(1.0, maxabs);
    if (scale != 1.0)
        for (double& v : out.y) v *= scale;

    out.spec_hash = hash_spec(spec);
    return out;
}

Dataset gen_dot_world(const DotWorldSpec& spec) {
    const std::size_t G = spec.grid, L = spec.episode_length;
    if (G < 8) throw ConfigError("dot_world: grid must be >= 8");
    if (spec.context < 1 || spec.horizon < 1)
        throw ConfigError("dot_world: context and horizon must be >= 1");
    if (spec.context + spec.horizon > L)
        throw ConfigError("dot_world: context " + std::to_string(spec.context) + " + horizon " +
                          std::to_string(spec.horizon) + " exceeds episode length " +
                          std::to_string(L));
    if (spec.episode_count < 1) throw ConfigError("dot_world: episode_count must be >= 1");

    const std::size_t per_ep = L - spec.context - spec.horizon + 1;
    const std::size_t n = spec.episode_count * per_ep;
    const std::size_t plane = G * G;

    Dataset out;
    out.x_item = {spec.context, G, G};
    out.y_item = {spec.horizon, G, G};
    out.x.assign(n * spec.context * plane, -1.0);
    out.y.assign(n * spec.horizon * plane, -1.0);
    out.labels.resize(n);
    out.group.resize(n);

    const int ball_max_row = static_cast<int>(G) - 3;  // ball stays above the paddle row
    const int paddle_row = static_cast<int>(G) - 2;
    const int gmax = static_cast<int>(G) - 1;

    std::vector<double> frames(L * plane);
    std::vector<int> moves(L, 0);
    std::size_t cursor = 0;
    for (std::size_t e = 0; e < spec.episode_count; ++e) {
        Rng rng(Rng::mix(spec.seed, e));
        int br = static_cast<int>(rng.below(static_cast<std::size_t>(ball_max_row) + 1));
        int bc = static_cast<int>(rng.below(G));
        int vr = rng.below(2) == 0 ? -1 : 1;
        int vc = rng.below(2) == 0 ? -1 : 1;
        int p = static_cast<int>(rng.below(G));

        std::fill(frames.begin(), frames.end(), -1.0);
        for (std::size_t tstep = 0; tstep < L; ++tstep) {
            if (tstep > 0) {
                int nr = br + vr;
                if (nr < 0 || nr > ball_max_row) {
                    vr = -vr;
                    nr = br + vr;
                }
                int nc = bc + vc;
                if (nc < 0 || nc > gmax) {
                    vc = -vc;
                    nc = bc + vc;
                }
                br = nr;
                bc = nc;
                const int mv = static_cast<int>(rng.below(3)) - 1;
                moves[tstep] = mv;
                p = std::clamp(p + mv, 0, gmax);
            }
            double* f = frames.data() + tstep * plane;
            f[br * static_cast<int>(G) + bc] = 1.0;
            f[paddle_row * static_cast<int>(G) + p] = 1.0;
        }

        for (std::size_t t0 = 0; t0 < per_ep; ++t0) {
            double* xi = out.x.data() + cursor * spec.context * plane;
            std::memcpy(xi, frames.data() + t0 * plane, spec.context * plane * sizeof(double));
            double* yi = out.y.data() + cursor * spec.horizon * plane;
            std::memcpy(yi, frames.data() + (t0 + spec.context) * plane,
                        spec.horizon * plane * sizeof(double));
            out.labels[cursor] = moves[t0 + spec.context];
            out.group[cursor] = e;
            ++cursor;
        }
    }

    out.spec_hash = hash_spec(spec);
    return out;
}

SplitResult split(const Dataset& d, const std::array<double, 3>& fractions, std::uint64_t seed) {
    const double total = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(total - 1.0) > 1e-9)
        throw ConfigError("split: fractions sum to " + std::to_string(total) + ", expected 1");
    if (d.size() == 0) throw DataError("split: empty dataset");

    std::vector<std::size_t> groups = d.group;
    std::sort(groups.begin(), groups.end());
    groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
    Rng rng(Rng::mix(seed, 0x5B11Dull));
    rng.shuffle(groups);

    const auto gn = static_cast<double>(groups.size());
    const auto c1 = static_cast<std::size_t>(std::llround(fractions[0] * gn));
    const auto c2 = static_cast<std::size_t>(std::llround((fractions[0] + fractions[1]) * gn));

    // partition per group id: 0 train, 1 val, 2 test
    std::unordered_map<std::size_t, int> part_of;
    part_of.reserve(groups.size());
    for (std::size_t pos = 0; pos < groups.size(); ++pos)
        part_of[groups[pos]] = pos < c1 ? 0 : (pos < c2 ? 1 : 2);

    std::vector<std::vector<std::size_t>> idx(3);
    for (std::size_t i = 0; i < d.size(); ++i)
        idx[static_cast<std::size_t>(part_of[d.group[i]])].push_back(i);
    for (int part = 0; part < 3; ++part)
        if (idx[static_cast<std::size_t>(part)].empty())
            throw ConfigError("split: partition " + std::to_string(part) +
                              " came out empty; adjust fractions or dataset size");

    return SplitResult{subset(d, idx[0]), subset(d, idx[1]), subset(d, idx[2])};
}

}  // namespace een
