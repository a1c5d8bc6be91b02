#include <cmath>
#include <string>
#include <utility>

#include "een/model.hpp"

namespace een {

namespace {

DenseLayer make_linear(std::size_t out, std::size_t in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    DenseLayer l;
    l.w = Tensor::uniform({out, in}, rng, -bound, bound).set_requires_grad(true);
    l.b = Tensor::uniform({out}, rng, -bound, bound).set_requires_grad(true);
    return l;
}

ConvBlock make_conv(Shape ks, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    ConvBlock c;
    c.k = Tensor::uniform(std::move(ks), rng, -bound, bound).set_requires_grad(true);
    return c;
}

BnLayer make_bn(std::size_t channels) {
    BnLayer l;
    l.gamma = Tensor::full({channels}, 1.0).set_requires_grad(true);
    l.beta = Tensor::zeros({channels}).set_requires_grad(true);
    l.state = BatchNormState(channels);
    return l;
}

// Three encoder and three decoder layers; stride-2 4x4 kernels halve or
// double each spatial extent in the conv arch.
EncoderDecoder build_coder(const ArchSpec& a, Rng& rng) {
    EncoderDecoder ed;
    if (a.kind == ArchKind::Fc) {
        ed.fc_enc.push_back(make_linear(a.hidden_dim, a.input_dim, rng));
        ed.fc_enc.push_back(make_linear(a.hidden_dim, a.hidden_dim, rng));
        ed.fc_enc.push_back(make_linear(a.hidden_dim, a.hidden_dim, rng));
        ed.fc_dec.push_back(make_linear(a.hidden_dim, a.hidden_dim, rng));
        ed.fc_dec.push_back(make_linear(a.hidden_dim, a.hidden_dim, rng));
        ed.fc_dec.push_back(make_linear(a.target_dim, a.hidden_dim, rng));
        for (int i = 0; i < 3; ++i) ed.enc_bn.push_back(make_bn(a.hidden_dim));
        for (int i = 0; i < 2; ++i) ed.dec_bn.push_back(make_bn(a.hidden_dim));
    } else {
        const std::size_t F = a.feature_maps;
        ed.conv_enc.push_back(make_conv({F, a.in_channels, 4, 4}, a.in_channels * 16, rng));
        ed.conv_enc.push_back(make_conv({F, F, 4, 4}, F * 16, rng));
        ed.conv_enc.push_back(make_conv({F, F, 4, 4}, F * 16, rng));
        // transpose kernels are [in_channels, out_channels, kH, kW]
        ed.conv_dec.push_back(make_conv({F, F, 4, 4}, F * 16, rng));
        ed.conv_dec.push_back(make_conv({F, F, 4, 4}, F * 16, rng));
        ed.conv_dec.push_back(make_conv({F, a.out_channels, 4, 4}, F * 16, rng));
        ed.out_bias = Tensor::zeros({a.out_channels}).set_requires_grad(true);
        for (int i = 0; i < 3; ++i) ed.enc_bn.push_back(make_bn(F));
        for (int i = 0; i < 2; ++i) ed.dec_bn.push_back(make_bn(F));
    }
    return ed;
}

PhiNetwork build_phi(const ArchSpec& a, Rng& rng) {
    PhiNetwork p;
    if (a.kind == ArchKind::Fc) {
        p.fc.push_back(make_linear(a.phi_hidden, a.target_dim, rng));
        p.fc.push_back(make_linear(a.phi_hidden, a.phi_hidden, rng));
        p.fc.push_back(make_linear(a.latent_dim, a.phi_hidden, rng));
    } else {
        const std::size_t F = a.feature_maps;
        const double b0 = 1.0 / std::sqrt(static_cast<double>(a.out_channels * 16));
        p.conv.push_back(make_conv({F, a.out_channels, 4, 4}, a.out_channels * 16, rng));
        p.conv_bias.push_back(Tensor::uniform({F}, rng, -b0, b0).set_requires_grad(true));
        const double b1 = 1.0 / std::sqrt(static_cast<double>(F * 16));
        p.conv.push_back(make_conv({F, F, 4, 4}, F * 16, rng));
        p.conv_bias.push_back(Tensor::uniform({F}, rng, -b1, b1).set_requires_grad(true));
        const std::size_t q = a.image_size / 4;  // two stride-2 layers
        p.fc.push_back(make_linear(a.phi_hidden, F * q * q, rng));
        p.fc.push_back(make_linear(a.latent_dim, a.phi_hidden, rng));
    }
    return p;
}

BnLayer clone_bn(const BnLayer& b) {
    BnLayer c;
    c.gamma = b.gamma.clone();
    c.beta = b.beta.clone();
    c.state = b.state;
    return c;
}

// Visits every trainable tensor of a coder with a stable name, grouped per
// layer. The same order backs optimizer slots and checkpoints.
template <class F>
void coder_params(const std::string& pre, EncoderDecoder& ed, F&& f) {
    const bool fc = !ed.fc_enc.empty();
    const std::size_t ne = fc ? ed.fc_enc.size() : ed.conv_enc.size();
    for (std::size_t i = 0; i < ne; ++i) {
        const std::string b = pre + ".enc" + std::to_string(i);
        if (fc) {
            f(b + ".w", ed.fc_enc[i].w);
            f(b + ".b", ed.fc_enc[i].b);
        } else {
            f(b + ".k", ed.conv_enc[i].k);
        }
        f(b + ".bn.g", ed.enc_bn[i].gamma);
        f(b + ".bn.b", ed.enc_bn[i].beta);
    }
    const std::size_t nd = fc ? ed.fc_dec.size() : ed.conv_dec.size();
    for (std::size_t i = 0; i < nd; ++i) {
        const std::string b = pre + ".dec" + std::to_string(i);
        if (fc) {
            f(b + ".w", ed.fc_dec[i].w);
            f(b + ".b", ed.fc_dec[i].b);
        } else {
            f(b + ".k", ed.conv_dec[i].k);
        }
        if (i < ed.dec_bn.size()) {
            f(b + ".bn.g", ed.dec_bn[i].gamma);
            f(b + ".bn.b", ed.dec_bn[i].beta);
        }
    }
    if (ed.out_bias.defined()) f(pre + ".out_bias", ed.out_bias);
}

template <class F>
void coder_stats(const std::string& pre, EncoderDecoder& ed, F&& f) {
    for (std::size_t i = 0; i < ed.enc_bn.size(); ++i) {
        const std::string b = pre + ".enc" + std::to_string(i) + ".bn.";
        f(b + "mean", ed.enc_bn[i].state.running_mean);
        f(b + "var", ed.enc_bn[i].state.running_var);
    }
    for (std::size_t i = 0; i < ed.dec_bn.size(); ++i) {
        const std::string b = pre + ".dec" + std::to_string(i) + ".bn.";
        f(b + "mean", ed.dec_bn[i].state.running_mean);
        f(b + "var", ed.dec_bn[i].state.running_var);
    }
}

template <class F>
void phi_params(PhiNetwork& p, F&& f) {
    for (std::size_t i = 0; i < p.conv.size(); ++i) {
        f("phi.conv" + std::to_string(i) + ".k", p.conv[i].k);
        f("phi.conv" + std::to_string(i) + ".b", p.conv_bias[i]);
    }
    for (std::size_t i = 0; i < p.fc.size(); ++i) {
        f("phi.fc" + std::to_string(i) + ".w", p.fc[i].w);
        f("phi.fc" + std::to_string(i) + ".b", p.fc[i].b);
    }
}

}  // namespace

ModelBundle ModelBundle::create(const ArchSpec& arch, WeightMode mode, Rng& rng,
                                InjectionInit inj) {
    if (arch.latent_dim == 0) throw LatentError("model: latent_dim must be at least 1");
    if (arch.latent_dim >= arch.target_numel())
        throw LatentError("model: latent_dim " + std::to_string(arch.latent_dim) +
                          " must stay below the flattened target dimension " +
                          std::to_string(arch.target_numel()));
    if (arch.kind == ArchKind::Conv) {
        if (arch.image_size < 8 || arch.image_size % 8 != 0)
            throw ShapeError("model: conv arch needs image_size divisible by 8, got " +
                             std::to_string(arch.image_size));
        if (arch.in_channels == 0 || arch.out_channels == 0 || arch.feature_maps == 0)
            throw ShapeError("model: conv channel counts must be positive");
    } else if (arch.input_dim == 0 || arch.target_dim == 0 || arch.hidden_dim == 0) {
        throw ShapeError("model: fc dimensions must be positive");
    }

    ModelBundle b;
    b.arch_ = arch;
    b.mode_ = mode;
    b.theta_ = build_coder(arch, rng);
    const std::size_t ic = arch.injection_channels();
    if (inj == InjectionInit::Zero) {
        b.inject_.w = Tensor::zeros({ic, arch.latent_dim}).set_requires_grad(true);
    } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(arch.latent_dim));
        b.inject_.w =
            Tensor::uniform({ic, arch.latent_dim}, rng, -bound, bound).set_requires_grad(true);
    }
    b.phi_ = build_phi(arch, rng);
    return b;
}

Tensor ModelBundle::run_coder(EncoderDecoder& ed, const Tensor& x,
                              const std::optional<Tensor>& inj, BnMode mode) {
    Tensor h = x;
    if (arch_.kind == ArchKind::Fc) {
        for (std::size_t i = 0; i < ed.fc_enc.size(); ++i) {
            h = linear(h, ed.fc_enc[i].w, ed.fc_enc[i].b);
            h = batch_norm(h, ed.enc_bn[i].gamma, ed.enc_bn[i].beta, ed.enc_bn[i].state, mode);
            h = activation(h, Activation::Relu);
        }
        if (inj) h = add(h, *inj);
        for (std::size_t i = 0; i + 1 < ed.fc_dec.size(); ++i) {
            h = linear(h, ed.fc_dec[i].w, ed.fc_dec[i].b);
            h = batch_norm(h, ed.dec_bn[i].gamma, ed.dec_bn[i].beta, ed.dec_bn[i].state, mode);
            h = activation(h, Activation::Relu);
        }
        h = linear(h, ed.fc_dec.back().w, ed.fc_dec.back().b);
    } else {
        for (std::size_t i = 0; i < ed.conv_enc.size(); ++i) {
            h = conv2d(h, ed.conv_enc[i].k, 2, 1);
            h = batch_norm(h, ed.enc_bn[i].gamma, ed.enc_bn[i].beta, ed.enc_bn[i].state, mode);
            h = activation(h, Activation::Relu);
        }
        if (inj) h = add_channel_bias(h, *inj);
        for (std::size_t i = 0; i + 1 < ed.conv_dec.size(); ++i) {
            h = conv_transpose2d(h, ed.conv_dec[i].k, 2, 1);
            h = batch_norm(h, ed.dec_bn[i].gamma, ed.dec_bn[i].beta, ed.dec_bn[i].state, mode);
            h = activation(h, Activation::Relu);
        }
        h = conv_transpose2d(h, ed.conv_dec.back().k, 2, 1);
        h = add_channel_bias(h, ed.out_bias);
    }
    return activation(h, Activation::Tanh);
}

Tensor ModelBundle::forward(const Tensor& x, const std::optional<Tensor>& z, BnMode mode) {
    const Shape& xs = x.shape();
    const Shape want = arch_.input_shape(xs.empty() ? 0 : xs[0]);
    if (xs != want)
        throw ShapeError("forward: input " + shape_str(xs) + " does not match architecture " +
                         shape_str(want));
    std::optional<Tensor> inj;
    if (z) {
        const Shape& zs = z->shape();
        if (zs.size() != 2 || zs[0] != xs[0] || zs[1] != arch_.latent_dim)
            throw LatentError("forward: latent " + shape_str(zs) + " does not match batch " +
                              std::to_string(xs[0]) + " with latent_dim " +
                              std::to_string(arch_.latent_dim));
        inj = matmul_nt(*z, inject_.w);
    }
    return run_coder(theta_, x, inj, mode);
}

Tensor ModelBundle::residual(const Tensor& x, const Tensor& y) {
    const Shape& xs = x.shape();
    if (xs != arch_.input_shape(xs.empty() ? 0 : xs[0]))
        throw ShapeError("residual: input " + shape_str(xs) + " does not match architecture");
    if (y.shape() != arch_.target_shape(xs[0]))
        throw ShapeError("residual: target " + shape_str(y.shape()) + " does not match " +
                         shape_str(arch_.target_shape(xs[0])));
    EncoderDecoder* src = &theta_;
    if (mode_ == WeightMode::Snapshot) {
        if (!snapshot_taken_)
            throw LifecycleError("residual: snapshot weights requested before snapshot()");
        src = &theta_minus_;
    }
    NoGradGuard ng;
    Tensor pred = run_coder(*src, x, std::nullopt, BnMode::Eval);
    return sub(y, pred);
}

Tensor ModelBundle::encode_error(const Tensor& r) {
    const Shape& rs = r.shape();
    if (rs != arch_.target_shape(rs.empty() ? 0 : rs[0]))
        throw ShapeError("encode_error: residual " + shape_str(rs) + " does not match target " +
                         shape_str(arch_.target_shape(rs.empty() ? 0 : rs[0])));
    Tensor h = r;
    if (arch_.kind == ArchKind::Conv) {
        for (std::size_t i = 0; i < phi_.conv.size(); ++i) {
            h = conv2d(h, phi_.conv[i].k, 2, 1);
            h = add_channel_bias(h, phi_.conv_bias[i]);
            h = activation(h, Activation::Relu);
        }
        h = flatten(h);
    }
    for (std::size_t i = 0; i < phi_.fc.size(); ++i) {
        h = linear(h, phi_.fc[i].w, phi_.fc[i].b);
        if (i + 1 < phi_.fc.size()) h = activation(h, Activation::Relu);
    }
    return h;
}

void ModelBundle::snapshot() {
    EncoderDecoder c;
    for (auto& l : theta_.fc_enc) c.fc_enc.push_back({l.w.clone(), l.b.clone()});
    for (auto& l : theta_.fc_dec) c.fc_dec.push_back({l.w.clone(), l.b.clone()});
    for (auto& l : theta_.conv_enc) c.conv_enc.push_back({l.k.clone()});
    for (auto& l : theta_.conv_dec) c.conv_dec.push_back({l.k.clone()});
    if (theta_.out_bias.defined()) c.out_bias = theta_.out_bias.clone();
    for (auto& b : theta_.enc_bn) c.enc_bn.push_back(clone_bn(b));
    for (auto& b : theta_.dec_bn) c.dec_bn.push_back(clone_bn(b));
    theta_minus_ = std::move(c);
    snapshot_taken_ = true;
}

std::vector<std::pair<std::string, Tensor>> ModelBundle::named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    auto take = [&](const std::string& n, Tensor& t) { out.emplace_back(n, t); };
    coder_params("theta", theta_, take);
    take("theta.inject.w", inject_.w);
    phi_params(phi_, take);
    return out;
}

std::vector<ModelBundle::ArrayRef> ModelBundle::state_arrays() {
    std::vector<ArrayRef> out;
    auto take_t = [&](const std::string& n, Tensor& t) {
        out.push_back({n, t.shape(), t.mutable_data()});
    };
    auto take_v = [&](const std::string& n, std::vector<double>& v) {
        out.push_back({n, Shape{v.size()}, std::span<double>(v)});
    };
    coder_params("theta", theta_, take_t);
    take_t("theta.inject.w", inject_.w);
    phi_params(phi_, take_t);
    coder_stats("theta", theta_, take_v);
    if (snapshot_taken_) {
        coder_params("theta_minus", theta_minus_, take_t);
        coder_stats("theta_minus", theta_minus_, take_v);
    }
    return out;
}

std::uint64_t ModelBundle::checksum() {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (auto& a : state_arrays()) {
        h = fnv1a(a.name, h);
        h = fnv1a(a.data.data(), a.data.size_bytes(), h);
    }
    return h;
}

}  // namespace een
