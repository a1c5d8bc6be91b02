#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "een/tensor.hpp"

namespace een {

enum class ArchKind { Fc, Conv };

// Residual source for conditional training: Snapshot uses a frozen copy of
// the deterministic-phase weights, Joint uses the live weights.
enum class WeightMode { Snapshot, Joint };

enum class InjectionInit { Zero, Uniform };

struct ArchSpec {
    ArchKind kind = ArchKind::Fc;

    // fc: vector inputs/targets
    std::size_t input_dim = 4;
    std::size_t target_dim = 8;
    std::size_t hidden_dim = 64;

    // conv: square frames, context frames stacked as input channels
    std::size_t in_channels = 4;
    std::size_t out_channels = 1;
    std::size_t image_size = 16;
    std::size_t feature_maps = 64;

    std::size_t latent_dim = 2;
    std::size_t phi_hidden = 64;

    // channel count at the injection site f1(x) + Wz
    std::size_t injection_channels() const {
        return kind == ArchKind::Conv ? feature_maps : hidden_dim;
    }
    std::size_t target_numel() const {
        return kind == ArchKind::Conv ? out_channels * image_size * image_size : target_dim;
    }
    Shape input_shape(std::size_t n) const {
        return kind == ArchKind::Conv ? Shape{n, in_channels, image_size, image_size}
                                      : Shape{n, input_dim};
    }
    Shape target_shape(std::size_t n) const {
        return kind == ArchKind::Conv ? Shape{n, out_channels, image_size, image_size}
                                      : Shape{n, target_dim};
    }
};

struct DenseLayer {
    Tensor w, b;  // w [out, in]
};

struct ConvBlock {
    Tensor k;
};

struct BnLayer {
    Tensor gamma, beta;
    BatchNormState state;
};

// Encoder f1 and decoder f2. Three layers each; batch norm everywhere except
// the final decoder layer, which ends in tanh.
struct EncoderDecoder {
    std::vector<DenseLayer> fc_enc, fc_dec;
    std::vector<ConvBlock> conv_enc, conv_dec;
    Tensor out_bias;  // conv arch: per-channel bias on the last deconv
    std::vector<BnLayer> enc_bn, dec_bn;
};

// W of f2(f1(x) + Wz): one value per injection channel, broadcast over
// spatial positions in the conv arch.
struct LatentInjector {
    Tensor w;  // [injection_channels, latent_dim]
};

// phi: residual -> z. Trunk without batch norm (keeps z a per-sample
// function), then two fully-connected layers ending at latent_dim.
struct PhiNetwork {
    std::vector<ConvBlock> conv;  // conv arch trunk
    std::vector<Tensor> conv_bias;
    std::vector<DenseLayer> fc;
};

// Everything one experiment trains: live weights theta (encoder/decoder plus
// injection), the optional frozen snapshot theta_minus, and phi.
class ModelBundle {
  public:
    static ModelBundle create(const ArchSpec& arch, WeightMode mode, Rng& rng,
                              InjectionInit inj = InjectionInit::Zero);

    // f2(f1(x) + Wz). Without z the injection term is skipped entirely, so
    // the result cannot depend on W or phi.
    Tensor forward(const Tensor& x, const std::optional<Tensor>& z, BnMode mode);

    // y - f(x, 0) through theta_minus (Snapshot) or live theta (Joint), batch
    // norm in eval mode, detached from any tape.
    Tensor residual(const Tensor& x, const Tensor& y);

    // z = phi(residual); differentiable w.r.t. phi parameters.
    Tensor encode_error(const Tensor& residual);

    // Deep-copies theta's encoder/decoder (values and running statistics)
    // into theta_minus.
    void snapshot();
    bool has_snapshot() const { return snapshot_taken_; }

    WeightMode mode() const { return mode_; }
    const ArchSpec& arch() const { return arch_; }

    // Trainable tensors, stable names, deterministic order.
    std::vector<std::pair<std::string, Tensor>> named_parameters();
    // Every array that defines the bundle state: parameters, batch-norm
    // running statistics, and the snapshot copies. For checkpoint I/O.
    struct ArrayRef {
        std::string name;
        Shape shape;
        std::span<double> data;
    };
    std::vector<ArrayRef> state_arrays();

    std::uint64_t checksum();  // over state_arrays, order-sensitive

    // Set once conditional (or joint) training has produced a usable phi.
    bool conditional_trained = false;

  private:
    ModelBundle() = default;
    Tensor run_coder(EncoderDecoder& ed, const Tensor& x, const std::optional<Tensor>& inj,
                     BnMode mode);

    ArchSpec arch_;
    WeightMode mode_ = WeightMode::Snapshot;
    EncoderDecoder theta_;
    EncoderDecoder theta_minus_;
    bool snapshot_taken_ = false;
    LatentInjector inject_;
    PhiNetwork phi_;
};

}  // namespace een
