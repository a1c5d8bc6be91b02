#include <cmath>

#include "een/tensor.hpp"

namespace een {

namespace {

using std::ptrdiff_t;
using std::size_t;

// Valid output index range [lo, hi) for in = out*stride + off, in in [0, extent).
void clip_range(ptrdiff_t off, ptrdiff_t stride, ptrdiff_t extent, ptrdiff_t count, ptrdiff_t& lo,
                ptrdiff_t& hi) {
    lo = off < 0 ? (-off + stride - 1) / stride : 0;
    // division must floor: a negative numerator means no index fits at all
    const ptrdiff_t top = extent - 1 - off;
    hi = top < 0 ? 0 : top / stride + 1;
    if (hi > count) hi = count;
    if (lo > hi) lo = hi;
}

struct ConvDims {
    size_t N, C, H, W;    // input
    size_t F, kH, kW;     // kernel
    size_t Ho, Wo;        // output
    ptrdiff_t stride, pad;
};

// out[n,f,i,j] += sum_{c,u,v} src[n,c,i*s-p+u,j*s-p+v] * ker[n/a: f,c,u,v].
// Shared by conv2d forward and conv_transpose2d input-gradient.
void gather_conv(const ConvDims& d, const double* src, const double* ker, bool ker_fc, double* out) {
    for (size_t n = 0; n < d.N; ++n) {
        for (size_t f = 0; f < d.F; ++f) {
            double* out_nf = out + ((n * d.F + f) * d.Ho) * d.Wo;
            for (size_t c = 0; c < d.C; ++c) {
                const double* src_nc = src + ((n * d.C + c) * d.H) * d.W;
                // ker layout [F,C,kH,kW] when ker_fc, else [C,F,kH,kW]
                const double* k_fc = ker + ((ker_fc ? f * d.C + c : c * d.F + f) * d.kH) * d.kW;
                for (size_t u = 0; u < d.kH; ++u) {
                    const ptrdiff_t roff = static_cast<ptrdiff_t>(u) - d.pad;
                    ptrdiff_t ilo, ihi;
                    clip_range(roff, d.stride, static_cast<ptrdiff_t>(d.H),
                               static_cast<ptrdiff_t>(d.Ho), ilo, ihi);
                    for (ptrdiff_t i = ilo; i < ihi; ++i) {
                        const double* srow = src_nc + (i * d.stride + roff) * static_cast<ptrdiff_t>(d.W);
                        double* orow = out_nf + i * static_cast<ptrdiff_t>(d.Wo);
                        for (size_t v = 0; v < d.kW; ++v) {
                            const double kval = k_fc[u * d.kW + v];
                            if (kval == 0.0) continue;
                            const ptrdiff_t coff = static_cast<ptrdiff_t>(v) - d.pad;
                            ptrdiff_t jlo, jhi;
                            clip_range(coff, d.stride, static_cast<ptrdiff_t>(d.W),
                                       static_cast<ptrdiff_t>(d.Wo), jlo, jhi);
                            for (ptrdiff_t j = jlo; j < jhi; ++j)
                                orow[j] += kval * srow[j * d.stride + coff];
                        }
                    }
                }
            }
        }
    }
}

// out[n,c,i*s-p+u,j*s-p+v] += sum ... src[n,f,i,j] * ker[f,c,u,v]; the adjoint
// scatter of gather_conv. Shared by conv_transpose2d forward and conv2d
// input-gradient.
void scatter_conv(const ConvDims& d, const double* src, const double* ker, bool ker_fc, double* out) {
    for (size_t n = 0; n < d.N; ++n) {
        for (size_t f = 0; f < d.F; ++f) {
            const double* src_nf = src + ((n * d.F + f) * d.Ho) * d.Wo;
            for (size_t c = 0; c < d.C; ++c) {
                double* out_nc = out + ((n * d.C + c) * d.H) * d.W;
                const double* k_fc = ker + ((ker_fc ? f * d.C + c : c * d.F + f) * d.kH) * d.kW;
                for (size_t u = 0; u < d.kH; ++u) {
                    const ptrdiff_t roff = static_cast<ptrdiff_t>(u) - d.pad;
                    ptrdiff_t ilo, ihi;
                    clip_range(roff, d.stride, static_cast<ptrdiff_t>(d.H),
                               static_cast<ptrdiff_t>(d.Ho), ilo, ihi);
                    for (ptrdiff_t i = ilo; i < ihi; ++i) {
                        double* orow = out_nc + (i * d.stride + roff) * static_cast<ptrdiff_t>(d.W);
                        const double* srow = src_nf + i * static_cast<ptrdiff_t>(d.Wo);
                        for (size_t v = 0; v < d.kW; ++v) {
                            const double kval = k_fc[u * d.kW + v];
                            if (kval == 0.0) continue;
                            const ptrdiff_t coff = static_cast<ptrdiff_t>(v) - d.pad;
                            ptrdiff_t jlo, jhi;
                            clip_range(coff, d.stride, static_cast<ptrdiff_t>(d.W),
                                       static_cast<ptrdiff_t>(d.Wo), jlo, jhi);
                            for (ptrdiff_t j = jlo; j < jhi; ++j)
                                orow[j * d.stride + coff] += kval * srow[j];
                        }
                    }
                }
            }
        }
    }
}

// ker_grad[f,c,u,v] += sum_{n,i,j} gout[n,f,i,j] * src[n,c,i*s-p+u,j*s-p+v]
void kernel_grad(const ConvDims& d, const double* src, const double* gout, bool ker_fc, double* kgrad) {
    for (size_t n = 0; n < d.N; ++n) {
        for (size_t f = 0; f < d.F; ++f) {
            const double* g_nf = gout + ((n * d.F + f) * d.Ho) * d.Wo;
            for (size_t c = 0; c < d.C; ++c) {
                const double* src_nc = src + ((n * d.C + c) * d.H) * d.W;
                double* kg = kgrad + ((ker_fc ? f * d.C + c : c * d.F + f) * d.kH) * d.kW;
                for (size_t u = 0; u < d.kH; ++u) {
                    const ptrdiff_t roff = static_cast<ptrdiff_t>(u) - d.pad;
                    ptrdiff_t ilo, ihi;
                    clip_range(roff, d.stride, static_cast<ptrdiff_t>(d.H),
                               static_cast<ptrdiff_t>(d.Ho), ilo, ihi);
                    for (size_t v = 0; v < d.kW; ++v) {
                        const ptrdiff_t coff = static_cast<ptrdiff_t>(v) - d.pad;
                        ptrdiff_t jlo, jhi;
                        clip_range(coff, d.stride, static_cast<ptrdiff_t>(d.W),
                                   static_cast<ptrdiff_t>(d.Wo), jlo, jhi);
                        double acc = 0.0;
                        for (ptrdiff_t i = ilo; i < ihi; ++i) {
                            const double* srow =
                                src_nc + (i * d.stride + roff) * static_cast<ptrdiff_t>(d.W) + coff;
                            const double* grow = g_nf + i * static_cast<ptrdiff_t>(d.Wo);
                            for (ptrdiff_t j = jlo; j < jhi; ++j) acc += grow[j] * srow[j * d.stride];
                        }
                        kg[u * d.kW + v] += acc;
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad) {
    const Shape& xs = x.shape();
    const Shape& ks = kernel.shape();
    if (xs.size() != 4 || ks.size() != 4)
        throw ShapeError("conv2d: expected rank-4 input and kernel, got " + shape_str(xs) + " and " +
                         shape_str(ks));
    if (ks[1] != xs[1])
        throw ShapeError("conv2d: kernel channels " + shape_str(ks) + " do not match input " +
                         shape_str(xs));
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    const size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const size_t F = ks[0], kH = ks[2], kW = ks[3];
    if (H + 2 * pad < kH || W + 2 * pad < kW)
        throw ShapeError("conv2d: kernel " + shape_str(ks) + " larger than padded input " +
                         shape_str(xs) + " with pad " + std::to_string(pad));
    const size_t Ho = (H + 2 * pad - kH) / stride + 1;
    const size_t Wo = (W + 2 * pad - kW) / stride + 1;
    const ConvDims d{N,  C,  H,  W, F, kH, kW, Ho, Wo, static_cast<ptrdiff_t>(stride),
                     static_cast<ptrdiff_t>(pad)};

    std::vector<double> out(N * F * Ho * Wo, 0.0);
    gather_conv(d, x.data().data(), kernel.data().data(), true, out.data());

    return make_op({N, F, Ho, Wo}, std::move(out), {x, kernel}, [d](detail::TensorNode& self) {
        auto& xn = *self.parents[0];
        auto& kn = *self.parents[1];
        if (xn.needs_grad) {
            xn.ensure_grad();
            scatter_conv(d, self.grad.data(), kn.value.data(), true, xn.grad.data());
        }
        if (kn.needs_grad) {
            kn.ensure_grad();
            kernel_grad(d, xn.value.data(), self.grad.data(), true, kn.grad.data());
        }
    });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad) {
    const Shape& xs = x.shape();
    const Shape& ks = kernel.shape();
    if (xs.size() != 4 || ks.size() != 4)
        throw ShapeError("conv_transpose2d: expected rank-4 input and kernel, got " + shape_str(xs) +
                         " and " + shape_str(ks));
    if (ks[0] != xs[1])
        throw ShapeError("conv_transpose2d: kernel input channels " + shape_str(ks) +
                         " do not match input " + shape_str(xs));
    if (stride < 1) throw ShapeError("conv_transpose2d: stride must be >= 1");
    const size_t N = xs[0], Cin = xs[1], Hin = xs[2], Win = xs[3];
    const size_t Fout = ks[1], kH = ks[2], kW = ks[3];
    const ptrdiff_t Hout = static_cast<ptrdiff_t>((Hin - 1) * stride + kH) - 2 * static_cast<ptrdiff_t>(pad);
    const ptrdiff_t Wout = static_cast<ptrdiff_t>((Win - 1) * stride + kW) - 2 * static_cast<ptrdiff_t>(pad);
    if (Hout < 1 || Wout < 1)
        throw ShapeError("conv_transpose2d: computed output extent " + std::to_string(Hout) + "x" +
                         std::to_string(Wout) + " is not positive");

    // ConvDims describes the dense grid in C/H/W and the strided grid in
    // F/Ho/Wo. The transpose swaps the tensor roles: its output is the dense
    // grid, its input the strided one. The [Cin,Fout,kH,kW] kernel layout
    // indexes strided channels first, matching the gather/scatter (f,c) order.
    const ConvDims dims{N,
                        Fout,
                        static_cast<size_t>(Hout),
                        static_cast<size_t>(Wout),
                        Cin,
                        kH,
                        kW,
                        Hin,
                        Win,
                        static_cast<ptrdiff_t>(stride),
                        static_cast<ptrdiff_t>(pad)};

    std::vector<double> out(N * Fout * static_cast<size_t>(Hout) * static_cast<size_t>(Wout), 0.0);
    scatter_conv(dims, x.data().data(), kernel.data().data(), true, out.data());

    return make_op({N, Fout, static_cast<size_t>(Hout), static_cast<size_t>(Wout)}, std::move(out),
                   {x, kernel}, [dims](detail::TensorNode& self) {
                       auto& xn = *self.parents[0];
                       auto& kn = *self.parents[1];
                       if (xn.needs_grad) {
                           xn.ensure_grad();
                           gather_conv(dims, self.grad.data(), kn.value.data(), true, xn.grad.data());
                       }
                       if (kn.needs_grad) {
                           kn.ensure_grad();
                           kernel_grad(dims, self.grad.data(), xn.value.data(), true, kn.grad.data());
                       }
                   });
}

}  // namespace een
