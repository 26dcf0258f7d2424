#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "lefm/exponent_table.hpp"
#include "lefm/lefm_layer.hpp"
#include "lefm/nn/tensor.hpp"

// Differentiable operators on B x C x H x W tensors. Every op validates shapes,
// checks its output for NaN/Inf and, when recording, installs a backward closure
// that accumulates into the gradients of its inputs.

namespace lefm::nn {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Accumulator type: at least double, wider when T is.
template <typename T>
using Accum = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;

inline void require_rank4(const Shape& s, const char* op)
{
    if (s.size() != 4)
        throw ShapeError(std::string(op) + ": expected a BxCxHxW tensor, got " + shape_string(s));
}

/// Unfolds one C x H x W image into (C*k*k) x (H*W) patches, zero padded so the
/// output keeps the input size.
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t height, std::size_t width, std::size_t k, T* col)
{
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto h = static_cast<std::ptrdiff_t>(height);
    const auto w = static_cast<std::ptrdiff_t>(width);
    for (std::size_t c = 0; c < channels; ++c) {
        const T* plane = img + c * height * width;
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                T* row = col + ((c * k + ky) * k + kx) * height * width;
                for (std::ptrdiff_t y = 0; y < h; ++y) {
                    T* dst = row + y * w;
                    const std::ptrdiff_t sy = y + dy;
                    if (sy < 0 || sy >= h) {
                        std::fill(dst, dst + w, T(0));
                        continue;
                    }
                    const T* src = plane + sy * w;
                    const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
                    const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(w, w - dx);
                    std::fill(dst, dst + x0, T(0));
                    std::copy(src + x0 + dx, src + x1 + dx, dst + x0);
                    std::fill(dst + x1, dst + w, T(0));
                }
            }
        }
    }
}

/// Adjoint of im2col: folds patch gradients back, accumulating into `img`.
template <typename T>
void col2im(const T* col, std::size_t channels, std::size_t height, std::size_t width, std::size_t k, T* img)
{
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto h = static_cast<std::ptrdiff_t>(height);
    const auto w = static_cast<std::ptrdiff_t>(width);
    for (std::size_t c = 0; c < channels; ++c) {
        T* plane = img + c * height * width;
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                const T* row = col + ((c * k + ky) * k + kx) * height * width;
                for (std::ptrdiff_t y = 0; y < h; ++y) {
                    const std::ptrdiff_t sy = y + dy;
                    if (sy < 0 || sy >= h)
                        continue;
                    const T* src = row + y * w;
                    T* dst = plane + sy * w;
                    const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
                    const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(w, w - dx);
                    for (std::ptrdiff_t x = x0; x < x1; ++x)
                        dst[x + dx] += src[x];
                }
            }
        }
    }
}

/// Shifted-window convolution of one image. The input is zero padded into a
/// (H+2p) x (W+2p) grid; for each kernel tap the padded image, offset by the tap,
/// is a strided C x N view, so the convolution becomes k*k GEMMs without an
/// unfolded copy. Output columns are laid out with the padded row stride and
/// the two trailing columns of each row are discarded.
template <typename T>
struct ShiftConvGeometry {
    std::size_t channels, out_channels, height, width, k;
    std::size_t pad() const { return k / 2; }
    std::size_t padded_width() const { return width + 2 * pad(); }
    std::size_t padded_size() const { return (height + 2 * pad()) * padded_width(); }
    std::size_t span() const { return (height - 1) * padded_width() + width; }
    std::size_t offset(std::size_t tap) const { return (tap / k) * padded_width() + tap % k; }
};

template <typename T>
void pad_image(const T* img, const ShiftConvGeometry<T>& g, std::vector<T>& padded)
{
    padded.assign(g.channels * g.padded_size(), T(0));
    const std::size_t p = g.pad(), wp = g.padded_width();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t y = 0; y < g.height; ++y)
            std::copy_n(img + (c * g.height + y) * g.width, g.width, padded.data() + c * g.padded_size() + (y + p) * wp + p);
}

/// Reorders O x C x k x k weights into k*k contiguous O x C blocks.
template <typename T>
void split_taps(const T* w, const ShiftConvGeometry<T>& g, std::vector<T>& taps)
{
    const std::size_t kk = g.k * g.k;
    taps.resize(kk * g.out_channels * g.channels);
    for (std::size_t o = 0; o < g.out_channels; ++o)
        for (std::size_t c = 0; c < g.channels; ++c)
            for (std::size_t t = 0; t < kk; ++t)
                taps[(t * g.out_channels + o) * g.channels + c] = w[(o * g.channels + c) * kk + t];
}

/// Below this many pixels the unfolded (im2col) path is faster.
inline constexpr std::size_t kShiftConvMinPixels = 1024;

} // namespace detail

/// Same-padded 2D convolution, stride 1, square odd kernel taken from the
/// weight shape (O x C x k x k).
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias)
{
    using Mat = detail::RowMatrix<T>;
    using StridedMap = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
    using Idx = Eigen::Index;
    detail::require_rank4(x.shape(), "conv2d");
    detail::require_rank4(weight.shape(), "conv2d weight");
    const std::size_t batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
    const std::size_t out_ch = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != channels || weight.dim(3) != k || k % 2 == 0)
        throw ShapeError("conv2d: weight " + shape_string(weight.shape()) + " incompatible with input " +
                         shape_string(x.shape()));
    if (bias.numel() != out_ch)
        throw ShapeError("conv2d: bias has " + std::to_string(bias.numel()) + " entries for " +
                         std::to_string(out_ch) + " output channels");

    const std::size_t hw = height * width;
    const std::size_t patch = channels * k * k;
    const bool pointwise = k == 1;
    const bool shifted = !pointwise && hw >= detail::kShiftConvMinPixels;
    const detail::ShiftConvGeometry<T> geo{channels, out_ch, height, width, k};
    auto out = detail::make_result<T>({batch, out_ch, height, width}, {&x, &weight, &bias});
    {
        Eigen::Map<const Mat> w(weight.values().data(), static_cast<Idx>(out_ch), static_cast<Idx>(patch));
        std::vector<T> col, padded, taps, acc;
        if (shifted)
            detail::split_taps(weight.values().data(), geo, taps);
        for (std::size_t n = 0; n < batch; ++n) {
            const T* img = x.values().data() + n * channels * hw;
            T* dst_ptr = out.values().data() + n * out_ch * hw;
            if (shifted) {
                detail::pad_image(img, geo, padded);
                const std::size_t span = geo.span(), wp = geo.padded_width();
                acc.resize(out_ch * span);
                Eigen::Map<Mat> a(acc.data(), static_cast<Idx>(out_ch), static_cast<Idx>(span));
                for (std::size_t t = 0; t < k * k; ++t) {
                    StridedMap xs(padded.data() + geo.offset(t), static_cast<Idx>(channels), static_cast<Idx>(span),
                                  Eigen::OuterStride<>(static_cast<Idx>(geo.padded_size())));
                    Eigen::Map<const Mat> wt(taps.data() + t * out_ch * channels, static_cast<Idx>(out_ch),
                                             static_cast<Idx>(channels));
                    if (t == 0)
                        a.noalias() = wt * xs;
                    else
                        a.noalias() += wt * xs;
                }
                for (std::size_t o = 0; o < out_ch; ++o) {
                    const T b = bias.values()[o];
                    for (std::size_t y = 0; y < height; ++y) {
                        const T* src = acc.data() + o * span + y * wp;
                        T* dst = dst_ptr + (o * height + y) * width;
                        for (std::size_t xx = 0; xx < width; ++xx)
                            dst[xx] = src[xx] + b;
                    }
                }
            } else {
                if (!pointwise) {
                    col.resize(patch * hw);
                    detail::im2col(img, channels, height, width, k, col.data());
                }
                Eigen::Map<const Mat> cols(pointwise ? img : col.data(), static_cast<Idx>(patch), static_cast<Idx>(hw));
                Eigen::Map<Mat> dst(dst_ptr, static_cast<Idx>(out_ch), static_cast<Idx>(hw));
                Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.values().data(), static_cast<Idx>(out_ch));
                dst.noalias() = w * cols;
                dst.colwise() += b;
            }
        }
    }
    detail::check_finite(out, "conv2d");

    if (out.requires_grad()) {
        out.node().backward = [xn = x.node_ptr(), wn = weight.node_ptr(), bn = bias.node_ptr(), batch, channels, height,
                               width, out_ch, k, hw, patch, pointwise, shifted, geo](auto& self) {
            Eigen::Map<const Mat> w(wn->value.data(), static_cast<Idx>(out_ch), static_cast<Idx>(patch));
            std::vector<T> col, gcol, padded, taps, gtaps, gpad, gspread;
            if (shifted) {
                detail::split_taps(wn->value.data(), geo, taps);
                if (wn->requires_grad)
                    gtaps.assign(taps.size(), T(0));
            }
            for (std::size_t n = 0; n < batch; ++n) {
                const T* gout_ptr = self.grad.data() + n * out_ch * hw;
                Eigen::Map<const Mat> gout(gout_ptr, static_cast<Idx>(out_ch), static_cast<Idx>(hw));
                const T* img = xn->value.data() + n * channels * hw;
                if (bn->requires_grad) {
                    auto gb = detail::grad_of<T>(*bn);
                    // plain loop: Eigen's vectorized sum depends on pointer alignment
                    for (std::size_t o = 0; o < out_ch; ++o) {
                        detail::Accum<T> s = 0;
                        for (std::size_t p = 0; p < hw; ++p)
                            s += gout_ptr[o * hw + p];
                        gb[o] += static_cast<T>(s);
                    }
                }
                if (shifted) {
                    const std::size_t span = geo.span(), wp = geo.padded_width(), psize = geo.padded_size();
                    // output gradient spread onto the padded row stride, zeros in the discarded columns
                    gspread.assign(out_ch * span, T(0));
                    for (std::size_t o = 0; o < out_ch; ++o)
                        for (std::size_t y = 0; y < height; ++y)
                            std::copy_n(gout_ptr + (o * height + y) * width, width, gspread.data() + o * span + y * wp);
                    Eigen::Map<const Mat> g(gspread.data(), static_cast<Idx>(out_ch), static_cast<Idx>(span));
                    if (wn->requires_grad) {
                        detail::pad_image(img, geo, padded);
                        for (std::size_t t = 0; t < k * k; ++t) {
                            StridedMap xs(padded.data() + geo.offset(t), static_cast<Idx>(channels), static_cast<Idx>(span),
                                          Eigen::OuterStride<>(static_cast<Idx>(psize)));
                            Eigen::Map<Mat> gw(gtaps.data() + t * out_ch * channels, static_cast<Idx>(out_ch),
                                               static_cast<Idx>(channels));
                            gw.noalias() += g * xs.transpose();
                        }
                    }
                    if (xn->requires_grad) {
                        gpad.assign(channels * psize, T(0));
                        for (std::size_t t = 0; t < k * k; ++t) {
                            Eigen::Map<Mat, 0, Eigen::OuterStride<>> gx(gpad.data() + geo.offset(t), static_cast<Idx>(channels),
                                                                        static_cast<Idx>(span),
                                                                        Eigen::OuterStride<>(static_cast<Idx>(psize)));
                            Eigen::Map<const Mat> wt(taps.data() + t * out_ch * channels, static_cast<Idx>(out_ch),
                                                     static_cast<Idx>(channels));
                            gx.noalias() += wt.transpose() * g;
                        }
                        auto gxs = detail::grad_of<T>(*xn);
                        T* gimg = gxs.data() + n * channels * hw;
                        const std::size_t p = geo.pad();
                        for (std::size_t c = 0; c < channels; ++c)
                            for (std::size_t y = 0; y < height; ++y) {
                                const T* src = gpad.data() + c * psize + (y + p) * wp + p;
                                T* dst = gimg + (c * height + y) * width;
                                for (std::size_t xx = 0; xx < width; ++xx)
                                    dst[xx] += src[xx];
                            }
                    }
                    continue;
                }
                if (wn->requires_grad) {
                    if (!pointwise) {
                        col.resize(patch * hw);
                        detail::im2col(img, channels, height, width, k, col.data());
                    }
                    Eigen::Map<const Mat> cols(pointwise ? img : col.data(), static_cast<Idx>(patch), static_cast<Idx>(hw));
                    auto gw_span = detail::grad_of<T>(*wn);
                    Eigen::Map<Mat> gw(gw_span.data(), static_cast<Idx>(out_ch), static_cast<Idx>(patch));
                    gw.noalias() += gout * cols.transpose();
                }
                if (xn->requires_grad) {
                    auto gx = detail::grad_of<T>(*xn);
                    T* gimg = gx.data() + n * channels * hw;
                    if (!pointwise) {
                        gcol.resize(patch * hw);
                        Eigen::Map<Mat> gc(gcol.data(), static_cast<Idx>(patch), static_cast<Idx>(hw));
                        gc.noalias() = w.transpose() * gout;
                        detail::col2im(gcol.data(), channels, height, width, k, gimg);
                    } else {
                        Eigen::Map<Mat> gc(gimg, static_cast<Idx>(patch), static_cast<Idx>(hw));
                        gc.noalias() += w.transpose() * gout;
                    }
                }
            }
            if (shifted && wn->requires_grad) {
                auto gw = detail::grad_of<T>(*wn);
                const std::size_t kk = k * k;
                for (std::size_t o = 0; o < out_ch; ++o)
                    for (std::size_t c = 0; c < channels; ++c)
                        for (std::size_t t = 0; t < kk; ++t)
                            gw[(o * channels + c) * kk + t] += gtaps[(t * out_ch + o) * channels + c];
            }
        };
    }
    return out;
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& x)
{
    auto out = detail::make_result<T>(x.shape(), {&x});
    auto src = x.values();
    auto dst = out.values();
    for (std::size_t i = 0; i < src.size(); ++i)
        dst[i] = src[i] > T(0) ? src[i] : T(0);
    if (out.requires_grad()) {
        out.node().backward = [xn = x.node_ptr()](auto& self) {
            auto gx = detail::grad_of<T>(*xn);
            for (std::size_t i = 0; i < gx.size(); ++i)
                if (xn->value[i] > T(0))
                    gx[i] += self.grad[i];
        };
    }
    return out;
}

template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& x)
{
    auto out = detail::make_result<T>(x.shape(), {&x});
    auto src = x.values();
    auto dst = out.values();
    for (std::size_t i = 0; i < src.size(); ++i)
        dst[i] = src[i] >= T(0) ? T(1) / (T(1) + std::exp(-src[i])) : std::exp(src[i]) / (T(1) + std::exp(src[i]));
    detail::check_finite(out, "sigmoid");
    if (out.requires_grad()) {
        out.node().backward = [xn = x.node_ptr()](auto& self) {
            auto gx = detail::grad_of<T>(*xn);
            for (std::size_t i = 0; i < gx.size(); ++i)
                gx[i] += self.grad[i] * self.value[i] * (T(1) - self.value[i]);
        };
    }
    return out;
}

/// 2x2 max pooling, stride 2. H and W must be even.
template <std::floating_point T>
Tensor<T> max_pool2(const Tensor<T>& x)
{
    detail::require_rank4(x.shape(), "max_pool2");
    const std::size_t planes = x.dim(0) * x.dim(1), height = x.dim(2), width = x.dim(3);
    if (height % 2 || width % 2)
        throw ShapeError("max_pool2: spatial size " + shape_string(x.shape()) + " is not even");
    const std::size_t oh = height / 2, ow = width / 2;
    auto out = detail::make_result<T>({x.dim(0), x.dim(1), oh, ow}, {&x});
    std::vector<std::size_t> argmax(out.numel());
    auto src = x.values();
    auto dst = out.values();
    for (std::size_t p = 0; p < planes; ++p) {
        const std::size_t in_base = p * height * width;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xo = 0; xo < ow; ++xo) {
                std::size_t best = in_base + 2 * y * width + 2 * xo;
                for (std::size_t idx : {best + 1, best + width, best + width + 1})
                    if (src[idx] > src[best])
                        best = idx;
                const std::size_t o = (p * oh + y) * ow + xo;
                dst[o] = src[best];
                argmax[o] = best;
            }
        }
    }
    if (out.requires_grad()) {
        out.node().backward = [xn = x.node_ptr(), argmax = std::move(argmax)](auto& self) {
            auto gx = detail::grad_of<T>(*xn);
            for (std::size_t o = 0; o < argmax.size(); ++o)
                gx[argmax[o]] += self.grad[o];
        };
    }
    return out;
}

/// Nearest-neighbour 2x upsampling.
template <std::floating_point T>
Tensor<T> upsample_nearest2(const Tensor<T>& x)
{
    detail::require_rank4(x.shape(), "upsample_nearest2");
    const std::size_t planes = x.dim(0) * x.dim(1), height = x.dim(2), width = x.dim(3);
    const std::size_t oh = height * 2, ow = width * 2;
    auto out = detail::make_result<T>({x.dim(0), x.dim(1), oh, ow}, {&x});
    auto src = x.values();
    auto dst = out.values();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xo = 0; xo < ow; ++xo)
                dst[(p * oh + y) * ow + xo] = src[(p * height + y / 2) * width + xo / 2];
    if (out.requires_grad()) {
        out.node().backward = [xn = x.node_ptr(), planes, height, width, oh, ow](auto& self) {
            auto gx = detail::grad_of<T>(*xn);
            for (std::size_t p = 0; p < planes; ++p)
                for (std::size_t y = 0; y < oh; ++y)
                    for (std::size_t xo = 0; xo < ow; ++xo)
                        gx[(p * height + y / 2) * width + xo / 2] += self.grad[(p * oh + y) * ow + xo];
        };
    }
    return out;
}

/// Concatenation along the channel axis.
template <std::floating_point T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require_rank4(a.shape(), "concat_channels");
    detail::require_rank4(b.shape(), "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    const std::size_t batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    auto out = detail::make_result<T>({batch, ca + cb, a.dim(2), a.dim(3)}, {&a, &b});
    auto dst = out.values();
    for (std::size_t n = 0; n < batch; ++n) {
        std::copy_n(a.values().data() + n * ca * hw, ca * hw, dst.data() + n * (ca + cb) * hw);
        std::copy_n(b.values().data() + n * cb * hw, cb * hw, dst.data() + n * (ca + cb) * hw + ca * hw);
    }
    if (out.requires_grad()) {
        out.node().backward = [an = a.node_ptr(), bn = b.node_ptr(), batch, ca, cb, hw](auto& self) {
            for (std::size_t n = 0; n < batch; ++n) {
                const T* g = self.grad.data() + n * (ca + cb) * hw;
                if (an->requires_grad) {
                    auto ga = detail::grad_of<T>(*an);
                    for (std::size_t i = 0; i < ca * hw; ++i)
                        ga[n * ca * hw + i] += g[i];
                }
                if (bn->requires_grad) {
                    auto gb = detail::grad_of<T>(*bn);
                    for (std::size_t i = 0; i < cb * hw; ++i)
                        gb[n * cb * hw + i] += g[ca * hw + i];
                }
            }
        };
    }
    return out;
}

/// Per-channel batch normalization. In training mode the batch statistics are
/// used and the running estimates updated; otherwise the running estimates are
/// applied as a fixed affine map.
template <std::floating_point T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, std::span<T> running_mean,
                     std::span<T> running_var, bool training, T momentum = T(0.1), T epsilon = T(1e-5))
{
    detail::require_rank4(x.shape(), "batch_norm");
    const std::size_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (scale.numel() != channels || shift.numel() != channels || running_mean.size() != channels ||
        running_var.size() != channels)
        throw ShapeError("batch_norm: parameter size does not match " + std::to_string(channels) + " channels");
    const std::size_t count = batch * hw;
    std::vector<T> mean(channels), inv_std(channels);
    auto src = x.values();
    if (training) {
        for (std::size_t c = 0; c < channels; ++c) {
            using A = detail::Accum<T>;
            A sum = 0, sq = 0;
            for (std::size_t n = 0; n < batch; ++n) {
                const T* p = src.data() + (n * channels + c) * hw;
                for (std::size_t i = 0; i < hw; ++i)
                    sum += p[i];
            }
            const A mu = sum / static_cast<A>(count);
            for (std::size_t n = 0; n < batch; ++n) {
                const T* p = src.data() + (n * channels + c) * hw;
                for (std::size_t i = 0; i < hw; ++i)
                    sq += (p[i] - mu) * (p[i] - mu);
            }
            const A var = sq / static_cast<A>(count);
            mean[c] = static_cast<T>(mu);
            inv_std[c] = static_cast<T>(1 / std::sqrt(var + static_cast<A>(epsilon)));
            const A unbiased = count > 1 ? sq / static_cast<A>(count - 1) : var;
            running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] + momentum * mu);
            running_var[c] = static_cast<T>((1 - momentum) * running_var[c] + momentum * unbiased);
        }
    } else {
        for (std::size_t c = 0; c < channels; ++c) {
            mean[c] = running_mean[c];
            inv_std[c] = T(1) / std::sqrt(running_var[c] + epsilon);
        }
    }

    auto out = detail::make_result<T>(x.shape(), {&x, &scale, &shift});
    auto dst = out.values();
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (n * channels + c) * hw;
            const T g = scale.values()[c] * inv_std[c];
            const T b = shift.values()[c];
            for (std::size_t i = 0; i < hw; ++i)
                dst[base + i] = g * (src[base + i] - mean[c]) + b;
        }
    detail::check_finite(out, "batch_norm");

    if (out.requires_grad()) {
        out.node().backward = [xn = x.node_ptr(), sn = scale.node_ptr(), bn = shift.node_ptr(), mean = std::move(mean),
                               inv_std = std::move(inv_std), batch, channels, hw, count, training](auto& self) {
            for (std::size_t c = 0; c < channels; ++c) {
                using A = detail::Accum<T>;
                A sum_g = 0, sum_gx = 0;
                for (std::size_t n = 0; n < batch; ++n) {
                    const std::size_t base = (n * channels + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const T xhat = (xn->value[base + i] - mean[c]) * inv_std[c];
                        sum_g += self.grad[base + i];
                        sum_gx += self.grad[base + i] * xhat;
                    }
                }
                if (sn->requires_grad)
                    detail::grad_of<T>(*sn)[c] += static_cast<T>(sum_gx);
                if (bn->requires_grad)
                    detail::grad_of<T>(*bn)[c] += static_cast<T>(sum_g);
                if (!xn->requires_grad)
                    continue;
                auto gx = detail::grad_of<T>(*xn);
                const T gamma = sn->value[c];
                for (std::size_t n = 0; n < batch; ++n) {
                    const std::size_t base = (n * channels + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        if (training) {
                            const T xhat = (xn->value[base + i] - mean[c]) * inv_std[c];
                            gx[base + i] += gamma * inv_std[c] *
                                            (self.grad[base + i] - static_cast<T>(sum_g / static_cast<A>(count)) -
                                             xhat * static_cast<T>(sum_gx / static_cast<A>(count)));
                        } else {
                            gx[base + i] += gamma * inv_std[c] * self.grad[base + i];
                        }
                    }
                }
            }
        };
    }
    return out;
}

/// Learnable explicit feature map on a B x d x H x W tensor: every pixel's
/// monomials times the shared coefficient vector, giving B x D x H x W.
template <std::floating_point T>
Tensor<T> lefm_expand(const Tensor<T>& x, const Tensor<T>& coefficients, const ExponentTable& table)
{
    detail::require_rank4(x.shape(), "lefm_expand");
    const std::size_t batch = x.dim(0), d = x.dim(1), hw = x.dim(2) * x.dim(3);
    const std::size_t terms = table.size();
    if (d != static_cast<std::size_t>(table.input_dims()))
        throw ShapeError("lefm_expand: input has " + std::to_string(d) + " channels, table expects " +
                         std::to_string(table.input_dims()));
    if (coefficients.numel() != terms)
        throw ShapeError("lefm_expand: " + std::to_string(coefficients.numel()) + " coefficients for " +
                         std::to_string(terms) + " terms");
    detail::check_finite(x, "lefm_expand input");

    auto out = detail::make_result<T>({batch, terms, x.dim(2), x.dim(3)}, {&x, &coefficients});
    auto a = coefficients.values();
    std::vector<T> psi_buf(terms);
    for (std::size_t n = 0; n < batch; ++n) {
        const T* img = x.values().data() + n * d * hw;
        T* dst = out.values().data() + n * terms * hw;
        for (std::size_t p = 0; p < hw; ++p) {
            eval_monomials<T>(table, img + p, hw, psi_buf);
            for (std::size_t r = 0; r < terms; ++r)
                dst[r * hw + p] = psi_buf[r] * a[r];
        }
    }
    detail::check_finite(out, "lefm_expand");

    if (out.requires_grad()) {
        out.node().backward = [xn = x.node_ptr(), an = coefficients.node_ptr(), table, batch, d, hw, terms](auto& self) {
            std::vector<T> psi_buf(terms), gpsi(terms);
            std::span<T> ga = an->requires_grad ? detail::grad_of<T>(*an) : std::span<T>{};
            std::span<T> gx = xn->requires_grad ? detail::grad_of<T>(*xn) : std::span<T>{};
            for (std::size_t n = 0; n < batch; ++n) {
                const T* img = xn->value.data() + n * d * hw;
                const T* g = self.grad.data() + n * terms * hw;
                for (std::size_t p = 0; p < hw; ++p) {
                    eval_monomials<T>(table, img + p, hw, psi_buf);
                    for (std::size_t r = 0; r < terms; ++r) {
                        const T up = g[r * hw + p];
                        if (!ga.empty())
                            ga[r] += up * psi_buf[r];
                        gpsi[r] = up * an->value[r];
                    }
                    if (!gx.empty())
                        backprop_monomials<T>(table, img + p, hw, psi_buf, gpsi, gx.data() + n * d * hw + p, hw);
                }
            }
        };
    }
    return out;
}

/// Soft Dice loss over the whole batch with smoothing 1:
/// 1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1).
template <std::floating_point T>
Tensor<T> dice_loss(const Tensor<T>& pred, std::span<const T> target)
{
    if (pred.numel() != target.size())
        throw ShapeError("dice_loss: prediction " + shape_string(pred.shape()) + " has " +
                         std::to_string(pred.numel()) + " values, target has " + std::to_string(target.size()));
    using A = detail::Accum<T>;
    A inter = 0, sum_p = 0, sum_t = 0;
    auto p = pred.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += static_cast<A>(p[i]) * target[i];
        sum_p += p[i];
        sum_t += target[i];
    }
    const A numer = 2 * inter + 1;
    const A denom = sum_p + sum_t + 1;
    auto out = detail::make_result<T>({1}, {&pred});
    out.values()[0] = static_cast<T>(1 - numer / denom);
    detail::check_finite(out, "dice_loss");
    if (out.requires_grad()) {
        out.node().backward = [pn = pred.node_ptr(), tgt = std::vector<T>(target.begin(), target.end()), numer,
                               denom](auto& self) {
            auto gp = detail::grad_of<T>(*pn);
            const A up = self.grad[0];
            for (std::size_t i = 0; i < gp.size(); ++i)
                gp[i] += static_cast<T>(up * -(2 * tgt[i] * denom - numer) / (denom * denom));
        };
    }
    return out;
}

} // namespace lefm::nn
