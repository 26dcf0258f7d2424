#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lefm/error.hpp"
#include "lefm/exponent_table.hpp"
#include "lefm/image.hpp"
#include "lefm/rng.hpp"

namespace lefm {

/// Monomials of one input vector in table order, evaluated by the parent
/// recurrence. `x` may be strided so callers can read CHW or HWC data in place.
template <std::floating_point T>
inline void eval_monomials(const ExponentTable& table, const T* x, std::size_t stride, std::span<T> psi_out) noexcept
{
    psi_out[0] = T(1);
    for (std::size_t r = 1; r < table.size(); ++r)
        psi_out[r] = psi_out[table.parent(r)] * x[static_cast<std::size_t>(table.factor(r)) * stride];
}

/// Reverse pass through the monomial recurrence. `grad_psi` holds dL/dpsi on
/// entry and is consumed. dL/dx is accumulated into `grad_x` (strided).
template <std::floating_point T>
inline void backprop_monomials(const ExponentTable& table, const T* x, std::size_t x_stride, std::span<const T> psi,
                               std::span<T> grad_psi, T* grad_x, std::size_t gx_stride) noexcept
{
    for (std::size_t r = table.size() - 1; r >= 1; --r) {
        const std::size_t p = table.parent(r);
        const std::size_t i = static_cast<std::size_t>(table.factor(r));
        grad_psi[p] += grad_psi[r] * x[i * x_stride];
        grad_x[i * gx_stride] += grad_psi[r] * psi[p];
    }
}

template <std::floating_point T>
std::vector<T> psi(const ExponentTable& table, std::span<const T> x)
{
    if (x.size() != static_cast<std::size_t>(table.input_dims()))
        throw ShapeError("psi: input has " + std::to_string(x.size()) + " features, table expects " +
                         std::to_string(table.input_dims()));
    for (T v : x)
        if (!std::isfinite(v))
            throw NumericError("psi: non-finite input");
    std::vector<T> out(table.size());
    eval_monomials<T>(table, x.data(), 1, out);
    return out;
}

/// Monomials through the mask route: MM = TM^PM element-wise, then the product
/// across each row. Unselected entries contribute 1, which also gives 0^0 = 1.
template <std::floating_point T>
std::vector<T> psi_from_masks(const ExponentTable& table, std::span<const T> x)
{
    const auto d = static_cast<std::size_t>(table.input_dims());
    if (x.size() != d)
        throw ShapeError("psi_from_masks: input has " + std::to_string(x.size()) + " features, table expects " +
                         std::to_string(d));
    for (T v : x)
        if (!std::isfinite(v))
            throw NumericError("psi_from_masks: non-finite input");
    const auto& tm = table.term_mask();
    const auto& pm = table.power_mask();
    std::vector<T> out(table.size());
    for (std::size_t r = 0; r < table.size(); ++r) {
        T prod = 1;
        for (std::size_t i = 0; i < d; ++i) {
            const T base = tm[r * d + i] ? x[i] : T(1);
            prod *= static_cast<T>(std::pow(base, pm[r * d + i]));
        }
        out[r] = prod;
    }
    return out;
}

/// Per-term affine normalization applied after the expansion. Holds the two
/// learnable parameters per term (shift and scale) plus running statistics used
/// at inference time.
template <std::floating_point T>
struct TermNormalization {
    std::vector<T> scale;
    std::vector<T> shift;
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T epsilon = T(1e-5);
    T momentum = T(0.1);

    static TermNormalization identity(std::size_t terms)
    {
        return {std::vector<T>(terms, T(1)), std::vector<T>(terms, T(0)), std::vector<T>(terms, T(0)),
                std::vector<T>(terms, T(1))};
    }

    /// Inference-mode multiplier and offset: y = gain * x + offset.
    T gain(std::size_t r) const { return scale[r] / std::sqrt(running_var[r] + epsilon); }
    T offset(std::size_t r) const { return shift[r] - gain(r) * running_mean[r]; }
};

/// Learnable explicit feature map: phi(x) = psi(x) (Hadamard) a. The same
/// coefficient vector is applied at every pixel.
template <std::floating_point T>
struct LefmLayer {
    ExponentTable table;
    std::vector<T> coefficients;
    bool use_batch_norm = false;
    TermNormalization<T> normalization;

    /// Coefficients drawn uniformly from [-1/sqrt(D), 1/sqrt(D)].
    static LefmLayer create(ExponentTable table, std::uint64_t seed, bool use_batch_norm = false)
    {
        LefmLayer layer;
        const std::size_t terms = table.size();
        layer.table = std::move(table);
        layer.coefficients = init_coefficients(terms, seed);
        layer.use_batch_norm = use_batch_norm;
        if (use_batch_norm)
            layer.normalization = TermNormalization<T>::identity(terms);
        return layer;
    }

    static LefmLayer with_coefficients(ExponentTable table, std::vector<T> coefficients)
    {
        LefmLayer layer;
        layer.table = std::move(table);
        layer.coefficients = std::move(coefficients);
        layer.validate();
        return layer;
    }

    static std::vector<T> init_coefficients(std::size_t terms, std::uint64_t seed)
    {
        Rng rng = make_rng(seed, {0x1ef3});
        const double bound = 1.0 / std::sqrt(static_cast<double>(terms));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<T> a(terms);
        for (auto& v : a)
            v = static_cast<T>(dist(rng));
        return a;
    }

    std::size_t terms() const noexcept { return table.size(); }

    /// Learnable scalar count: D coefficients plus two per term when normalized.
    std::size_t parameter_count() const noexcept { return terms() * (use_batch_norm ? 3 : 1); }

    void validate() const
    {
        if (coefficients.size() != table.size())
            throw ShapeError("LEFM layer: " + std::to_string(coefficients.size()) + " coefficients for " +
                             std::to_string(table.size()) + " terms");
        if (use_batch_norm && (normalization.scale.size() != table.size() || normalization.shift.size() != table.size() ||
                               normalization.running_mean.size() != table.size() ||
                               normalization.running_var.size() != table.size()))
            throw ShapeError("LEFM layer: normalization size does not match term count");
    }
};

template <std::floating_point T>
struct LefmGradients {
    std::vector<T> coefficients;
    Image<T> input;
};

/// Expands an H x W x d image to H x W x D. Normalization, when enabled, uses the
/// running statistics.
template <std::floating_point T>
Image<T> lefm_forward(const LefmLayer<T>& layer, const Image<T>& x)
{
    layer.validate();
    const auto d = static_cast<std::size_t>(layer.table.input_dims());
    if (x.channels() != d)
        throw ShapeError("lefm_forward: image has " + std::to_string(x.channels()) + " channels, layer expects " +
                         std::to_string(d));
    for (T v : x.data())
        if (!std::isfinite(v))
            throw NumericError("lefm_forward: non-finite input");

    const std::size_t terms = layer.terms();
    Image<T> out(x.height(), x.width(), terms);
    for (std::size_t p = 0; p < x.pixels(); ++p) {
        auto dst = out.pixel(p);
        eval_monomials<T>(layer.table, x.pixel(p).data(), 1, dst);
        for (std::size_t r = 0; r < terms; ++r)
            dst[r] *= layer.coefficients[r];
        if (layer.use_batch_norm)
            for (std::size_t r = 0; r < terms; ++r)
                dst[r] = layer.normalization.gain(r) * dst[r] + layer.normalization.offset(r);
    }
    return out;
}

/// Analytic gradients of lefm_forward. Coefficient gradients are summed over
/// pixels in raster order.
template <std::floating_point T>
LefmGradients<T> lefm_backward(const LefmLayer<T>& layer, const Image<T>& x, const Image<T>& upstream)
{
    layer.validate();
    const auto d = static_cast<std::size_t>(layer.table.input_dims());
    const std::size_t terms = layer.terms();
    if (x.channels() != d)
        throw ShapeError("lefm_backward: image has " + std::to_string(x.channels()) + " channels, layer expects " +
                         std::to_string(d));
    if (upstream.height() != x.height() || upstream.width() != x.width() || upstream.channels() != terms)
        throw ShapeError("lefm_backward: upstream gradient must be " + std::to_string(x.height()) + "x" +
                         std::to_string(x.width()) + "x" + std::to_string(terms));

    LefmGradients<T> grads{std::vector<T>(terms, T(0)), Image<T>(x.height(), x.width(), d)};
    std::vector<T> psi_buf(terms);
    std::vector<T> gpsi(terms);
    for (std::size_t p = 0; p < x.pixels(); ++p) {
        const T* xp = x.pixel(p).data();
        auto up = upstream.pixel(p);
        eval_monomials<T>(layer.table, xp, 1, psi_buf);
        for (std::size_t r = 0; r < terms; ++r) {
            const T g = layer.use_batch_norm ? up[r] * layer.normalization.gain(r) : up[r];
            grads.coefficients[r] += g * psi_buf[r];
            gpsi[r] = g * layer.coefficients[r];
        }
        backprop_monomials<T>(layer.table, xp, 1, psi_buf, gpsi, grads.input.pixel(p).data(), 1);
    }
    return grads;
}

} // namespace lefm
