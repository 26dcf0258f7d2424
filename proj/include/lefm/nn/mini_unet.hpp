#pragma once

#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lefm/exponent_table.hpp"
#include "lefm/lefm_layer.hpp"
#include "lefm/nn/ops.hpp"
#include "lefm/rng.hpp"

namespace lefm::nn {

template <std::floating_point T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <std::floating_point T>
struct Conv {
    Tensor<T> weight;
    Tensor<T> bias;

    /// He-uniform weights, zero bias.
    static Conv create(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::uint64_t seed, std::uint64_t layer_id)
    {
        const std::size_t fan_in = in_ch * k * k;
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        Rng rng = make_rng(seed, {0xc0de, layer_id});
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<T> w(out_ch * fan_in);
        for (auto& v : w)
            v = static_cast<T>(dist(rng));
        return {Tensor<T>::from_values({out_ch, in_ch, k, k}, std::move(w), true), Tensor<T>::zeros({out_ch}, true)};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias); }
};

/// Two 3x3 convolutions, each followed by ReLU.
template <std::floating_point T>
struct ConvBlock {
    Conv<T> first;
    Conv<T> second;

    static ConvBlock create(std::size_t in_ch, std::size_t out_ch, std::uint64_t seed, std::uint64_t block_id)
    {
        return {Conv<T>::create(in_ch, out_ch, 3, seed, 2 * block_id), Conv<T>::create(out_ch, out_ch, 3, seed, 2 * block_id + 1)};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return relu(second(relu(first(x)))); }
};

/// Compact U-shaped encoder-decoder: encoder widths 16/32/64 with 2x2 max
/// pooling, a 128-wide bottleneck, nearest-neighbour upsampling with skip
/// concatenation on the way back, and a 1x1 sigmoid head.
template <std::floating_point T>
class MiniUNet {
public:
    static constexpr std::array<std::size_t, 3> kEncoderWidths{16, 32, 64};
    static constexpr std::size_t kBottleneckWidth = 128;
    static constexpr std::size_t kSizeMultiple = 8;

    MiniUNet() = default;

    MiniUNet(std::size_t in_channels, std::uint64_t seed) : in_channels_(in_channels)
    {
        const auto [w1, w2, w3] = kEncoderWidths;
        enc1_ = ConvBlock<T>::create(in_channels, w1, seed, 1);
        enc2_ = ConvBlock<T>::create(w1, w2, seed, 2);
        enc3_ = ConvBlock<T>::create(w2, w3, seed, 3);
        bottleneck_ = ConvBlock<T>::create(w3, kBottleneckWidth, seed, 4);
        dec3_ = ConvBlock<T>::create(kBottleneckWidth + w3, w3, seed, 5);
        dec2_ = ConvBlock<T>::create(w3 + w2, w2, seed, 6);
        dec1_ = ConvBlock<T>::create(w2 + w1, w1, seed, 7);
        head_ = Conv<T>::create(w1, 1, 1, seed, 100);
    }

    std::size_t in_channels() const noexcept { return in_channels_; }

    /// B x C x H x W -> B x 1 x H x W probabilities.
    Tensor<T> forward(const Tensor<T>& x) const
    {
        detail::require_rank4(x.shape(), "MiniUNet");
        if (x.dim(1) != in_channels_)
            throw ShapeError("MiniUNet: input has " + std::to_string(x.dim(1)) + " channels, network expects " +
                             std::to_string(in_channels_));
        if (x.dim(2) % kSizeMultiple || x.dim(3) % kSizeMultiple || x.dim(2) == 0 || x.dim(3) == 0)
            throw ShapeError("MiniUNet: spatial size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                             " is not a positive multiple of 8");
        auto s1 = enc1_(x);
        auto s2 = enc2_(max_pool2(s1));
        auto s3 = enc3_(max_pool2(s2));
        auto b = bottleneck_(max_pool2(s3));
        auto u3 = dec3_(concat_channels(upsample_nearest2(b), s3));
        auto u2 = dec2_(concat_channels(upsample_nearest2(u3), s2));
        auto u1 = dec1_(concat_channels(upsample_nearest2(u2), s1));
        return sigmoid(head_(u1));
    }

    std::vector<NamedTensor<T>> parameters() const
    {
        std::vector<NamedTensor<T>> out;
        auto add_block = [&](const std::string& name, const ConvBlock<T>& block) {
            out.push_back({name + ".conv1.weight", block.first.weight});
            out.push_back({name + ".conv1.bias", block.first.bias});
            out.push_back({name + ".conv2.weight", block.second.weight});
            out.push_back({name + ".conv2.bias", block.second.bias});
        };
        add_block("enc1", enc1_);
        add_block("enc2", enc2_);
        add_block("enc3", enc3_);
        add_block("bottleneck", bottleneck_);
        add_block("dec3", dec3_);
        add_block("dec2", dec2_);
        add_block("dec1", dec1_);
        out.push_back({"head.weight", head_.weight});
        out.push_back({"head.bias", head_.bias});
        return out;
    }

private:
    std::size_t in_channels_ = 0;
    ConvBlock<T> enc1_, enc2_, enc3_, bottleneck_, dec3_, dec2_, dec1_;
    Conv<T> head_;
};

/// LEFM expansion with its learnable coefficients and optional per-term batch
/// normalization.
template <std::floating_point T>
struct LefmModule {
    ExponentTable table;
    Tensor<T> coefficients;
    bool use_batch_norm = false;
    Tensor<T> bn_scale;
    Tensor<T> bn_shift;
    std::vector<T> running_mean;
    std::vector<T> running_var;

    static LefmModule create(int d, int m, bool use_batch_norm, std::uint64_t seed)
    {
        LefmModule mod;
        mod.table = ExponentTable::enumerate(d, m);
        const std::size_t terms = mod.table.size();
        mod.coefficients = Tensor<T>::from_values({terms}, LefmLayer<T>::init_coefficients(terms, seed), true);
        mod.use_batch_norm = use_batch_norm;
        if (use_batch_norm) {
            mod.bn_scale = Tensor<T>::from_values({terms}, std::vector<T>(terms, T(1)), true);
            mod.bn_shift = Tensor<T>::zeros({terms}, true);
            mod.running_mean.assign(terms, T(0));
            mod.running_var.assign(terms, T(1));
        }
        return mod;
    }

    Tensor<T> forward(const Tensor<T>& x, bool training)
    {
        auto y = lefm_expand(x, coefficients, table);
        if (!use_batch_norm)
            return y;
        return batch_norm<T>(y, bn_scale, bn_shift, running_mean, running_var, training);
    }

    /// Snapshot as a standalone layer (inference-mode normalization).
    LefmLayer<T> layer() const
    {
        LefmLayer<T> l;
        l.table = table;
        l.coefficients.assign(coefficients.values().begin(), coefficients.values().end());
        l.use_batch_norm = use_batch_norm;
        if (use_batch_norm) {
            l.normalization.scale.assign(bn_scale.values().begin(), bn_scale.values().end());
            l.normalization.shift.assign(bn_shift.values().begin(), bn_shift.values().end());
            l.normalization.running_mean = running_mean;
            l.normalization.running_var = running_var;
        }
        return l;
    }
};

/// Closed-form count of extra learnable weights when a LEFM layer of order m
/// is placed in front of MiniUNet for d input channels: D coefficients, the
/// widened first convolution, and two normalization terms per monomial.
inline std::size_t lefm_parameter_increase(int d, int m, bool use_batch_norm)
{
    const std::size_t terms = ExponentTable::enumerate(d, m).size();
    const std::size_t first_width = MiniUNet<double>::kEncoderWidths[0];
    return terms + (terms - static_cast<std::size_t>(d)) * first_width * 9 + (use_batch_norm ? 2 * terms : 0);
}

/// Segmentation network: optional LEFM front end followed by MiniUNet. Order
/// m = 0 means the plain network on the raw d channels.
template <std::floating_point T>
class SegmentationNet {
public:
    SegmentationNet() = default;

    SegmentationNet(int d, int m, bool use_batch_norm, std::uint64_t seed) : d_(d), m_(m)
    {
        if (d < 1)
            throw ConfigError("segmentation net: input channels must be positive");
        if (m < 0)
            throw ConfigError("segmentation net: order m must be >= 0");
        std::size_t unet_in = static_cast<std::size_t>(d);
        if (m > 0) {
            lefm_ = LefmModule<T>::create(d, m, use_batch_norm, seed);
            unet_in = lefm_->table.size();
        }
        unet_ = MiniUNet<T>(unet_in, seed);
    }

    int input_channels() const noexcept { return d_; }
    int order() const noexcept { return m_; }
    bool has_lefm() const noexcept { return lefm_.has_value(); }
    bool uses_batch_norm() const noexcept { return lefm_ && lefm_->use_batch_norm; }
    LefmModule<T>& lefm() { return lefm_.value(); }
    const LefmModule<T>& lefm() const { return lefm_.value(); }
    const MiniUNet<T>& unet() const noexcept { return unet_; }

    Tensor<T> forward(const Tensor<T>& x, bool training)
    {
        if (!lefm_)
            return unet_.forward(x);
        return unet_.forward(lefm_->forward(x, training));
    }

    std::vector<NamedTensor<T>> parameters() const
    {
        std::vector<NamedTensor<T>> out;
        if (lefm_) {
            out.push_back({"lefm.coefficients", lefm_->coefficients});
            if (lefm_->use_batch_norm) {
                out.push_back({"lefm.bn.scale", lefm_->bn_scale});
                out.push_back({"lefm.bn.shift", lefm_->bn_shift});
            }
        }
        for (auto& p : unet_.parameters())
            out.push_back(std::move(p));
        return out;
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : parameters())
            n += p.tensor.numel();
        return n;
    }

    /// Non-learnable state persisted alongside the parameters.
    std::vector<std::pair<std::string, std::vector<T>*>> buffers()
    {
        if (!lefm_ || !lefm_->use_batch_norm)
            return {};
        return {{"lefm.bn.running_mean", &lefm_->running_mean}, {"lefm.bn.running_var", &lefm_->running_var}};
    }

private:
    int d_ = 0;
    int m_ = 0;
    std::optional<LefmModule<T>> lefm_;
    MiniUNet<T> unet_;
};

} // namespace lefm::nn
