#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lefm/error.hpp"

namespace lefm {

/// Dense height x width x channels array, channel-interleaved (HWC).
template <typename T>
class Image {
public:
    Image() = default;
    Image(std::size_t height, std::size_t width, std::size_t channels, T fill = T{})
        : height_(height), width_(width), channels_(channels), data_(height * width * channels, fill)
    {
    }
    Image(std::size_t height, std::size_t width, std::size_t channels, std::vector<T> data)
        : height_(height), width_(width), channels_(channels), data_(std::move(data))
    {
        if (data_.size() != height * width * channels)
            throw ShapeError("image data size " + std::to_string(data_.size()) + " does not match " +
                             std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels));
    }

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t channels() const noexcept { return channels_; }
    std::size_t pixels() const noexcept { return height_ * width_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c, std::size_t ch = 0) noexcept
    {
        return data_[(r * width_ + c) * channels_ + ch];
    }
    const T& operator()(std::size_t r, std::size_t c, std::size_t ch = 0) const noexcept
    {
        return data_[(r * width_ + c) * channels_ + ch];
    }

    /// Channel values of one pixel, in pixel-major order.
    std::span<T> pixel(std::size_t index) noexcept { return {data_.data() + index * channels_, channels_}; }
    std::span<const T> pixel(std::size_t index) const noexcept { return {data_.data() + index * channels_, channels_}; }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    bool same_shape(const Image& other) const noexcept
    {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }

    friend bool operator==(const Image& a, const Image& b) = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::size_t channels_ = 0;
    std::vector<T> data_;
};

/// Single-channel binary label map; values are 0 or 1.
using Mask = Image<std::uint8_t>;

} // namespace lefm
