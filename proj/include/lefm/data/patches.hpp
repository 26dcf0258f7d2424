#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lefm/error.hpp"
#include "lefm/image.hpp"

namespace lefm::data {

struct Patch {
    std::size_t row = 0;
    std::size_t col = 0;
    Image<float> image;
    Mask label;
};

/// Patch origins along one axis: multiples of the stride, plus an edge-aligned
/// origin when the stride does not reach the end.
inline std::vector<std::size_t> patch_origins(std::size_t length, std::size_t size, std::size_t stride)
{
    if (size == 0 || stride == 0)
        throw ConfigError("patch size and stride must be positive");
    if (size > length)
        throw ShapeError("patch size " + std::to_string(size) + " exceeds image extent " + std::to_string(length));
    std::vector<std::size_t> out;
    std::size_t o = 0;
    for (; o + size <= length; o += stride)
        out.push_back(o);
    if (out.back() + size < length)
        out.push_back(length - size);
    return out;
}

template <typename T>
Image<T> crop(const Image<T>& img, std::size_t row, std::size_t col, std::size_t height, std::size_t width)
{
    if (row + height > img.height() || col + width > img.width())
        throw ShapeError("crop window exceeds image");
    Image<T> out(height, width, img.channels());
    const std::size_t run = width * img.channels();
    for (std::size_t r = 0; r < height; ++r) {
        const T* src = &img(row + r, col, 0);
        std::copy(src, src + run, &out(r, 0, 0));
    }
    return out;
}

/// Square patches of side `size` tiling the image row-major. `size` must be a
/// multiple of 8 (the network's downsampling factor).
inline std::vector<Patch> make_patches(const Image<float>& image, const Mask& label, std::size_t size, std::size_t stride)
{
    if (size % 8 != 0)
        throw ConfigError("patch size " + std::to_string(size) + " is not a multiple of 8");
    if (label.height() != image.height() || label.width() != image.width())
        throw ShapeError("make_patches: label and image sizes differ");
    std::vector<Patch> out;
    for (std::size_t r : patch_origins(image.height(), size, stride))
        for (std::size_t c : patch_origins(image.width(), size, stride))
            out.push_back({r, c, crop(image, r, c, size, size), crop(label, r, c, size, size)});
    return out;
}

/// Averages overlapping tiles back onto an H x W canvas. Pixels no tile covers
/// stay zero.
template <typename T>
Image<T> reassemble(const std::vector<std::pair<std::pair<std::size_t, std::size_t>, Image<T>>>& tiles, std::size_t height,
                    std::size_t width)
{
    if (tiles.empty())
        throw ShapeError("reassemble: no tiles");
    const std::size_t ch = tiles.front().second.channels();
    std::vector<double> sum(height * width * ch, 0.0);
    std::vector<std::size_t> count(height * width, 0);
    for (const auto& [origin, tile] : tiles) {
        const auto [r0, c0] = origin;
        if (tile.channels() != ch || r0 + tile.height() > height || c0 + tile.width() > width)
            throw ShapeError("reassemble: tile does not fit the canvas");
        for (std::size_t r = 0; r < tile.height(); ++r)
            for (std::size_t c = 0; c < tile.width(); ++c) {
                const std::size_t p = (r0 + r) * width + c0 + c;
                ++count[p];
                for (std::size_t k = 0; k < ch; ++k)
                    sum[p * ch + k] += static_cast<double>(tile(r, c, k));
            }
    }
    Image<T> out(height, width, ch);
    for (std::size_t p = 0; p < height * width; ++p)
        if (count[p])
            for (std::size_t k = 0; k < ch; ++k)
                out.storage()[p * ch + k] = static_cast<T>(sum[p * ch + k] / static_cast<double>(count[p]));
    return out;
}

} // namespace lefm::data
