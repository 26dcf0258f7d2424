#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>

#include <png.h>

#include "lefm/error.hpp"
#include "lefm/image.hpp"

namespace lefm::data {

namespace detail {

inline Image<std::uint8_t> read_png_as(const std::filesystem::path& path, std::uint32_t format, std::size_t channels)
{
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str()))
        throw DataError("cannot read PNG " + path.string() + ": " + img.message);
    img.format = format;
    Image<std::uint8_t> out(img.height, img.width, channels);
    if (!png_image_finish_read(&img, nullptr, out.storage().data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw DataError("cannot decode PNG " + path.string() + ": " + msg);
    }
    return out;
}

} // namespace detail

/// 8-bit RGB pixels; grayscale files are replicated across the three channels.
inline Image<std::uint8_t> read_png_rgb(const std::filesystem::path& path)
{
    return detail::read_png_as(path, PNG_FORMAT_RGB, 3);
}

inline Image<std::uint8_t> read_png_gray(const std::filesystem::path& path)
{
    return detail::read_png_as(path, PNG_FORMAT_GRAY, 1);
}

/// Writes a 1- or 3-channel 8-bit image.
inline void write_png(const std::filesystem::path& path, const Image<std::uint8_t>& image)
{
    if (image.channels() != 1 && image.channels() != 3)
        throw ShapeError("write_png: unsupported channel count " + std::to_string(image.channels()));
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width());
    img.height = static_cast<png_uint_32>(image.height());
    img.format = image.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.storage().data(), 0, nullptr))
        throw DataError("cannot write PNG " + path.string() + ": " + img.message);
}

} // namespace lefm::data
