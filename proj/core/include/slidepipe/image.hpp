#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "slidepipe/errors.hpp"

namespace slidepipe {

// Planar raster, channel-major: data[(c*height + y)*width + x].
template <typename T>
struct Raster {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Raster() = default;
    Raster(int c, int h, int w, T fill = T{})
        : channels(c), height(h), width(w),
          data(static_cast<std::size_t>(c) * h * w, fill) {}

    bool empty() const { return data.empty(); }
    std::int64_t pixel_count() const { return static_cast<std::int64_t>(height) * width; }
    std::int64_t value_count() const { return static_cast<std::int64_t>(channels) * height * width; }

    T& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    T at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }

    bool same_shape(const Raster& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
};

using ByteRaster = Raster<std::uint8_t>;
using FloatRaster = Raster<double>;

// A whole slide: 3-channel 8-bit pixels plus an optional binary ground-truth
// mask (values 0/1, same H x W).
struct SlideImage {
    std::string id;
    ByteRaster pixels;
    std::optional<ByteRaster> ground_truth;

    int height() const { return pixels.height; }
    int width() const { return pixels.width; }
    void validate() const;
};

// ---- lossless raster file formats (binary netpbm) ----
// Slides: P6, 8-bit RGB. Binary masks: P5, 8-bit, values {0,255}.
// Probability maps: P5, 16-bit big-endian, value/65535.

void write_ppm8(const std::filesystem::path& file, const ByteRaster& rgb);
ByteRaster read_ppm8(const std::filesystem::path& file);

void write_pgm8(const std::filesystem::path& file, const ByteRaster& gray);
ByteRaster read_pgm8(const std::filesystem::path& file);

// mask01 holds {0,1}; the file holds {0,255}
void write_mask(const std::filesystem::path& file, const ByteRaster& mask01);
ByteRaster read_mask(const std::filesystem::path& file);

void write_pgm16(const std::filesystem::path& file, const FloatRaster& probabilities);
FloatRaster read_pgm16(const std::filesystem::path& file);

// ---- geometry ----

template <typename T>
Raster<T> flip_horizontal(const Raster<T>& in) {
    Raster<T> out(in.channels, in.height, in.width);
    for (int c = 0; c < in.channels; ++c)
        for (int y = 0; y < in.height; ++y)
            for (int x = 0; x < in.width; ++x)
                out.at(c, y, x) = in.at(c, y, in.width - 1 - x);
    return out;
}

template <typename T>
Raster<T> flip_vertical(const Raster<T>& in) {
    Raster<T> out(in.channels, in.height, in.width);
    for (int c = 0; c < in.channels; ++c)
        for (int y = 0; y < in.height; ++y)
            for (int x = 0; x < in.width; ++x)
                out.at(c, y, x) = in.at(c, in.height - 1 - y, x);
    return out;
}

// Bilinear resampling (half-pixel centers, the align_corners=false
// convention). Nearest-neighbour is for label masks.
ByteRaster resize_bilinear(const ByteRaster& in, int out_h, int out_w);
FloatRaster resize_bilinear(const FloatRaster& in, int out_h, int out_w);
ByteRaster resize_nearest(const ByteRaster& in, int out_h, int out_w);

} // namespace slidepipe
