#include "slidepipe/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace slidepipe {

void SlideImage::validate() const {
    if (pixels.channels != 3)
        throw BadShape("slide '" + id + "' must have exactly 3 channels, got " +
                       std::to_string(pixels.channels));
    if (pixels.height < 1 || pixels.width < 1)
        throw BadShape("slide '" + id + "' has empty raster");
    if (ground_truth) {
        if (ground_truth->channels != 1)
            throw BadShape("ground truth of '" + id + "' must be single-channel");
        if (ground_truth->height != pixels.height || ground_truth->width != pixels.width)
            throw BadShape("ground truth of '" + id + "' does not match pixel dimensions");
        for (const auto v : ground_truth->data)
            if (v > 1) throw DataError("ground truth of '" + id + "' is not binary");
    }
}

namespace {

void skip_pnm_whitespace(std::istream& in) {
    for (;;) {
        const int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

struct PnmHeader {
    std::string magic;
    int width = 0, height = 0, maxval = 0;
};

PnmHeader read_pnm_header(std::istream& in, const std::filesystem::path& file) {
    PnmHeader h;
    in >> h.magic;
    skip_pnm_whitespace(in);
    in >> h.width;
    skip_pnm_whitespace(in);
    in >> h.height;
    skip_pnm_whitespace(in);
    in >> h.maxval;
    if (!in || h.width <= 0 || h.height <= 0)
        throw IoError("malformed netpbm header in " + file.string());
    in.get(); // single whitespace before raster payload
    return h;
}

std::ofstream open_out(const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + file.string());
    return out;
}

std::ifstream open_in(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + file.string());
    return in;
}

} // namespace

void write_ppm8(const std::filesystem::path& file, const ByteRaster& rgb) {
    if (rgb.channels != 3) throw BadShape("write_ppm8 expects a 3-channel raster");
    auto out = open_out(file);
    out << "P6\n" << rgb.width << " " << rgb.height << "\n255\n";
    std::vector<std::uint8_t> row(static_cast<std::size_t>(rgb.width) * 3);
    for (int y = 0; y < rgb.height; ++y) {
        for (int x = 0; x < rgb.width; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<std::size_t>(x) * 3 + c] = rgb.at(c, y, x);
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("failed writing " + file.string());
}

ByteRaster read_ppm8(const std::filesystem::path& file) {
    auto in = open_in(file);
    const auto h = read_pnm_header(in, file);
    if (h.magic != "P6" || h.maxval != 255)
        throw IoError("expected 8-bit P6 file: " + file.string());
    ByteRaster img(3, h.height, h.width);
    std::vector<std::uint8_t> row(static_cast<std::size_t>(h.width) * 3);
    for (int y = 0; y < h.height; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!in) throw IoError("truncated P6 payload in " + file.string());
        for (int x = 0; x < h.width; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = row[static_cast<std::size_t>(x) * 3 + c];
    }
    return img;
}

void write_pgm8(const std::filesystem::path& file, const ByteRaster& gray) {
    if (gray.channels != 1) throw BadShape("write_pgm8 expects a 1-channel raster");
    auto out = open_out(file);
    out << "P5\n" << gray.width << " " << gray.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(gray.data.data()),
              static_cast<std::streamsize>(gray.data.size()));
    if (!out) throw IoError("failed writing " + file.string());
}

ByteRaster read_pgm8(const std::filesystem::path& file) {
    auto in = open_in(file);
    const auto h = read_pnm_header(in, file);
    if (h.magic != "P5" || h.maxval != 255)
        throw IoError("expected 8-bit P5 file: " + file.string());
    ByteRaster img(1, h.height, h.width);
    in.read(reinterpret_cast<char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
    if (!in) throw IoError("truncated P5 payload in " + file.string());
    return img;
}

void write_mask(const std::filesystem::path& file, const ByteRaster& mask01) {
    ByteRaster scaled = mask01;
    for (auto& v : scaled.data) {
        if (v > 1) throw DataError("write_mask expects {0,1} values");
        v = v ? 255 : 0;
    }
    write_pgm8(file, scaled);
}

ByteRaster read_mask(const std::filesystem::path& file) {
    ByteRaster img = read_pgm8(file);
    for (auto& v : img.data) v = v >= 128 ? 1 : 0;
    return img;
}

void write_pgm16(const std::filesystem::path& file, const FloatRaster& probabilities) {
    if (probabilities.channels != 1) throw BadShape("write_pgm16 expects a 1-channel raster");
    auto out = open_out(file);
    out << "P5\n" << probabilities.width << " " << probabilities.height << "\n65535\n";
    std::vector<std::uint8_t> row(static_cast<std::size_t>(probabilities.width) * 2);
    for (int y = 0; y < probabilities.height; ++y) {
        for (int x = 0; x < probabilities.width; ++x) {
            const double p = std::clamp(probabilities.at(0, y, x), 0.0, 1.0);
            const auto q = static_cast<std::uint16_t>(std::lround(p * 65535.0));
            row[static_cast<std::size_t>(x) * 2] = static_cast<std::uint8_t>(q >> 8);
            row[static_cast<std::size_t>(x) * 2 + 1] = static_cast<std::uint8_t>(q & 0xff);
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("failed writing " + file.string());
}

FloatRaster read_pgm16(const std::filesystem::path& file) {
    auto in = open_in(file);
    const auto h = read_pnm_header(in, file);
    if (h.magic != "P5" || h.maxval != 65535)
        throw IoError("expected 16-bit P5 file: " + file.string());
    FloatRaster img(1, h.height, h.width);
    std::vector<std::uint8_t> row(static_cast<std::size_t>(h.width) * 2);
    for (int y = 0; y < h.height; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!in) throw IoError("truncated 16-bit P5 payload in " + file.string());
        for (int x = 0; x < h.width; ++x) {
            const int hi = row[static_cast<std::size_t>(x) * 2];
            const int lo = row[static_cast<std::size_t>(x) * 2 + 1];
            img.at(0, y, x) = static_cast<double>((hi << 8) | lo) / 65535.0;
        }
    }
    return img;
}

namespace {

// Source coordinate for output index i under half-pixel-center mapping.
inline double src_coord(int i, int in_size, int out_size) {
    return (static_cast<double>(i) + 0.5) * in_size / out_size - 0.5;
}

template <typename T, typename Fetch, typename Store>
void resize_bilinear_impl(const Raster<T>& in, Raster<T>& out, Fetch fetch, Store store) {
    for (int c = 0; c < in.channels; ++c) {
        for (int y = 0; y < out.height; ++y) {
            const double sy = src_coord(y, in.height, out.height);
            const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, in.height - 1);
            const int y1 = std::min(y0 + 1, in.height - 1);
            const double fy = std::clamp(sy - std::floor(sy), 0.0, 1.0);
            const double wy = (sy < 0.0) ? 0.0 : (sy > in.height - 1 ? 0.0 : fy);
            for (int x = 0; x < out.width; ++x) {
                const double sx = src_coord(x, in.width, out.width);
                const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, in.width - 1);
                const int x1 = std::min(x0 + 1, in.width - 1);
                const double fx = std::clamp(sx - std::floor(sx), 0.0, 1.0);
                const double wx = (sx < 0.0) ? 0.0 : (sx > in.width - 1 ? 0.0 : fx);
                const double v00 = fetch(in.at(c, y0, x0));
                const double v01 = fetch(in.at(c, y0, x1));
                const double v10 = fetch(in.at(c, y1, x0));
                const double v11 = fetch(in.at(c, y1, x1));
                const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                 wy * ((1 - wx) * v10 + wx * v11);
                store(out.at(c, y, x), v);
            }
        }
    }
}

} // namespace

ByteRaster resize_bilinear(const ByteRaster& in, int out_h, int out_w) {
    ByteRaster out(in.channels, out_h, out_w);
    resize_bilinear_impl(
        in, out, [](std::uint8_t v) { return static_cast<double>(v); },
        [](std::uint8_t& dst, double v) {
            dst = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l));
        });
    return out;
}

FloatRaster resize_bilinear(const FloatRaster& in, int out_h, int out_w) {
    FloatRaster out(in.channels, out_h, out_w);
    resize_bilinear_impl(
        in, out, [](double v) { return v; }, [](double& dst, double v) { dst = v; });
    return out;
}

ByteRaster resize_nearest(const ByteRaster& in, int out_h, int out_w) {
    ByteRaster out(in.channels, out_h, out_w);
    for (int c = 0; c < in.channels; ++c)
        for (int y = 0; y < out_h; ++y) {
            const int sy = std::clamp(static_cast<int>(std::floor(src_coord(y, in.height, out_h) + 0.5)), 0, in.height - 1);
            for (int x = 0; x < out_w; ++x) {
                const int sx = std::clamp(static_cast<int>(std::floor(src_coord(x, in.width, out_w) + 0.5)), 0, in.width - 1);
                out.at(c, y, x) = in.at(c, sy, sx);
            }
        }
    return out;
}

} // namespace slidepipe
