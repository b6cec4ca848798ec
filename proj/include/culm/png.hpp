#pragma once

// PNG output (8-bit greyscale or RGB via zlib) and the renderings the CLI
// emits: density and velocity colour maps and a small line-plot rasteriser
// for threshold sweeps.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "culm/errors.hpp"
#include "culm/tensor.hpp"

namespace culm {

struct Image8 {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::int64_t channels = 1; // 1 greyscale, 3 RGB
    std::vector<unsigned char> pixels; // row-major, interleaved

    Image8() = default;
    Image8(std::int64_t h, std::int64_t w, std::int64_t c)
        : height(h), width(w), channels(c),
          pixels(static_cast<std::size_t>(h * w * c), 0) {
        if (h < 1 || w < 1 || (c != 1 && c != 3))
            throw ArgumentError("Image8: bad shape or channel count");
    }

    unsigned char& at(std::int64_t r, std::int64_t c, std::int64_t ch = 0) {
        return pixels[static_cast<std::size_t>((r * width + c) * channels + ch)];
    }
    unsigned char at(std::int64_t r, std::int64_t c, std::int64_t ch = 0) const {
        return pixels[static_cast<std::size_t>((r * width + c) * channels + ch)];
    }
};

namespace detail {

inline void push_be32(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back(static_cast<unsigned char>(x >> 24));
    v.push_back(static_cast<unsigned char>(x >> 16));
    v.push_back(static_cast<unsigned char>(x >> 8));
    v.push_back(static_cast<unsigned char>(x));
}

inline void write_png_chunk(std::ofstream& out, const char type[5],
                            const std::vector<unsigned char>& payload) {
    std::vector<unsigned char> head;
    push_be32(head, static_cast<std::uint32_t>(payload.size()));
    for (int i = 0; i < 4; ++i) head.push_back(static_cast<unsigned char>(type[i]));
    out.write(reinterpret_cast<const char*>(head.data()),
              static_cast<std::streamsize>(head.size()));
    if (!payload.empty())
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size()));
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
    if (!payload.empty()) crc = crc32(crc, payload.data(), static_cast<uInt>(payload.size()));
    std::vector<unsigned char> tail;
    push_be32(tail, static_cast<std::uint32_t>(crc));
    out.write(reinterpret_cast<const char*>(tail.data()), 4);
}

inline unsigned char to_byte(double v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

} // namespace detail

inline void write_png(const std::filesystem::path& path, const Image8& img) {
    if (img.height < 1 || img.width < 1 || (img.channels != 1 && img.channels != 3))
        throw ArgumentError("write_png: bad image");
    if (img.pixels.size() !=
        static_cast<std::size_t>(img.height * img.width * img.channels))
        throw ArgumentError("write_png: pixel buffer does not match shape");

    // Filter byte 0 (none) per scanline.
    const std::size_t stride = static_cast<std::size_t>(img.width * img.channels);
    std::vector<unsigned char> raw((stride + 1) * static_cast<std::size_t>(img.height));
    for (std::int64_t r = 0; r < img.height; ++r) {
        unsigned char* row = raw.data() + static_cast<std::size_t>(r) * (stride + 1);
        row[0] = 0;
        std::copy(img.pixels.data() + static_cast<std::size_t>(r) * stride,
                  img.pixels.data() + static_cast<std::size_t>(r + 1) * stride, row + 1);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> deflated(bound);
    if (compress2(deflated.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                  Z_DEFAULT_COMPRESSION) != Z_OK)
        throw NumericError("write_png: compression failed");
    deflated.resize(bound);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("write_png: cannot open " + path.string());
    static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    out.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<unsigned char> ihdr;
    detail::push_be32(ihdr, static_cast<std::uint32_t>(img.width));
    detail::push_be32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8); // bit depth
    ihdr.push_back(img.channels == 1 ? 0 : 2);
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::write_png_chunk(out, "IHDR", ihdr);
    detail::write_png_chunk(out, "IDAT", deflated);
    detail::write_png_chunk(out, "IEND", {});
    if (!out) throw IoError("write_png: write failed for " + path.string());
}

/// Greyscale rendering normalised to the image maximum (black when empty).
inline Image8 render_grey(const Tensor<float>& img) {
    if (img.ndim() != 2) throw ArgumentError("render_grey: image must be 2-d");
    Image8 out(img.dim(0), img.dim(1), 1);
    const float peak = img.max_value();
    if (peak <= 0.0f) return out;
    for (std::int64_t r = 0; r < img.dim(0); ++r)
        for (std::int64_t c = 0; c < img.dim(1); ++c)
            out.at(r, c) = detail::to_byte(static_cast<double>(img(r, c)) / peak);
    return out;
}

/// Hot colour map on the gamma-compressed, max-normalised density.
inline Image8 render_density(const Tensor<float>& density, double gamma = 0.5) {
    if (density.ndim() != 2) throw ArgumentError("render_density: map must be 2-d");
    if (!(gamma > 0.0)) throw ArgumentError("render_density: gamma must be positive");
    Image8 out(density.dim(0), density.dim(1), 3);
    const float peak = density.max_value();
    if (peak <= 0.0f) return out;
    for (std::int64_t r = 0; r < density.dim(0); ++r)
        for (std::int64_t c = 0; c < density.dim(1); ++c) {
            const double x =
                std::pow(std::clamp(static_cast<double>(density(r, c)) / peak, 0.0, 1.0), gamma);
            out.at(r, c, 0) = detail::to_byte(3.0 * x);
            out.at(r, c, 1) = detail::to_byte(3.0 * x - 1.0);
            out.at(r, c, 2) = detail::to_byte(3.0 * x - 2.0);
        }
    return out;
}

/// Direction-as-hue rendering: hue from atan2(vy, vx), brightness from the
/// normalised density, empty cells black.
inline Image8 render_velocity(const Tensor<float>& vx, const Tensor<float>& vy,
                              const Tensor<float>& density) {
    if (vx.shape() != vy.shape() || vx.shape() != density.shape() || vx.ndim() != 2)
        throw ArgumentError("render_velocity: maps must share a 2-d shape");
    Image8 out(vx.dim(0), vx.dim(1), 3);
    const float peak = density.max_value();
    if (peak <= 0.0f) return out;
    for (std::int64_t r = 0; r < vx.dim(0); ++r)
        for (std::int64_t c = 0; c < vx.dim(1); ++c) {
            const double val =
                std::pow(std::clamp(static_cast<double>(density(r, c)) / peak, 0.0, 1.0), 0.5);
            if (val <= 0.0) continue;
            const double ang = std::atan2(static_cast<double>(vy(r, c)),
                                          static_cast<double>(vx(r, c)));
            const double hue = (ang + 3.14159265358979323846) / (2.0 * 3.14159265358979323846);
            const double k = hue * 6.0;
            auto channel = [&](double shift) {
                const double t = std::fmod(k + shift, 6.0);
                return val * (1.0 - std::clamp(std::min(t, 4.0 - t), 0.0, 1.0));
            };
            out.at(r, c, 0) = detail::to_byte(channel(5.0));
            out.at(r, c, 1) = detail::to_byte(channel(3.0));
            out.at(r, c, 2) = detail::to_byte(channel(1.0));
        }
    return out;
}

struct PlotSeries {
    std::string label;
    std::vector<double> x, y;
};

namespace detail {

// 5x7 glyphs for tick labels; columns are bit rows, LSB on top.
inline const unsigned char* plot_glyph(char ch) {
    static const unsigned char digits[12][5] = {
        {0x3e, 0x51, 0x49, 0x45, 0x3e}, // 0
        {0x00, 0x42, 0x7f, 0x40, 0x00}, // 1
        {0x42, 0x61, 0x51, 0x49, 0x46}, // 2
        {0x21, 0x41, 0x45, 0x4b, 0x31}, // 3
        {0x18, 0x14, 0x12, 0x7f, 0x10}, // 4
        {0x27, 0x45, 0x45, 0x45, 0x39}, // 5
        {0x3c, 0x4a, 0x49, 0x49, 0x30}, // 6
        {0x01, 0x71, 0x09, 0x05, 0x03}, // 7
        {0x36, 0x49, 0x49, 0x49, 0x36}, // 8
        {0x06, 0x49, 0x49, 0x29, 0x1e}, // 9
        {0x00, 0x60, 0x60, 0x00, 0x00}, // .
        {0x08, 0x08, 0x08, 0x08, 0x08}, // -
    };
    if (ch >= '0' && ch <= '9') return digits[ch - '0'];
    if (ch == '.') return digits[10];
    if (ch == '-') return digits[11];
    return nullptr;
}

inline void plot_text(Image8& img, std::int64_t r, std::int64_t c, const std::string& text) {
    for (char ch : text) {
        const unsigned char* glyph = plot_glyph(ch);
        if (glyph) {
            for (int gc = 0; gc < 5; ++gc)
                for (int gr = 0; gr < 7; ++gr)
                    if (glyph[gc] >> gr & 1) {
                        const std::int64_t pr = r + gr, pc = c + gc;
                        if (pr >= 0 && pr < img.height && pc >= 0 && pc < img.width)
                            for (int ch3 = 0; ch3 < 3; ++ch3) img.at(pr, pc, ch3) = 0;
                    }
        }
        c += 6;
    }
}

inline void plot_line(Image8& img, std::int64_t r0, std::int64_t c0, std::int64_t r1,
                      std::int64_t c1, const unsigned char rgb[3]) {
    const std::int64_t adc = std::abs(c1 - c0), sc = c0 < c1 ? 1 : -1;
    const std::int64_t adr = -std::abs(r1 - r0), sr = r0 < r1 ? 1 : -1;
    std::int64_t err = adc + adr;
    for (;;) {
        if (r0 >= 0 && r0 < img.height && c0 >= 0 && c0 < img.width)
            for (int ch = 0; ch < 3; ++ch) img.at(r0, c0, ch) = rgb[ch];
        if (r0 == r1 && c0 == c1) break;
        const std::int64_t e2 = 2 * err;
        if (e2 >= adr) {
            err += adr;
            c0 += sc;
        }
        if (e2 <= adc) {
            err += adc;
            r0 += sr;
        }
    }
}

inline std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2g", v);
    return buf;
}

} // namespace detail

/// Line plot of one or more series on a white canvas with labelled ticks.
/// Series colours follow a fixed palette in input order; the caller records
/// the order alongside (labels are not drawn).
inline Image8 render_plot(const std::vector<PlotSeries>& series, std::int64_t height = 480,
                          std::int64_t width = 640) {
    if (series.empty()) throw ArgumentError("render_plot: no series");
    for (const auto& s : series) {
        if (s.x.size() != s.y.size()) throw ArgumentError("render_plot: x/y size mismatch");
        if (s.x.empty()) throw ArgumentError("render_plot: empty series");
    }
    if (height < 120 || width < 160) throw ArgumentError("render_plot: canvas too small");

    double x_lo = series[0].x[0], x_hi = x_lo, y_lo = series[0].y[0], y_hi = y_lo;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            x_lo = std::min(x_lo, s.x[i]);
            x_hi = std::max(x_hi, s.x[i]);
            y_lo = std::min(y_lo, s.y[i]);
            y_hi = std::max(y_hi, s.y[i]);
        }
    if (x_hi <= x_lo) x_hi = x_lo + 1.0;
    if (y_hi <= y_lo) y_hi = y_lo + 1.0;

    Image8 img(height, width, 3);
    std::fill(img.pixels.begin(), img.pixels.end(), static_cast<unsigned char>(255));
    const std::int64_t left = 56, right = width - 16, top = 16, bottom = height - 32;
    static const unsigned char black[3] = {0, 0, 0};
    static const unsigned char palette[6][3] = {{31, 119, 180}, {214, 39, 40}, {44, 160, 44},
                                                {148, 103, 189}, {255, 127, 14}, {23, 190, 207}};

    auto px = [&](double x) {
        return left +
               static_cast<std::int64_t>(std::lround((x - x_lo) / (x_hi - x_lo) *
                                                     static_cast<double>(right - left)));
    };
    auto py = [&](double y) {
        return bottom -
               static_cast<std::int64_t>(std::lround((y - y_lo) / (y_hi - y_lo) *
                                                     static_cast<double>(bottom - top)));
    };

    detail::plot_line(img, top, left, bottom, left, black);
    detail::plot_line(img, bottom, left, bottom, right, black);
    for (int k = 0; k <= 4; ++k) {
        const double fx = x_lo + (x_hi - x_lo) * k / 4.0;
        const double fy = y_lo + (y_hi - y_lo) * k / 4.0;
        detail::plot_line(img, bottom, px(fx), bottom + 4, px(fx), black);
        detail::plot_line(img, py(fy), left - 4, py(fy), left, black);
        detail::plot_text(img, bottom + 8, px(fx) - 12, detail::tick_label(fx));
        detail::plot_text(img, py(fy) - 3, 8, detail::tick_label(fy));
    }

    for (std::size_t si = 0; si < series.size(); ++si) {
        const unsigned char* rgb = palette[si % 6];
        const auto& s = series[si];
        for (std::size_t i = 0; i + 1 < s.x.size(); ++i)
            detail::plot_line(img, py(s.y[i]), px(s.x[i]), py(s.y[i + 1]), px(s.x[i + 1]),
                              rgb);
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            const std::int64_t r = py(s.y[i]), c = px(s.x[i]);
            for (std::int64_t dr = -1; dr <= 1; ++dr)
                for (std::int64_t dc = -1; dc <= 1; ++dc)
                    if (r + dr >= 0 && r + dr < height && c + dc >= 0 && c + dc < width)
                        for (int ch = 0; ch < 3; ++ch) img.at(r + dr, c + dc, ch) = rgb[ch];
        }
    }
    return img;
}

} // namespace culm
