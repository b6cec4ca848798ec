#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "culm/core.hpp"
#include "culm/errors.hpp"
#include "culm/tensor.hpp"

namespace culm {

// Binary array container: magic "CULM", version byte, dtype code byte
// (1 = float32), ndim byte, shape as int64 little-endian, then row-major
// float32 little-endian payload.

namespace detail {

constexpr char kMagic[4] = {'C', 'U', 'L', 'M'};
constexpr unsigned char kVersion = 1;
constexpr unsigned char kDtypeF32 = 1;

inline void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32_le(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline float get_f32_le(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

} // namespace detail

inline void save_array(const std::string& path, const Tensor<float>& array) {
    if (array.ndim() < 1 || array.ndim() > 4)
        throw ArgumentError("array must be 1-4 dimensional");
    if (!array.all_finite())
        throw ArgumentError("array must be finite-valued");

    std::string buf;
    buf.reserve(16 + static_cast<std::size_t>(array.numel()) * 4);
    buf.append(detail::kMagic, 4);
    buf.push_back(static_cast<char>(detail::kVersion));
    buf.push_back(static_cast<char>(detail::kDtypeF32));
    buf.push_back(static_cast<char>(array.ndim()));
    for (int i = 0; i < array.ndim(); ++i)
        detail::put_u64_le(buf, static_cast<std::uint64_t>(array.dim(i)));
    for (std::int64_t i = 0; i < array.numel(); ++i) detail::put_f32_le(buf, array[i]);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed: " + path);
}

inline Tensor<float> load_array(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    const std::size_t n = buf.size();

    auto need = [&](std::size_t at, std::size_t count, const char* what) {
        if (at + count > n)
            throw FormatError(std::string("truncated container, expected ") + what +
                                  " at byte " + std::to_string(at),
                              at);
    };

    need(0, 4, "magic");
    if (std::memcmp(p, detail::kMagic, 4) != 0)
        throw FormatError("bad magic at byte 0", 0);
    need(4, 3, "header");
    if (p[4] != detail::kVersion)
        throw FormatError("unsupported format version at byte 4", 4);
    if (p[5] != detail::kDtypeF32)
        throw FormatError("unsupported dtype code at byte 5", 5);
    const int ndim = p[6];
    if (ndim < 1 || ndim > 4)
        throw FormatError("dimension count out of range at byte 6", 6);

    std::size_t off = 7;
    std::vector<std::int64_t> shape;
    for (int i = 0; i < ndim; ++i) {
        need(off, 8, "shape");
        const std::uint64_t d = detail::get_u64_le(p + off);
        if (d == 0 || d > (1ULL << 40))
            throw FormatError("invalid dimension at byte " + std::to_string(off), off);
        shape.push_back(static_cast<std::int64_t>(d));
        off += 8;
    }

    Tensor<float> out(shape);
    need(off, static_cast<std::size_t>(out.numel()) * 4, "payload");
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        out[i] = detail::get_f32_le(p + off);
        off += 4;
    }
    if (off != n)
        throw FormatError("trailing bytes after payload at byte " + std::to_string(off), off);
    return out;
}

// CSV schemas. Values are written with 9 significant digits.

namespace detail {

inline std::string fmt_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_num(const std::string& s, std::size_t line_no, const char* field) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw FormatError("non-numeric " + std::string(field) + " on line " +
                              std::to_string(line_no),
                          line_no);
    }
    if (pos != s.size())
        throw FormatError("non-numeric " + std::string(field) + " on line " +
                              std::to_string(line_no),
                          line_no);
    return v;
}

} // namespace detail

inline const char* localisation_csv_header() {
    return "frame,x,y,intensity,sigma_I,sigma_x,sigma_y,score";
}

inline void write_localisations_csv(const std::string& path,
                                    const std::vector<Localisation>& locs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << localisation_csv_header() << '\n';
    for (const auto& l : locs) {
        out << l.frame << ',' << detail::fmt_g9(l.x) << ',' << detail::fmt_g9(l.y) << ','
            << detail::fmt_g9(l.intensity) << ',' << detail::fmt_g9(l.sigma_i) << ','
            << detail::fmt_g9(l.sigma_x) << ',' << detail::fmt_g9(l.sigma_y) << ','
            << detail::fmt_g9(l.score) << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

inline std::vector<Localisation> read_localisations_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("missing header on line 1", 1);
    if (detail::split_csv_line(line) != detail::split_csv_line(localisation_csv_header()))
        throw FormatError("unexpected header on line 1", 1);

    std::vector<Localisation> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 8)
            throw FormatError("expected 8 fields on line " + std::to_string(line_no), line_no);
        Localisation l;
        l.frame = static_cast<std::int64_t>(detail::parse_num(f[0], line_no, "frame"));
        l.x = detail::parse_num(f[1], line_no, "x");
        l.y = detail::parse_num(f[2], line_no, "y");
        l.intensity = detail::parse_num(f[3], line_no, "intensity");
        l.sigma_i = detail::parse_num(f[4], line_no, "sigma_I");
        l.sigma_x = detail::parse_num(f[5], line_no, "sigma_x");
        l.sigma_y = detail::parse_num(f[6], line_no, "sigma_y");
        l.score = detail::parse_num(f[7], line_no, "score");
        out.push_back(l);
    }
    return out;
}

inline const char* track_csv_header() { return "track,frame,x,y,intensity,vx,vy"; }

/// One row per track point; vx,vy on row k of a track hold the step
/// velocity into that point (first row of each track carries zeros).
inline void write_tracks_csv(const std::string& path, const std::vector<Track>& tracks) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << track_csv_header() << '\n';
    for (const auto& t : tracks) {
        t.validate();
        for (std::size_t k = 0; k < t.points.size(); ++k) {
            const auto& p = t.points[k];
            const double vx = k == 0 ? 0.0 : t.velocities[k - 1].x;
            const double vy = k == 0 ? 0.0 : t.velocities[k - 1].y;
            out << t.id << ',' << p.frame << ',' << detail::fmt_g9(p.x) << ','
                << detail::fmt_g9(p.y) << ',' << detail::fmt_g9(p.intensity) << ','
                << detail::fmt_g9(vx) << ',' << detail::fmt_g9(vy) << '\n';
        }
    }
    if (!out) throw IoError("write failed: " + path);
}

inline std::vector<Track> read_tracks_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("missing header on line 1", 1);
    if (detail::split_csv_line(line) != detail::split_csv_line(track_csv_header()))
        throw FormatError("unexpected header on line 1", 1);

    std::vector<Track> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 7)
            throw FormatError("expected 7 fields on line " + std::to_string(line_no), line_no);
        const auto id = static_cast<std::int64_t>(detail::parse_num(f[0], line_no, "track"));
        Localisation p;
        p.frame = static_cast<std::int64_t>(detail::parse_num(f[1], line_no, "frame"));
        p.x = detail::parse_num(f[2], line_no, "x");
        p.y = detail::parse_num(f[3], line_no, "y");
        p.intensity = detail::parse_num(f[4], line_no, "intensity");
        const double vx = detail::parse_num(f[5], line_no, "vx");
        const double vy = detail::parse_num(f[6], line_no, "vy");
        if (out.empty() || out.back().id != id) {
            out.push_back(Track{id, {}, {}});
        }
        Track& t = out.back();
        if (!t.points.empty()) t.velocities.push_back({vx, vy});
        t.points.push_back(p);
    }
    for (const auto& t : out) t.validate();
    return out;
}

} // namespace culm
