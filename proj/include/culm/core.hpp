#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "culm/errors.hpp"
#include "culm/tensor.hpp"

namespace culm {

/// Pixel geometry of an acquisition: physical pitch per pixel and frame rate.
/// Velocities given in mm/s convert to px/frame through this.
struct Geometry {
    double pixel_pitch_x_um = 100.0; // µm per pixel, lateral
    double pixel_pitch_y_um = 100.0; // µm per pixel, axial
    double frame_rate_hz = 100.0;

    void validate() const {
        if (!(pixel_pitch_x_um > 0.0) || !(pixel_pitch_y_um > 0.0) || !(frame_rate_hz > 0.0))
            throw ArgumentError("geometry fields must be strictly positive");
    }
};

struct VelocityPxPerFrame {
    double x = 0.0;
    double y = 0.0;
};

/// v [mm/s] -> px/frame on each axis: v * 1000 / (pitch_um * rate).
inline VelocityPxPerFrame mmps_to_px_per_frame(double v_mm_s, const Geometry& g) {
    g.validate();
    return {v_mm_s * 1000.0 / (g.pixel_pitch_x_um * g.frame_rate_hz),
            v_mm_s * 1000.0 / (g.pixel_pitch_y_um * g.frame_rate_hz)};
}

/// Cell index on the factor-times-upsampled grid. Cell g spans original
/// coordinates [(g - factor/2)/factor, (g - factor/2 + 1)/factor), so a
/// pixel-centre coordinate v=0 falls on cell factor/2 of its block and the
/// whole extent [-0.5, n-0.5) maps onto cells 0..factor*n-1.
inline std::int64_t fine_grid_index(double v, int factor = 4) {
    return static_cast<std::int64_t>(
        std::floor(v * static_cast<double>(factor) + static_cast<double>(factor) / 2.0));
}

/// Time sequence of 2D intensity frames, indexed [frame, row, col].
struct FrameStack {
    Tensor<float> data; // non-negative intensities
    Geometry geometry;

    FrameStack() = default;
    FrameStack(Tensor<float> d, Geometry g) : data(std::move(d)), geometry(g) {
        if (data.ndim() != 3) throw ArgumentError("frame stack must be 3-dimensional");
        geometry.validate();
    }

    std::int64_t n_frames() const { return data.dim(0); }
    std::int64_t height() const { return data.dim(1); }
    std::int64_t width() const { return data.dim(2); }

    /// Scale so the maximum over the whole stack equals one.
    void normalise() {
        const float m = data.max_value();
        if (m > 0.0f) {
            const float inv = 1.0f / m;
            data *= inv;
        }
    }

    /// Per-pixel maximum over time.
    Tensor<float> mip() const {
        Tensor<float> out({height(), width()});
        for (std::int64_t t = 0; t < n_frames(); ++t)
            for (std::int64_t r = 0; r < height(); ++r)
                for (std::int64_t c = 0; c < width(); ++c)
                    out(r, c) = std::max(out(r, c), data(t, r, c));
        return out;
    }
};

/// One detected microbubble. Uncertainty fields are 0 when the detector
/// does not provide them (only the learned decoder does).
struct Localisation {
    std::int64_t frame = 0;
    double x = 0.0; // sub-pixel column coordinate
    double y = 0.0; // sub-pixel row coordinate
    double intensity = 0.0;
    double sigma_i = 0.0;
    double sigma_x = 0.0;
    double sigma_y = 0.0;
    double score = 0.0; // detection probability in [0, 1]
};

/// Ordered sequence of localisations with per-step velocities in px/frame.
/// velocities[k] is the displacement from points[k] to points[k+1] divided
/// by the frame gap.
struct Track {
    std::int64_t id = 0;
    std::vector<Localisation> points;
    std::vector<VelocityPxPerFrame> velocities;

    void validate() const {
        if (points.empty()) throw ArgumentError("track must contain at least one point");
        if (velocities.size() + 1 != points.size())
            throw ArgumentError("track velocity list must have length points-1");
        for (std::size_t i = 1; i < points.size(); ++i)
            if (points[i].frame <= points[i - 1].frame)
                throw ArgumentError("track frame indices must be strictly increasing");
    }
};

} // namespace culm
