#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "culm/core.hpp"
#include "culm/errors.hpp"
#include "culm/psf.hpp"
#include "culm/random.hpp"
#include "culm/tensor.hpp"

namespace culm {

constexpr double kPi = 3.14159265358979323846;

/// Wrap an angle to (-pi, pi].
inline double wrap_angle(double t) {
    t = std::remainder(t, 2.0 * kPi);
    if (t <= -kPi) t += 2.0 * kPi;
    return t;
}

struct SynthConfig {
    std::int64_t patch_h = 40;
    std::int64_t patch_w = 40;
    std::int64_t m_max = 10;
    double i_min = 0.05;
    double i_max = 1.0;
    double v_max = 1.0;       // px/frame
    double sigma_v = 0.0;     // px/frame
    double sigma_theta = 0.0; // rad
    std::int64_t n_frames = 8;
    std::uint64_t seed = 0;

    void validate() const {
        if (patch_h < 4 || patch_w < 4) throw ArgumentError("patch too small");
        if (m_max < 1) throw ArgumentError("m_max must be at least 1");
        if (!(i_min > 0.0) || !(i_min < i_max) || i_max > 1.0)
            throw ArgumentError("intensity bounds need 0 < i_min < i_max <= 1");
        if (v_max < 0.0 || sigma_v < 0.0 || sigma_theta < 0.0)
            throw ArgumentError("speed and perturbation scales must be non-negative");
        if (n_frames < 1) throw ArgumentError("n_frames must be at least 1");
    }
};

/// One moving bubble: position (px), speed (px/frame), heading (rad),
/// rendering intensity.
struct MBState {
    double x = 0.0;
    double y = 0.0;
    double v = 0.0;
    double theta = 0.0;
    double intensity = 0.0;
};

inline std::vector<MBState> sample_scene(const SynthConfig& cfg, Rng& rng) {
    cfg.validate();
    const double hi_x = static_cast<double>(cfg.patch_w) - 0.5;
    const double hi_y = static_cast<double>(cfg.patch_h) - 0.5;
    const std::int64_t m = rng.uniform_int(1, cfg.m_max);
    std::vector<MBState> out;
    out.reserve(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        MBState s;
        s.x = rng.uniform(-0.5, hi_x);
        s.y = rng.uniform(-0.5, hi_y);
        s.intensity = rng.uniform(cfg.i_min, cfg.i_max);
        s.v = rng.uniform(0.0, cfg.v_max);
        s.theta = wrap_angle(rng.uniform(-kPi, kPi));
        out.push_back(s);
    }
    return out;
}

namespace detail {

inline bool inside_patch(double x, double y, const SynthConfig& cfg) {
    return x >= -0.5 && x < static_cast<double>(cfg.patch_w) - 0.5 && y >= -0.5 &&
           y < static_cast<double>(cfg.patch_h) - 0.5;
}

/// Fresh bubble entering through a random edge, heading into the patch.
inline MBState boundary_entry(const SynthConfig& cfg, Rng& rng) {
    const double hi_x = static_cast<double>(cfg.patch_w) - 0.5 - 1e-9;
    const double hi_y = static_cast<double>(cfg.patch_h) - 0.5 - 1e-9;
    MBState s;
    double th_lo = 0.0, th_hi = 0.0;
    switch (rng.uniform_int(0, 3)) {
        case 0: // left, heading right
            s.x = -0.5;
            s.y = rng.uniform(-0.5, hi_y);
            th_lo = -kPi / 2.0;
            th_hi = kPi / 2.0;
            break;
        case 1: // top, heading down
            s.y = -0.5;
            s.x = rng.uniform(-0.5, hi_x);
            th_lo = 0.0;
            th_hi = kPi;
            break;
        case 2: // right, heading left
            s.x = hi_x;
            s.y = rng.uniform(-0.5, hi_y);
            th_lo = kPi / 2.0;
            th_hi = 3.0 * kPi / 2.0;
            break;
        default: // bottom, heading up
            s.y = hi_y;
            s.x = rng.uniform(-0.5, hi_x);
            th_lo = -kPi;
            th_hi = 0.0;
            break;
    }
    s.intensity = rng.uniform(cfg.i_min, cfg.i_max);
    s.v = rng.uniform(0.0, cfg.v_max);
    s.theta = wrap_angle(rng.uniform(th_lo, th_hi));
    return s;
}

} // namespace detail

struct StepResult {
    std::vector<MBState> states;
    std::vector<bool> replaced;
};

/// Advance every bubble one frame: move along the current heading, then
/// perturb speed and heading. Bubbles that left the patch are replaced by
/// fresh boundary entries (no perturbation draw for those).
inline StepResult step_motion(const std::vector<MBState>& states, const SynthConfig& cfg,
                              Rng& rng) {
    if (states.empty()) throw ArgumentError("step_motion needs at least one bubble");
    cfg.validate();
    StepResult out;
    out.states.reserve(states.size());
    out.replaced.reserve(states.size());
    for (const auto& s : states) {
        MBState n = s;
        n.x += n.v * std::cos(n.theta);
        n.y += n.v * std::sin(n.theta);
        const bool rep = !detail::inside_patch(n.x, n.y, cfg);
        if (rep) {
            n = detail::boundary_entry(cfg, rng);
        } else {
            if (cfg.sigma_v > 0.0) n.v = std::max(0.0, n.v + rng.normal(0.0, cfg.sigma_v));
            if (cfg.sigma_theta > 0.0)
                n.theta = wrap_angle(n.theta + rng.normal(0.0, cfg.sigma_theta));
        }
        out.states.push_back(n);
        out.replaced.push_back(rep);
    }
    return out;
}

/// Per-frame training targets. presence/offsets/intensity live on the image
/// grid, trajectory/velocity on the 4x grid.
struct GroundTruthMaps {
    Tensor<float> presence, offset_x, offset_y, intensity;
    Tensor<float> trajectory, velocity_x, velocity_y;

    GroundTruthMaps() = default;
    GroundTruthMaps(std::int64_t h, std::int64_t w)
        : presence({h, w}),
          offset_x({h, w}),
          offset_y({h, w}),
          intensity({h, w}),
          trajectory({4 * h, 4 * w}),
          velocity_x({4 * h, 4 * w}),
          velocity_y({4 * h, 4 * w}) {}
};

/// Presence marks the pixel containing each bubble centre (round half-up),
/// offsets are measured from that pixel centre and land in [-0.5, 0.5).
/// When two bubbles share a pixel the brighter one wins.
inline GroundTruthMaps ground_truth_from_states(const std::vector<MBState>& states,
                                                std::int64_t h, std::int64_t w) {
    GroundTruthMaps gt(h, w);
    for (const auto& s : states) {
        const auto px = static_cast<std::int64_t>(std::floor(s.x + 0.5));
        const auto py = static_cast<std::int64_t>(std::floor(s.y + 0.5));
        if (px < 0 || px >= w || py < 0 || py >= h)
            throw ArgumentError("bubble outside the patch");
        if (gt.presence(py, px) != 0.0f &&
            gt.intensity(py, px) >= static_cast<float>(s.intensity))
            continue;
        gt.presence(py, px) = 1.0f;
        gt.offset_x(py, px) = static_cast<float>(s.x - static_cast<double>(px));
        gt.offset_y(py, px) = static_cast<float>(s.y - static_cast<double>(py));
        gt.intensity(py, px) = static_cast<float>(s.intensity);
    }
    return gt;
}

namespace detail {

/// 1-px Bresenham segment on the 4x grid carrying the step displacement.
inline void raster_segment(GroundTruthMaps& gt, double x0, double y0, double x1, double y1) {
    std::int64_t gx = fine_grid_index(x0), gy = fine_grid_index(y0);
    const std::int64_t ex = fine_grid_index(x1), ey = fine_grid_index(y1);
    const auto vx = static_cast<float>(x1 - x0);
    const auto vy = static_cast<float>(y1 - y0);
    const std::int64_t adx = std::abs(ex - gx), sx = gx < ex ? 1 : -1;
    const std::int64_t ady = -std::abs(ey - gy), sy = gy < ey ? 1 : -1;
    std::int64_t err = adx + ady;
    while (true) {
        gt.trajectory(gy, gx) = 1.0f;
        gt.velocity_x(gy, gx) = vx;
        gt.velocity_y(gy, gx) = vy;
        if (gx == ex && gy == ey) break;
        const std::int64_t e2 = 2 * err;
        if (e2 >= ady) {
            err += ady;
            gx += sx;
        }
        if (e2 <= adx) {
            err += adx;
            gy += sy;
        }
    }
}

} // namespace detail

struct SequenceData {
    FrameStack frames;
    std::vector<GroundTruthMaps> maps;
    std::vector<Track> tracks;
};

/// Render a moving-bubble sequence from explicit initial states. maps[k]
/// holds the per-frame targets; its trajectory/velocity channels carry the
/// segments entering frame k (frame 0 has none). Replaced bubbles close
/// their track and start a new one without a connecting segment.
inline SequenceData render_sequence_from(std::vector<MBState> states, const SynthConfig& cfg,
                                         const GaussianPSF& psf, Rng& rng) {
    cfg.validate();
    psf.validate();
    if (states.empty()) throw ArgumentError("render needs at least one bubble");
    const std::int64_t h = cfg.patch_h, w = cfg.patch_w;

    SequenceData seq;
    seq.frames = FrameStack(Tensor<float>({cfg.n_frames, h, w}), Geometry{});
    seq.maps.reserve(static_cast<std::size_t>(cfg.n_frames));

    auto render_into = [&](std::int64_t frame) {
        std::vector<PointSource> pts;
        pts.reserve(states.size());
        for (const auto& s : states) pts.push_back({s.x, s.y, s.intensity});
        const auto img = render_points(pts, psf, h, w);
        std::copy(img.data(), img.data() + img.numel(),
                  seq.frames.data.data() + frame * h * w);
    };
    auto track_point = [](std::int64_t frame, const MBState& s) {
        Localisation l;
        l.frame = frame;
        l.x = s.x;
        l.y = s.y;
        l.intensity = s.intensity;
        l.score = 1.0;
        return l;
    };

    std::vector<std::size_t> ids(states.size());
    for (std::size_t i = 0; i < states.size(); ++i) {
        ids[i] = i;
        Track t;
        t.id = static_cast<std::int64_t>(i);
        t.points.push_back(track_point(0, states[i]));
        seq.tracks.push_back(std::move(t));
    }
    seq.maps.push_back(ground_truth_from_states(states, h, w));
    render_into(0);

    for (std::int64_t k = 1; k < cfg.n_frames; ++k) {
        const std::vector<MBState> prev = states;
        auto step = step_motion(states, cfg, rng);
        states = std::move(step.states);
        auto gt = ground_truth_from_states(states, h, w);
        for (std::size_t i = 0; i < states.size(); ++i) {
            if (step.replaced[i]) {
                Track t;
                t.id = static_cast<std::int64_t>(seq.tracks.size());
                t.points.push_back(track_point(k, states[i]));
                ids[i] = seq.tracks.size();
                seq.tracks.push_back(std::move(t));
            } else {
                detail::raster_segment(gt, prev[i].x, prev[i].y, states[i].x, states[i].y);
                Track& t = seq.tracks[ids[i]];
                t.points.push_back(track_point(k, states[i]));
                t.velocities.push_back({states[i].x - prev[i].x, states[i].y - prev[i].y});
            }
        }
        seq.maps.push_back(std::move(gt));
        render_into(k);
    }
    for (const auto& t : seq.tracks) t.validate();
    return seq;
}

inline SequenceData render_sequence(const SynthConfig& cfg, const GaussianPSF& psf, Rng& rng) {
    cfg.validate();
    return render_sequence_from(sample_scene(cfg, rng), cfg, psf, rng);
}

/// Degradation levels for the pseudo-CEUS domain: multiplicative correlated
/// speckle, slowly drifting background texture, white additive noise. All
/// fields evolve with first-order temporal coherence.
struct DegradeConfig {
    double speckle_level = 0.8;
    double speckle_sigma_px = 1.5;
    double speckle_rho = 0.9;
    double background_level = 0.15;
    double background_sigma_px = 4.0;
    double background_rho = 0.97;
    double noise_std = 0.03;

    void validate() const {
        if (speckle_level < 0.0 || background_level < 0.0 || noise_std < 0.0)
            throw ArgumentError("degradation levels must be non-negative");
        if (!(speckle_sigma_px > 0.0) || !(background_sigma_px > 0.0))
            throw ArgumentError("degradation correlation lengths must be positive");
        if (speckle_rho < 0.0 || speckle_rho >= 1.0 || background_rho < 0.0 ||
            background_rho >= 1.0)
            throw ArgumentError("temporal coherence must lie in [0, 1)");
    }
};

namespace detail {

inline void gaussian_blur_2d(Tensor<float>& img, double sigma) {
    const std::int64_t h = img.dim(0), w = img.dim(1);
    const auto radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
    std::vector<float> k(static_cast<std::size_t>(2 * radius + 1));
    float ks = 0.0f;
    for (std::int64_t i = -radius; i <= radius; ++i) {
        const auto v = static_cast<float>(
            std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma)));
        k[static_cast<std::size_t>(i + radius)] = v;
        ks += v;
    }
    for (auto& v : k) v /= ks;

    auto mirror = [](std::int64_t i, std::int64_t n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
        return i;
    };
    Tensor<float> tmp({h, w});
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            float acc = 0.0f;
            for (std::int64_t i = -radius; i <= radius; ++i)
                acc += k[static_cast<std::size_t>(i + radius)] * img(r, mirror(c + i, w));
            tmp(r, c) = acc;
        }
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            float acc = 0.0f;
            for (std::int64_t i = -radius; i <= radius; ++i)
                acc += k[static_cast<std::size_t>(i + radius)] * tmp(mirror(r + i, h), c);
            img(r, c) = acc;
        }
}

/// Spatially correlated field with zero mean and unit variance.
inline Tensor<float> smooth_unit_field(std::int64_t h, std::int64_t w, double sigma, Rng& rng) {
    Tensor<float> f({h, w});
    for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = static_cast<float>(rng.normal());
    gaussian_blur_2d(f, sigma);
    double mean = 0.0;
    for (std::int64_t i = 0; i < f.numel(); ++i) mean += f[i];
    mean /= static_cast<double>(f.numel());
    double var = 0.0;
    for (std::int64_t i = 0; i < f.numel(); ++i) {
        const double d = static_cast<double>(f[i]) - mean;
        var += d * d;
    }
    var /= static_cast<double>(f.numel());
    const auto scale = static_cast<float>(1.0 / std::sqrt(std::max(var, 1e-30)));
    for (std::int64_t i = 0; i < f.numel(); ++i)
        f[i] = (f[i] - static_cast<float>(mean)) * scale;
    return f;
}

} // namespace detail

/// Degrade clean bubble frames into a pseudo-CEUS stack:
/// clip(x*(1+speckle) + background + noise, 0), rescaled only if the result
/// exceeds one. The random fields are temporally coherent so consecutive
/// frames share structure.
inline FrameStack make_pseudo_ceus(const FrameStack& mb_frames, const DegradeConfig& cfg,
                                   Rng& rng) {
    cfg.validate();
    const std::int64_t n = mb_frames.n_frames(), h = mb_frames.height(), w = mb_frames.width();
    FrameStack out;
    out.geometry = mb_frames.geometry;
    out.data = Tensor<float>({n, h, w});

    Tensor<float> speckle, background;
    for (std::int64_t t = 0; t < n; ++t) {
        if (cfg.speckle_level > 0.0) {
            auto innov = detail::smooth_unit_field(h, w, cfg.speckle_sigma_px, rng);
            if (t == 0) {
                speckle = std::move(innov);
            } else {
                const auto a = static_cast<float>(cfg.speckle_rho);
                const auto b = static_cast<float>(std::sqrt(1.0 - cfg.speckle_rho * cfg.speckle_rho));
                for (std::int64_t i = 0; i < speckle.numel(); ++i)
                    speckle[i] = a * speckle[i] + b * innov[i];
            }
        }
        if (cfg.background_level > 0.0) {
            auto innov = detail::smooth_unit_field(h, w, cfg.background_sigma_px, rng);
            if (t == 0) {
                background = std::move(innov);
            } else {
                const auto a = static_cast<float>(cfg.background_rho);
                const auto b = static_cast<float>(
                    std::sqrt(1.0 - cfg.background_rho * cfg.background_rho));
                for (std::int64_t i = 0; i < background.numel(); ++i)
                    background[i] = a * background[i] + b * innov[i];
            }
        }
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c) {
                double v = static_cast<double>(mb_frames.data(t, r, c));
                if (cfg.speckle_level > 0.0)
                    v *= 1.0 + cfg.speckle_level * static_cast<double>(speckle(r, c));
                if (cfg.background_level > 0.0)
                    v += cfg.background_level * 0.5 *
                         (1.0 + static_cast<double>(background(r, c)));
                if (cfg.noise_std > 0.0) v += cfg.noise_std * rng.normal();
                out.data(t, r, c) = static_cast<float>(std::max(0.0, v));
            }
    }
    const float m = out.data.max_value();
    if (m > 1.0f) out.data *= 1.0f / m;
    return out;
}

} // namespace culm
