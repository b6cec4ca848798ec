#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "culm/assignment.hpp"
#include "culm/core.hpp"
#include "culm/errors.hpp"
#include "culm/tensor.hpp"

namespace culm {

/// 20*log10(mean(signal)/mean(noise)); +inf when the noise region averages
/// to zero.
inline double cnr_db(const Tensor<float>& image, const Tensor<unsigned char>& signal_region,
                     const Tensor<unsigned char>& noise_region) {
    if (image.shape() != signal_region.shape() || image.shape() != noise_region.shape())
        throw ArgumentError("cnr regions must match the image shape");
    double s = 0.0, ns = 0.0;
    std::int64_t sn = 0, nn = 0;
    for (std::int64_t i = 0; i < image.numel(); ++i) {
        if (signal_region[i]) {
            s += static_cast<double>(image[i]);
            ++sn;
        }
        if (noise_region[i]) {
            ns += static_cast<double>(image[i]);
            ++nn;
        }
    }
    if (sn == 0 || nn == 0) throw ArgumentError("cnr regions must be nonempty");
    const double sm = s / static_cast<double>(sn);
    const double nm = ns / static_cast<double>(nn);
    if (nm <= 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(sm / nm);
}

/// Signal/noise masks derived from a clean reference image: signal where it
/// reaches hi_frac of its maximum, noise where it stays below lo_frac.
inline std::pair<Tensor<unsigned char>, Tensor<unsigned char>> cnr_regions_from_clean(
    const Tensor<float>& clean, double hi_frac = 0.1, double lo_frac = 0.01) {
    if (!(hi_frac > lo_frac) || !(lo_frac >= 0.0))
        throw ArgumentError("cnr thresholds need hi_frac > lo_frac >= 0");
    const float mx = clean.max_value();
    Tensor<unsigned char> sig(clean.shape()), noi(clean.shape());
    for (std::int64_t i = 0; i < clean.numel(); ++i) {
        if (clean[i] >= static_cast<float>(hi_frac) * mx) sig[i] = 1;
        if (clean[i] <= static_cast<float>(lo_frac) * mx) noi[i] = 1;
    }
    return {std::move(sig), std::move(noi)};
}

/// Width between the two half-maximum crossings of a single-peaked profile,
/// each located by linear interpolation between the bracketing samples.
inline double fwhm(const std::vector<double>& profile, double sample_spacing) {
    if (profile.size() < 3) throw ArgumentError("profile too short for a width measurement");
    if (!(sample_spacing > 0.0)) throw ArgumentError("sample spacing must be positive");
    std::size_t peak = 0;
    for (std::size_t i = 1; i < profile.size(); ++i)
        if (profile[i] > profile[peak]) peak = i;
    const double half = profile[peak] / 2.0;

    double left = -1.0, right = -1.0;
    for (std::size_t i = peak; i-- > 0;) {
        if (profile[i] < half) {
            const double t = (half - profile[i]) / (profile[i + 1] - profile[i]);
            left = static_cast<double>(i) + t;
            break;
        }
    }
    for (std::size_t i = peak + 1; i < profile.size(); ++i) {
        if (profile[i] < half) {
            const double t = (profile[i - 1] - half) / (profile[i - 1] - profile[i]);
            right = static_cast<double>(i - 1) + t;
            break;
        }
    }
    if (left < 0.0 || right < 0.0)
        throw NumericError("profile does not cross half maximum on both sides");
    return (right - left) * sample_spacing;
}

inline double fwhm(const Tensor<float>& profile, double sample_spacing) {
    if (profile.ndim() != 1) throw ArgumentError("profile must be 1-dimensional");
    std::vector<double> p(static_cast<std::size_t>(profile.numel()));
    for (std::int64_t i = 0; i < profile.numel(); ++i) p[static_cast<std::size_t>(i)] = profile[i];
    return fwhm(p, sample_spacing);
}

struct MatchedPair {
    std::int64_t detected = 0;
    std::int64_t gt = 0;
    double distance = 0.0;
};

struct MatchResult {
    std::vector<MatchedPair> pairs;
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;
    double radius = 0.0;
};

/// Optimal one-to-one matching of detections to ground truth within a
/// radius: maximum pair count first, minimum total distance second.
inline MatchResult match_detections(const std::vector<Localisation>& detected,
                                    const std::vector<Localisation>& gt, double radius) {
    if (!(radius > 0.0)) throw ArgumentError("matching radius must be positive");
    MatchResult out;
    out.radius = radius;
    out.fp = static_cast<std::int64_t>(detected.size());
    out.fn = static_cast<std::int64_t>(gt.size());
    if (detected.empty() || gt.empty()) return out;

    Tensor<double> dist({static_cast<std::int64_t>(detected.size()),
                         static_cast<std::int64_t>(gt.size())});
    for (std::size_t i = 0; i < detected.size(); ++i)
        for (std::size_t j = 0; j < gt.size(); ++j)
            dist(static_cast<std::int64_t>(i), static_cast<std::int64_t>(j)) =
                std::hypot(detected[i].x - gt[j].x, detected[i].y - gt[j].y);

    const auto match = gated_matching(dist, radius);
    for (const auto& [i, j] : match.pairs) out.pairs.push_back({i, j, dist(i, j)});
    out.tp = static_cast<std::int64_t>(out.pairs.size());
    out.fp -= out.tp;
    out.fn -= out.tp;
    return out;
}

struct DetectionScores {
    std::optional<double> recall;
    std::optional<double> precision;
    std::optional<double> f1;
};

inline DetectionScores detection_scores(const MatchResult& m) {
    DetectionScores s;
    const double tp = static_cast<double>(m.tp);
    if (m.tp + m.fn > 0) s.recall = tp / static_cast<double>(m.tp + m.fn);
    if (m.tp + m.fp > 0) s.precision = tp / static_cast<double>(m.tp + m.fp);
    if (2 * m.tp + m.fn + m.fp > 0) s.f1 = 2.0 * tp / static_cast<double>(2 * m.tp + m.fn + m.fp);
    return s;
}

inline std::optional<double> mean_loc_error(const MatchResult& m) {
    if (m.pairs.empty()) return std::nullopt;
    double s = 0.0;
    for (const auto& p : m.pairs) s += p.distance;
    return s / static_cast<double>(m.pairs.size());
}

inline double rmse(const Tensor<float>& x, const Tensor<float>& y) {
    if (x.shape() != y.shape()) throw ArgumentError("rmse inputs must share a shape");
    double s = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(x.numel()));
}

/// Structural similarity from whole-image statistics with C1=(0.01 L)^2,
/// C2=(0.03 L)^2.
inline double ssim_global(const Tensor<float>& x, const Tensor<float>& y, double dynamic_range = 1.0) {
    if (x.shape() != y.shape()) throw ArgumentError("ssim inputs must share a shape");
    if (!(dynamic_range > 0.0)) throw ArgumentError("dynamic range must be positive");
    const double n = static_cast<double>(x.numel());
    double mx = 0.0, my = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double vx = 0.0, vy = 0.0, cxy = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double dx = static_cast<double>(x[i]) - mx;
        const double dy = static_cast<double>(y[i]) - my;
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
    }
    vx /= n;
    vy /= n;
    cxy /= n;
    const double c1 = 0.01 * dynamic_range * 0.01 * dynamic_range;
    const double c2 = 0.03 * dynamic_range * 0.03 * dynamic_range;
    return ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) /
           ((mx * mx + my * my + c1) * (vx + vy + c2));
}

/// Mean SSIM over an 11x11 Gaussian window (sigma 1.5), evaluated on the
/// interior where the window fits entirely.
inline double ssim_windowed(const Tensor<float>& x, const Tensor<float>& y,
                            double dynamic_range = 1.0) {
    if (x.shape() != y.shape()) throw ArgumentError("ssim inputs must share a shape");
    if (x.ndim() != 2) throw ArgumentError("windowed ssim expects 2-dimensional images");
    const std::int64_t h = x.dim(0), w = x.dim(1);
    constexpr std::int64_t half = 5;
    if (h < 11 || w < 11) throw ArgumentError("image too small for an 11x11 window");

    double win[11][11];
    double wsum = 0.0;
    for (int r = 0; r < 11; ++r)
        for (int c = 0; c < 11; ++c) {
            const double dr = r - 5.0, dc = c - 5.0;
            win[r][c] = std::exp(-(dr * dr + dc * dc) / (2.0 * 1.5 * 1.5));
            wsum += win[r][c];
        }
    for (auto& row : win)
        for (auto& v : row) v /= wsum;

    const double c1 = 0.01 * dynamic_range * 0.01 * dynamic_range;
    const double c2 = 0.03 * dynamic_range * 0.03 * dynamic_range;
    double acc = 0.0;
    std::int64_t cnt = 0;
    for (std::int64_t r = half; r < h - half; ++r)
        for (std::int64_t c = half; c < w - half; ++c) {
            double mx = 0.0, my = 0.0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    mx += win[i][j] * x(r + i - half, c + j - half);
                    my += win[i][j] * y(r + i - half, c + j - half);
                }
            double vx = 0.0, vy = 0.0, cxy = 0.0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const double dx = x(r + i - half, c + j - half) - mx;
                    const double dy = y(r + i - half, c + j - half) - my;
                    vx += win[i][j] * dx * dx;
                    vy += win[i][j] * dy * dy;
                    cxy += win[i][j] * dx * dy;
                }
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) /
                   ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++cnt;
        }
    return acc / static_cast<double>(cnt);
}

struct PrPoint {
    double threshold = 0.0;
    std::optional<double> recall;
    std::optional<double> precision;
    std::optional<double> f1;
    std::optional<double> mean_error;
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;
};

/// Sweep a detector over thresholds; detector(threshold) returns per-frame
/// localisation lists aligned with gt_per_frame.
template <typename Detector>
std::vector<PrPoint> pr_sweep(Detector&& detector,
                              const std::vector<std::vector<Localisation>>& gt_per_frame,
                              const std::vector<double>& thresholds, double radius) {
    if (thresholds.size() < 2) throw ArgumentError("threshold sweep needs at least 2 values");
    std::vector<PrPoint> curve;
    for (const double thr : thresholds) {
        const std::vector<std::vector<Localisation>> det = detector(thr);
        if (det.size() != gt_per_frame.size())
            throw ArgumentError("detector frame count does not match ground truth");
        PrPoint pt;
        pt.threshold = thr;
        double err_sum = 0.0;
        for (std::size_t f = 0; f < det.size(); ++f) {
            const auto m = match_detections(det[f], gt_per_frame[f], radius);
            pt.tp += m.tp;
            pt.fp += m.fp;
            pt.fn += m.fn;
            for (const auto& p : m.pairs) err_sum += p.distance;
        }
        MatchResult agg;
        agg.tp = pt.tp;
        agg.fp = pt.fp;
        agg.fn = pt.fn;
        const auto s = detection_scores(agg);
        pt.recall = s.recall;
        pt.precision = s.precision;
        pt.f1 = s.f1;
        if (pt.tp > 0) pt.mean_error = err_sum / static_cast<double>(pt.tp);
        curve.push_back(pt);
    }
    return curve;
}

struct StageTiming {
    std::string name;
    double seconds = 0.0;
};

struct ThroughputReport {
    std::vector<StageTiming> stages;
    std::vector<double> stage_fps;
    double total_seconds = 0.0;
    double total_fps = 0.0;
    std::int64_t n_frames = 0;
};

inline ThroughputReport throughput_report(const std::vector<StageTiming>& timings,
                                          std::int64_t n_frames) {
    if (n_frames <= 0) throw ArgumentError("frame count must be positive");
    if (timings.empty()) throw ArgumentError("timing list must be nonempty");
    ThroughputReport rep;
    rep.stages = timings;
    rep.n_frames = n_frames;
    for (const auto& t : timings) {
        if (!(t.seconds > 0.0)) throw ArgumentError("stage time must be positive: " + t.name);
        rep.total_seconds += t.seconds;
        rep.stage_fps.push_back(static_cast<double>(n_frames) / t.seconds);
    }
    rep.total_fps = static_cast<double>(n_frames) / rep.total_seconds;
    return rep;
}

} // namespace culm
