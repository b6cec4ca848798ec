#pragma once

// Training objectives. Every loss returns its value and optionally writes the
// analytic gradient with respect to the prediction maps, so the network code
// can backpropagate without an autodiff layer. Internals run in double even
// for float tensors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <type_traits>
#include <vector>

#include "culm/errors.hpp"
#include "culm/tensor.hpp"

namespace culm {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.shape() != b.shape())
        throw ArgumentError(std::string(what) + ": shape mismatch");
}

template <typename T>
Tensor<T>& prepare_grad(Tensor<T>* grad, const std::vector<std::int64_t>& shape) {
    *grad = Tensor<T>(shape);
    return *grad;
}

} // namespace detail

// Least-squares GAN, generator side: 0.5 * mean((s - 1)^2).
template <typename T>
double lsgan_gen_loss(const Tensor<T>& scores, Tensor<T>* grad = nullptr) {
    if (scores.numel() == 0) throw ArgumentError("lsgan_gen_loss: empty scores");
    const double n = static_cast<double>(scores.numel());
    double acc = 0.0;
    for (std::int64_t i = 0; i < scores.numel(); ++i) {
        const double d = static_cast<double>(scores[i]) - 1.0;
        acc += d * d;
    }
    if (grad) {
        auto& g = detail::prepare_grad(grad, scores.shape());
        for (std::int64_t i = 0; i < scores.numel(); ++i)
            g[i] = static_cast<T>((static_cast<double>(scores[i]) - 1.0) / n);
    }
    return 0.5 * acc / n;
}

// Discriminator side: 0.5 * mean((real - 1)^2) + 0.5 * mean(fake^2).
template <typename T>
double lsgan_disc_loss(const Tensor<T>& real, const Tensor<T>& fake,
                       Tensor<T>* grad_real = nullptr, Tensor<T>* grad_fake = nullptr) {
    if (real.numel() == 0 || fake.numel() == 0)
        throw ArgumentError("lsgan_disc_loss: empty scores");
    const double nr = static_cast<double>(real.numel());
    const double nf = static_cast<double>(fake.numel());
    double ar = 0.0, af = 0.0;
    for (std::int64_t i = 0; i < real.numel(); ++i) {
        const double d = static_cast<double>(real[i]) - 1.0;
        ar += d * d;
    }
    for (std::int64_t i = 0; i < fake.numel(); ++i) {
        const double d = static_cast<double>(fake[i]);
        af += d * d;
    }
    if (grad_real) {
        auto& g = detail::prepare_grad(grad_real, real.shape());
        for (std::int64_t i = 0; i < real.numel(); ++i)
            g[i] = static_cast<T>((static_cast<double>(real[i]) - 1.0) / nr);
    }
    if (grad_fake) {
        auto& g = detail::prepare_grad(grad_fake, fake.shape());
        for (std::int64_t i = 0; i < fake.numel(); ++i)
            g[i] = static_cast<T>(static_cast<double>(fake[i]) / nf);
    }
    return 0.5 * ar / nr + 0.5 * af / nf;
}

// Mean absolute reconstruction error. Symmetric in its arguments; the
// gradient is with respect to the first.
template <typename T>
double cycle_loss(const Tensor<T>& rec, const Tensor<T>& orig, Tensor<T>* grad_rec = nullptr) {
    detail::require_same_shape(rec, orig, "cycle_loss");
    if (rec.numel() == 0) throw ArgumentError("cycle_loss: empty input");
    const double n = static_cast<double>(rec.numel());
    double acc = 0.0;
    for (std::int64_t i = 0; i < rec.numel(); ++i)
        acc += std::abs(static_cast<double>(rec[i]) - static_cast<double>(orig[i]));
    if (grad_rec) {
        auto& g = detail::prepare_grad(grad_rec, rec.shape());
        for (std::int64_t i = 0; i < rec.numel(); ++i) {
            const double d = static_cast<double>(rec[i]) - static_cast<double>(orig[i]);
            g[i] = static_cast<T>((d > 0.0 ? 1.0 : d < 0.0 ? -1.0 : 0.0) / n);
        }
    }
    return acc / n;
}

// L1 between a translated single-frame output and the centre frame of the
// three-frame input it was produced from.
template <typename T>
double similarity_loss(const Tensor<T>& mb_only, const Tensor<T>& ceus_triplet,
                       Tensor<T>* grad_mb = nullptr) {
    if (mb_only.ndim() != 3 || mb_only.dim(0) != 1)
        throw ArgumentError("similarity_loss: mb_only must be 1xHxW");
    if (ceus_triplet.ndim() != 3 || ceus_triplet.dim(0) != 3)
        throw ArgumentError("similarity_loss: triplet must be 3xHxW");
    if (mb_only.dim(1) != ceus_triplet.dim(1) || mb_only.dim(2) != ceus_triplet.dim(2))
        throw ArgumentError("similarity_loss: spatial shape mismatch");
    const std::int64_t hw = mb_only.dim(1) * mb_only.dim(2);
    const double n = static_cast<double>(hw);
    double acc = 0.0;
    for (std::int64_t i = 0; i < hw; ++i)
        acc += std::abs(static_cast<double>(mb_only[i]) -
                        static_cast<double>(ceus_triplet[hw + i]));
    if (grad_mb) {
        auto& g = detail::prepare_grad(grad_mb, mb_only.shape());
        for (std::int64_t i = 0; i < hw; ++i) {
            const double d = static_cast<double>(mb_only[i]) -
                             static_cast<double>(ceus_triplet[hw + i]);
            g[i] = static_cast<T>((d > 0.0 ? 1.0 : d < 0.0 ? -1.0 : 0.0) / n);
        }
    }
    return acc / n;
}

struct LossWeights {
    double lambda1 = 5.0;
    double lambda2 = 5.0;
    double lambda3 = 1.0;

    void validate() const {
        if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0)
            throw ArgumentError("LossWeights: weights must be non-negative");
    }
};

struct GenLossParts {
    double adv_ab = 0.0;
    double adv_ba = 0.0;
    double cyc1 = 0.0;
    double cyc2 = 0.0;
    double sim = 0.0;
};

inline double total_gen_loss(const GenLossParts& parts, const LossWeights& w) {
    w.validate();
    return parts.adv_ab + parts.adv_ba + w.lambda1 * parts.cyc1 + w.lambda2 * parts.cyc2 +
           w.lambda3 * parts.sim;
}

// Pixelwise binary cross-entropy with predictions clamped away from {0, 1}.
// The gradient is zero where the clamp is active.
template <typename T>
double presence_bce(const Tensor<T>& p, const Tensor<T>& gt, Tensor<T>* grad_p = nullptr) {
    detail::require_same_shape(p, gt, "presence_bce");
    if (p.numel() == 0) throw ArgumentError("presence_bce: empty input");
    constexpr double eps = 1e-7;
    const double n = static_cast<double>(p.numel());
    double acc = 0.0;
    for (std::int64_t i = 0; i < p.numel(); ++i) {
        const double pc = std::clamp(static_cast<double>(p[i]), eps, 1.0 - eps);
        const double g = static_cast<double>(gt[i]);
        acc -= g * std::log(pc) + (1.0 - g) * std::log(1.0 - pc);
    }
    if (grad_p) {
        auto& gr = detail::prepare_grad(grad_p, p.shape());
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const double pv = static_cast<double>(p[i]);
            if (pv <= eps || pv >= 1.0 - eps) {
                gr[i] = T(0);
                continue;
            }
            const double g = static_cast<double>(gt[i]);
            gr[i] = static_cast<T>((-g / pv + (1.0 - g) / (1.0 - pv)) / n);
        }
    }
    return acc / n;
}

template <typename T>
double trajectory_bce(const Tensor<T>& t, const Tensor<T>& gt, Tensor<T>* grad_t = nullptr) {
    return presence_bce(t, gt, grad_t);
}

// Velocity regression weighted by the predicted trajectory map. Weights are
// normalised to sum to one, so the loss also backpropagates into t: putting
// weight where the error is below average lowers the loss.
template <typename T>
double weighted_velocity_mse(const Tensor<T>& vx, const Tensor<T>& vy, const Tensor<T>& gt_vx,
                             const Tensor<T>& gt_vy, const Tensor<T>& t,
                             std::type_identity_t<Tensor<T>>* grad_vx = nullptr,
                             std::type_identity_t<Tensor<T>>* grad_vy = nullptr,
                             std::type_identity_t<Tensor<T>>* grad_t = nullptr,
                             bool* skipped = nullptr) {
    detail::require_same_shape(vx, gt_vx, "weighted_velocity_mse");
    detail::require_same_shape(vy, gt_vy, "weighted_velocity_mse");
    detail::require_same_shape(vx, vy, "weighted_velocity_mse");
    detail::require_same_shape(vx, t, "weighted_velocity_mse");
    if (skipped) *skipped = false;
    double tsum = 0.0;
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const double tv = static_cast<double>(t[i]);
        if (tv < 0.0) throw ArgumentError("weighted_velocity_mse: negative weight");
        tsum += tv;
    }
    if (tsum == 0.0) {
        if (skipped) *skipped = true;
        if (grad_vx) detail::prepare_grad(grad_vx, vx.shape());
        if (grad_vy) detail::prepare_grad(grad_vy, vx.shape());
        if (grad_t) detail::prepare_grad(grad_t, vx.shape());
        return 0.0;
    }
    double loss = 0.0;
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const double ex = static_cast<double>(vx[i]) - static_cast<double>(gt_vx[i]);
        const double ey = static_cast<double>(vy[i]) - static_cast<double>(gt_vy[i]);
        loss += static_cast<double>(t[i]) * (ex * ex + ey * ey);
    }
    loss /= tsum;
    if (grad_vx || grad_vy || grad_t) {
        if (grad_vx) detail::prepare_grad(grad_vx, vx.shape());
        if (grad_vy) detail::prepare_grad(grad_vy, vx.shape());
        if (grad_t) detail::prepare_grad(grad_t, vx.shape());
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const double ex = static_cast<double>(vx[i]) - static_cast<double>(gt_vx[i]);
            const double ey = static_cast<double>(vy[i]) - static_cast<double>(gt_vy[i]);
            const double wt = static_cast<double>(t[i]) / tsum;
            if (grad_vx) (*grad_vx)[i] = static_cast<T>(wt * 2.0 * ex);
            if (grad_vy) (*grad_vy)[i] = static_cast<T>(wt * 2.0 * ey);
            if (grad_t)
                (*grad_t)[i] = static_cast<T>((ex * ex + ey * ey - loss) / tsum);
        }
    }
    return loss;
}

struct GmmTarget {
    double intensity = 0.0;
    double x = 0.0;
    double y = 0.0;
};

template <typename T>
struct GmmGrads {
    Tensor<T> p, intensity, offset_x, offset_y, sigma_i, sigma_x, sigma_y;

    void allocate(const std::vector<std::int64_t>& shape) {
        p = Tensor<T>(shape);
        intensity = Tensor<T>(shape);
        offset_x = Tensor<T>(shape);
        offset_y = Tensor<T>(shape);
        sigma_i = Tensor<T>(shape);
        sigma_x = Tensor<T>(shape);
        sigma_y = Tensor<T>(shape);
    }
};

// Negative log-likelihood of the ground-truth microbubbles under a Gaussian
// mixture whose components sit at the predicted per-pixel states. Component k
// at pixel (r, c) has mean (I_k, c + dx_k, r + dy_k), diagonal covariance
// (si_k^2, sx_k^2, sy_k^2) and weight p_k normalised over the patch. The
// mixture is evaluated in log space with a max shift.
template <typename T>
double gmm_localisation_nll(const Tensor<T>& p, const Tensor<T>& intensity,
                            const Tensor<T>& offset_x, const Tensor<T>& offset_y,
                            const Tensor<T>& sigma_i, const Tensor<T>& sigma_x,
                            const Tensor<T>& sigma_y, const std::vector<GmmTarget>& targets,
                            std::type_identity_t<GmmGrads<T>>* grads = nullptr,
                            bool* skipped = nullptr) {
    detail::require_same_shape(p, intensity, "gmm_localisation_nll");
    detail::require_same_shape(p, offset_x, "gmm_localisation_nll");
    detail::require_same_shape(p, offset_y, "gmm_localisation_nll");
    detail::require_same_shape(p, sigma_i, "gmm_localisation_nll");
    detail::require_same_shape(p, sigma_x, "gmm_localisation_nll");
    detail::require_same_shape(p, sigma_y, "gmm_localisation_nll");
    if (p.ndim() != 2) throw ArgumentError("gmm_localisation_nll: maps must be 2-d");
    const std::int64_t h = p.dim(0), w = p.dim(1), n = p.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        if (static_cast<double>(sigma_i[i]) <= 0.0 || static_cast<double>(sigma_x[i]) <= 0.0 ||
            static_cast<double>(sigma_y[i]) <= 0.0)
            throw ArgumentError("gmm_localisation_nll: sigma must be positive");
        if (static_cast<double>(p[i]) < 0.0)
            throw ArgumentError("gmm_localisation_nll: negative presence weight");
    }
    if (grads) grads->allocate(p.shape());
    if (skipped) *skipped = false;
    if (targets.empty()) {
        if (skipped) *skipped = true;
        return 0.0;
    }

    double psum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) psum += static_cast<double>(p[i]);
    if (psum <= 0.0) throw ArgumentError("gmm_localisation_nll: presence map sums to zero");

    constexpr double kLog2Pi = 1.8378770664093453; // log(2*pi)
    const double log_psum = std::log(psum);
    std::vector<double> log_w(static_cast<std::size_t>(n));
    std::vector<double> log_norm(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const double pv = static_cast<double>(p[i]);
        log_w[static_cast<std::size_t>(i)] =
            pv > 0.0 ? std::log(pv) - log_psum : -std::numeric_limits<double>::infinity();
        log_norm[static_cast<std::size_t>(i)] =
            1.5 * kLog2Pi + std::log(static_cast<double>(sigma_i[i])) +
            std::log(static_cast<double>(sigma_x[i])) +
            std::log(static_cast<double>(sigma_y[i]));
    }

    const double m = static_cast<double>(targets.size());
    std::vector<double> lk(static_cast<std::size_t>(n));
    std::vector<double> ln_dens(static_cast<std::size_t>(n));
    double loss = 0.0;
    for (const auto& tgt : targets) {
        double shift = -std::numeric_limits<double>::infinity();
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c) {
                const std::size_t i = static_cast<std::size_t>(r * w + c);
                const double si = static_cast<double>(sigma_i[static_cast<std::int64_t>(i)]);
                const double sx = static_cast<double>(sigma_x[static_cast<std::int64_t>(i)]);
                const double sy = static_cast<double>(sigma_y[static_cast<std::int64_t>(i)]);
                const double di = tgt.intensity -
                                  static_cast<double>(intensity[static_cast<std::int64_t>(i)]);
                const double dxv = tgt.x - (static_cast<double>(c) +
                                            static_cast<double>(
                                                offset_x[static_cast<std::int64_t>(i)]));
                const double dyv = tgt.y - (static_cast<double>(r) +
                                            static_cast<double>(
                                                offset_y[static_cast<std::int64_t>(i)]));
                const double q = di * di / (si * si) + dxv * dxv / (sx * sx) +
                                 dyv * dyv / (sy * sy);
                ln_dens[i] = -0.5 * q - log_norm[i];
                lk[i] = log_w[i] + ln_dens[i];
                shift = std::max(shift, lk[i]);
            }
        double sum = 0.0;
        for (std::size_t i = 0; i < lk.size(); ++i) sum += std::exp(lk[i] - shift);
        const double lse = shift + std::log(sum);
        loss -= lse;

        if (grads) {
            for (std::int64_t r = 0; r < h; ++r)
                for (std::int64_t c = 0; c < w; ++c) {
                    const std::int64_t i = r * w + c;
                    const std::size_t iu = static_cast<std::size_t>(i);
                    // d/dp in a form that stays finite as p -> 0.
                    grads->p[i] = static_cast<T>(
                        static_cast<double>(grads->p[i]) -
                        (std::exp(ln_dens[iu] - lse) / psum - 1.0 / psum) / m);
                    const double resp = std::exp(lk[iu] - lse);
                    if (resp == 0.0) continue;
                    const double si = static_cast<double>(sigma_i[i]);
                    const double sx = static_cast<double>(sigma_x[i]);
                    const double sy = static_cast<double>(sigma_y[i]);
                    const double di = tgt.intensity - static_cast<double>(intensity[i]);
                    const double dxv =
                        tgt.x - (static_cast<double>(c) + static_cast<double>(offset_x[i]));
                    const double dyv =
                        tgt.y - (static_cast<double>(r) + static_cast<double>(offset_y[i]));
                    grads->intensity[i] = static_cast<T>(
                        static_cast<double>(grads->intensity[i]) - resp * di / (si * si) / m);
                    grads->offset_x[i] = static_cast<T>(
                        static_cast<double>(grads->offset_x[i]) - resp * dxv / (sx * sx) / m);
                    grads->offset_y[i] = static_cast<T>(
                        static_cast<double>(grads->offset_y[i]) - resp * dyv / (sy * sy) / m);
                    grads->sigma_i[i] = static_cast<T>(
                        static_cast<double>(grads->sigma_i[i]) -
                        resp * (di * di / (si * si * si) - 1.0 / si) / m);
                    grads->sigma_x[i] = static_cast<T>(
                        static_cast<double>(grads->sigma_x[i]) -
                        resp * (dxv * dxv / (sx * sx * sx) - 1.0 / sx) / m);
                    grads->sigma_y[i] = static_cast<T>(
                        static_cast<double>(grads->sigma_y[i]) -
                        resp * (dyv * dyv / (sy * sy * sy) - 1.0 / sy) / m);
                }
        }
    }
    return loss / m;
}

} // namespace culm
