#pragma once

// Minimal deterministic neural-network layers. Everything runs single
// threaded on [C, H, W] tensors; batching is a loop at the training level.
// Each layer keeps a LIFO stack of forward caches so a parameter-sharing
// graph (the translator uses each generator twice per step) can replay
// backward passes in exact reverse order. backward(dy, accum) pops one cache;
// accum = false propagates to the input without touching parameter
// gradients, which is how generator losses reach through a frozen
// discriminator.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "culm/errors.hpp"
#include "culm/random.hpp"
#include "culm/tensor.hpp"

namespace culm::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* value = nullptr;
    Tensor<T>* grad = nullptr;
};

template <typename T>
class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor<T> forward(const Tensor<T>& x, bool train) = 0;
    virtual Tensor<T> backward(const Tensor<T>& dy, bool accum) = 0;
    virtual void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        (void)prefix;
        (void)out;
    }
    virtual void zero_grad() {}
    virtual void clear_cache() {}
};

namespace detail {

template <typename T>
void check_chw(const Tensor<T>& x, const char* who) {
    if (x.ndim() != 3) throw ArgumentError(std::string(who) + ": expected a CxHxW tensor");
}

inline void pop_guard(std::size_t depth, const char* who) {
    if (depth == 0) throw ArgumentError(std::string(who) + ": backward without cached forward");
}

} // namespace detail

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_chw(a, "concat_channels");
    detail::check_chw(b, "concat_channels");
    if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw ArgumentError("concat_channels: spatial shape mismatch");
    Tensor<T> out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    std::copy(a.data(), a.data() + a.numel(), out.data());
    std::copy(b.data(), b.data() + b.numel(), out.data() + a.numel());
    return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, std::int64_t first) {
    detail::check_chw(x, "split_channels");
    if (first <= 0 || first >= x.dim(0)) throw ArgumentError("split_channels: bad split point");
    Tensor<T> a({first, x.dim(1), x.dim(2)});
    Tensor<T> b({x.dim(0) - first, x.dim(1), x.dim(2)});
    std::copy(x.data(), x.data() + a.numel(), a.data());
    std::copy(x.data() + a.numel(), x.data() + x.numel(), b.data());
    return {std::move(a), std::move(b)};
}

// 2-D convolution via im2col and a dense GEMM. Weights are stored flattened
// as [out_ch, in_ch*k*k].
template <typename T>
class Conv2d : public Layer<T> {
public:
    Conv2d(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k, std::int64_t stride,
           std::int64_t pad, Rng& rng)
        : in_ch_(in_ch), out_ch_(out_ch), k_(k), stride_(stride), pad_(pad),
          w_({out_ch, in_ch * k * k}), b_({out_ch}), gw_({out_ch, in_ch * k * k}),
          gb_({out_ch}) {
        if (in_ch <= 0 || out_ch <= 0 || k <= 0 || stride <= 0 || pad < 0)
            throw ArgumentError("Conv2d: bad geometry");
        const double std = std::sqrt(2.0 / static_cast<double>(in_ch * k * k));
        for (std::int64_t i = 0; i < w_.numel(); ++i)
            w_[i] = static_cast<T>(rng.normal() * std);
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) override {
        detail::check_chw(x, "Conv2d");
        if (x.dim(0) != in_ch_) throw ArgumentError("Conv2d: channel mismatch");
        const std::int64_t h = x.dim(1), w = x.dim(2);
        const std::int64_t ho = (h + 2 * pad_ - k_) / stride_ + 1;
        const std::int64_t wo = (w + 2 * pad_ - k_) / stride_ + 1;
        if (ho <= 0 || wo <= 0) throw ArgumentError("Conv2d: input smaller than kernel");
        Mat<T> cols = im2col(x, ho, wo);
        Eigen::Map<const Mat<T>> wm(w_.data(), out_ch_, in_ch_ * k_ * k_);
        Mat<T> y = wm * cols;
        for (std::int64_t oc = 0; oc < out_ch_; ++oc) y.row(oc).array() += b_[oc];
        Tensor<T> out({out_ch_, ho, wo});
        std::copy(y.data(), y.data() + out.numel(), out.data());
        if (train) cache_.push_back({std::move(cols), h, w});
        return out;
    }

    Tensor<T> backward(const Tensor<T>& dy, bool accum) override {
        detail::pop_guard(cache_.size(), "Conv2d");
        Cache ctx = std::move(cache_.back());
        cache_.pop_back();
        const std::int64_t ho = dy.dim(1), wo = dy.dim(2);
        Eigen::Map<const Mat<T>> dym(dy.data(), out_ch_, ho * wo);
        Eigen::Map<const Mat<T>> wm(w_.data(), out_ch_, in_ch_ * k_ * k_);
        if (accum) {
            Eigen::Map<Mat<T>> gwm(gw_.data(), out_ch_, in_ch_ * k_ * k_);
            gwm.noalias() += dym * ctx.cols.transpose();
            for (std::int64_t oc = 0; oc < out_ch_; ++oc)
                gb_[oc] += static_cast<T>(dym.row(oc).sum());
        }
        Mat<T> dcols = wm.transpose() * dym;
        return col2im(dcols, ctx.h, ctx.w, ho, wo);
    }

    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
        out.push_back({prefix + ".w", &w_, &gw_});
        out.push_back({prefix + ".b", &b_, &gb_});
    }
    void zero_grad() override {
        gw_.fill(T(0));
        gb_.fill(T(0));
    }
    void clear_cache() override { cache_.clear(); }

    Tensor<T>& weight() { return w_; }
    Tensor<T>& bias() { return b_; }

private:
    struct Cache {
        Mat<T> cols;
        std::int64_t h, w;
    };

    Mat<T> im2col(const Tensor<T>& x, std::int64_t ho, std::int64_t wo) const {
        Mat<T> cols(in_ch_ * k_ * k_, ho * wo);
        const std::int64_t h = x.dim(1), w = x.dim(2);
        for (std::int64_t c = 0; c < in_ch_; ++c)
            for (std::int64_t kr = 0; kr < k_; ++kr)
                for (std::int64_t kc = 0; kc < k_; ++kc) {
                    const std::int64_t ri = (c * k_ + kr) * k_ + kc;
                    for (std::int64_t ro = 0; ro < ho; ++ro) {
                        const std::int64_t r = ro * stride_ - pad_ + kr;
                        T* dst = cols.data() + ri * (ho * wo) + ro * wo;
                        if (r < 0 || r >= h) {
                            std::fill(dst, dst + wo, T(0));
                            continue;
                        }
                        const T* src = x.data() + (c * h + r) * w;
                        for (std::int64_t co = 0; co < wo; ++co) {
                            const std::int64_t cc = co * stride_ - pad_ + kc;
                            dst[co] = (cc >= 0 && cc < w) ? src[cc] : T(0);
                        }
                    }
                }
        return cols;
    }

    Tensor<T> col2im(const Mat<T>& dcols, std::int64_t h, std::int64_t w, std::int64_t ho,
                     std::int64_t wo) const {
        Tensor<T> dx({in_ch_, h, w});
        for (std::int64_t c = 0; c < in_ch_; ++c)
            for (std::int64_t kr = 0; kr < k_; ++kr)
                for (std::int64_t kc = 0; kc < k_; ++kc) {
                    const std::int64_t ri = (c * k_ + kr) * k_ + kc;
                    for (std::int64_t ro = 0; ro < ho; ++ro) {
                        const std::int64_t r = ro * stride_ - pad_ + kr;
                        if (r < 0 || r >= h) continue;
                        const T* src = dcols.data() + ri * (ho * wo) + ro * wo;
                        T* dst = dx.data() + (c * h + r) * w;
                        for (std::int64_t co = 0; co < wo; ++co) {
                            const std::int64_t cc = co * stride_ - pad_ + kc;
                            if (cc >= 0 && cc < w) dst[cc] += src[co];
                        }
                    }
                }
        return dx;
    }

    std::int64_t in_ch_, out_ch_, k_, stride_, pad_;
    Tensor<T> w_, b_, gw_, gb_;
    std::vector<Cache> cache_;
};

template <typename T>
class MaxPool2d : public Layer<T> {
public:
    MaxPool2d(std::int64_t k, std::int64_t stride, std::int64_t pad)
        : k_(k), stride_(stride), pad_(pad) {
        if (k <= 0 || stride <= 0 || pad < 0 || pad >= k)
            throw ArgumentError("MaxPool2d: bad geometry");
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) override {
        detail::check_chw(x, "MaxPool2d");
        const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
        const std::int64_t ho = (h + 2 * pad_ - k_) / stride_ + 1;
        const std::int64_t wo = (w + 2 * pad_ - k_) / stride_ + 1;
        if (ho <= 0 || wo <= 0) throw ArgumentError("MaxPool2d: input smaller than window");
        Tensor<T> out({c, ho, wo});
        std::vector<std::int64_t> arg(static_cast<std::size_t>(out.numel()));
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t ro = 0; ro < ho; ++ro)
                for (std::int64_t co = 0; co < wo; ++co) {
                    T best{};
                    std::int64_t best_i = -1;
                    for (std::int64_t kr = 0; kr < k_; ++kr) {
                        const std::int64_t r = ro * stride_ - pad_ + kr;
                        if (r < 0 || r >= h) continue;
                        for (std::int64_t kc = 0; kc < k_; ++kc) {
                            const std::int64_t cc = co * stride_ - pad_ + kc;
                            if (cc < 0 || cc >= w) continue;
                            const T v = x(ch, r, cc);
                            if (best_i < 0 || v > best) {
                                best = v;
                                best_i = (ch * h + r) * w + cc;
                            }
                        }
                    }
                    out(ch, ro, co) = best;
                    arg[static_cast<std::size_t>((ch * ho + ro) * wo + co)] = best_i;
                }
        if (train) cache_.push_back({std::move(arg), c, h, w});
        return out;
    }

    Tensor<T> backward(const Tensor<T>& dy, bool accum) override {
        (void)accum;
        detail::pop_guard(cache_.size(), "MaxPool2d");
        Cache ctx = std::move(cache_.back());
        cache_.pop_back();
        Tensor<T> dx({ctx.c, ctx.h, ctx.w});
        for (std::int64_t i = 0; i < dy.numel(); ++i)
            dx[ctx.arg[static_cast<std::size_t>(i)]] += dy[i];
        return dx;
    }
    void clear_cache() override { cache_.clear(); }

private:
    struct Cache {
        std::vector<std::int64_t> arg;
        std::int64_t c, h, w;
    };
    std::int64_t k_, stride_, pad_;
    std::vector<Cache> cache_;
};

// Bilinear x2 upsampling, half-pixel corner convention.
template <typename T>
class Upsample2x : public Layer<T> {
public:
    Tensor<T> forward(const Tensor<T>& x, bool train) override {
        detail::check_chw(x, "Upsample2x");
        const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
        Tensor<T> out({c, 2 * h, 2 * w});
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t r = 0; r < 2 * h; ++r) {
                const auto [r0, r1, wr] = source(r, h);
                for (std::int64_t cc = 0; cc < 2 * w; ++cc) {
                    const auto [c0, c1, wc] = source(cc, w);
                    out(ch, r, cc) = static_cast<T>(
                        (1.0 - wr) * ((1.0 - wc) * x(ch, r0, c0) + wc * x(ch, r0, c1)) +
                        wr * ((1.0 - wc) * x(ch, r1, c0) + wc * x(ch, r1, c1)));
                }
            }
        if (train) cache_.push_back({c, h, w});
        return out;
    }

    Tensor<T> backward(const Tensor<T>& dy, bool accum) override {
        (void)accum;
        detail::pop_guard(cache_.size(), "Upsample2x");
        Cache ctx = cache_.back();
        cache_.pop_back();
        Tensor<T> dx({ctx.c, ctx.h, ctx.w});
        for (std::int64_t ch = 0; ch < ctx.c; ++ch)
            for (std::int64_t r = 0; r < 2 * ctx.h; ++r) {
                const auto [r0, r1, wr] = source(r, ctx.h);
                for (std::int64_t cc = 0; cc < 2 * ctx.w; ++cc) {
                    const auto [c0, c1, wc] = source(cc, ctx.w);
                    const double g = static_cast<double>(dy(ch, r, cc));
                    dx(ch, r0, c0) += static_cast<T>((1.0 - wr) * (1.0 - wc) * g);
                    dx(ch, r0, c1) += static_cast<T>((1.0 - wr) * wc * g);
                    dx(ch, r1, c0) += static_cast<T>(wr * (1.0 - wc) * g);
                    dx(ch, r1, c1) += static_cast<T>(wr * wc * g);
                }
            }
        return dx;
    }
    void clear_cache() override { cache_.clear(); }

private:
    struct Cache {
        std::int64_t c, h, w;
    };
    static std::tuple<std::int64_t, std::int64_t, double> source(std::int64_t i,
                                                                 std::int64_t n) {
        const double s = (static_cast<double>(i) + 0.5) / 2.0 - 0.5;
        double fl = std::floor(s);
        double frac = s - fl;
        std::int64_t i0 = static_cast<std::int64_t>(fl);
        std::int64_t i1 = i0 + 1;
        if (i0 < 0) i0 = 0;
        if (i1 < 0) i1 = 0;
        if (i0 > n - 1) i0 = n - 1;
        if (i1 > n - 1) i1 = n - 1;
        return {i0, i1, frac};
    }
    std::vector<Cache> cache_;
};

// Per-channel normalisation over the spatial extent, no affine terms.
template <typename T>
class InstanceNorm : public Layer<T> {
public:
    explicit InstanceNorm(double eps = 1e-5) : eps_(eps) {}

    Tensor<T> forward(const Tensor<T>& x, bool train) override {
        detail::check_chw(x, "InstanceNorm");
        const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
        if (hw < 2) throw ArgumentError("InstanceNorm: spatial extent too small");
        Tensor<T> out(x.shape());
        std::vector<double> invstd(static_cast<std::size_t>(c));
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* src = x.data() + ch * hw;
            double mean = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) mean += static_cast<double>(src[i]);
            mean /= static_cast<double>(hw);
            double var = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) {
                const double d = static_cast<double>(src[i]) - mean;
                var += d * d;
            }
            var /= static_cast<double>(hw);
            const double is = 1.0 / std::sqrt(var + eps_);
            invstd[static_cast<std::size_t>(ch)] = is;
            T* dst = out.data() + ch * hw;
            for (std::int64_t i = 0; i < hw; ++i)
                dst[i] = static_cast<T>((static_cast<double>(src[i]) - mean) * is);
        }
        if (train) cache_.push_back({out, std::move(invstd)});
        return out;
    }

    Tensor<T> backward(const Tensor<T>& dy, bool accum) override {
        (void)accum;
        detail::pop_guard(cache_.size(), "InstanceNorm");
        Cache ctx = std::move(cache_.back());
        cache_.pop_back();
        const std::int64_t c = dy.dim(0), hw = dy.dim(1) * dy.dim(2);
        Tensor<T> dx(dy.shape());
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* g = dy.data() + ch * hw;
            const T* xh = ctx.xhat.data() + ch * hw;
            double sg = 0.0, sgx = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) {
                sg += static_cast<double>(g[i]);
                sgx += static_cast<double>(g[i]) * static_cast<double>(xh[i]);
            }
            const double n = static_cast<double>(hw);
            const double is = ctx.invstd[static_cast<std::size_t>(ch)];
            T* dst = dx.data() + ch * hw;
            for (std::int64_t i = 0; i < hw; ++i)
                dst[i] = static_cast<T>(
                    is / n * (n * static_cast<double>(g[i]) - sg -
                              static_cast<double>(xh[i]) * sgx));
        }
        return dx;
    }
    void clear_cache() override { cache_.clear(); }

private:
    struct Cache {
        Tensor<T> xhat;
        std::vector<double> invstd;
    };
    double eps_;
    std::vector<Cache> cache_;
};

template <typename T>
class Relu : public Layer<T> {
public:
    Tensor<T> forward(const Tensor<T>& x, bool train) override {
        Tensor<T> out(x.shape());
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
        if (train) cache_.push_back(out);
        return out;
    }
    Tensor<T> backward(const Tensor<T>& dy, bool) override {
        detail::pop_guard(cache_.size(), "Relu");
        Tensor<T> y = std::move(cache_.back());
        cache_.pop_back();
        Tensor<T> dx(dy.shape());
        for (std::int64_t i = 0; i < dy.numel(); ++i) dx[i] = y[i] > T(0) ? dy[i] : T(0);
        return dx;
    }
    void clear_cache() override { cache_.clear(); }

private:
    std::vector<Tensor<T>> cache_;
};

template <typename T>
class LeakyRelu : public Layer<T> {
public:
    explicit LeakyRelu(double alpha = 0.2) : alpha_(alpha) {}
    Tensor<T> forward(const Tensor<T>& x, bool train) override {
        Tensor<T> out(x.shape());
        std::vector<unsigned char> mask(static_cast<std::size_t>(x.numel()));
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            const bool pos = x[i] > T(0);
            mask[static_cast<std::size_t>(i)] = pos;
            out[i] = pos ? x[i] : static_cast<T>(alpha_ * static_cast<double>(x[i]));
        }
        if (train) cache_.push_back(std::move(mask));
        return out;
    }
    Tensor<T> backward(const Tensor<T>& dy, bool) override {
        detail::pop_guard(cache_.size(), "LeakyRelu");
        std::vector<unsigned char> mask = std::move(cache_.back());
        cache_.pop_back();
        Tensor<T> dx(dy.shape());
        for (std::int64_t i = 0; i < dy.numel(); ++i)
            dx[i] = mask[static_cast<std::size_t>(i)]
                        ? dy[i]
                        : static_cast<T>(alpha_ * static_cast<double>(dy[i]));
        return dx;
    }
    void clear_cache() override { cache_.clear(); }

private:
    double alpha_;
    std::vector<std::vector<unsigned char>> cache_;
};

template <typename T>
class Sigmoid : public Layer<T> {
public:
    Tensor<T> forward(const Tensor<T>& x, bool train) override {
        Tensor<T> out(x.shape());
        for (std::int64_t i = 0; i < x.numel(); ++i)
            out[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x[i]))));
        if (train) cache_.push_back(out);
        return out;
    }
    Tensor<T> backward(const Tensor<T>& dy, bool) override {
        detail::pop_guard(cache_.size(), "Sigmoid");
        Tensor<T> y = std::move(cache_.back());
        cache_.pop_back();
        Tensor<T> dx(dy.shape());
        for (std::int64_t i = 0; i < dy.numel(); ++i) {
            const double yv = static_cast<double>(y[i]);
            dx[i] = static_cast<T>(static_cast<double>(dy[i]) * yv * (1.0 - yv));
        }
        return dx;
    }
    void clear_cache() override { cache_.clear(); }

private:
    std::vector<Tensor<T>> cache_;
};

// y = scale * tanh(x); scale 0.5 bounds offsets to (-0.5, 0.5).
template <typename T>
class ScaledTanh : public Layer<T> {
public:
    explicit ScaledTanh(double scale = 0.5) : scale_(scale) {}
    Tensor<T> forward(const Tensor<T>& x, bool train) override {
        Tensor<T> out(x.shape());
        std::vector<double> th(static_cast<std::size_t>(x.numel()));
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            th[static_cast<std::size_t>(i)] = std::tanh(static_cast<double>(x[i]));
            out[i] = static_cast<T>(scale_ * th[static_cast<std::size_t>(i)]);
        }
        if (train) cache_.push_back(std::move(th));
        return out;
    }
    Tensor<T> backward(const Tensor<T>& dy, bool) override {
        detail::pop_guard(cache_.size(), "ScaledTanh");
        std::vector<double> th = std::move(cache_.back());
        cache_.pop_back();
        Tensor<T> dx(dy.shape());
        for (std::int64_t i = 0; i < dy.numel(); ++i) {
            const double t = th[static_cast<std::size_t>(i)];
            dx[i] = static_cast<T>(static_cast<double>(dy[i]) * scale_ * (1.0 - t * t));
        }
        return dx;
    }
    void clear_cache() override { cache_.clear(); }

private:
    double scale_;
    std::vector<std::vector<double>> cache_;
};

// y = log(1 + exp(x)) + floor; the floor keeps sigma heads strictly positive.
template <typename T>
class Softplus : public Layer<T> {
public:
    explicit Softplus(double floor = 0.0) : floor_(floor) {}
    Tensor<T> forward(const Tensor<T>& x, bool train) override {
        Tensor<T> out(x.shape());
        std::vector<double> sig(static_cast<std::size_t>(x.numel()));
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            const double xv = static_cast<double>(x[i]);
            const double sp = xv > 30.0 ? xv : std::log1p(std::exp(xv));
            sig[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-xv));
            out[i] = static_cast<T>(sp + floor_);
        }
        if (train) cache_.push_back(std::move(sig));
        return out;
    }
    Tensor<T> backward(const Tensor<T>& dy, bool) override {
        detail::pop_guard(cache_.size(), "Softplus");
        std::vector<double> sig = std::move(cache_.back());
        cache_.pop_back();
        Tensor<T> dx(dy.shape());
        for (std::int64_t i = 0; i < dy.numel(); ++i)
            dx[i] = static_cast<T>(static_cast<double>(dy[i]) * sig[static_cast<std::size_t>(i)]);
        return dx;
    }
    void clear_cache() override { cache_.clear(); }

private:
    double floor_;
    std::vector<std::vector<double>> cache_;
};

template <typename T>
class Sequential : public Layer<T> {
public:
    template <typename L, typename... Args>
    L& add(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) override {
        Tensor<T> cur = x;
        for (auto& l : layers_) cur = l->forward(cur, train);
        return cur;
    }
    Tensor<T> backward(const Tensor<T>& dy, bool accum) override {
        Tensor<T> cur = dy;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
            cur = (*it)->backward(cur, accum);
        return cur;
    }
    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            layers_[i]->collect(prefix + "." + std::to_string(i), out);
    }
    void zero_grad() override {
        for (auto& l : layers_) l->zero_grad();
    }
    void clear_cache() override {
        for (auto& l : layers_) l->clear_cache();
    }

private:
    std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// Two 3x3 convolutions with an identity shortcut.
template <typename T>
class ResBlock : public Layer<T> {
public:
    ResBlock(std::int64_t ch, bool use_norm, Rng& rng) {
        body_.template add<Conv2d<T>>(ch, ch, 3, 1, 1, rng);
        if (use_norm) body_.template add<InstanceNorm<T>>();
        body_.template add<Relu<T>>();
        body_.template add<Conv2d<T>>(ch, ch, 3, 1, 1, rng);
        if (use_norm) body_.template add<InstanceNorm<T>>();
    }
    Tensor<T> forward(const Tensor<T>& x, bool train) override {
        Tensor<T> y = body_.forward(x, train);
        y += x;
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy, bool accum) override {
        Tensor<T> dx = body_.backward(dy, accum);
        dx += dy;
        return dx;
    }
    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
        body_.collect(prefix, out);
    }
    void zero_grad() override { body_.zero_grad(); }
    void clear_cache() override { body_.clear_cache(); }

private:
    Sequential<T> body_;
};

// Convolutional LSTM over a fixed-length sequence. forward_seq returns the
// final hidden state; backward_seq runs truncated-nothing BPTT over the whole
// window and returns per-step input gradients.
template <typename T>
class ConvLstm {
public:
    ConvLstm(std::int64_t in_ch, std::int64_t hidden_ch, Rng& rng)
        : in_ch_(in_ch), hid_(hidden_ch), gates_(in_ch + hidden_ch, 4 * hidden_ch, 3, 1, 1, rng) {
        Tensor<T>& b = gates_.bias();
        for (std::int64_t i = hid_; i < 2 * hid_; ++i) b[i] = T(1); // forget gate bias
    }

    Tensor<T> forward_seq(const std::vector<Tensor<T>>& xs, bool train) {
        if (xs.empty()) throw ArgumentError("ConvLstm: empty sequence");
        const std::int64_t h = xs[0].dim(1), w = xs[0].dim(2);
        Tensor<T> hh({hid_, h, w}), cc({hid_, h, w});
        std::vector<StepCache> steps;
        for (const auto& x : xs) {
            if (x.dim(0) != in_ch_ || x.dim(1) != h || x.dim(2) != w)
                throw ArgumentError("ConvLstm: inconsistent sequence shapes");
            Tensor<T> cat = concat_channels(x, hh);
            Tensor<T> z = gates_.forward(cat, train);
            StepCache sc;
            sc.i = Tensor<T>({hid_, h, w});
            sc.f = Tensor<T>({hid_, h, w});
            sc.o = Tensor<T>({hid_, h, w});
            sc.g = Tensor<T>({hid_, h, w});
            sc.c_prev = cc;
            const std::int64_t n = hid_ * h * w;
            Tensor<T> c_new({hid_, h, w});
            for (std::int64_t j = 0; j < n; ++j) {
                const double zi = static_cast<double>(z[j]);
                const double zf = static_cast<double>(z[n + j]);
                const double zo = static_cast<double>(z[2 * n + j]);
                const double zg = static_cast<double>(z[3 * n + j]);
                const double iv = 1.0 / (1.0 + std::exp(-zi));
                const double fv = 1.0 / (1.0 + std::exp(-zf));
                const double ov = 1.0 / (1.0 + std::exp(-zo));
                const double gv = std::tanh(zg);
                const double cv = fv * static_cast<double>(cc[j]) + iv * gv;
                sc.i[j] = static_cast<T>(iv);
                sc.f[j] = static_cast<T>(fv);
                sc.o[j] = static_cast<T>(ov);
                sc.g[j] = static_cast<T>(gv);
                c_new[j] = static_cast<T>(cv);
            }
            cc = c_new;
            sc.tanh_c = Tensor<T>({hid_, h, w});
            for (std::int64_t j = 0; j < n; ++j)
                sc.tanh_c[j] = static_cast<T>(std::tanh(static_cast<double>(cc[j])));
            for (std::int64_t j = 0; j < n; ++j)
                hh[j] = static_cast<T>(static_cast<double>(sc.o[j]) *
                                       static_cast<double>(sc.tanh_c[j]));
            if (train) steps.push_back(std::move(sc));
        }
        if (train) cache_.push_back(std::move(steps));
        return hh;
    }

    std::vector<Tensor<T>> backward_seq(const Tensor<T>& dh_last, bool accum) {
        detail::pop_guard(cache_.size(), "ConvLstm");
        std::vector<StepCache> steps = std::move(cache_.back());
        cache_.pop_back();
        const std::int64_t h = dh_last.dim(1), w = dh_last.dim(2);
        const std::int64_t n = hid_ * h * w;
        Tensor<T> dh = dh_last;
        Tensor<T> dc({hid_, h, w});
        std::vector<Tensor<T>> dxs(steps.size());
        for (std::size_t t = steps.size(); t-- > 0;) {
            const StepCache& sc = steps[t];
            Tensor<T> dz({4 * hid_, h, w});
            for (std::int64_t j = 0; j < n; ++j) {
                const double iv = static_cast<double>(sc.i[j]);
                const double fv = static_cast<double>(sc.f[j]);
                const double ov = static_cast<double>(sc.o[j]);
                const double gv = static_cast<double>(sc.g[j]);
                const double tc = static_cast<double>(sc.tanh_c[j]);
                const double dhv = static_cast<double>(dh[j]);
                const double dov = dhv * tc;
                double dcv = static_cast<double>(dc[j]) + dhv * ov * (1.0 - tc * tc);
                const double div = dcv * gv;
                const double dfv = dcv * static_cast<double>(sc.c_prev[j]);
                const double dgv = dcv * iv;
                dz[j] = static_cast<T>(div * iv * (1.0 - iv));
                dz[n + j] = static_cast<T>(dfv * fv * (1.0 - fv));
                dz[2 * n + j] = static_cast<T>(dov * ov * (1.0 - ov));
                dz[3 * n + j] = static_cast<T>(dgv * (1.0 - gv * gv));
                dc[j] = static_cast<T>(dcv * fv);
            }
            Tensor<T> dcat = gates_.backward(dz, accum);
            auto [dx, dhp] = split_channels(dcat, in_ch_);
            dxs[t] = std::move(dx);
            dh = std::move(dhp);
        }
        return dxs;
    }

    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        gates_.collect(prefix + ".gates", out);
    }
    void zero_grad() { gates_.zero_grad(); }
    void clear_cache() {
        gates_.clear_cache();
        cache_.clear();
    }

private:
    struct StepCache {
        Tensor<T> i, f, o, g, c_prev, tanh_c;
    };
    std::int64_t in_ch_, hid_;
    Conv2d<T> gates_;
    std::vector<std::vector<StepCache>> cache_;
};

template <typename T>
class Adam {
public:
    Adam(double lr, double beta1, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (lr <= 0.0 || beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ArgumentError("Adam: bad hyperparameters");
    }

    void step(const std::vector<ParamRef<T>>& params) {
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.emplace_back(p.value->shape());
                v_.emplace_back(p.value->shape());
            }
        }
        if (m_.size() != params.size()) throw ArgumentError("Adam: parameter set changed");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            Tensor<T>& w = *params[k].value;
            Tensor<T>& g = *params[k].grad;
            Tensor<T>& m = m_[k];
            Tensor<T>& v = v_[k];
            if (w.numel() != m.numel()) throw ArgumentError("Adam: shape changed");
            for (std::int64_t i = 0; i < w.numel(); ++i) {
                const double gv = static_cast<double>(g[i]);
                const double mv = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gv;
                const double vv =
                    beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gv * gv;
                m[i] = static_cast<T>(mv);
                v[i] = static_cast<T>(vv);
                w[i] = static_cast<T>(static_cast<double>(w[i]) -
                                      lr_ * (mv / bc1) / (std::sqrt(vv / bc2) + eps_));
            }
        }
    }

    std::int64_t step_count() const noexcept { return t_; }
    std::vector<Tensor<T>>& moment1() { return m_; }
    std::vector<Tensor<T>>& moment2() { return v_; }
    void set_step_count(std::int64_t t) { t_ = t; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

template <typename T>
std::int64_t param_count(const std::vector<ParamRef<T>>& params) {
    std::int64_t n = 0;
    for (const auto& p : params) n += p.value->numel();
    return n;
}

} // namespace culm::nn
