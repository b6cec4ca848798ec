#pragma once

// The four networks: the two translation generators, the PatchGAN
// discriminator, the localisation network and the trajectory network. All are
// depth-2 U-Net variants built from the layers in nn.hpp, with explicit
// backward passes that mirror the forward graphs (skip connections fan out,
// so their gradients are summed before the encoder stages run backward).

#include <cstdint>
#include <string>
#include <vector>

#include "culm/errors.hpp"
#include "culm/nn.hpp"
#include "culm/random.hpp"
#include "culm/tensor.hpp"

namespace culm {

inline constexpr std::int64_t kMbtWindow = 8;
inline constexpr std::int64_t kMbtUpsample = 4;
inline constexpr double kSigmaFloor = 1e-3;

struct UNetSpec {
    std::int64_t in_channels = 1;
    std::int64_t out_channels = 1;
    std::int64_t base_width = 32;
    std::int64_t depth = 2;
    std::int64_t pool_window = 4;
    std::int64_t pool_stride = 2;
    bool residual_bottleneck = true;
    bool use_norm = true;

    void validate() const {
        if (in_channels <= 0 || out_channels <= 0) throw ArgumentError("UNetSpec: bad channels");
        if (base_width <= 0) throw ArgumentError("UNetSpec: bad base width");
        if (depth != 2) throw ArgumentError("UNetSpec: only depth 2 is supported");
        if (pool_window < 2 || pool_stride < 2) throw ArgumentError("UNetSpec: bad pooling");
    }
};

inline UNetSpec generator_spec(std::int64_t in_ch, std::int64_t out_ch,
                               std::int64_t base_width = 32) {
    UNetSpec s;
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.base_width = base_width;
    s.pool_window = 4;
    s.pool_stride = 2;
    s.residual_bottleneck = true;
    s.use_norm = true;
    return s;
}

inline UNetSpec mbl_spec(std::int64_t base_width = 32) {
    UNetSpec s;
    s.in_channels = 1;
    s.out_channels = 7;
    s.base_width = base_width;
    s.pool_window = 2;
    s.pool_stride = 2;
    s.residual_bottleneck = false;
    s.use_norm = false;
    return s;
}

inline UNetSpec mbt_spec(std::int64_t base_width = 32) {
    UNetSpec s = mbl_spec(base_width);
    s.out_channels = 3;
    if (base_width % 4 != 0 || base_width < 8)
        throw ArgumentError("UNetSpec: trajectory net base width must be a multiple of 4, >= 8");
    return s;
}

namespace detail {

// Mirror padding (edge not repeated) on the bottom/right so pooled sizes stay
// integral; crop_hw removes it again.
template <typename T>
Tensor<T> reflect_pad_hw(const Tensor<T>& x, std::int64_t ph, std::int64_t pw) {
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (ph < 0 || pw < 0 || ph >= h || pw >= w)
        throw ArgumentError("reflect_pad_hw: pad too large");
    Tensor<T> out({c, h + ph, w + pw});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t r = 0; r < h + ph; ++r) {
            const std::int64_t sr = r < h ? r : 2 * h - 2 - r;
            for (std::int64_t cc = 0; cc < w + pw; ++cc) {
                const std::int64_t sc = cc < w ? cc : 2 * w - 2 - cc;
                out(ch, r, cc) = x(ch, sr, sc);
            }
        }
    return out;
}

template <typename T>
Tensor<T> crop_hw(const Tensor<T>& x, std::int64_t h, std::int64_t w) {
    if (h > x.dim(1) || w > x.dim(2)) throw ArgumentError("crop_hw: crop larger than input");
    Tensor<T> out({x.dim(0), h, w});
    for (std::int64_t ch = 0; ch < x.dim(0); ++ch)
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t cc = 0; cc < w; ++cc) out(ch, r, cc) = x(ch, r, cc);
    return out;
}

inline std::int64_t pad_to_multiple(std::int64_t n, std::int64_t m) {
    return (m - n % m) % m;
}

template <typename T>
void add_conv_block(nn::Sequential<T>& seq, std::int64_t in_ch, std::int64_t out_ch,
                    bool use_norm, Rng& rng) {
    seq.template add<nn::Conv2d<T>>(in_ch, out_ch, 3, 1, 1, rng);
    if (use_norm) seq.template add<nn::InstanceNorm<T>>();
    seq.template add<nn::Relu<T>>();
}

} // namespace detail

// U-Net translator between the contrast and microbubble-only domains. Output
// passes through a sigmoid so frames stay in [0, 1].
template <typename T>
class Generator {
public:
    Generator(const UNetSpec& spec, Rng& rng) : spec_(spec) {
        spec.validate();
        const std::int64_t b = spec.base_width;
        detail::add_conv_block(enc1_, spec.in_channels, b, spec.use_norm, rng);
        detail::add_conv_block(enc1_, b, b, spec.use_norm, rng);
        pool1_ = std::make_unique<nn::MaxPool2d<T>>(spec.pool_window, spec.pool_stride, 1);
        detail::add_conv_block(enc2_, b, 2 * b, spec.use_norm, rng);
        detail::add_conv_block(enc2_, 2 * b, 2 * b, spec.use_norm, rng);
        pool2_ = std::make_unique<nn::MaxPool2d<T>>(spec.pool_window, spec.pool_stride, 1);
        detail::add_conv_block(bott_, 2 * b, 4 * b, spec.use_norm, rng);
        if (spec.residual_bottleneck)
            bott_.template add<nn::ResBlock<T>>(4 * b, spec.use_norm, rng);
        up1_.template add<nn::Upsample2x<T>>();
        detail::add_conv_block(up1_, 4 * b, 2 * b, spec.use_norm, rng);
        detail::add_conv_block(dec1_, 4 * b, 2 * b, spec.use_norm, rng);
        up2_.template add<nn::Upsample2x<T>>();
        detail::add_conv_block(up2_, 2 * b, b, spec.use_norm, rng);
        detail::add_conv_block(dec2_, 2 * b, b, spec.use_norm, rng);
        out_.template add<nn::Conv2d<T>>(b, spec.out_channels, 3, 1, 1, rng);
        out_.template add<nn::Sigmoid<T>>();
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        if (x.ndim() != 3 || x.dim(0) != spec_.in_channels)
            throw ArgumentError("Generator: bad input shape");
        if (x.dim(1) % 4 != 0 || x.dim(2) % 4 != 0)
            throw ArgumentError("Generator: spatial dims must be multiples of 4; use infer()");
        Tensor<T> e1 = enc1_.forward(x, train);
        Tensor<T> e2 = enc2_.forward(pool1_->forward(e1, train), train);
        Tensor<T> bt = bott_.forward(pool2_->forward(e2, train), train);
        Tensor<T> d1 = dec1_.forward(nn::concat_channels(up1_.forward(bt, train), e2), train);
        Tensor<T> d2 = dec2_.forward(nn::concat_channels(up2_.forward(d1, train), e1), train);
        return out_.forward(d2, train);
    }

    Tensor<T> backward(const Tensor<T>& dy, bool accum) {
        const std::int64_t b2 = 2 * spec_.base_width;
        Tensor<T> dd2 = out_.backward(dy, accum);
        auto [du2, de1_skip] = nn::split_channels(dec2_.backward(dd2, accum), spec_.base_width);
        Tensor<T> dd1 = up2_.backward(du2, accum);
        auto [du1, de2_skip] = nn::split_channels(dec1_.backward(dd1, accum), b2);
        Tensor<T> dbt = up1_.backward(du1, accum);
        Tensor<T> de2 = pool2_->backward(bott_.backward(dbt, accum), accum);
        de2 += de2_skip;
        Tensor<T> de1 = pool1_->backward(enc2_.backward(de2, accum), accum);
        de1 += de1_skip;
        return enc1_.backward(de1, accum);
    }

    // Full-frame forward pass for arbitrary sizes: pad, run, crop.
    Tensor<T> infer(const Tensor<T>& x) {
        const std::int64_t ph = detail::pad_to_multiple(x.dim(1), 4);
        const std::int64_t pw = detail::pad_to_multiple(x.dim(2), 4);
        if (ph == 0 && pw == 0) return forward(x, false);
        Tensor<T> y = forward(detail::reflect_pad_hw(x, ph, pw), false);
        return detail::crop_hw(y, x.dim(1), x.dim(2));
    }

    std::vector<nn::ParamRef<T>> params() {
        std::vector<nn::ParamRef<T>> out;
        enc1_.collect("enc1", out);
        enc2_.collect("enc2", out);
        bott_.collect("bott", out);
        up1_.collect("up1", out);
        dec1_.collect("dec1", out);
        up2_.collect("up2", out);
        dec2_.collect("dec2", out);
        out_.collect("out", out);
        return out;
    }
    void zero_grad() {
        enc1_.zero_grad();
        enc2_.zero_grad();
        bott_.zero_grad();
        up1_.zero_grad();
        dec1_.zero_grad();
        up2_.zero_grad();
        dec2_.zero_grad();
        out_.zero_grad();
    }
    void clear_cache() {
        enc1_.clear_cache();
        pool1_->clear_cache();
        enc2_.clear_cache();
        pool2_->clear_cache();
        bott_.clear_cache();
        up1_.clear_cache();
        dec1_.clear_cache();
        up2_.clear_cache();
        dec2_.clear_cache();
        out_.clear_cache();
    }
    const UNetSpec& spec() const noexcept { return spec_; }

private:
    UNetSpec spec_;
    nn::Sequential<T> enc1_, enc2_, bott_, up1_, dec1_, up2_, dec2_, out_;
    std::unique_ptr<nn::MaxPool2d<T>> pool1_, pool2_;
};

// PatchGAN critic: four 4x4 convolutions, the first two strided, producing a
// grid of unbounded scores (least-squares objective, no sigmoid).
template <typename T>
class Discriminator {
public:
    Discriminator(std::int64_t in_channels, std::int64_t base_width, Rng& rng) {
        if (in_channels <= 0 || base_width <= 0) throw ArgumentError("Discriminator: bad spec");
        const std::int64_t b = base_width;
        body_.template add<nn::Conv2d<T>>(in_channels, b, 4, 2, 1, rng);
        body_.template add<nn::LeakyRelu<T>>(0.2);
        body_.template add<nn::Conv2d<T>>(b, 2 * b, 4, 2, 1, rng);
        body_.template add<nn::InstanceNorm<T>>();
        body_.template add<nn::LeakyRelu<T>>(0.2);
        body_.template add<nn::Conv2d<T>>(2 * b, 4 * b, 4, 1, 1, rng);
        body_.template add<nn::InstanceNorm<T>>();
        body_.template add<nn::LeakyRelu<T>>(0.2);
        body_.template add<nn::Conv2d<T>>(4 * b, 1, 4, 1, 1, rng);
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) { return body_.forward(x, train); }
    Tensor<T> backward(const Tensor<T>& dy, bool accum) { return body_.backward(dy, accum); }
    std::vector<nn::ParamRef<T>> params() {
        std::vector<nn::ParamRef<T>> out;
        body_.collect("disc", out);
        return out;
    }
    void zero_grad() { body_.zero_grad(); }
    void clear_cache() { body_.clear_cache(); }

private:
    nn::Sequential<T> body_;
};

template <typename T>
struct MblMaps {
    Tensor<T> p, intensity, offset_x, offset_y, sigma_i, sigma_x, sigma_y;
};

// Localisation network: shared U-Net trunk, then three heads producing the
// seven per-pixel maps (presence; intensity and offsets; uncertainties).
template <typename T>
class MblNet {
public:
    MblNet(const UNetSpec& spec, Rng& rng) : spec_(spec) {
        spec.validate();
        if (spec.out_channels != 7) throw ArgumentError("MblNet: needs 7 output channels");
        const std::int64_t b = spec.base_width;
        detail::add_conv_block(enc1_, spec.in_channels, b, spec.use_norm, rng);
        detail::add_conv_block(enc1_, b, b, spec.use_norm, rng);
        pool1_ = std::make_unique<nn::MaxPool2d<T>>(spec.pool_window, spec.pool_stride, 0);
        detail::add_conv_block(enc2_, b, 2 * b, spec.use_norm, rng);
        detail::add_conv_block(enc2_, 2 * b, 2 * b, spec.use_norm, rng);
        pool2_ = std::make_unique<nn::MaxPool2d<T>>(spec.pool_window, spec.pool_stride, 0);
        detail::add_conv_block(bott_, 2 * b, 4 * b, spec.use_norm, rng);
        if (spec.residual_bottleneck)
            bott_.template add<nn::ResBlock<T>>(4 * b, spec.use_norm, rng);
        else
            detail::add_conv_block(bott_, 4 * b, 4 * b, spec.use_norm, rng);
        up1_.template add<nn::Upsample2x<T>>();
        detail::add_conv_block(up1_, 4 * b, 2 * b, spec.use_norm, rng);
        detail::add_conv_block(dec1_, 4 * b, 2 * b, spec.use_norm, rng);
        up2_.template add<nn::Upsample2x<T>>();
        detail::add_conv_block(up2_, 2 * b, b, spec.use_norm, rng);
        detail::add_conv_block(dec2_, 2 * b, b, spec.use_norm, rng);

        detail::add_conv_block(head_p_, b, b, false, rng);
        head_p_.template add<nn::Conv2d<T>>(b, 1, 3, 1, 1, rng);
        head_p_.template add<nn::Sigmoid<T>>();
        detail::add_conv_block(head_reg_, b, b, false, rng);
        head_reg_.template add<nn::Conv2d<T>>(b, 3, 3, 1, 1, rng);
        detail::add_conv_block(head_sig_, b, b, false, rng);
        head_sig_.template add<nn::Conv2d<T>>(b, 3, 3, 1, 1, rng);
        head_sig_.template add<nn::Softplus<T>>(kSigmaFloor);
    }

    MblMaps<T> forward(const Tensor<T>& x, bool train) {
        if (x.ndim() != 3 || x.dim(0) != spec_.in_channels)
            throw ArgumentError("MblNet: bad input shape");
        if (x.dim(1) % 4 != 0 || x.dim(2) % 4 != 0)
            throw ArgumentError("MblNet: spatial dims must be multiples of 4; use infer()");
        Tensor<T> e1 = enc1_.forward(x, train);
        Tensor<T> e2 = enc2_.forward(pool1_->forward(e1, train), train);
        Tensor<T> bt = bott_.forward(pool2_->forward(e2, train), train);
        Tensor<T> d1 = dec1_.forward(nn::concat_channels(up1_.forward(bt, train), e2), train);
        Tensor<T> trunk = dec2_.forward(nn::concat_channels(up2_.forward(d1, train), e1), train);

        Tensor<T> p = head_p_.forward(trunk, train);
        Tensor<T> reg = head_reg_.forward(trunk, train);
        auto [ipre, dxy] = nn::split_channels(reg, 1);
        Tensor<T> ival = act_i_.forward(ipre, train);
        Tensor<T> dval = act_dxy_.forward(dxy, train);
        Tensor<T> sig = head_sig_.forward(trunk, train);

        const std::int64_t h = x.dim(1), w = x.dim(2);
        MblMaps<T> out;
        out.p = plane(p, 0, h, w);
        out.intensity = plane(ival, 0, h, w);
        out.offset_x = plane(dval, 0, h, w);
        out.offset_y = plane(dval, 1, h, w);
        out.sigma_i = plane(sig, 0, h, w);
        out.sigma_x = plane(sig, 1, h, w);
        out.sigma_y = plane(sig, 2, h, w);
        return out;
    }

    Tensor<T> backward(const MblMaps<T>& d, bool accum) {
        const std::int64_t h = d.p.dim(0), w = d.p.dim(1);
        Tensor<T> dp = stack({&d.p}, h, w);
        Tensor<T> dsig = stack({&d.sigma_i, &d.sigma_x, &d.sigma_y}, h, w);
        Tensor<T> di = stack({&d.intensity}, h, w);
        Tensor<T> ddxy = stack({&d.offset_x, &d.offset_y}, h, w);

        Tensor<T> dtrunk = head_p_.backward(dp, accum);
        Tensor<T> dreg =
            nn::concat_channels(act_i_.backward(di, accum), act_dxy_.backward(ddxy, accum));
        dtrunk += head_reg_.backward(dreg, accum);
        dtrunk += head_sig_.backward(dsig, accum);

        auto [du2, de1_skip] = nn::split_channels(dec2_.backward(dtrunk, accum),
                                                  spec_.base_width);
        Tensor<T> dd1 = up2_.backward(du2, accum);
        auto [du1, de2_skip] =
            nn::split_channels(dec1_.backward(dd1, accum), 2 * spec_.base_width);
        Tensor<T> de2 = pool2_->backward(bott_.backward(up1_.backward(du1, accum), accum), accum);
        de2 += de2_skip;
        Tensor<T> de1 = pool1_->backward(enc2_.backward(de2, accum), accum);
        de1 += de1_skip;
        return enc1_.backward(de1, accum);
    }

    MblMaps<T> infer(const Tensor<T>& x) {
        const std::int64_t ph = detail::pad_to_multiple(x.dim(1), 4);
        const std::int64_t pw = detail::pad_to_multiple(x.dim(2), 4);
        if (ph == 0 && pw == 0) return forward(x, false);
        MblMaps<T> y = forward(detail::reflect_pad_hw(x, ph, pw), false);
        MblMaps<T> out;
        out.p = crop2(y.p, x.dim(1), x.dim(2));
        out.intensity = crop2(y.intensity, x.dim(1), x.dim(2));
        out.offset_x = crop2(y.offset_x, x.dim(1), x.dim(2));
        out.offset_y = crop2(y.offset_y, x.dim(1), x.dim(2));
        out.sigma_i = crop2(y.sigma_i, x.dim(1), x.dim(2));
        out.sigma_x = crop2(y.sigma_x, x.dim(1), x.dim(2));
        out.sigma_y = crop2(y.sigma_y, x.dim(1), x.dim(2));
        return out;
    }

    std::vector<nn::ParamRef<T>> params() {
        std::vector<nn::ParamRef<T>> out;
        enc1_.collect("enc1", out);
        enc2_.collect("enc2", out);
        bott_.collect("bott", out);
        up1_.collect("up1", out);
        dec1_.collect("dec1", out);
        up2_.collect("up2", out);
        dec2_.collect("dec2", out);
        head_p_.collect("head_p", out);
        head_reg_.collect("head_reg", out);
        head_sig_.collect("head_sig", out);
        return out;
    }
    void zero_grad() {
        enc1_.zero_grad();
        enc2_.zero_grad();
        bott_.zero_grad();
        up1_.zero_grad();
        dec1_.zero_grad();
        up2_.zero_grad();
        dec2_.zero_grad();
        head_p_.zero_grad();
        head_reg_.zero_grad();
        head_sig_.zero_grad();
    }
    void clear_cache() {
        enc1_.clear_cache();
        pool1_->clear_cache();
        enc2_.clear_cache();
        pool2_->clear_cache();
        bott_.clear_cache();
        up1_.clear_cache();
        dec1_.clear_cache();
        up2_.clear_cache();
        dec2_.clear_cache();
        head_p_.clear_cache();
        head_reg_.clear_cache();
        head_sig_.clear_cache();
        act_i_.clear_cache();
        act_dxy_.clear_cache();
    }
    const UNetSpec& spec() const noexcept { return spec_; }

private:
    static Tensor<T> plane(const Tensor<T>& x, std::int64_t ch, std::int64_t h, std::int64_t w) {
        Tensor<T> out({h, w});
        std::copy(x.data() + ch * h * w, x.data() + (ch + 1) * h * w, out.data());
        return out;
    }
    static Tensor<T> stack(std::initializer_list<const Tensor<T>*> maps, std::int64_t h,
                           std::int64_t w) {
        Tensor<T> out({static_cast<std::int64_t>(maps.size()), h, w});
        std::int64_t ch = 0;
        for (const Tensor<T>* m : maps) {
            std::copy(m->data(), m->data() + h * w, out.data() + ch * h * w);
            ++ch;
        }
        return out;
    }
    static Tensor<T> crop2(const Tensor<T>& x, std::int64_t h, std::int64_t w) {
        Tensor<T> out({h, w});
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c) out(r, c) = x(r, c);
        return out;
    }

    UNetSpec spec_;
    nn::Sequential<T> enc1_, enc2_, bott_, up1_, dec1_, up2_, dec2_;
    nn::Sequential<T> head_p_, head_reg_, head_sig_;
    nn::Softplus<T> act_i_;
    nn::ScaledTanh<T> act_dxy_;
    std::unique_ptr<nn::MaxPool2d<T>> pool1_, pool2_;
};

template <typename T>
struct MbtMaps {
    Tensor<T> trajectory, velocity_x, velocity_y;
};

// Trajectory network: a per-frame encoder shared across the 8-frame window,
// ConvLSTM blocks on both skip levels and the bottleneck, a decoder reading
// the final hidden states, and two extra upsampling stages to the 4x grid.
template <typename T>
class MbtNet {
public:
    MbtNet(const UNetSpec& spec, Rng& rng) : spec_(spec) {
        spec.validate();
        if (spec.out_channels != 3) throw ArgumentError("MbtNet: needs 3 output channels");
        if (spec.base_width % 4 != 0 || spec.base_width < 8)
            throw ArgumentError("MbtNet: base width must be a multiple of 4, >= 8");
        const std::int64_t b = spec.base_width;
        detail::add_conv_block(enc1_, 1, b, spec.use_norm, rng);
        detail::add_conv_block(enc1_, b, b, spec.use_norm, rng);
        pool1_ = std::make_unique<nn::MaxPool2d<T>>(spec.pool_window, spec.pool_stride, 0);
        detail::add_conv_block(enc2_, b, 2 * b, spec.use_norm, rng);
        detail::add_conv_block(enc2_, 2 * b, 2 * b, spec.use_norm, rng);
        pool2_ = std::make_unique<nn::MaxPool2d<T>>(spec.pool_window, spec.pool_stride, 0);
        lstm1_ = std::make_unique<nn::ConvLstm<T>>(b, b, rng);
        lstm2_ = std::make_unique<nn::ConvLstm<T>>(2 * b, 2 * b, rng);
        lstm_b_ = std::make_unique<nn::ConvLstm<T>>(2 * b, 4 * b, rng);
        up1_.template add<nn::Upsample2x<T>>();
        detail::add_conv_block(up1_, 4 * b, 2 * b, spec.use_norm, rng);
        detail::add_conv_block(dec1_, 4 * b, 2 * b, spec.use_norm, rng);
        up2_.template add<nn::Upsample2x<T>>();
        detail::add_conv_block(up2_, 2 * b, b, spec.use_norm, rng);
        detail::add_conv_block(dec2_, 2 * b, b, spec.use_norm, rng);
        fine_.template add<nn::Upsample2x<T>>();
        detail::add_conv_block(fine_, b, b / 2, spec.use_norm, rng);
        fine_.template add<nn::Upsample2x<T>>();
        detail::add_conv_block(fine_, b / 2, b / 4, spec.use_norm, rng);
        fine_.template add<nn::Conv2d<T>>(b / 4, 3, 3, 1, 1, rng);
    }

    MbtMaps<T> forward(const std::vector<Tensor<T>>& frames, bool train) {
        if (static_cast<std::int64_t>(frames.size()) != kMbtWindow)
            throw ArgumentError("MbtNet: expects exactly 8 frames");
        for (const auto& f : frames)
            if (f.ndim() != 3 || f.dim(0) != 1)
                throw ArgumentError("MbtNet: frames must be 1xHxW");
        const std::int64_t h = frames[0].dim(1), w = frames[0].dim(2);
        if (h % 4 != 0 || w % 4 != 0)
            throw ArgumentError("MbtNet: spatial dims must be multiples of 4");
        std::vector<Tensor<T>> f1(frames.size()), f2(frames.size()), f3(frames.size());
        for (std::size_t t = 0; t < frames.size(); ++t) {
            f1[t] = enc1_.forward(frames[t], train);
            f2[t] = enc2_.forward(pool1_->forward(f1[t], train), train);
            f3[t] = pool2_->forward(f2[t], train);
        }
        Tensor<T> h1 = lstm1_->forward_seq(f1, train);
        Tensor<T> h2 = lstm2_->forward_seq(f2, train);
        Tensor<T> hb = lstm_b_->forward_seq(f3, train);
        Tensor<T> d1 = dec1_.forward(nn::concat_channels(up1_.forward(hb, train), h2), train);
        Tensor<T> d2 = dec2_.forward(nn::concat_channels(up2_.forward(d1, train), h1), train);
        Tensor<T> y = fine_.forward(d2, train);

        auto [tpre, v] = nn::split_channels(y, 1);
        Tensor<T> traj = act_t_.forward(tpre, train);
        MbtMaps<T> out;
        out.trajectory = Tensor<T>({4 * h, 4 * w});
        out.velocity_x = Tensor<T>({4 * h, 4 * w});
        out.velocity_y = Tensor<T>({4 * h, 4 * w});
        const std::int64_t hw = 16 * h * w;
        std::copy(traj.data(), traj.data() + hw, out.trajectory.data());
        std::copy(v.data(), v.data() + hw, out.velocity_x.data());
        std::copy(v.data() + hw, v.data() + 2 * hw, out.velocity_y.data());
        return out;
    }

    std::vector<Tensor<T>> backward(const MbtMaps<T>& d, bool accum) {
        const std::int64_t fh = d.trajectory.dim(0), fw = d.trajectory.dim(1);
        Tensor<T> dt({1, fh, fw}), dv({2, fh, fw});
        std::copy(d.trajectory.data(), d.trajectory.data() + fh * fw, dt.data());
        std::copy(d.velocity_x.data(), d.velocity_x.data() + fh * fw, dv.data());
        std::copy(d.velocity_y.data(), d.velocity_y.data() + fh * fw, dv.data() + fh * fw);
        Tensor<T> dy = nn::concat_channels(act_t_.backward(dt, accum), dv);

        Tensor<T> dd2 = fine_.backward(dy, accum);
        auto [du2, dh1] = nn::split_channels(dec2_.backward(dd2, accum), spec_.base_width);
        Tensor<T> dd1 = up2_.backward(du2, accum);
        auto [du1, dh2] = nn::split_channels(dec1_.backward(dd1, accum), 2 * spec_.base_width);
        Tensor<T> dhb = up1_.backward(du1, accum);

        std::vector<Tensor<T>> df1 = lstm1_->backward_seq(dh1, accum);
        std::vector<Tensor<T>> df2 = lstm2_->backward_seq(dh2, accum);
        std::vector<Tensor<T>> df3 = lstm_b_->backward_seq(dhb, accum);

        std::vector<Tensor<T>> dframes(static_cast<std::size_t>(kMbtWindow));
        for (std::size_t t = static_cast<std::size_t>(kMbtWindow); t-- > 0;) {
            Tensor<T> dfull2 = pool2_->backward(df3[t], accum);
            dfull2 += df2[t];
            Tensor<T> dfull1 = pool1_->backward(enc2_.backward(dfull2, accum), accum);
            dfull1 += df1[t];
            dframes[t] = enc1_.backward(dfull1, accum);
        }
        return dframes;
    }

    std::vector<nn::ParamRef<T>> params() {
        std::vector<nn::ParamRef<T>> out;
        enc1_.collect("enc1", out);
        enc2_.collect("enc2", out);
        lstm1_->collect("lstm1", out);
        lstm2_->collect("lstm2", out);
        lstm_b_->collect("lstm_b", out);
        up1_.collect("up1", out);
        dec1_.collect("dec1", out);
        up2_.collect("up2", out);
        dec2_.collect("dec2", out);
        fine_.collect("fine", out);
        return out;
    }
    void zero_grad() {
        enc1_.zero_grad();
        enc2_.zero_grad();
        lstm1_->zero_grad();
        lstm2_->zero_grad();
        lstm_b_->zero_grad();
        up1_.zero_grad();
        dec1_.zero_grad();
        up2_.zero_grad();
        dec2_.zero_grad();
        fine_.zero_grad();
    }
    void clear_cache() {
        enc1_.clear_cache();
        pool1_->clear_cache();
        enc2_.clear_cache();
        pool2_->clear_cache();
        lstm1_->clear_cache();
        lstm2_->clear_cache();
        lstm_b_->clear_cache();
        up1_.clear_cache();
        dec1_.clear_cache();
        up2_.clear_cache();
        dec2_.clear_cache();
        fine_.clear_cache();
        act_t_.clear_cache();
    }
    const UNetSpec& spec() const noexcept { return spec_; }

private:
    UNetSpec spec_;
    nn::Sequential<T> enc1_, enc2_, up1_, dec1_, up2_, dec2_, fine_;
    nn::Sigmoid<T> act_t_;
    std::unique_ptr<nn::ConvLstm<T>> lstm1_, lstm2_, lstm_b_;
    std::unique_ptr<nn::MaxPool2d<T>> pool1_, pool2_;
};

} // namespace culm
