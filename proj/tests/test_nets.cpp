#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "culm/nets.hpp"
#include "culm/random.hpp"
#include "culm/tensor.hpp"

using namespace culm;

namespace {

template <typename T>
void add_blob(Tensor<T>& x, std::int64_t ch, double cy, double cx, double sigma = 2.0) {
    for (std::int64_t r = 0; r < x.dim(1); ++r)
        for (std::int64_t c = 0; c < x.dim(2); ++c) {
            const double d2 = (r - cy) * (r - cy) + (c - cx) * (c - cx);
            x(ch, r, c) += static_cast<T>(std::exp(-d2 / (2.0 * sigma * sigma)));
        }
}

void fill_random(Tensor<double>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
}

void fd_slot(double* slot, double analytic, const std::function<double()>& loss,
             double tol = 2e-4) {
    const double h = 1e-5;
    const double keep = *slot;
    *slot = keep + h;
    const double lp = loss();
    *slot = keep - h;
    const double lm = loss();
    *slot = keep;
    const double fd = (lp - lm) / (2.0 * h);
    const double scale = std::max(std::abs(fd), std::abs(analytic));
    if (scale < 1e-7) return;
    INFO("fd " << fd << " analytic " << analytic);
    REQUIRE(std::abs(fd - analytic) / scale <= tol);
}

} // namespace

TEST_CASE("generator shapes") {
    Rng rng(40);
    Generator<float> g_ab(generator_spec(3, 1, 8), rng);
    Generator<float> g_ba(generator_spec(1, 3, 8), rng);

    Tensor<float> x({3, 40, 40});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform());
    Tensor<float> y = g_ab.forward(x, false);
    REQUIRE(y.shape() == std::vector<std::int64_t>{1, 40, 40});
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        REQUIRE(y[i] > 0.0f);
        REQUIRE(y[i] < 1.0f);
    }
    Tensor<float> back = g_ba.forward(y, false);
    REQUIRE(back.shape() == x.shape());

    SECTION("odd full-frame sizes round-trip through infer") {
        Tensor<float> big({3, 511, 659});
        for (std::int64_t i = 0; i < big.numel(); i += 97)
            big[i] = static_cast<float>(rng.uniform());
        Tensor<float> out = g_ab.infer(big);
        REQUIRE(out.shape() == std::vector<std::int64_t>{1, 511, 659});
        REQUIRE(g_ab.forward(x, false).shape() == std::vector<std::int64_t>{1, 40, 40});
    }
    SECTION("non-multiple-of-4 sizes are rejected by the raw forward") {
        Tensor<float> odd({3, 42, 40});
        REQUIRE_THROWS_AS(g_ab.forward(odd, false), ArgumentError);
    }
    SECTION("depth is pinned") {
        UNetSpec s = generator_spec(3, 1, 8);
        s.depth = 3;
        REQUIRE_THROWS_AS(Generator<float>(s, rng), ArgumentError);
    }
}

TEST_CASE("generator is deterministic for a fixed seed") {
    Tensor<float> x({3, 24, 24});
    Rng data_rng(41);
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(data_rng.uniform());

    Rng r1(42), r2(42);
    Generator<float> g1(generator_spec(3, 1, 8), r1);
    Generator<float> g2(generator_spec(3, 1, 8), r2);
    Tensor<float> y1 = g1.forward(x, false);
    Tensor<float> y2 = g2.forward(x, false);
    REQUIRE(std::memcmp(y1.data(), y2.data(), sizeof(float) * y1.numel()) == 0);
    Tensor<float> y1b = g1.forward(x, false);
    REQUIRE(std::memcmp(y1.data(), y1b.data(), sizeof(float) * y1.numel()) == 0);

    auto p1 = g1.params();
    auto p2 = g2.params();
    REQUIRE(p1.size() == p2.size());
    REQUIRE(nn::param_count(p1) == nn::param_count(p2));
    for (std::size_t i = 0; i < p1.size(); ++i) REQUIRE(p1[i].name == p2[i].name);
}

TEST_CASE("discriminator grid") {
    Rng rng(43);
    Discriminator<float> d(3, 8, rng);
    Tensor<float> x({3, 40, 40});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform());
    Tensor<float> s = d.forward(x, false);
    REQUIRE(s.dim(0) == 1);
    REQUIRE(s.dim(1) >= 4);
    REQUIRE(s.dim(1) <= 10);
    REQUIRE(s.dim(2) >= 4);
    REQUIRE(s.dim(2) <= 10);

    Tensor<float> big({3, 80, 80});
    Tensor<float> sb = d.forward(big, false);
    REQUIRE(sb.dim(1) > s.dim(1));
    REQUIRE(sb.dim(2) > s.dim(2));

    Discriminator<float> d1(1, 8, rng);
    Tensor<float> mb({1, 40, 40});
    REQUIRE(d1.forward(mb, false).dim(1) == s.dim(1));
}

TEST_CASE("localisation network heads respect their ranges") {
    Rng rng(44);
    MblNet<float> net(mbl_spec(8), rng);
    Tensor<float> x({1, 40, 40});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform());
    MblMaps<float> maps = net.forward(x, false);
    REQUIRE(maps.p.shape() == std::vector<std::int64_t>{40, 40});
    REQUIRE(maps.sigma_y.shape() == std::vector<std::int64_t>{40, 40});
    for (std::int64_t i = 0; i < maps.p.numel(); ++i) {
        REQUIRE(maps.p[i] > 0.0f);
        REQUIRE(maps.p[i] < 1.0f);
        REQUIRE(maps.intensity[i] >= 0.0f);
        REQUIRE(std::abs(maps.offset_x[i]) < 0.5f);
        REQUIRE(std::abs(maps.offset_y[i]) < 0.5f);
        REQUIRE(maps.sigma_i[i] >= 1e-3f);
        REQUIRE(maps.sigma_x[i] >= 1e-3f);
        REQUIRE(maps.sigma_y[i] >= 1e-3f);
    }

    MblMaps<float> odd = net.infer(detail::crop_hw(x, 37, 39));
    REQUIRE(odd.p.shape() == std::vector<std::int64_t>{37, 39});
}

TEST_CASE("trajectory network output grid and window contract") {
    Rng rng(45);
    MbtNet<float> net(mbt_spec(8), rng);
    std::vector<Tensor<float>> frames(8, Tensor<float>({1, 40, 40}));
    for (auto& f : frames)
        for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = static_cast<float>(rng.uniform());
    MbtMaps<float> maps = net.forward(frames, false);
    REQUIRE(maps.trajectory.shape() == std::vector<std::int64_t>{160, 160});
    REQUIRE(maps.velocity_x.shape() == std::vector<std::int64_t>{160, 160});
    for (std::int64_t i = 0; i < maps.trajectory.numel(); ++i) {
        REQUIRE(maps.trajectory[i] > 0.0f);
        REQUIRE(maps.trajectory[i] < 1.0f);
    }

    std::vector<Tensor<float>> seven(frames.begin(), frames.begin() + 7);
    REQUIRE_THROWS_AS(net.forward(seven, false), ArgumentError);
    REQUIRE_THROWS_AS(mbt_spec(6), ArgumentError);

    SECTION("reversing the sequence changes the output") {
        std::vector<Tensor<float>> rev(frames.rbegin(), frames.rend());
        MbtMaps<float> mrev = net.forward(rev, false);
        bool differs = false;
        for (std::int64_t i = 0; i < mrev.trajectory.numel() && !differs; ++i)
            differs = mrev.trajectory[i] != maps.trajectory[i];
        REQUIRE(differs);
    }
}

TEST_CASE("networks are translation equivariant away from borders") {
    const std::int64_t shift = 4;

    // Content must stay clear of the borders at every scale: the normalisation
    // layers make any border interaction global, so the blobs sit near the
    // centre of a generous canvas.
    SECTION("generator") {
        Rng rng(46);
        Generator<float> g(generator_spec(3, 1, 8), rng);
        Tensor<float> a({3, 96, 96}), b({3, 96, 96});
        for (std::int64_t ch = 0; ch < 3; ++ch) {
            add_blob(a, ch, 44.0, 46.0);
            add_blob(b, ch, 44.0 + shift, 46.0 + shift);
        }
        Tensor<float> ya = g.forward(a, false);
        Tensor<float> yb = g.forward(b, false);
        for (std::int64_t r = 36; r < 56; ++r)
            for (std::int64_t c = 38; c < 58; ++c)
                REQUIRE(std::abs(ya(0, r, c) - yb(0, r + shift, c + shift)) <= 1e-4f);
    }
    SECTION("localisation net") {
        Rng rng(47);
        MblNet<float> net(mbl_spec(8), rng);
        Tensor<float> a({1, 48, 48}), b({1, 48, 48});
        add_blob(a, 0, 21.0, 19.0, 1.2);
        add_blob(b, 0, 21.0 + shift, 19.0 + shift, 1.2);
        MblMaps<float> ma = net.forward(a, false);
        MblMaps<float> mb = net.forward(b, false);
        for (std::int64_t r = 14; r < 30; ++r)
            for (std::int64_t c = 14; c < 30; ++c) {
                REQUIRE(std::abs(ma.p(r, c) - mb.p(r + shift, c + shift)) <= 1e-4f);
                REQUIRE(std::abs(ma.offset_x(r, c) - mb.offset_x(r + shift, c + shift)) <=
                        1e-4f);
            }
    }
    SECTION("trajectory net") {
        Rng rng(48);
        MbtNet<float> net(mbt_spec(8), rng);
        std::vector<Tensor<float>> fa(8, Tensor<float>({1, 96, 96}));
        std::vector<Tensor<float>> fb(8, Tensor<float>({1, 96, 96}));
        for (int t = 0; t < 8; ++t) {
            add_blob(fa[static_cast<std::size_t>(t)], 0, 44.0 + 0.5 * t, 47.0, 1.2);
            add_blob(fb[static_cast<std::size_t>(t)], 0, 44.0 + 0.5 * t + shift, 47.0 + shift,
                     1.2);
        }
        MbtMaps<float> ma = net.forward(fa, false);
        MbtMaps<float> mb = net.forward(fb, false);
        const std::int64_t fs = 4 * shift;
        for (std::int64_t r = 168; r < 208; ++r)
            for (std::int64_t c = 168; c < 208; ++c)
                REQUIRE(std::abs(ma.trajectory(r, c) - mb.trajectory(r + fs, c + fs)) <= 1e-4f);
    }
}

TEST_CASE("generator end-to-end gradients") {
    Rng rng(49);
    Generator<double> g(generator_spec(2, 1, 4), rng);
    Tensor<double> x({2, 8, 8});
    fill_random(x, rng, 0.0, 1.0);
    Tensor<double> w({1, 8, 8});
    fill_random(w, rng);

    auto loss = [&] {
        Tensor<double> y = g.forward(x, false);
        double s = 0.0;
        for (std::int64_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
        return s;
    };
    g.zero_grad();
    g.forward(x, true);
    Tensor<double> dx = g.backward(w, true);
    for (std::int64_t i = 0; i < x.numel(); ++i) fd_slot(&x[i], dx[i], loss);
    auto params = g.params();
    for (auto& p : params)
        for (std::int64_t i = 0; i < p.value->numel(); i += 13)
            fd_slot(&(*p.value)[i], (*p.grad)[i], loss);
}

TEST_CASE("discriminator end-to-end gradients") {
    Rng rng(50);
    Discriminator<double> d(2, 4, rng);
    Tensor<double> x({2, 16, 16});
    fill_random(x, rng, 0.0, 1.0);
    Tensor<double> y0 = d.forward(x, false);
    Tensor<double> w(y0.shape());
    fill_random(w, rng);

    auto loss = [&] {
        Tensor<double> y = d.forward(x, false);
        double s = 0.0;
        for (std::int64_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
        return s;
    };
    d.zero_grad();
    d.forward(x, true);
    Tensor<double> dx = d.backward(w, true);
    for (std::int64_t i = 0; i < x.numel(); i += 3) fd_slot(&x[i], dx[i], loss);
    auto params = d.params();
    for (auto& p : params)
        for (std::int64_t i = 0; i < p.value->numel(); i += 17)
            fd_slot(&(*p.value)[i], (*p.grad)[i], loss);
}

TEST_CASE("localisation net end-to-end gradients") {
    Rng rng(51);
    UNetSpec spec = mbl_spec(4);
    MblNet<double> net(spec, rng);
    Tensor<double> x({1, 8, 8});
    fill_random(x, rng, 0.0, 1.0);
    MblMaps<double> w;
    w.p = Tensor<double>({8, 8});
    w.intensity = Tensor<double>({8, 8});
    w.offset_x = Tensor<double>({8, 8});
    w.offset_y = Tensor<double>({8, 8});
    w.sigma_i = Tensor<double>({8, 8});
    w.sigma_x = Tensor<double>({8, 8});
    w.sigma_y = Tensor<double>({8, 8});
    for (Tensor<double>* m : {&w.p, &w.intensity, &w.offset_x, &w.offset_y, &w.sigma_i,
                              &w.sigma_x, &w.sigma_y})
        fill_random(*m, rng);

    auto loss = [&] {
        MblMaps<double> y = net.forward(x, false);
        double s = 0.0;
        for (std::int64_t i = 0; i < 64; ++i)
            s += y.p[i] * w.p[i] + y.intensity[i] * w.intensity[i] +
                 y.offset_x[i] * w.offset_x[i] + y.offset_y[i] * w.offset_y[i] +
                 y.sigma_i[i] * w.sigma_i[i] + y.sigma_x[i] * w.sigma_x[i] +
                 y.sigma_y[i] * w.sigma_y[i];
        return s;
    };
    net.zero_grad();
    net.forward(x, true);
    Tensor<double> dx = net.backward(w, true);
    for (std::int64_t i = 0; i < x.numel(); i += 2) fd_slot(&x[i], dx[i], loss);
    auto params = net.params();
    for (auto& p : params)
        for (std::int64_t i = 0; i < p.value->numel(); i += 19)
            fd_slot(&(*p.value)[i], (*p.grad)[i], loss);
}

TEST_CASE("trajectory net end-to-end gradients") {
    Rng rng(52);
    MbtNet<double> net(mbt_spec(8), rng);
    std::vector<Tensor<double>> xs(8, Tensor<double>({1, 8, 8}));
    for (auto& f : xs) fill_random(f, rng, 0.0, 1.0);
    MbtMaps<double> w;
    w.trajectory = Tensor<double>({32, 32});
    w.velocity_x = Tensor<double>({32, 32});
    w.velocity_y = Tensor<double>({32, 32});
    fill_random(w.trajectory, rng);
    fill_random(w.velocity_x, rng);
    fill_random(w.velocity_y, rng);

    auto loss = [&] {
        MbtMaps<double> y = net.forward(xs, false);
        double s = 0.0;
        for (std::int64_t i = 0; i < y.trajectory.numel(); ++i)
            s += y.trajectory[i] * w.trajectory[i] + y.velocity_x[i] * w.velocity_x[i] +
                 y.velocity_y[i] * w.velocity_y[i];
        return s;
    };
    net.zero_grad();
    net.forward(xs, true);
    std::vector<Tensor<double>> dxs = net.backward(w, true);
    REQUIRE(dxs.size() == 8);
    for (std::size_t t = 0; t < 8; t += 3)
        for (std::int64_t i = 0; i < xs[t].numel(); i += 7)
            fd_slot(&xs[t][i], dxs[t][i], loss);
    auto params = net.params();
    REQUIRE(nn::param_count(params) > 0);
    for (auto& p : params)
        for (std::int64_t i = 0; i < p.value->numel(); i += 101)
            fd_slot(&(*p.value)[i], (*p.grad)[i], loss);
}
