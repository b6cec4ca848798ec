#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "culm/nn.hpp"
#include "culm/random.hpp"
#include "culm/tensor.hpp"

using namespace culm;
using nn::ParamRef;

namespace {

void fill_random(Tensor<double>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
}

double weighted_sum(const Tensor<double>& y, const Tensor<double>& w) {
    REQUIRE(y.shape() == w.shape());
    double s = 0.0;
    for (std::int64_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
    return s;
}

// FD check of input and parameter gradients for a layer under the scalar
// probe loss sum(w . forward(x)).
void check_layer(nn::Layer<double>& layer, Tensor<double> x, Rng& rng, double tol = 1e-4) {
    Tensor<double> y0 = layer.forward(x, false);
    Tensor<double> w(y0.shape());
    fill_random(w, rng);

    layer.zero_grad();
    layer.forward(x, true);
    Tensor<double> dx = layer.backward(w, true);
    std::vector<ParamRef<double>> params;
    layer.collect("l", params);

    const double h = 1e-5;
    auto fd_check = [&](double* slot, double analytic) {
        const double keep = *slot;
        *slot = keep + h;
        const double lp = weighted_sum(layer.forward(x, false), w);
        *slot = keep - h;
        const double lm = weighted_sum(layer.forward(x, false), w);
        *slot = keep;
        const double fd = (lp - lm) / (2.0 * h);
        const double scale = std::max(std::abs(fd), std::abs(analytic));
        if (scale < 1e-7) return;
        INFO("fd " << fd << " analytic " << analytic);
        REQUIRE(std::abs(fd - analytic) / scale <= tol);
    };

    for (std::int64_t i = 0; i < x.numel(); ++i) fd_check(&x[i], dx[i]);
    for (auto& p : params)
        for (std::int64_t i = 0; i < p.value->numel(); ++i)
            fd_check(&(*p.value)[i], (*p.grad)[i]);
}

} // namespace

TEST_CASE("conv2d shapes and gradients") {
    Rng rng(21);
    SECTION("stride 1 keeps size with pad 1") {
        nn::Conv2d<double> conv(2, 3, 3, 1, 1, rng);
        Tensor<double> x({2, 6, 5});
        fill_random(x, rng);
        Tensor<double> y = conv.forward(x, false);
        REQUIRE(y.shape() == std::vector<std::int64_t>{3, 6, 5});
        check_layer(conv, x, rng);
    }
    SECTION("stride 2 halves even sizes with 4x4 pad 1") {
        nn::Conv2d<double> conv(1, 2, 4, 2, 1, rng);
        Tensor<double> x({1, 8, 8});
        fill_random(x, rng);
        Tensor<double> y = conv.forward(x, false);
        REQUIRE(y.shape() == std::vector<std::int64_t>{2, 4, 4});
        check_layer(conv, x, rng);
    }
    SECTION("channel mismatch throws") {
        nn::Conv2d<double> conv(2, 3, 3, 1, 1, rng);
        Tensor<double> x({1, 6, 5});
        REQUIRE_THROWS_AS(conv.forward(x, false), ArgumentError);
    }
    SECTION("backward without forward throws") {
        nn::Conv2d<double> conv(1, 1, 3, 1, 1, rng);
        Tensor<double> dy({1, 4, 4});
        REQUIRE_THROWS_AS(conv.backward(dy, true), ArgumentError);
    }
}

TEST_CASE("maxpool matches the window maximum and routes gradients") {
    Rng rng(22);
    nn::MaxPool2d<double> pool(4, 2, 1);
    Tensor<double> x({2, 8, 8});
    fill_random(x, rng, 0.0, 1.0);
    Tensor<double> y = pool.forward(x, false);
    REQUIRE(y.shape() == std::vector<std::int64_t>{2, 4, 4});
    // spot check one interior window
    double best = -1.0;
    for (std::int64_t r = 1; r < 5; ++r)
        for (std::int64_t c = 1; c < 5; ++c) best = std::max(best, x(0, r, c));
    REQUIRE(y(0, 1, 1) == best);
    check_layer(pool, x, rng);

    nn::MaxPool2d<double> pool22(2, 2, 0);
    Tensor<double> x2({1, 6, 6});
    fill_random(x2, rng, 0.0, 1.0);
    REQUIRE(pool22.forward(x2, false).shape() == std::vector<std::int64_t>{1, 3, 3});
    check_layer(pool22, x2, rng);
}

TEST_CASE("bilinear upsampling doubles size and preserves constants") {
    Rng rng(23);
    nn::Upsample2x<double> up;
    Tensor<double> c({1, 4, 4});
    c.fill(0.37);
    Tensor<double> yc = up.forward(c, false);
    REQUIRE(yc.shape() == std::vector<std::int64_t>{1, 8, 8});
    for (std::int64_t i = 0; i < yc.numel(); ++i)
        REQUIRE(yc[i] == Catch::Approx(0.37).margin(1e-12));

    Tensor<double> x({2, 4, 5});
    fill_random(x, rng);
    check_layer(up, x, rng);
}

TEST_CASE("instance norm standardises each channel") {
    Rng rng(24);
    nn::InstanceNorm<double> norm;
    Tensor<double> x({3, 5, 4});
    fill_random(x, rng, -2.0, 3.0);
    Tensor<double> y = norm.forward(x, false);
    for (std::int64_t c = 0; c < 3; ++c) {
        double m = 0.0, v = 0.0;
        for (std::int64_t i = 0; i < 20; ++i) m += y[c * 20 + i];
        m /= 20.0;
        for (std::int64_t i = 0; i < 20; ++i) {
            const double d = y[c * 20 + i] - m;
            v += d * d;
        }
        REQUIRE(m == Catch::Approx(0.0).margin(1e-9));
        REQUIRE(v / 20.0 == Catch::Approx(1.0).epsilon(1e-3));
    }
    check_layer(norm, x, rng);
}

TEST_CASE("activation layers") {
    Rng rng(25);
    Tensor<double> x({2, 3, 3});
    fill_random(x, rng, -2.0, 2.0);

    SECTION("relu") {
        nn::Relu<double> a;
        check_layer(a, x, rng);
    }
    SECTION("leaky relu") {
        nn::LeakyRelu<double> a(0.2);
        Tensor<double> y = a.forward(x, false);
        for (std::int64_t i = 0; i < x.numel(); ++i)
            REQUIRE(y[i] == Catch::Approx(x[i] > 0 ? x[i] : 0.2 * x[i]));
        check_layer(a, x, rng);
    }
    SECTION("sigmoid stays in (0,1)") {
        nn::Sigmoid<double> a;
        Tensor<double> y = a.forward(x, false);
        for (std::int64_t i = 0; i < y.numel(); ++i) {
            REQUIRE(y[i] > 0.0);
            REQUIRE(y[i] < 1.0);
        }
        check_layer(a, x, rng);
    }
    SECTION("scaled tanh is bounded by its scale") {
        nn::ScaledTanh<double> a(0.5);
        Tensor<double> y = a.forward(x, false);
        for (std::int64_t i = 0; i < y.numel(); ++i) REQUIRE(std::abs(y[i]) < 0.5);
        check_layer(a, x, rng);
    }
    SECTION("softplus with floor is strictly positive") {
        nn::Softplus<double> a(1e-3);
        Tensor<double> y = a.forward(x, false);
        for (std::int64_t i = 0; i < y.numel(); ++i) REQUIRE(y[i] >= 1e-3);
        check_layer(a, x, rng);
    }
}

TEST_CASE("residual block keeps shape and backpropagates the shortcut") {
    Rng rng(26);
    nn::ResBlock<double> block(3, true, rng);
    Tensor<double> x({3, 6, 6});
    fill_random(x, rng);
    REQUIRE(block.forward(x, false).shape() == x.shape());
    check_layer(block, x, rng, 2e-4);
}

TEST_CASE("sequential composes layers and replays caches in reverse") {
    Rng rng(27);
    nn::Sequential<double> seq;
    seq.add<nn::Conv2d<double>>(1, 2, 3, 1, 1, rng);
    seq.add<nn::Relu<double>>();
    seq.add<nn::Conv2d<double>>(2, 1, 3, 1, 1, rng);
    Tensor<double> x({1, 6, 6});
    fill_random(x, rng);
    check_layer(seq, x, rng);

    std::vector<ParamRef<double>> params;
    seq.collect("net", params);
    REQUIRE(params.size() == 4);
    REQUIRE(params[0].name == "net.0.w");
    REQUIRE(params[3].name == "net.2.b");
    REQUIRE(nn::param_count(params) == 2 * 9 + 2 + 2 * 9 + 1);
}

TEST_CASE("two forwards pop back in lifo order") {
    Rng rng(28);
    nn::Conv2d<double> conv(1, 1, 3, 1, 1, rng);
    Tensor<double> a({1, 4, 4}), b({1, 6, 6});
    fill_random(a, rng);
    fill_random(b, rng);
    conv.forward(a, true);
    conv.forward(b, true);
    Tensor<double> db = conv.backward(Tensor<double>::full({1, 6, 6}, 1.0), false);
    REQUIRE(db.shape() == b.shape());
    Tensor<double> da = conv.backward(Tensor<double>::full({1, 4, 4}, 1.0), false);
    REQUIRE(da.shape() == a.shape());
}

TEST_CASE("conv lstm gradients over a short sequence") {
    Rng rng(29);
    nn::ConvLstm<double> lstm(2, 3, rng);
    std::vector<Tensor<double>> xs(3, Tensor<double>({2, 4, 4}));
    for (auto& x : xs) fill_random(x, rng);

    Tensor<double> h = lstm.forward_seq(xs, false);
    REQUIRE(h.shape() == std::vector<std::int64_t>{3, 4, 4});
    Tensor<double> w(h.shape());
    fill_random(w, rng);

    lstm.zero_grad();
    lstm.forward_seq(xs, true);
    std::vector<Tensor<double>> dxs = lstm.backward_seq(w, true);
    REQUIRE(dxs.size() == 3);
    std::vector<ParamRef<double>> params;
    lstm.collect("lstm", params);

    auto loss = [&] { return weighted_sum(lstm.forward_seq(xs, false), w); };
    const double step = 1e-5;
    auto fd_check = [&](double* slot, double analytic) {
        const double keep = *slot;
        *slot = keep + step;
        const double lp = loss();
        *slot = keep - step;
        const double lm = loss();
        *slot = keep;
        const double fd = (lp - lm) / (2.0 * step);
        const double scale = std::max(std::abs(fd), std::abs(analytic));
        if (scale < 1e-7) return;
        INFO("fd " << fd << " analytic " << analytic);
        REQUIRE(std::abs(fd - analytic) / scale <= 1e-4);
    };
    for (std::size_t t = 0; t < xs.size(); ++t)
        for (std::int64_t i = 0; i < xs[t].numel(); ++i) fd_check(&xs[t][i], dxs[t][i]);
    for (auto& p : params)
        for (std::int64_t i = 0; i < p.value->numel(); ++i)
            fd_check(&(*p.value)[i], (*p.grad)[i]);

    SECTION("sequence shape mismatch throws") {
        std::vector<Tensor<double>> bad = xs;
        bad[1] = Tensor<double>({2, 5, 4});
        REQUIRE_THROWS_AS(lstm.forward_seq(bad, false), ArgumentError);
    }
}

TEST_CASE("concat and split are inverse") {
    Rng rng(30);
    Tensor<double> a({2, 3, 4}), b({3, 3, 4});
    fill_random(a, rng);
    fill_random(b, rng);
    Tensor<double> cat = nn::concat_channels(a, b);
    REQUIRE(cat.shape() == std::vector<std::int64_t>{5, 3, 4});
    auto [a2, b2] = nn::split_channels(cat, 2);
    for (std::int64_t i = 0; i < a.numel(); ++i) REQUIRE(a2[i] == a[i]);
    for (std::int64_t i = 0; i < b.numel(); ++i) REQUIRE(b2[i] == b[i]);
    Tensor<double> c({2, 4, 4});
    REQUIRE_THROWS_AS(nn::concat_channels(a, c), ArgumentError);
}

TEST_CASE("adam drives a quadratic toward its minimum deterministically") {
    Tensor<float> w({4});
    Tensor<float> g({4});
    for (std::int64_t i = 0; i < 4; ++i) w[i] = 2.0f + static_cast<float>(i);
    nn::Adam<float> opt(0.05, 0.9);
    std::vector<ParamRef<float>> params = {{"w", &w, &g}};
    for (int it = 0; it < 400; ++it) {
        for (std::int64_t i = 0; i < 4; ++i) g[i] = 2.0f * (w[i] - 1.5f);
        opt.step(params);
    }
    for (std::int64_t i = 0; i < 4; ++i)
        REQUIRE(w[i] == Catch::Approx(1.5f).margin(1e-2));
    REQUIRE(opt.step_count() == 400);
    REQUIRE_THROWS_AS(nn::Adam<float>(-1.0, 0.9), ArgumentError);
}
