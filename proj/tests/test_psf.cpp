#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "culm/psf.hpp"
#include "culm/random.hpp"
#include "culm/tensor.hpp"

using namespace culm;

namespace {

// Independent fit oracle: exhaustive search over (sigma_x, sigma_y) with the
// blob centre pinned to the patch centre and the amplitude solved in closed
// form per candidate. Shares no code with estimate_psf.
struct GridFit {
    double sx = 0.0, sy = 0.0, amp = 0.0, sse = 0.0;
};

GridFit grid_search_fit(const Tensor<float>& img) {
    const std::int64_t h = img.dim(0), w = img.dim(1);
    const double cy = static_cast<double>(h - 1) / 2.0;
    const double cx = static_cast<double>(w - 1) / 2.0;
    auto eval = [&](double sx, double sy) {
        double gg = 0.0, gv = 0.0;
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c) {
                const double dx = static_cast<double>(c) - cx;
                const double dy = static_cast<double>(r) - cy;
                const double g =
                    std::exp(-0.5 * (dx * dx / (sx * sx) + dy * dy / (sy * sy)));
                gg += g * g;
                gv += g * static_cast<double>(img(r, c));
            }
        const double a = gv / gg;
        double sse = 0.0;
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c) {
                const double dx = static_cast<double>(c) - cx;
                const double dy = static_cast<double>(r) - cy;
                const double g =
                    a * std::exp(-0.5 * (dx * dx / (sx * sx) + dy * dy / (sy * sy)));
                const double e = g - static_cast<double>(img(r, c));
                sse += e * e;
            }
        return std::pair<double, double>(a, sse);
    };
    GridFit best;
    best.sse = 1e300;
    for (double sx = 0.3; sx <= 8.0; sx += 0.05)
        for (double sy = 0.3; sy <= 8.0; sy += 0.05) {
            const auto [a, sse] = eval(sx, sy);
            if (sse < best.sse) best = {sx, sy, a, sse};
        }
    const GridFit coarse = best;
    for (double sx = coarse.sx - 0.06; sx <= coarse.sx + 0.06; sx += 0.002)
        for (double sy = coarse.sy - 0.06; sy <= coarse.sy + 0.06; sy += 0.002) {
            const auto [a, sse] = eval(sx, sy);
            if (sse < best.sse) best = {sx, sy, a, sse};
        }
    return best;
}

Tensor<float> centred_gaussian_patch(std::int64_t h, std::int64_t w, double sx, double sy,
                                     double jx = 0.0, double jy = 0.0) {
    GaussianPSF psf{sx, sy, 1.0};
    const double cx = static_cast<double>(w - 1) / 2.0 + jx;
    const double cy = static_cast<double>(h - 1) / 2.0 + jy;
    return render_points({{cx, cy, 1.0}}, psf, h, w);
}

} // namespace

TEST_CASE("gaussian psf basics") {
    GaussianPSF p{2.0, 3.0, 1.0};
    REQUIRE_NOTHROW(p.validate());
    REQUIRE(p.fwhm_x() == Catch::Approx(2.0 * std::sqrt(2.0 * std::log(2.0)) * 2.0));
    REQUIRE(p.value(0.0, 0.0) == 1.0);
    REQUIRE(p.value(2.0, 0.0) == Catch::Approx(std::exp(-0.5)));

    GaussianPSF bad{0.0, 1.0, 1.0};
    REQUIRE_THROWS_AS(bad.validate(), ArgumentError);
}

TEST_CASE("shrink psf") {
    GaussianPSF p{4.0, 2.0, 1.0};
    const auto s = shrink_psf(p, 0.5);
    REQUIRE(s.sigma_x == 2.0);
    REQUIRE(s.sigma_y == 1.0);
    REQUIRE(s.fwhm_x() == Catch::Approx(0.5 * p.fwhm_x()));

    const auto id = shrink_psf(p, 1.0);
    REQUIRE(id.sigma_x == p.sigma_x);
    REQUIRE(id.sigma_y == p.sigma_y);

    REQUIRE_THROWS_AS(shrink_psf(p, 0.0), ArgumentError);
    REQUIRE_THROWS_AS(shrink_psf(p, 1.5), ArgumentError);
}

TEST_CASE("render points") {
    GaussianPSF psf{2.0, 2.0, 1.0};

    SECTION("peak value at an integer centre equals the intensity") {
        const auto img = render_points({{10.0, 12.0, 0.8}}, psf, 25, 25);
        REQUIRE(img(12, 10) == Catch::Approx(0.8).margin(1e-7));
        REQUIRE(img.max_value() == Catch::Approx(0.8).margin(1e-7));
    }
    SECTION("superposition of far-separated sources is exact") {
        const auto both =
            render_points({{8.0, 8.0, 0.5}, {30.0, 30.0, 0.9}}, psf, 40, 40);
        const auto a = render_points({{8.0, 8.0, 0.5}}, psf, 40, 40);
        const auto b = render_points({{30.0, 30.0, 0.9}}, psf, 40, 40);
        for (std::int64_t i = 0; i < both.numel(); ++i)
            REQUIRE(both[i] == a[i] + b[i]);
    }
    SECTION("half-pixel source splits the peak symmetrically") {
        const auto img = render_points({{10.5, 10.0, 1.0}}, psf, 21, 22);
        REQUIRE(std::abs(img(10, 10) - img(10, 11)) < 1e-12);
        REQUIRE(img(10, 10) > img(10, 9));
    }
    SECTION("integrated mass matches the analytic gaussian integral") {
        GaussianPSF p2{1.8, 1.2, 1.0};
        const auto img = render_points({{20.0, 19.5, 0.7}}, p2, 40, 40);
        const double mass = static_cast<double>(img.sum());
        const double expect = 0.7 * 2.0 * 3.14159265358979324 * 1.8 * 1.2;
        REQUIRE(mass == Catch::Approx(expect).epsilon(0.01));
    }
    SECTION("intensity scaling is linear") {
        const auto one = render_points({{9.25, 7.75, 0.4}}, psf, 20, 20);
        const auto two = render_points({{9.25, 7.75, 0.8}}, psf, 20, 20);
        for (std::int64_t i = 0; i < one.numel(); ++i)
            REQUIRE(two[i] == Catch::Approx(2.0f * one[i]).margin(1e-9));
    }
    SECTION("out-of-bounds or invalid sources are rejected") {
        REQUIRE_THROWS_AS(render_points({{25.0, 5.0, 0.5}}, psf, 20, 20), ArgumentError);
        REQUIRE_THROWS_AS(render_points({{5.0, 5.0, 0.0}}, psf, 20, 20), ArgumentError);
        REQUIRE_THROWS_AS(render_points({{5.0, 5.0, 1.5}}, psf, 20, 20), ArgumentError);
    }
}

TEST_CASE("discrete render path agrees with analytic rendering") {
    GaussianPSF psf{2.0, 1.6, 1.0};
    Rng rng(31);
    std::vector<PointSource> pts;
    for (int i = 0; i < 5; ++i)
        pts.push_back({rng.uniform(4.0, 35.0), rng.uniform(4.0, 35.0), rng.uniform(0.1, 1.0)});
    const auto exact = render_points(pts, psf, 40, 40);
    const auto fast = render_points_discrete(pts, psf, 40, 40, 8);
    double worst = 0.0;
    for (std::int64_t i = 0; i < exact.numel(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(exact[i]) - fast[i]));
    REQUIRE(worst <= 1e-3);
}

TEST_CASE("psf kernel sampling") {
    GaussianPSF psf{1.5, 1.0, 1.0};
    const auto k = psf_kernel(psf, 4.0);
    REQUIRE(k.dim(0) % 2 == 1);
    REQUIRE(k.dim(1) % 2 == 1);
    const std::int64_t cy = k.dim(0) / 2, cx = k.dim(1) / 2;
    REQUIRE(k(cy, cx) == 1.0f);
    REQUIRE(k(cy, cx + 1) == Catch::Approx(std::exp(-0.5 / (1.5 * 1.5))));
    const auto ks = psf_kernel(psf, 4.0, true);
    REQUIRE(ks.sum() == Catch::Approx(1.0f).margin(1e-6));
}

TEST_CASE("estimate psf recovers the generator") {
    SECTION("ten identical noiseless gaussians") {
        std::vector<Tensor<float>> patches(10, centred_gaussian_patch(25, 25, 2.0, 3.0));
        const auto e = estimate_psf(patches);
        REQUIRE(e.sigma_x == Catch::Approx(2.0).margin(0.01));
        REQUIRE(e.sigma_y == Catch::Approx(3.0).margin(0.01));
    }
    SECTION("single isotropic gaussian") {
        const auto e = estimate_psf({centred_gaussian_patch(21, 21, 1.5, 1.5)});
        REQUIRE(e.sigma_x == Catch::Approx(1.5).margin(0.01));
        REQUIRE(e.sigma_y == Catch::Approx(1.5).margin(0.01));
    }
    SECTION("noisy patches agree with the grid-search oracle") {
        Rng rng(77);
        std::vector<Tensor<float>> patches;
        Tensor<float> mean({25, 25});
        for (int i = 0; i < 10; ++i) {
            auto p = centred_gaussian_patch(25, 25, 2.0, 2.0);
            for (std::int64_t j = 0; j < p.numel(); ++j)
                p[j] += static_cast<float>(rng.normal(0.0, 0.02));
            for (std::int64_t j = 0; j < p.numel(); ++j) mean[j] += p[j] / 10.0f;
            patches.push_back(p);
        }
        const auto oracle = grid_search_fit(mean);
        const auto e = estimate_psf(patches);
        REQUIRE(e.sigma_x == Catch::Approx(oracle.sx).margin(0.02));
        REQUIRE(e.sigma_y == Catch::Approx(oracle.sy).margin(0.02));
        REQUIRE(e.sigma_x == Catch::Approx(2.0).margin(0.05));
        REQUIRE(e.sigma_y == Catch::Approx(2.0).margin(0.05));
    }
    SECTION("alignment handles sub-pixel displaced blobs") {
        Rng rng(5);
        std::vector<Tensor<float>> patches;
        for (int i = 0; i < 10; ++i)
            patches.push_back(centred_gaussian_patch(25, 25, 2.0, 2.0,
                                                     rng.uniform(-0.3, 0.3),
                                                     rng.uniform(-0.3, 0.3)));
        const auto e = estimate_psf(patches);
        REQUIRE(e.sigma_x == Catch::Approx(2.0).epsilon(0.03));
        REQUIRE(e.sigma_y == Catch::Approx(2.0).epsilon(0.03));
    }
    SECTION("round trip through render_points stays within one percent") {
        const auto e = estimate_psf({centred_gaussian_patch(25, 25, 2.2, 1.4)});
        REQUIRE(e.sigma_x == Catch::Approx(2.2).epsilon(0.01));
        REQUIRE(e.sigma_y == Catch::Approx(1.4).epsilon(0.01));
    }
    SECTION("degenerate inputs raise estimation errors") {
        REQUIRE_THROWS_AS(estimate_psf({}), ArgumentError);
        REQUIRE_THROWS_AS(estimate_psf({Tensor<float>({24, 25})}), ArgumentError);
        REQUIRE_THROWS_AS(estimate_psf({Tensor<float>({25, 25})}), NumericError);
        REQUIRE_THROWS_AS(estimate_psf({Tensor<float>::full({25, 25}, 1.0f)}), NumericError);
    }
}
