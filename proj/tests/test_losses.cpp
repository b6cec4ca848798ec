#include <catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "culm/losses.hpp"
#include "culm/random.hpp"
#include "culm/tensor.hpp"

using namespace culm;

namespace {

void fill_random(Tensor<double>& t, Rng& rng, double lo, double hi) {
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
}

// Central finite differences in double against a precomputed analytic
// gradient. loss must re-evaluate from the (mutated) tensor each call.
void check_grad(Tensor<double>& x, const Tensor<double>& analytic,
                const std::function<double()>& loss, double tol = 1e-4) {
    REQUIRE(x.numel() == analytic.numel());
    const double h = 1e-5;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double lp = loss();
        x[i] = keep - h;
        const double lm = loss();
        x[i] = keep;
        const double fd = (lp - lm) / (2.0 * h);
        const double a = analytic[i];
        const double scale = std::max(std::abs(fd), std::abs(a));
        if (scale < 1e-7) continue;
        INFO("index " << i << " fd " << fd << " analytic " << a);
        REQUIRE(std::abs(fd - a) / scale <= tol);
    }
}

// Direct mixture evaluation without log-space tricks; the reference for the
// stabilised implementation.
double gmm_oracle(const Tensor<double>& p, const Tensor<double>& in, const Tensor<double>& dx,
                  const Tensor<double>& dy, const Tensor<double>& si, const Tensor<double>& sx,
                  const Tensor<double>& sy, const std::vector<GmmTarget>& gts) {
    const std::int64_t h = p.dim(0), w = p.dim(1);
    double psum = 0.0;
    for (std::int64_t i = 0; i < p.numel(); ++i) psum += p[i];
    const double norm = std::pow(2.0 * 3.14159265358979323846, 1.5);
    double acc = 0.0;
    for (const auto& g : gts) {
        double mix = 0.0;
        for (std::int64_t r = 0; r < h; ++r)
            for (std::int64_t c = 0; c < w; ++c) {
                const double mu_i = in(r, c);
                const double mu_x = static_cast<double>(c) + dx(r, c);
                const double mu_y = static_cast<double>(r) + dy(r, c);
                const double q = (g.intensity - mu_i) * (g.intensity - mu_i) /
                                     (si(r, c) * si(r, c)) +
                                 (g.x - mu_x) * (g.x - mu_x) / (sx(r, c) * sx(r, c)) +
                                 (g.y - mu_y) * (g.y - mu_y) / (sy(r, c) * sy(r, c));
                mix += (p(r, c) / psum) * std::exp(-0.5 * q) /
                       (norm * si(r, c) * sx(r, c) * sy(r, c));
            }
        acc -= std::log(mix);
    }
    return acc / static_cast<double>(gts.size());
}

} // namespace

TEST_CASE("lsgan generator loss") {
    Tensor<double> s({2, 3});
    s.fill(1.0);
    REQUIRE(lsgan_gen_loss(s) == 0.0);
    s.fill(0.0);
    REQUIRE(lsgan_gen_loss(s) == 0.5);
    s[0] = s[1] = s[2] = 1.0; // half ones, half zeros
    REQUIRE(lsgan_gen_loss(s) == 0.25);
}

TEST_CASE("lsgan discriminator loss") {
    Tensor<double> real({4}), fake({4});
    real.fill(1.0);
    fake.fill(0.0);
    REQUIRE(lsgan_disc_loss(real, fake) == 0.0);
    real.fill(0.0);
    fake.fill(1.0);
    REQUIRE(lsgan_disc_loss(real, fake) == 1.0);
    real.fill(0.5);
    fake.fill(0.5);
    REQUIRE(lsgan_disc_loss(real, fake) == 0.25);
}

TEST_CASE("cycle loss") {
    Tensor<double> a({3, 3}), b({3, 3});
    Rng rng(5);
    fill_random(a, rng, 0.0, 1.0);
    b = a;
    REQUIRE(cycle_loss(a, b) == 0.0);
    for (std::int64_t i = 0; i < b.numel(); ++i) b[i] += 0.1;
    REQUIRE(cycle_loss(a, b) == Catch::Approx(0.1).margin(1e-12));
    REQUIRE(cycle_loss(a, b) == cycle_loss(b, a));
    Tensor<double> c({2, 2});
    REQUIRE_THROWS_AS(cycle_loss(a, c), ArgumentError);
}

TEST_CASE("similarity loss targets the centre channel") {
    Tensor<double> triplet({3, 4, 4});
    Rng rng(6);
    fill_random(triplet, rng, 0.0, 1.0);
    Tensor<double> mb({1, 4, 4});
    for (std::int64_t i = 0; i < 16; ++i) mb[i] = triplet[16 + i];
    REQUIRE(similarity_loss(mb, triplet) == 0.0);

    for (std::int64_t i = 0; i < 16; ++i) mb[i] += 0.2;
    REQUIRE(similarity_loss(mb, triplet) == Catch::Approx(0.2).margin(1e-12));

    Tensor<double> other = triplet;
    for (std::int64_t i = 0; i < 16; ++i) {
        other[i] = rng.uniform(0.0, 1.0);          // first channel
        other[32 + i] = rng.uniform(0.0, 1.0);     // last channel
    }
    REQUIRE(similarity_loss(mb, other) == similarity_loss(mb, triplet));
}

TEST_CASE("total generator objective") {
    LossWeights w;
    REQUIRE(w.lambda1 == 5.0);
    REQUIRE(w.lambda2 == 5.0);
    REQUIRE(w.lambda3 == 1.0);
    REQUIRE(total_gen_loss({1, 1, 1, 1, 1}, w) == 13.0);
    REQUIRE(total_gen_loss({0, 0, 0, 0, 0}, w) == 0.0);
    LossWeights zero{0.0, 0.0, 0.0};
    REQUIRE(total_gen_loss({0.7, 0.3, 9, 9, 9}, zero) == Catch::Approx(1.0));
    LossWeights bad{-1.0, 5.0, 1.0};
    REQUIRE_THROWS_AS(bad.validate(), ArgumentError);
}

TEST_CASE("presence and trajectory bce") {
    Tensor<double> gt({5, 5});
    Rng rng(7);
    for (std::int64_t i = 0; i < gt.numel(); ++i) gt[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;

    Tensor<double> p = gt;
    REQUIRE(presence_bce(p, gt) <= 1.2e-6);
    REQUIRE(presence_bce(p, gt) >= 0.0);

    p.fill(0.5);
    REQUIRE(presence_bce(p, gt) == Catch::Approx(std::log(2.0)).margin(1e-12));

    gt.fill(0.0);
    p.fill(0.1);
    REQUIRE(presence_bce(p, gt) == Catch::Approx(-std::log(0.9)).margin(1e-12));
    REQUIRE(trajectory_bce(p, gt) == presence_bce(p, gt));
}

TEST_CASE("weighted velocity mse") {
    Tensor<double> vx({4, 4}), vy({4, 4}), gx({4, 4}), gy({4, 4}), t({4, 4});
    Rng rng(8);
    fill_random(gx, rng, -2.0, 2.0);
    fill_random(gy, rng, -2.0, 2.0);

    SECTION("perfect prediction") {
        vx = gx;
        vy = gy;
        t.fill(0.7);
        REQUIRE(weighted_velocity_mse(vx, vy, gx, gy, t) == 0.0);
    }
    SECTION("uniform weights, constant error") {
        vx = gx;
        vy = gy;
        for (std::int64_t i = 0; i < vx.numel(); ++i) vx[i] += 1.0;
        t.fill(0.3);
        REQUIRE(weighted_velocity_mse(vx, vy, gx, gy, t) == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("all weight on one pixel") {
        vx = gx;
        vy = gy;
        fill_random(vx, rng, -5.0, 5.0); // junk elsewhere
        fill_random(vy, rng, -5.0, 5.0);
        vx(2, 1) = gx(2, 1) + 2.0;
        vy(2, 1) = gy(2, 1) + 1.0;
        t.fill(0.0);
        t(2, 1) = 0.8;
        REQUIRE(weighted_velocity_mse(vx, vy, gx, gy, t) == Catch::Approx(5.0).margin(1e-12));
    }
    SECTION("uniform support weights equal plain mse on the support") {
        fill_random(vx, rng, -3.0, 3.0);
        fill_random(vy, rng, -3.0, 3.0);
        t.fill(0.0);
        double mse = 0.0;
        int n = 0;
        for (std::int64_t i = 0; i < t.numel(); i += 3) {
            t[i] = 1.0;
            const double ex = vx[i] - gx[i], ey = vy[i] - gy[i];
            mse += ex * ex + ey * ey;
            ++n;
        }
        REQUIRE(weighted_velocity_mse(vx, vy, gx, gy, t) ==
                Catch::Approx(mse / n).margin(1e-12));
    }
    SECTION("zero trajectory flagged") {
        t.fill(0.0);
        bool skipped = false;
        REQUIRE(weighted_velocity_mse(vx, vy, gx, gy, t, nullptr, nullptr, nullptr,
                                      &skipped) == 0.0);
        REQUIRE(skipped);
    }
}

TEST_CASE("gmm localisation nll") {
    SECTION("single pixel at the target is the standard normal constant") {
        Tensor<double> p({1, 1}), in({1, 1}), dx({1, 1}), dy({1, 1});
        Tensor<double> si({1, 1}), sx({1, 1}), sy({1, 1});
        p.fill(1.0);
        in.fill(0.6);
        dx.fill(0.2);
        dy.fill(-0.1);
        si.fill(1.0);
        sx.fill(1.0);
        sy.fill(1.0);
        std::vector<GmmTarget> gts = {{0.6, 0.2, -0.1}};
        const double nll = gmm_localisation_nll(p, in, dx, dy, si, sx, sy, gts);
        REQUIRE(nll == Catch::Approx(1.5 * std::log(2.0 * 3.14159265358979323846))
                           .margin(1e-10));
        REQUIRE(nll == Catch::Approx(2.75682).margin(1e-5));
    }
    SECTION("matches the brute-force oracle") {
        Rng rng(9);
        for (int rep = 0; rep < 30; ++rep) {
            const auto h = rng.uniform_int(1, 8);
            const auto w = rng.uniform_int(1, 8);
            Tensor<double> p({h, w}), in({h, w}), dx({h, w}), dy({h, w});
            Tensor<double> si({h, w}), sx({h, w}), sy({h, w});
            fill_random(p, rng, 1e-7, 0.95);
            fill_random(in, rng, 0.05, 1.0);
            fill_random(dx, rng, -0.5, 0.5);
            fill_random(dy, rng, -0.5, 0.5);
            fill_random(si, rng, 0.3, 1.5);
            fill_random(sx, rng, 0.3, 1.5);
            fill_random(sy, rng, 0.3, 1.5);
            std::vector<GmmTarget> gts;
            const auto m = rng.uniform_int(1, 3);
            for (std::int64_t i = 0; i < m; ++i)
                gts.push_back({rng.uniform(0.05, 1.0),
                               rng.uniform(0.0, static_cast<double>(w - 1)),
                               rng.uniform(0.0, static_cast<double>(h - 1))});
            const double got = gmm_localisation_nll(p, in, dx, dy, si, sx, sy, gts);
            const double want = gmm_oracle(p, in, dx, dy, si, sx, sy, gts);
            REQUIRE(got == Catch::Approx(want).margin(1e-10));
            REQUIRE(std::isfinite(got));
        }
    }
    SECTION("dominant component with weight normalisation") {
        Tensor<double> p({1, 2}), in({1, 2}), dx({1, 2}), dy({1, 2});
        Tensor<double> si({1, 2}), sx({1, 2}), sy({1, 2});
        p(0, 0) = 1.0;
        p(0, 1) = 1e-7;
        in(0, 0) = 0.5;
        in(0, 1) = 0.9;
        dx.fill(0.0);
        dy.fill(0.0);
        si.fill(1.0);
        sx.fill(1.0);
        sy.fill(1.0);
        std::vector<GmmTarget> gts = {{0.5, 0.0, 0.0}};
        const double got = gmm_localisation_nll(p, in, dx, dy, si, sx, sy, gts);
        const double want = gmm_oracle(p, in, dx, dy, si, sx, sy, gts);
        REQUIRE(got == Catch::Approx(want).margin(1e-10));
        REQUIRE(got == Catch::Approx(2.75682).margin(1e-3));
    }
    SECTION("permutation of targets and scaling of p are invariant") {
        Rng rng(10);
        Tensor<double> p({4, 4}), in({4, 4}), dx({4, 4}), dy({4, 4});
        Tensor<double> si({4, 4}), sx({4, 4}), sy({4, 4});
        fill_random(p, rng, 0.05, 0.95);
        fill_random(in, rng, 0.05, 1.0);
        fill_random(dx, rng, -0.5, 0.5);
        fill_random(dy, rng, -0.5, 0.5);
        fill_random(si, rng, 0.3, 1.5);
        fill_random(sx, rng, 0.3, 1.5);
        fill_random(sy, rng, 0.3, 1.5);
        std::vector<GmmTarget> gts = {{0.5, 1.0, 2.0}, {0.8, 3.0, 0.5}, {0.2, 2.2, 2.9}};
        const double base = gmm_localisation_nll(p, in, dx, dy, si, sx, sy, gts);
        std::vector<GmmTarget> perm = {gts[2], gts[0], gts[1]};
        REQUIRE(gmm_localisation_nll(p, in, dx, dy, si, sx, sy, perm) ==
                Catch::Approx(base).margin(1e-12));
        Tensor<double> p2 = p;
        p2 *= 3.7;
        REQUIRE(gmm_localisation_nll(p2, in, dx, dy, si, sx, sy, gts) ==
                Catch::Approx(base).margin(1e-9));
    }
    SECTION("errors and the empty flag") {
        Tensor<double> ok({2, 2});
        ok.fill(0.5);
        Tensor<double> bad({2, 2});
        bad.fill(-0.1);
        std::vector<GmmTarget> gts = {{0.5, 0.5, 0.5}};
        REQUIRE_THROWS_AS(gmm_localisation_nll(ok, ok, ok, ok, bad, ok, ok, gts),
                          ArgumentError);
        bool skipped = false;
        REQUIRE(gmm_localisation_nll(ok, ok, ok, ok, ok, ok, ok, {}, nullptr, &skipped) == 0.0);
        REQUIRE(skipped);
    }
}

TEST_CASE("analytic gradients match finite differences") {
    Rng rng(77);

    SECTION("lsgan generator") {
        Tensor<double> s({3, 4});
        fill_random(s, rng, -1.0, 2.0);
        Tensor<double> g({3, 4});
        lsgan_gen_loss(s, &g);
        check_grad(s, g, [&] { return lsgan_gen_loss(s); });
    }
    SECTION("lsgan discriminator") {
        Tensor<double> real({3, 3}), fake({3, 3});
        fill_random(real, rng, -1.0, 2.0);
        fill_random(fake, rng, -1.0, 2.0);
        Tensor<double> gr({3, 3}), gf({3, 3});
        lsgan_disc_loss(real, fake, &gr, &gf);
        check_grad(real, gr, [&] { return lsgan_disc_loss(real, fake); });
        check_grad(fake, gf, [&] { return lsgan_disc_loss(real, fake); });
    }
    SECTION("cycle") {
        Tensor<double> rec({4, 4}), orig({4, 4});
        fill_random(rec, rng, 0.0, 1.0);
        fill_random(orig, rng, 0.0, 1.0);
        Tensor<double> g({4, 4});
        cycle_loss(rec, orig, &g);
        check_grad(rec, g, [&] { return cycle_loss(rec, orig); });
    }
    SECTION("similarity") {
        Tensor<double> mb({1, 4, 4}), trip({3, 4, 4});
        fill_random(mb, rng, 0.0, 1.0);
        fill_random(trip, rng, 0.0, 1.0);
        Tensor<double> g({1, 4, 4});
        similarity_loss(mb, trip, &g);
        check_grad(mb, g, [&] { return similarity_loss(mb, trip); });
    }
    SECTION("presence bce") {
        Tensor<double> p({4, 5}), gt({4, 5});
        fill_random(p, rng, 0.05, 0.95);
        for (std::int64_t i = 0; i < gt.numel(); ++i) gt[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
        Tensor<double> g({4, 5});
        presence_bce(p, gt, &g);
        check_grad(p, g, [&] { return presence_bce(p, gt); });
    }
    SECTION("weighted velocity mse") {
        Tensor<double> vx({4, 4}), vy({4, 4}), gx({4, 4}), gy({4, 4}), t({4, 4});
        fill_random(vx, rng, -2.0, 2.0);
        fill_random(vy, rng, -2.0, 2.0);
        fill_random(gx, rng, -2.0, 2.0);
        fill_random(gy, rng, -2.0, 2.0);
        fill_random(t, rng, 0.1, 1.0);
        Tensor<double> gvx({4, 4}), gvy({4, 4}), gt_({4, 4});
        weighted_velocity_mse(vx, vy, gx, gy, t, &gvx, &gvy, &gt_);
        auto f = [&] { return weighted_velocity_mse(vx, vy, gx, gy, t); };
        check_grad(vx, gvx, f);
        check_grad(vy, gvy, f);
        check_grad(t, gt_, f);
    }
    SECTION("gmm nll over all seven maps") {
        Tensor<double> p({3, 4}), in({3, 4}), dx({3, 4}), dy({3, 4});
        Tensor<double> si({3, 4}), sx({3, 4}), sy({3, 4});
        fill_random(p, rng, 0.05, 0.95);
        fill_random(in, rng, 0.05, 1.0);
        fill_random(dx, rng, -0.45, 0.45);
        fill_random(dy, rng, -0.45, 0.45);
        fill_random(si, rng, 0.4, 1.4);
        fill_random(sx, rng, 0.4, 1.4);
        fill_random(sy, rng, 0.4, 1.4);
        std::vector<GmmTarget> gts = {{0.7, 1.2, 0.8}, {0.3, 2.6, 1.9}};
        GmmGrads<double> grads;
        grads.allocate({3, 4});
        gmm_localisation_nll(p, in, dx, dy, si, sx, sy, gts, &grads);
        auto f = [&] { return gmm_localisation_nll(p, in, dx, dy, si, sx, sy, gts); };
        check_grad(p, grads.p, f);
        check_grad(in, grads.intensity, f);
        check_grad(dx, grads.offset_x, f);
        check_grad(dy, grads.offset_y, f);
        check_grad(si, grads.sigma_i, f);
        check_grad(sx, grads.sigma_x, f);
        check_grad(sy, grads.sigma_y, f);
    }
}
