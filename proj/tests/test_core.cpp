#include <catch_amalgamated.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "culm/core.hpp"
#include "culm/io.hpp"
#include "culm/random.hpp"
#include "culm/tensor.hpp"

namespace fs = std::filesystem;
using namespace culm;

namespace {

fs::path tmp_file(const std::string& name) {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / "culm_test_core";
        fs::create_directories(d);
        return d;
    }();
    return dir / name;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("tensor shape and indexing") {
    Tensor<float> t({2, 3, 4});
    REQUIRE(t.ndim() == 3);
    REQUIRE(t.numel() == 24);
    t(1, 2, 3) = 5.0f;
    REQUIRE(t[1 * 12 + 2 * 4 + 3] == 5.0f);
    REQUIRE_THROWS_AS(Tensor<float>({2, 0}), ArgumentError);

    Tensor<float> a({2, 2});
    a.fill(1.5f);
    a *= 2.0f;
    REQUIRE(a.sum() == 12.0f);
    REQUIRE(a.mean() == 3.0f);

    a(0, 0) = std::numeric_limits<float>::quiet_NaN();
    REQUIRE_FALSE(a.all_finite());
}

TEST_CASE("rng reproducibility and state roundtrip") {
    Rng a(42);
    Rng b(42);
    for (int i = 0; i < 100; ++i) {
        REQUIRE(a.uniform() == b.uniform());
        REQUIRE(a.normal() == b.normal());
        REQUIRE(a.uniform_int(-5, 17) == b.uniform_int(-5, 17));
    }

    // State capture in the middle of a Box-Muller pair must preserve the
    // cached spare value.
    Rng c(7);
    c.normal();
    const std::string s = c.state();
    std::vector<double> ahead;
    for (int i = 0; i < 16; ++i) ahead.push_back(c.normal());
    Rng d(999);
    d.set_state(s);
    for (int i = 0; i < 16; ++i) REQUIRE(d.normal() == ahead[static_cast<std::size_t>(i)]);
}

TEST_CASE("rng transform ranges") {
    Rng r(1);
    for (int i = 0; i < 10000; ++i) {
        const double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        const auto k = r.uniform_int(3, 9);
        REQUIRE(k >= 3);
        REQUIRE(k <= 9);
    }
    // Distinct streams from one seed diverge.
    Rng s0 = Rng::stream(5, 0);
    Rng s1 = Rng::stream(5, 1);
    REQUIRE(s0.next_u64() != s1.next_u64());
}

TEST_CASE("array container roundtrip is bit exact") {
    Rng r(123);
    for (int rep = 0; rep < 20; ++rep) {
        const int nd = static_cast<int>(r.uniform_int(1, 4));
        std::vector<std::int64_t> shape;
        for (int i = 0; i < nd; ++i) shape.push_back(r.uniform_int(1, 6));
        Tensor<float> t(shape);
        for (std::int64_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<float>(r.uniform(-100.0, 100.0));
        if (t.numel() > 2) {
            t[0] = 0.0f;
            t[1] = -0.0f;
        }
        const auto p = tmp_file("rt.culm");
        save_array(p.string(), t);
        const Tensor<float> back = load_array(p.string());
        REQUIRE(back.shape() == t.shape());
        REQUIRE(std::memcmp(back.data(), t.data(), static_cast<std::size_t>(t.numel()) * 4) == 0);
    }
}

TEST_CASE("array container rejects malformed files") {
    Tensor<float> t({3, 40, 40});
    t.fill(0.5f);
    t[0] = 0.0f;
    t[1] = 1.0f;
    const auto p = tmp_file("bad.culm");
    save_array(p.string(), t);
    std::string buf = slurp(p);

    SECTION("bad magic") {
        std::string b = buf;
        b[0] = 'X';
        std::ofstream(p, std::ios::binary) << b;
        try {
            load_array(p.string());
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(e.offset() == 0);
        }
    }
    SECTION("bad version") {
        std::string b = buf;
        b[4] = 9;
        std::ofstream(p, std::ios::binary) << b;
        try {
            load_array(p.string());
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(e.offset() == 4);
        }
    }
    SECTION("truncated payload") {
        std::string b = buf.substr(0, buf.size() - 7);
        std::ofstream(p, std::ios::binary) << b;
        try {
            load_array(p.string());
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(e.offset() == 7 + 3 * 8);
        }
    }
    SECTION("trailing bytes") {
        std::string b = buf + "zz";
        std::ofstream(p, std::ios::binary) << b;
        REQUIRE_THROWS_AS(load_array(p.string()), FormatError);
    }
    SECTION("non-finite values rejected on save") {
        t[5] = std::numeric_limits<float>::infinity();
        REQUIRE_THROWS_AS(save_array(p.string(), t), ArgumentError);
    }
}

TEST_CASE("localisation csv roundtrip") {
    const auto p = tmp_file("locs.csv");

    SECTION("empty list writes header only") {
        write_localisations_csv(p.string(), {});
        REQUIRE(slurp(p) == std::string(localisation_csv_header()) + "\n");
        REQUIRE(read_localisations_csv(p.string()).empty());
    }
    SECTION("values survive with 9 significant digits") {
        std::vector<Localisation> locs;
        locs.push_back({0, 12.3456789, -0.25, 0.987654321, 0.01, 0.02, 0.03, 0.999});
        locs.push_back({17, 0.0, 39.5, 1.0, 0.0, 0.0, 0.0, 0.5});
        write_localisations_csv(p.string(), locs);
        const auto back = read_localisations_csv(p.string());
        REQUIRE(back.size() == 2);
        REQUIRE(back[0].frame == 0);
        REQUIRE(back[0].x == Catch::Approx(12.3456789).epsilon(1e-8));
        REQUIRE(back[0].y == -0.25);
        REQUIRE(back[1].frame == 17);
        REQUIRE(back[1].score == 0.5);
    }
    SECTION("non-numeric field names the line") {
        std::ofstream out(p);
        out << localisation_csv_header() << "\n";
        out << "0,1.5,2.5,1,0,0,0,0.9\n";
        out << "1,oops,2.5,1,0,0,0,0.9\n";
        out.close();
        try {
            read_localisations_csv(p.string());
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(std::string(e.what()).find("line 3") != std::string::npos);
        }
    }
    SECTION("wrong header rejected") {
        std::ofstream out(p);
        out << "frame,x,y\n";
        out.close();
        REQUIRE_THROWS_AS(read_localisations_csv(p.string()), FormatError);
    }
}

TEST_CASE("track csv roundtrip keeps step velocities") {
    Track t;
    t.id = 3;
    t.points.push_back({0, 1.0, 2.0, 0.8, 0, 0, 0, 0.9});
    t.points.push_back({1, 1.5, 2.25, 0.7, 0, 0, 0, 0.8});
    t.points.push_back({2, 2.0, 2.5, 0.6, 0, 0, 0, 0.7});
    t.velocities.push_back({0.5, 0.25});
    t.velocities.push_back({0.5, 0.25});

    Track u;
    u.id = 5;
    u.points.push_back({4, 10.0, 10.0, 1.0, 0, 0, 0, 1.0});

    const auto p = tmp_file("tracks.csv");
    write_tracks_csv(p.string(), {t, u});
    const auto back = read_tracks_csv(p.string());
    REQUIRE(back.size() == 2);
    REQUIRE(back[0].id == 3);
    REQUIRE(back[0].points.size() == 3);
    REQUIRE(back[0].velocities.size() == 2);
    REQUIRE(back[0].velocities[1].x == 0.5);
    REQUIRE(back[0].velocities[1].y == 0.25);
    REQUIRE(back[1].points.size() == 1);
    REQUIRE(back[1].velocities.empty());
}

TEST_CASE("track validation invariants") {
    Track t;
    REQUIRE_THROWS_AS(t.validate(), ArgumentError);
    t.points.push_back({0, 0, 0, 1, 0, 0, 0, 1});
    t.points.push_back({0, 1, 1, 1, 0, 0, 0, 1});
    t.velocities.push_back({1, 1});
    REQUIRE_THROWS_AS(t.validate(), ArgumentError); // frames not increasing
    t.points[1].frame = 2;
    REQUIRE_NOTHROW(t.validate());
    t.velocities.push_back({1, 1});
    REQUIRE_THROWS_AS(t.validate(), ArgumentError); // wrong velocity count
}

TEST_CASE("velocity unit conversion") {
    Geometry g; // 100 um pitch, 100 Hz
    const auto v = mmps_to_px_per_frame(30.80, g);
    REQUIRE(v.x == Catch::Approx(3.08).margin(1e-12));
    REQUIRE(v.y == Catch::Approx(3.08).margin(1e-12));

    Geometry g2;
    g2.frame_rate_hz = 50.0;
    const auto w = mmps_to_px_per_frame(78.28, g2);
    REQUIRE(w.x == Catch::Approx(15.656).margin(1e-12));

    // Linear in speed, inverse in pitch and rate.
    Rng r(9);
    for (int i = 0; i < 50; ++i) {
        Geometry h;
        h.pixel_pitch_x_um = r.uniform(10.0, 500.0);
        h.pixel_pitch_y_um = h.pixel_pitch_x_um;
        h.frame_rate_hz = r.uniform(10.0, 1000.0);
        const double s = r.uniform(0.1, 100.0);
        const double k = r.uniform(0.5, 3.0);
        const auto a = mmps_to_px_per_frame(s, h);
        const auto b = mmps_to_px_per_frame(k * s, h);
        REQUIRE(b.x == Catch::Approx(k * a.x).epsilon(1e-12));
        Geometry h2 = h;
        h2.frame_rate_hz *= 2.0;
        REQUIRE(mmps_to_px_per_frame(s, h2).x == Catch::Approx(a.x / 2.0).epsilon(1e-12));
    }

    Geometry bad;
    bad.frame_rate_hz = 0.0;
    REQUIRE_THROWS_AS(mmps_to_px_per_frame(1.0, bad), ArgumentError);
}

TEST_CASE("frame stack helpers") {
    Tensor<float> d({2, 2, 2});
    d(0, 0, 0) = 4.0f;
    d(1, 1, 1) = 2.0f;
    FrameStack fs(std::move(d), Geometry{});
    REQUIRE(fs.n_frames() == 2);
    fs.normalise();
    REQUIRE(fs.data.max_value() == 1.0f);
    REQUIRE(fs.data(1, 1, 1) == 0.5f);
    const auto m = fs.mip();
    REQUIRE(m(0, 0) == 1.0f);
    REQUIRE(m(1, 1) == 0.5f);
    REQUIRE(m(0, 1) == 0.0f);

    REQUIRE_THROWS_AS(FrameStack(Tensor<float>({2, 2}), Geometry{}), ArgumentError);
}
