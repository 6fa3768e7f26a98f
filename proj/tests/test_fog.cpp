#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>

#include "fogda/fog.hpp"
#include "fogda/scene.hpp"
#include "physics_suite.hpp"

using namespace fogda;
using fogda::testing::random_image;
using fogda::testing::random_map;

namespace {

double mean_abs_diff(const Image& a, const Image& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += std::abs(a.data[i] - b.data[i]);
    return s / static_cast<double>(a.data.size());
}

}  // namespace

TEST_CASE("transmission_from_depth") {
    Map2D d(1, 3);
    d.data = {0.0, 1.0, 5.0};
    CHECK(transmission_from_depth(d, 0.0).values.data == std::vector<double>{1.0, 1.0, 1.0});
    Map2D one(1, 1, 1.0);
    CHECK(transmission_from_depth(one, std::numbers::ln2).at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    const auto t = transmission_from_depth(d, 0.1);
    CHECK(t.values.data[0] > t.values.data[1]);
    CHECK(t.values.data[1] > t.values.data[2]);
    d.data[1] = -0.5;
    CHECK_THROWS_AS(transmission_from_depth(d, 0.1), std::invalid_argument);
}

TEST_CASE("apply_fog examples") {
    std::mt19937_64 rng(3);
    const Image clear = random_image(3, 4, 5, rng);
    const Airlight a{0.9, 0.8, 0.95};
    CHECK(apply_fog(clear, TransmissionMap{Map2D(4, 5, 1.0)}, a) == clear);
    const Image full = apply_fog(clear, TransmissionMap{Map2D(4, 5, 0.0)}, a);
    for (std::size_t c = 0; c < 3; ++c) CHECK(full.at(c, 2, 3) == a[c]);
    Image j(1, 1, 1, 0.5);
    CHECK(apply_fog(j, TransmissionMap{Map2D(1, 1, 0.5)}, Airlight{1.0}).data[0] == 0.75);
    CHECK_THROWS_AS(apply_fog(clear, TransmissionMap{Map2D(5, 4, 1.0)}, a), std::invalid_argument);
    CHECK_THROWS_AS(apply_fog(clear, TransmissionMap{Map2D(4, 5, 1.0)}, Airlight{0.9}), std::invalid_argument);
}

TEST_CASE("apply_fog stays a convex combination in [0,1]") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 50; ++k) {
        const Image clear = random_image(3, 6, 6, rng);
        const TransmissionMap t{random_map(6, 6, 0.0, 1.0, rng)};
        const Airlight a{u(rng), u(rng), u(rng)};
        const Image f = apply_fog(clear, t, a);
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < 36; ++i) {
                const double lo = std::min(clear.data[c * 36 + i], a[c]), hi = std::max(clear.data[c * 36 + i], a[c]);
                CHECK(f.data[c * 36 + i] >= lo - 1e-15);
                CHECK(f.data[c * 36 + i] <= hi + 1e-15);
            }
        }
    }
}

TEST_CASE("dehaze_exact inverts apply_fog") {
    CHECK(fogda::testing::fog_round_trip_error(50, 5) < 1e-9);

    std::mt19937_64 rng(8);
    const Airlight a{0.9, 0.9, 0.9};
    const Image veil(3, 4, 4, 0.9);
    const TransmissionMap t{random_map(4, 4, 0.0, 1.0, rng)};
    const Image j = dehaze_exact(veil, t, a);
    for (double v : j.data) CHECK(v == doctest::Approx(0.9).epsilon(1e-15));

    const Image img = random_image(3, 4, 4, rng);
    const Image same = dehaze_exact(img, TransmissionMap{Map2D(4, 4, 1.0)}, a);
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(same.data[i] == doctest::Approx(img.data[i]).epsilon(1e-15));
}

TEST_CASE("dehaze_exact floors t and clamps output") {
    Image i(1, 1, 1, 0.0);
    const Image j = dehaze_exact(i, TransmissionMap{Map2D(1, 1, 0.01)}, Airlight{0.9});
    // (0 - 0.9) / 0.1 + 0.9 = -8.1 before clamping.
    CHECK(j.data[0] == 0.0);
}

TEST_CASE("dark_channel examples") {
    CHECK(dark_channel(Image(3, 5, 5, 0.0), 3).data == std::vector<double>(25, 0.0));
    CHECK(dark_channel(Image(3, 5, 5, 0.4), 7).data == std::vector<double>(25, 0.4));
    Image one(1, 3, 3, 0.7);
    one.at(0, 0, 2) = 0.1;
    const Map2D d = dark_channel(one, 3);
    CHECK(d.at(1, 1) == 0.1);
    CHECK(d.at(2, 0) == 0.7);
    CHECK(d.at(0, 1) == 0.1);
    CHECK_THROWS_AS(dark_channel(one, 2), std::invalid_argument);
    CHECK_THROWS_AS(dark_channel(one, 0), std::invalid_argument);
}

TEST_CASE("dark_channel matches brute force and is monotone") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.0, 0.2);
    for (int k = 0; k < 20; ++k) {
        const Image img = random_image(3, 9, 7, rng);
        const Map2D d = dark_channel(img, 5);
        for (std::size_t y = 0; y < 9; ++y) {
            for (std::size_t x = 0; x < 7; ++x) {
                double m = 1e9;
                for (long yy = static_cast<long>(y) - 2; yy <= static_cast<long>(y) + 2; ++yy) {
                    for (long xx = static_cast<long>(x) - 2; xx <= static_cast<long>(x) + 2; ++xx) {
                        if (yy < 0 || xx < 0 || yy >= 9 || xx >= 7) continue;
                        for (std::size_t c = 0; c < 3; ++c) {
                            m = std::min(m, img.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)));
                        }
                    }
                }
                CHECK(d.at(y, x) == m);
            }
        }
        Image brighter = img;
        for (double& v : brighter.data) v += u(rng);
        const Map2D db = dark_channel(brighter, 5);
        for (std::size_t i = 0; i < d.data.size(); ++i) CHECK(db.data[i] >= d.data[i]);
    }
}

TEST_CASE("estimate_transmission_dcp examples") {
    const Airlight a{0.9, 0.9, 0.9};
    const auto t_veil = estimate_transmission_dcp(Image(3, 8, 8, 0.9), a);
    for (double v : t_veil.values.data) CHECK(v == kTransmissionFloor);
    const auto t_black = estimate_transmission_dcp(Image(3, 8, 8, 0.0), a);
    for (double v : t_black.values.data) CHECK(v == 1.0);
}

TEST_CASE("DCP transmission error falls as omega rises on rendered scenes") {
    SceneSpec spec;
    double err_low = 0.0, err_high = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const SceneSample s = render_scene(spec, 1000 + seed);
        const Airlight a = s.airlight;
        const auto t05 = estimate_transmission_dcp(s.foggy, a, 0.5);
        const auto t95 = estimate_transmission_dcp(s.foggy, a, 0.95);
        for (std::size_t i = 0; i < t05.values.data.size(); ++i) {
            err_low += std::abs(t05.values.data[i] - s.t_gt.values.data[i]);
            err_high += std::abs(t95.values.data[i] - s.t_gt.values.data[i]);
        }
    }
    CHECK(err_high < err_low);
}

TEST_CASE("dcp_defog on clear and foggy scenes") {
    SceneSpec spec;
    double before = 0.0, after = 0.0, clear_err = 0.0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const SceneSample s = render_scene(spec, 5000 + seed);
        const DcpResult r = dcp_defog(s.foggy);
        for (double v : r.defogged.data) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
        before += mean_abs_diff(s.foggy, s.clear);
        after += mean_abs_diff(r.defogged, s.clear);
        if (seed < 10) {
            const DcpResult rc = dcp_defog(s.clear);
            clear_err += mean_abs_diff(rc.defogged, s.clear);
        }
    }
    // Averaged over ten fog-free scenes; single bright-sky scenes can exceed it.
    CHECK(clear_err / 10 < 0.15);
    MESSAGE("mean abs error to clear: foggy " << before / 50 << ", defogged " << after / 50);
    CHECK(after < before);
}

TEST_CASE("dcp_defog is deterministic and estimates a bright airlight") {
    const SceneSample s = render_scene(SceneSpec{}, 77);
    const DcpResult a = dcp_defog(s.foggy), b = dcp_defog(s.foggy);
    CHECK(a.defogged == b.defogged);
    CHECK(a.transmission == b.transmission);
    CHECK(a.airlight == b.airlight);
    for (double v : a.airlight) CHECK(v > 0.5);
}

TEST_CASE("normalize_map examples") {
    Map2D m(1, 3);
    m.data = {1.0, 2.0, 3.0};
    CHECK(normalize_map(m).data == std::vector<double>{0.0, 0.5, 1.0});
    CHECK(normalize_map(Map2D(3, 3, 4.2)).data == std::vector<double>(9, 0.0));
    CHECK(fogda::testing::affine_invariance_error(100, 2) < 1e-12);
}

TEST_CASE("normalisation cancels a uniform beta") {
    CHECK(fogda::testing::beta_cancellation_error(100, 4) < 1e-12);
}
