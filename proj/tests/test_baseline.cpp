#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "hrtffield/baseline.hpp"
#include "hrtffield/geometry.hpp"
#include "hrtffield/rng.hpp"
#include "hrtffield/spectra.hpp"

using namespace hrtffield;

namespace {

// measurements on the equatorial arc az in [0, 180] step 10, spectra
// bin-wise linear in azimuth
std::vector<std::pair<Position, Hrtf>> ring_linear_measurements(double step_deg = 10.0) {
    std::vector<std::pair<Position, Hrtf>> out;
    for (double az = 0.0; az <= 180.0 + 1e-9; az += step_deg) {
        Hrtf h;
        for (std::size_t k = 0; k < kNumBins; ++k)
            h.db[k] = -5.0 + 0.02 * static_cast<double>(k) + (0.05 + 0.0003 * static_cast<double>(k)) * az;
        out.emplace_back(sph_to_cart({az, 0.0, 1.0}), h);
    }
    return out;
}

Hrtf ring_linear_truth(double az) {
    Hrtf h;
    for (std::size_t k = 0; k < kNumBins; ++k)
        h.db[k] = -5.0 + 0.02 * static_cast<double>(k) + (0.05 + 0.0003 * static_cast<double>(k)) * az;
    return h;
}

}  // namespace

TEST_CASE("coincident target returns that measurement exactly") {
    const auto meas = ring_linear_measurements();
    const Hrtf got = linear_interp(meas, meas[4].first);
    for (std::size_t k = 0; k < kNumBins; ++k) CHECK(got.db[k] == meas[4].second.db[k]);
}

TEST_CASE("midpoint between two equal-elevation samples averages them") {
    std::vector<std::pair<Position, Hrtf>> meas;
    Rng rng(3);
    Hrtf x, y;
    for (std::size_t k = 0; k < kNumBins; ++k) {
        x.db[k] = rng.uniform(-20.0, 5.0);
        y.db[k] = rng.uniform(-20.0, 5.0);
    }
    meas.emplace_back(sph_to_cart({30.0, 0.0, 1.0}), x);
    meas.emplace_back(sph_to_cart({50.0, 0.0, 1.0}), y);
    const Hrtf got = linear_interp(meas, sph_to_cart({40.0, 0.0, 1.0}));
    for (std::size_t k = 0; k < kNumBins; ++k)
        CHECK(got.db[k] == doctest::Approx((x.db[k] + y.db[k]) / 2.0).epsilon(1e-12));
}

TEST_CASE("exact recovery of a ring-linear field") {
    const auto meas = ring_linear_measurements();
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const double az = rng.uniform(5.0, 175.0);
        const Hrtf got = linear_interp(meas, sph_to_cart({az, 0.0, 1.0}));
        const Hrtf want = ring_linear_truth(az);
        for (std::size_t k = 0; k < kNumBins; ++k) CHECK(std::abs(got.db[k] - want.db[k]) < 1e-9);
    }
}

TEST_CASE("equal-azimuth fallback is exact on a meridian-linear field") {
    // single point per elevation ring, so the elevation plane never has two
    // samples and the azimuth plane is used
    std::vector<std::pair<Position, Hrtf>> meas;
    for (double el = -60.0; el <= 60.0 + 1e-9; el += 15.0) {
        Hrtf h;
        for (std::size_t k = 0; k < kNumBins; ++k) h.db[k] = -10.0 + (0.08 + 0.0005 * static_cast<double>(k)) * el;
        meas.emplace_back(sph_to_cart({40.0, el, 1.0}), h);
    }
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const double el = rng.uniform(-55.0, 55.0);
        const Hrtf got = linear_interp(meas, sph_to_cart({40.0, el, 1.0}));
        for (std::size_t k = 0; k < kNumBins; ++k)
            CHECK(got.db[k] == doctest::Approx(-10.0 + (0.08 + 0.0005 * static_cast<double>(k)) * el).epsilon(1e-9));
    }
}

TEST_CASE("global fallback engages when no plane matches") {
    std::vector<std::pair<Position, Hrtf>> meas;
    Rng rng(6);
    Hrtf x, y, z;
    for (std::size_t k = 0; k < kNumBins; ++k) {
        x.db[k] = rng.uniform(-20.0, 0.0);
        y.db[k] = rng.uniform(-20.0, 0.0);
        z.db[k] = rng.uniform(-20.0, 0.0);
    }
    meas.emplace_back(sph_to_cart({10.0, 30.0, 1.0}), x);
    meas.emplace_back(sph_to_cart({100.0, -40.0, 1.0}), y);
    meas.emplace_back(sph_to_cart({250.0, 70.0, 1.0}), z);
    // target shares no elevation or azimuth with any measurement
    const Position target = sph_to_cart({55.0, 5.0, 1.0});
    const Hrtf got = linear_interp(meas, target);

    // the two globally closest by Euclidean distance are x and y
    const double d1 = distance(meas[0].first, target);
    const double d2 = distance(meas[1].first, target);
    const double w1 = d2 / (d1 + d2);
    const double w2 = d1 / (d1 + d2);
    for (std::size_t k = 0; k < kNumBins; ++k)
        CHECK(got.db[k] == doctest::Approx(w1 * x.db[k] + w2 * y.db[k]).epsilon(1e-12));
}

TEST_CASE("output is a convex combination of measurement spectra") {
    const Grid g = make_quasi_uniform_grid(64, 1.0);
    const Dataset d = make_synthetic_dataset(g, 1, 8);
    const auto& meas = d.subjects[0].measurements;
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const double zc = rng.uniform(-1.0, 1.0);
        const double phi = rng.uniform(0.0, 6.283185307179586);
        const double rho = std::sqrt(1.0 - zc * zc);
        const Position p{rho * std::cos(phi), rho * std::sin(phi), zc};
        const Hrtf got = linear_interp(meas, p);
        for (std::size_t k = 0; k < kNumBins; ++k) {
            double lo = 1e300, hi = -1e300;
            for (const auto& [q, h] : meas) {
                lo = std::min(lo, h.db[k]);
                hi = std::max(hi, h.db[k]);
            }
            CHECK(got.db[k] >= lo - 1e-12);
            CHECK(got.db[k] <= hi + 1e-12);
        }
    }
}

TEST_CASE("fewer than two measurements is an error") {
    std::vector<std::pair<Position, Hrtf>> one;
    one.emplace_back(Position{1.0, 0.0, 0.0}, Hrtf{});
    CHECK_THROWS_AS(linear_interp(one, {0.0, 1.0, 0.0}), DataError);
}
