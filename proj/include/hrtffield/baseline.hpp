// Comparison method: linear interpolation between the two closest samples
// within a plane of equal elevation, falling back to the equal-azimuth plane
// and finally to the two globally closest measurements.
#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "hrtffield/errors.hpp"
#include "hrtffield/geometry.hpp"
#include "hrtffield/spectra.hpp"

namespace hrtffield {

namespace detail {

// great-circle angle (radians) between the directions of two positions
inline double gc_angle(const Position& a, const Position& b) {
    const double na = a.norm(), nb = b.norm();
    const Position u{a.x / na, a.y / na, a.z / na};
    const Position v{b.x / nb, b.y / nb, b.z / nb};
    const double d = u.x * v.x + u.y * v.y + u.z * v.z;
    const Position cr{u.y * v.z - u.z * v.y, u.z * v.x - u.x * v.z, u.x * v.y - u.y * v.x};
    return std::atan2(cr.norm(), d);
}

inline double az_diff_deg(double a, double b) {
    double d = std::abs(a - b);
    return d > 180.0 ? 360.0 - d : d;
}

// two smallest (distance, index) pairs, ties by index
inline bool two_closest(const std::vector<std::pair<double, std::size_t>>& scored, std::size_t& i1,
                        std::size_t& i2, double& d1, double& d2) {
    if (scored.size() < 2) return false;
    std::size_t b1 = 0, b2 = 1;
    if (scored[b2] < scored[b1]) std::swap(b1, b2);
    for (std::size_t i = 2; i < scored.size(); ++i) {
        if (scored[i] < scored[b1]) {
            b2 = b1;
            b1 = i;
        } else if (scored[i] < scored[b2]) {
            b2 = i;
        }
    }
    i1 = scored[b1].second;
    i2 = scored[b2].second;
    d1 = scored[b1].first;
    d2 = scored[b2].first;
    return true;
}

}  // namespace detail

// Interpolates the dB spectra of the two selected samples bin-wise with
// weights inversely proportional to angular distance. A coincident sample
// (distance ~ 0) gets the full weight.
inline Hrtf linear_interp(const std::vector<std::pair<Position, Hrtf>>& measurements, const Position& p,
                          double plane_tol_deg = 0.5) {
    if (measurements.size() < 2) throw DataError("linear_interp: need at least 2 measurements");
    const SphericalPos sp = cart_to_sph(p);

    std::vector<SphericalPos> sphs;
    sphs.reserve(measurements.size());
    for (const auto& [q, h] : measurements) sphs.push_back(cart_to_sph(q));

    std::vector<std::pair<double, std::size_t>> scored;
    auto collect_plane = [&](bool by_elevation) {
        scored.clear();
        for (std::size_t i = 0; i < measurements.size(); ++i) {
            const bool in_plane = by_elevation
                                      ? std::abs(sphs[i].elevation_deg - sp.elevation_deg) <= plane_tol_deg
                                      : detail::az_diff_deg(sphs[i].azimuth_deg, sp.azimuth_deg) <= plane_tol_deg;
            if (in_plane) scored.emplace_back(detail::gc_angle(measurements[i].first, p), i);
        }
    };

    std::size_t i1 = 0, i2 = 0;
    double d1 = 0.0, d2 = 0.0;
    collect_plane(true);
    if (!detail::two_closest(scored, i1, i2, d1, d2)) {
        collect_plane(false);
        if (!detail::two_closest(scored, i1, i2, d1, d2)) {
            scored.clear();
            for (std::size_t i = 0; i < measurements.size(); ++i)
                scored.emplace_back(distance(measurements[i].first, p), i);
            detail::two_closest(scored, i1, i2, d1, d2);
        }
    }

    double w1, w2;
    if (d1 < 1e-12) {
        w1 = 1.0;
        w2 = 0.0;
    } else {
        // w_i proportional to 1/d_i, normalized
        w1 = d2 / (d1 + d2);
        w2 = d1 / (d1 + d2);
    }
    Hrtf out;
    const Hrtf& x1 = measurements[i1].second;
    const Hrtf& x2 = measurements[i2].second;
    for (std::size_t k = 0; k < kNumBins; ++k) out.db[k] = w1 * x1.db[k] + w2 * x2.db[k];
    return out;
}

}  // namespace hrtffield
