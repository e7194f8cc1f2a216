// Spherical/Cartesian coordinates, source-position grids, neighborhood
// construction, plane membership and deterministic spatial downsampling.
//
// Conventions: positions are Cartesian meters with the head center at the
// origin; azimuth is degrees in [0, 360) counter-clockwise from +x toward +y;
// elevation is degrees in [-90, 90] from the horizontal plane toward +z.
// Neighborhoods use plain Euclidean distance.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "hrtffield/errors.hpp"
#include "hrtffield/rng.hpp"

namespace hrtffield {

constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kRadToDeg = 180.0 / std::numbers::pi;

struct Position {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    double norm() const { return std::sqrt(x * x + y * y + z * z); }
    bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }

    Position operator-(const Position& o) const { return {x - o.x, y - o.y, z - o.z}; }
    bool operator==(const Position& o) const = default;
};

inline double distance(const Position& a, const Position& b) { return (a - b).norm(); }

struct SphericalPos {
    double azimuth_deg = 0.0;    // [0, 360)
    double elevation_deg = 0.0;  // [-90, 90]
    double radius_m = 1.0;       // > 0
};

inline Position sph_to_cart(const SphericalPos& s) {
    const double az = s.azimuth_deg * kDegToRad;
    const double el = s.elevation_deg * kDegToRad;
    return {s.radius_m * std::cos(el) * std::cos(az),
            s.radius_m * std::cos(el) * std::sin(az),
            s.radius_m * std::sin(el)};
}

// Inverse of sph_to_cart. At the poles (|el| = 90 deg within 1e-12) azimuth is
// canonicalized to 0. Zero-length input is a domain error.
inline SphericalPos cart_to_sph(const Position& p) {
    const double r = p.norm();
    if (!(r > 0.0)) throw DataError("cart_to_sph: zero-length position has no direction");
    SphericalPos s;
    s.radius_m = r;
    s.elevation_deg = std::asin(std::clamp(p.z / r, -1.0, 1.0)) * kRadToDeg;
    if (std::abs(std::abs(s.elevation_deg) - 90.0) < 1e-12) {
        s.elevation_deg = s.elevation_deg > 0.0 ? 90.0 : -90.0;
        s.azimuth_deg = 0.0;
        return s;
    }
    double az = std::atan2(p.y, p.x) * kRadToDeg;
    if (az < 0.0) az += 360.0;
    if (az >= 360.0) az = 0.0;
    s.azimuth_deg = az;
    return s;
}

enum class GridKind { geographical, quasi_uniform, loaded };

inline std::string to_string(GridKind k) {
    switch (k) {
        case GridKind::geographical: return "geographical";
        case GridKind::quasi_uniform: return "quasi-uniform";
        case GridKind::loaded: return "loaded";
    }
    return "?";
}

struct Grid {
    std::vector<Position> positions;
    GridKind kind = GridKind::loaded;
    double radius_m = 0.0;

    std::size_t size() const { return positions.size(); }
};

// Rings of constant elevation every step_el degrees from -90 to +90; within a
// ring the azimuth count keeps the great-circle arc between neighbors near
// gc_step_az degrees. Poles contribute one point each. Ordering is elevation
// ascending, then azimuth ascending.
inline Grid make_geographical_grid(double step_el_deg, double gc_step_az_deg, double radius_m) {
    if (!(step_el_deg > 0.0 && step_el_deg <= 90.0)) throw ConfigError("make_geographical_grid: step_el must be in (0, 90]");
    if (!(gc_step_az_deg > 0.0)) throw ConfigError("make_geographical_grid: gc_step_az must be positive");
    if (!(radius_m > 0.0)) throw ConfigError("make_geographical_grid: radius must be positive");

    Grid g;
    g.kind = GridKind::geographical;
    g.radius_m = radius_m;
    for (int k = 0;; ++k) {
        const double el = -90.0 + k * step_el_deg;
        if (el > 90.0 + 1e-9) break;
        const double el_c = std::min(el, 90.0);
        const long n_az = std::max<long>(1, std::lround(360.0 * std::cos(el_c * kDegToRad) / gc_step_az_deg));
        for (long j = 0; j < n_az; ++j) {
            const double az = 360.0 * static_cast<double>(j) / static_cast<double>(n_az);
            g.positions.push_back(sph_to_cart({az, el_c, radius_m}));
        }
        if (el_c >= 90.0) break;
    }
    return g;
}

// Fibonacci-sphere layout: z_i = 1 - (2i+1)/n, azimuth advancing by the golden
// angle. Deterministic stand-in for quadrature node tables at desk scale.
inline Grid make_quasi_uniform_grid(std::size_t n, double radius_m) {
    if (n < 2) throw ConfigError("make_quasi_uniform_grid: need at least 2 points");
    if (!(radius_m > 0.0)) throw ConfigError("make_quasi_uniform_grid: radius must be positive");

    constexpr double golden_angle = std::numbers::pi * (3.0 - 2.2360679774997896964091736687747);  // pi*(3-sqrt(5))
    Grid g;
    g.kind = GridKind::quasi_uniform;
    g.radius_m = radius_m;
    g.positions.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double z = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n);
        const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden_angle * static_cast<double>(i);
        g.positions.push_back({radius_m * rho * std::cos(phi), radius_m * rho * std::sin(phi), radius_m * z});
    }
    return g;
}

// Indices of candidates q with 0 < |q - p| < delta, ordered by ascending
// distance with ties broken by index. The strict lower bound drops p itself
// when p is one of the candidates.
inline std::vector<std::size_t> neighborhood_indices(const std::vector<Position>& candidates,
                                                     const Position& p, double delta_m) {
    if (!(delta_m > 0.0)) throw ConfigError("neighborhood: delta must be positive");
    std::vector<std::pair<double, std::size_t>> hits;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const double d = distance(candidates[i], p);
        if (d > 0.0 && d < delta_m) hits.emplace_back(d, i);
    }
    std::sort(hits.begin(), hits.end());
    std::vector<std::size_t> out;
    out.reserve(hits.size());
    for (const auto& [d, i] : hits) out.push_back(i);
    return out;
}

inline std::vector<Position> neighborhood(const Grid& grid, const Position& p, double delta_m) {
    std::vector<Position> out;
    for (std::size_t i : neighborhood_indices(grid.positions, p, delta_m)) out.push_back(grid.positions[i]);
    return out;
}

enum class SampleMode { train, test };

// Train mode draws n candidates uniformly with replacement; test mode takes
// the n closest (the candidate list is already distance-sorted by
// neighborhood), cycling through it when fewer than n are available.
inline std::vector<std::size_t> sample_neighbor_indices(std::size_t n_candidates, std::size_t n,
                                                        SampleMode mode, std::uint64_t rng_seed) {
    if (n_candidates == 0) throw DataError("sample_neighbors: empty candidate set, target is uncoverable");
    std::vector<std::size_t> out;
    out.reserve(n);
    if (mode == SampleMode::train) {
        Rng rng(rng_seed);
        for (std::size_t i = 0; i < n; ++i) out.push_back(rng.uniform_index(n_candidates));
    } else {
        for (std::size_t i = 0; i < n; ++i) out.push_back(i % n_candidates);
    }
    return out;
}

inline std::vector<Position> sample_neighbors(const std::vector<Position>& candidates, std::size_t n,
                                              SampleMode mode, std::uint64_t rng_seed) {
    std::vector<Position> out;
    for (std::size_t i : sample_neighbor_indices(candidates.size(), n, mode, rng_seed))
        out.push_back(candidates[i]);
    return out;
}

struct PlaneMembership {
    bool horizontal = false;  // |elevation| <= tol
    bool median = false;      // within tol great-circle degrees of the x-z plane
    bool frontal = false;     // within tol great-circle degrees of the y-z plane
};

inline PlaneMembership plane_membership(const Position& p, double tol_deg = 0.5) {
    const double r = p.norm();
    if (!(r > 0.0)) throw DataError("plane_membership: zero-length position");
    PlaneMembership m;
    const double el = std::asin(std::clamp(p.z / r, -1.0, 1.0)) * kRadToDeg;
    m.horizontal = std::abs(el) <= tol_deg;
    m.median = std::abs(std::asin(std::clamp(p.y / r, -1.0, 1.0)) * kRadToDeg) <= tol_deg;
    m.frontal = std::abs(std::asin(std::clamp(p.x / r, -1.0, 1.0)) * kRadToDeg) <= tol_deg;
    return m;
}

// Keeps every t-th point of the grid's deterministic ordering.
inline Grid downsample_grid(const Grid& grid, std::size_t t) {
    if (t < 1) throw ConfigError("downsample_grid: factor must be >= 1");
    Grid out;
    out.kind = grid.kind;
    out.radius_m = grid.radius_m;
    for (std::size_t i = 0; i < grid.positions.size(); i += t) out.positions.push_back(grid.positions[i]);
    return out;
}

inline void validate_grid(const Grid& g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!g.positions[i].finite()) throw DataError("grid point " + std::to_string(i) + " is not finite");
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
        for (std::size_t j = i + 1; j < g.size(); ++j) {
            if (distance(g.positions[i], g.positions[j]) <= 1e-9)
                throw DataError("grid points " + std::to_string(i) + " and " + std::to_string(j) + " coincide");
        }
    }
}

}  // namespace hrtffield
