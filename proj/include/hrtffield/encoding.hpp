// Sinusoidal encoding of scalars into K-dimensional rows and assembly of the
// conditioning channel stacks built from positions and anthropometry.
//
// Encoding dimension equals the number of frequency bins K = 129. K is odd,
// so dims (2i, 2i+1) hold (sin, cos) pairs for i < 64 and the last dimension
// takes the unpaired sin. Frequencies follow the standard base-10000 schedule
// w_i = 10000^(-2i/K).
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "hrtffield/errors.hpp"
#include "hrtffield/spectra.hpp"

namespace hrtffield {

// Positions are pre-scaled by 1/r0 before encoding so measurement-scale
// coordinates (radii around 1.5-1.7 m) land in a well-conditioned range.
constexpr double kPositionEncodingScale = 2.0;

inline const std::array<double, kNumBins / 2 + 1>& sin_encode_frequencies() {
    static const std::array<double, kNumBins / 2 + 1> freqs = [] {
        std::array<double, kNumBins / 2 + 1> w{};
        for (std::size_t i = 0; i < w.size(); ++i)
            w[i] = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(kNumBins));
        return w;
    }();
    return freqs;
}

inline std::array<double, kNumBins> sin_encode(double s) {
    if (!std::isfinite(s)) throw DataError("sin_encode: non-finite input");
    const auto& freqs = sin_encode_frequencies();
    std::array<double, kNumBins> out{};
    for (std::size_t i = 0; i <= kNumBins / 2; ++i) {
        const double w = freqs[i];
        out[2 * i] = std::sin(s * w);
        if (2 * i + 1 < kNumBins) out[2 * i + 1] = std::cos(s * w);
    }
    return out;
}

// C x K stack of encoded channels. Entries are bounded in [-1, 1].
struct EncodedChannels {
    std::size_t channels = 0;
    std::vector<double> data;  // row-major, channels x kNumBins

    double at(std::size_t c, std::size_t k) const { return data[c * kNumBins + k]; }
};

inline void append_row(EncodedChannels& ec, const std::array<double, kNumBins>& row) {
    ec.data.insert(ec.data.end(), row.begin(), row.end());
    ec.channels += 1;
}

// Rows are sin_encode of x, y, z, each pre-scaled by 1/r0. Applies to
// absolute positions and to neighbor offsets alike.
inline EncodedChannels encode_position(const Position& v) {
    if (!v.finite()) throw DataError("encode_position: non-finite component");
    EncodedChannels ec;
    ec.data.reserve(3 * kNumBins);
    append_row(ec, sin_encode(v.x / kPositionEncodingScale));
    append_row(ec, sin_encode(v.y / kPositionEncodingScale));
    append_row(ec, sin_encode(v.z / kPositionEncodingScale));
    return ec;
}

// One row per z-scored anthropometric feature.
inline EncodedChannels encode_anthro(const Anthropometry& a, const AnthroStats& stats) {
    if (!stats.valid()) throw ConfigError("encode_anthro: normalization statistics unavailable");
    EncodedChannels ec;
    ec.data.reserve(kNumAnthroFeatures * kNumBins);
    for (std::size_t j = 0; j < kNumAnthroFeatures; ++j)
        append_row(ec, sin_encode((a.features_cm[j] - stats.mean[j]) / stats.stddev[j]));
    return ec;
}

inline EncodedChannels concat_channels(const EncodedChannels& a, const EncodedChannels& b) {
    EncodedChannels out = a;
    out.data.insert(out.data.end(), b.data.begin(), b.data.end());
    out.channels += b.channels;
    return out;
}

}  // namespace hrtffield
