// Differentiable layers and the four ablation variants: pointwise-convolution
// interpolator (a), FiLM residual trunk (b), FiLM-layer condition modulation
// (c1) and hyper-convolution condition modulation (c2).
//
// Parameters live in one flat vector; named tensor specs describe slices of
// it in a fixed construction order, which is the optimizer and checkpoint
// contract. Forward passes can record a trace of intermediates for the
// reverse pass in training.hpp.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hrtffield/encoding.hpp"
#include "hrtffield/errors.hpp"
#include "hrtffield/rng.hpp"
#include "hrtffield/spectra.hpp"

namespace hrtffield {

struct Tensor1d {
    std::size_t channels = 0;
    std::size_t length = 0;
    std::vector<double> data;  // row-major, channels x length

    static Tensor1d zeros(std::size_t c, std::size_t l) { return {c, l, std::vector<double>(c * l, 0.0)}; }

    double& at(std::size_t c, std::size_t k) { return data[c * length + k]; }
    double at(std::size_t c, std::size_t k) const { return data[c * length + k]; }
};

inline Tensor1d to_tensor(const EncodedChannels& ec) { return {ec.channels, kNumBins, ec.data}; }

inline Tensor1d concat_rows(const Tensor1d& a, const Tensor1d& b) {
    if (a.length != b.length) throw DataError("concat_rows: length mismatch");
    Tensor1d out = a;
    out.channels += b.channels;
    out.data.insert(out.data.end(), b.data.begin(), b.data.end());
    return out;
}

enum class Variant { a, b, c1, c2 };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::a: return "a";
        case Variant::b: return "b";
        case Variant::c1: return "c1";
        case Variant::c2: return "c2";
    }
    return "?";
}

inline Variant variant_from_string(std::string_view s) {
    if (s == "a") return Variant::a;
    if (s == "b") return Variant::b;
    if (s == "c1") return Variant::c1;
    if (s == "c2") return Variant::c2;
    throw ConfigError("unknown variant '" + std::string(s) + "' (expected a, b, c1 or c2)");
}

constexpr std::size_t kTrunkBlocks = 5;
constexpr std::size_t kTrunkKernel = 3;
constexpr std::size_t kHyperKernel = 3;
constexpr std::size_t kHyperHidden = 32;
constexpr double kOutputClampLoDb = -240.0;
constexpr double kOutputClampHiDb = 60.0;

struct TensorSpec {
    std::string name;
    std::vector<std::size_t> dims;
    std::size_t offset = 0;
    std::size_t size = 0;
};

struct ModelParams {
    Variant variant = Variant::a;
    std::size_t n_neighbors = 0;
    std::vector<TensorSpec> specs;
    std::vector<double> flat;

    const TensorSpec& spec(std::string_view name) const {
        for (const auto& s : specs)
            if (s.name == name) return s;
        throw ConfigError("unknown parameter tensor '" + std::string(name) + "'");
    }
    std::span<const double> tensor(std::string_view name) const {
        const auto& s = spec(name);
        return {flat.data() + s.offset, s.size};
    }
    std::span<double> tensor(std::string_view name) {
        const auto& s = spec(name);
        return {flat.data() + s.offset, s.size};
    }
};

// trunk channel schedule: N -> 4N -> 4N -> 4N -> 4N -> 1
inline std::pair<std::size_t, std::size_t> trunk_block_channels(std::size_t n_neighbors, std::size_t block) {
    const std::size_t wide = 4 * n_neighbors;
    const std::size_t c_in = block == 0 ? n_neighbors : wide;
    const std::size_t c_out = block == kTrunkBlocks - 1 ? 1 : wide;
    return {c_in, c_out};
}

namespace detail {

inline void add_tensor(ModelParams& p, std::string name, std::vector<std::size_t> dims) {
    TensorSpec s;
    s.name = std::move(name);
    s.dims = std::move(dims);
    s.size = 1;
    for (std::size_t d : s.dims) s.size *= d;
    s.offset = p.flat.size();
    p.flat.resize(p.flat.size() + s.size, 0.0);
    p.specs.push_back(std::move(s));
}

inline void fill_uniform(std::span<double> t, double bound, Rng& rng) {
    for (double& v : t) v = rng.uniform(-bound, bound);
}

// conv weight init: uniform in +-sqrt(1/(c_in*kappa)); biases stay zero
inline void init_conv(ModelParams& p, std::string_view name, std::size_t c_in, std::size_t kappa, Rng& rng) {
    fill_uniform(p.tensor(std::string(name) + ".weight"), std::sqrt(1.0 / static_cast<double>(c_in * kappa)), rng);
}

inline void add_film_block(ModelParams& p, const std::string& prefix, std::size_t c_in, std::size_t c_out,
                           std::size_t kappa) {
    add_tensor(p, prefix + ".conv.weight", {c_out, c_in, kappa});
    add_tensor(p, prefix + ".conv.bias", {c_out});
    if (c_in != c_out) {
        add_tensor(p, prefix + ".skip.weight", {c_out, c_in, 1});
        add_tensor(p, prefix + ".skip.bias", {c_out});
    }
    add_tensor(p, prefix + ".film.gamma.weight", {c_out, kNumBins});
    add_tensor(p, prefix + ".film.gamma.bias", {c_out});
    add_tensor(p, prefix + ".film.beta.weight", {c_out, kNumBins});
    add_tensor(p, prefix + ".film.beta.bias", {c_out});
}

}  // namespace detail

// Builds and initializes all learnable tensors of a variant. Initialization:
// PC starts as the exact neighbor mean, FiLM maps start as identity
// (gamma = 1, beta = 0), conv kernels are uniform +-sqrt(1/(c_in*kappa)), and
// the final trunk block is fully zeroed so every variant starts out equal to
// the plain PC interpolant.
inline ModelParams init_model_params(Variant variant, std::size_t n_neighbors, std::uint64_t seed) {
    if (n_neighbors < 1) throw ConfigError("init_model_params: need at least one neighbor");
    ModelParams p;
    p.variant = variant;
    p.n_neighbors = n_neighbors;
    const std::size_t off_ch = 3 * n_neighbors;
    const std::size_t ta_ch = 3 + kNumAnthroFeatures;

    detail::add_tensor(p, "pc.weight", {1, n_neighbors, 1});
    detail::add_tensor(p, "pc.bias", {1});
    if (variant != Variant::a) {
        if (variant == Variant::b) {
            detail::add_tensor(p, "cond.proj.weight", {1, off_ch + ta_ch, 1});
            detail::add_tensor(p, "cond.proj.bias", {1});
        } else {
            if (variant == Variant::c1) {
                detail::add_tensor(p, "tc.proj.weight", {1, ta_ch, 1});
                detail::add_tensor(p, "tc.proj.bias", {1});
                detail::add_film_block(p, "condmod", off_ch, off_ch, 1);
            } else {
                detail::add_tensor(p, "hyper.w1.weight", {kHyperHidden, ta_ch, 1});
                detail::add_tensor(p, "hyper.w1.bias", {kHyperHidden});
                detail::add_tensor(p, "hyper.w2.weight", {off_ch * off_ch * kHyperKernel, kHyperHidden, 1});
                detail::add_tensor(p, "hyper.w2.bias", {off_ch * off_ch * kHyperKernel});
                detail::add_tensor(p, "hyper.b1.weight", {kHyperHidden, ta_ch, 1});
                detail::add_tensor(p, "hyper.b1.bias", {kHyperHidden});
                detail::add_tensor(p, "hyper.b2.weight", {off_ch, kHyperHidden, 1});
                detail::add_tensor(p, "hyper.b2.bias", {off_ch});
            }
            detail::add_tensor(p, "cond.proj.weight", {1, off_ch, 1});
            detail::add_tensor(p, "cond.proj.bias", {1});
        }
        for (std::size_t i = 0; i < kTrunkBlocks; ++i) {
            const auto [c_in, c_out] = trunk_block_channels(n_neighbors, i);
            detail::add_film_block(p, "trunk." + std::to_string(i), c_in, c_out, kTrunkKernel);
        }
    }

    // deterministic fills, in spec order
    Rng rng(derive_seed(seed, 0x1217u, static_cast<std::uint64_t>(variant), n_neighbors));
    for (double& w : p.tensor("pc.weight")) w = 1.0 / static_cast<double>(n_neighbors);
    if (variant != Variant::a) {
        if (variant == Variant::b) {
            detail::init_conv(p, "cond.proj", off_ch + ta_ch, 1, rng);
        } else if (variant == Variant::c1) {
            detail::init_conv(p, "tc.proj", ta_ch, 1, rng);
            detail::init_conv(p, "condmod.conv", off_ch, 1, rng);
            for (auto& v : p.tensor("condmod.film.gamma.bias")) v = 1.0;
            detail::init_conv(p, "cond.proj", off_ch, 1, rng);
        } else {
            detail::init_conv(p, "hyper.w1", ta_ch, 1, rng);
            detail::init_conv(p, "hyper.w2", kHyperHidden, 1, rng);
            detail::init_conv(p, "hyper.b1", ta_ch, 1, rng);
            detail::init_conv(p, "hyper.b2", kHyperHidden, 1, rng);
            detail::init_conv(p, "cond.proj", off_ch, 1, rng);
        }
        for (std::size_t i = 0; i < kTrunkBlocks; ++i) {
            const auto [c_in, c_out] = trunk_block_channels(n_neighbors, i);
            const std::string prefix = "trunk." + std::to_string(i);
            const bool last = i == kTrunkBlocks - 1;
            if (!last) {
                detail::init_conv(p, prefix + ".conv", c_in, kTrunkKernel, rng);
                if (c_in != c_out) detail::init_conv(p, prefix + ".skip", c_in, 1, rng);
            }
            for (auto& v : p.tensor(prefix + ".film.gamma.bias")) v = 1.0;
        }
    }
    return p;
}

// ---------------------------------------------------------------------------
// layers

// Cross-correlation with zero padding kappa/2; kernel shape (c_out, c_in,
// kappa), one bias per output channel. Length is preserved.
inline Tensor1d conv1d(const Tensor1d& x, std::span<const double> w, std::span<const double> b,
                       std::size_t c_out, std::size_t kappa) {
    if (kappa % 2 == 0) throw DataError("conv1d: kernel size must be odd");
    if (w.size() != c_out * x.channels * kappa || b.size() != c_out)
        throw DataError("conv1d: parameter shape mismatch");
    const std::size_t K = x.length;
    const std::size_t h = kappa / 2;
    Tensor1d out = Tensor1d::zeros(c_out, K);
    for (std::size_t o = 0; o < c_out; ++o) {
        double* orow = out.data.data() + o * K;
        for (std::size_t k = 0; k < K; ++k) orow[k] = b[o];
        for (std::size_t ci = 0; ci < x.channels; ++ci) {
            const double* xrow = x.data.data() + ci * K;
            const double* wrow = w.data() + (o * x.channels + ci) * kappa;
            for (std::size_t u = 0; u < kappa; ++u) {
                const double wv = wrow[u];
                if (wv == 0.0) continue;
                const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(u) - static_cast<std::ptrdiff_t>(h);
                const std::size_t k_lo = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                const std::size_t k_hi = shift > 0 ? K - static_cast<std::size_t>(shift) : K;
                for (std::size_t k = k_lo; k < k_hi; ++k) orow[k] += wv * xrow[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(k) + shift)];
            }
        }
    }
    return out;
}

// Accumulates parameter gradients (+=) and writes the input gradient.
inline void conv1d_backward(const Tensor1d& x, std::span<const double> w, std::size_t c_out, std::size_t kappa,
                            const Tensor1d& d_out, Tensor1d& d_x, std::span<double> d_w, std::span<double> d_b) {
    const std::size_t K = x.length;
    const std::size_t h = kappa / 2;
    d_x = Tensor1d::zeros(x.channels, K);
    for (std::size_t o = 0; o < c_out; ++o) {
        const double* drow = d_out.data.data() + o * K;
        double acc_b = 0.0;
        for (std::size_t k = 0; k < K; ++k) acc_b += drow[k];
        d_b[o] += acc_b;
        for (std::size_t ci = 0; ci < x.channels; ++ci) {
            const double* xrow = x.data.data() + ci * K;
            double* dxrow = d_x.data.data() + ci * K;
            const double* wrow = w.data() + (o * x.channels + ci) * kappa;
            double* dwrow = d_w.data() + (o * x.channels + ci) * kappa;
            for (std::size_t u = 0; u < kappa; ++u) {
                const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(u) - static_cast<std::ptrdiff_t>(h);
                const std::size_t k_lo = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                const std::size_t k_hi = shift > 0 ? K - static_cast<std::size_t>(shift) : K;
                double acc_w = 0.0;
                const double wv = wrow[u];
                for (std::size_t k = k_lo; k < k_hi; ++k) {
                    const std::size_t xi = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(k) + shift);
                    acc_w += drow[k] * xrow[xi];
                    dxrow[xi] += wv * drow[k];
                }
                dwrow[u] += acc_w;
            }
        }
    }
}

// Learned linear interpolation across the channel axis: out_k = sum_i w_i
// x_{i,k} + b, the same weights at every bin.
inline Tensor1d pointwise_conv(const Tensor1d& x, std::span<const double> w, std::span<const double> b) {
    return conv1d(x, w, b, 1, 1);
}

struct FilmCache {
    std::vector<double> gamma, beta;
};

// z_{j,:} = gamma_j * x_{j,:} + beta_j with gamma, beta produced by learned
// linear maps K -> C of the single-channel condition c.
inline Tensor1d film_affine(const Tensor1d& x, const Tensor1d& c, std::span<const double> gw,
                            std::span<const double> gb, std::span<const double> bw, std::span<const double> bb,
                            FilmCache* cache = nullptr) {
    if (c.channels != 1 || c.length != x.length) throw DataError("film_affine: condition must be 1 x K");
    const std::size_t C = x.channels, K = x.length;
    if (gw.size() != C * K || bw.size() != C * K || gb.size() != C || bb.size() != C)
        throw DataError("film_affine: parameter shape mismatch");
    std::vector<double> gamma(C), beta(C);
    for (std::size_t j = 0; j < C; ++j) {
        double g = gb[j], be = bb[j];
        const double* gwr = gw.data() + j * K;
        const double* bwr = bw.data() + j * K;
        for (std::size_t k = 0; k < K; ++k) {
            g += gwr[k] * c.data[k];
            be += bwr[k] * c.data[k];
        }
        gamma[j] = g;
        beta[j] = be;
    }
    Tensor1d out = Tensor1d::zeros(C, K);
    for (std::size_t j = 0; j < C; ++j)
        for (std::size_t k = 0; k < K; ++k) out.at(j, k) = gamma[j] * x.at(j, k) + beta[j];
    if (cache) {
        cache->gamma = std::move(gamma);
        cache->beta = std::move(beta);
    }
    return out;
}

inline void film_affine_backward(const Tensor1d& x, const Tensor1d& c, std::span<const double> gw,
                                 std::span<const double> bw, const FilmCache& cache, const Tensor1d& d_out,
                                 Tensor1d& d_x, Tensor1d& d_c, std::span<double> d_gw, std::span<double> d_gb,
                                 std::span<double> d_bw, std::span<double> d_bb) {
    const std::size_t C = x.channels, K = x.length;
    d_x = Tensor1d::zeros(C, K);
    for (std::size_t j = 0; j < C; ++j) {
        double d_gamma = 0.0, d_beta = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            const double g = d_out.at(j, k);
            d_gamma += g * x.at(j, k);
            d_beta += g;
            d_x.at(j, k) = cache.gamma[j] * g;
        }
        d_gb[j] += d_gamma;
        d_bb[j] += d_beta;
        double* dgwr = d_gw.data() + j * K;
        double* dbwr = d_bw.data() + j * K;
        const double* gwr = gw.data() + j * K;
        const double* bwr = bw.data() + j * K;
        for (std::size_t k = 0; k < K; ++k) {
            dgwr[k] += d_gamma * c.data[k];
            dbwr[k] += d_beta * c.data[k];
            d_c.data[k] += d_gamma * gwr[k] + d_beta * bwr[k];
        }
    }
}

// Views of one FiLM residual block's parameters inside a ModelParams.
struct FilmBlockView {
    std::span<const double> conv_w, conv_b;
    std::span<const double> skip_w, skip_b;  // empty when the skip is identity
    std::span<const double> gw, gb, bw, bb;
    std::size_t c_in = 0, c_out = 0, kappa = 0;
    bool has_skip() const { return !skip_w.empty(); }
};

inline FilmBlockView film_block_view(const ModelParams& p, const std::string& prefix, std::size_t c_in,
                                     std::size_t c_out, std::size_t kappa) {
    FilmBlockView v;
    v.conv_w = p.tensor(prefix + ".conv.weight");
    v.conv_b = p.tensor(prefix + ".conv.bias");
    if (c_in != c_out) {
        v.skip_w = p.tensor(prefix + ".skip.weight");
        v.skip_b = p.tensor(prefix + ".skip.bias");
    }
    v.gw = p.tensor(prefix + ".film.gamma.weight");
    v.gb = p.tensor(prefix + ".film.gamma.bias");
    v.bw = p.tensor(prefix + ".film.beta.weight");
    v.bb = p.tensor(prefix + ".film.beta.bias");
    v.c_in = c_in;
    v.c_out = c_out;
    v.kappa = kappa;
    return v;
}

struct FilmBlockTrace {
    Tensor1d y_conv;  // conv output, film input
    Tensor1d t_act;   // tanh output
    FilmCache film;
};

// y = conv(x); z = film(y, c); t = tanh(z); out = t + skip(x). The skip is
// the input itself when channel counts match, otherwise a pointwise
// projection.
inline Tensor1d film_res_block(const Tensor1d& x, const Tensor1d& c, const FilmBlockView& v,
                               FilmBlockTrace* trace = nullptr) {
    if (x.channels != v.c_in) throw DataError("film_res_block: input channel mismatch");
    Tensor1d y = conv1d(x, v.conv_w, v.conv_b, v.c_out, v.kappa);
    FilmCache cache;
    Tensor1d z = film_affine(y, c, v.gw, v.gb, v.bw, v.bb, &cache);
    Tensor1d t = z;
    for (double& e : t.data) e = std::tanh(e);
    Tensor1d out;
    if (v.has_skip()) {
        out = conv1d(x, v.skip_w, v.skip_b, v.c_out, 1);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += t.data[i];
    } else {
        out = x;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += t.data[i];
    }
    if (trace) {
        trace->y_conv = std::move(y);
        trace->t_act = std::move(t);
        trace->film = std::move(cache);
    }
    return out;
}

struct FilmBlockGrads {
    std::span<double> conv_w, conv_b, skip_w, skip_b, gw, gb, bw, bb;
};

inline void film_res_block_backward(const Tensor1d& x, const Tensor1d& c, const FilmBlockView& v,
                                    const FilmBlockTrace& trace, const Tensor1d& d_out, Tensor1d& d_x,
                                    Tensor1d& d_c, const FilmBlockGrads& g) {
    // through tanh
    Tensor1d d_z = d_out;
    for (std::size_t i = 0; i < d_z.data.size(); ++i) {
        const double t = trace.t_act.data[i];
        d_z.data[i] *= 1.0 - t * t;
    }
    Tensor1d d_y;
    film_affine_backward(trace.y_conv, c, v.gw, v.bw, trace.film, d_z, d_y, d_c, g.gw, g.gb, g.bw, g.bb);
    conv1d_backward(x, v.conv_w, v.c_out, v.kappa, d_y, d_x, g.conv_w, g.conv_b);
    if (v.has_skip()) {
        Tensor1d d_x_skip;
        conv1d_backward(x, v.skip_w, v.c_out, 1, d_out, d_x_skip, g.skip_w, g.skip_b);
        for (std::size_t i = 0; i < d_x.data.size(); ++i) d_x.data[i] += d_x_skip.data[i];
    } else {
        for (std::size_t i = 0; i < d_x.data.size(); ++i) d_x.data[i] += d_out.data[i];
    }
}

struct HyperView {
    std::span<const double> w1_w, w1_b, w2_w, w2_b;  // weight hyper-network
    std::span<const double> b1_w, b1_b, b2_w, b2_b;  // bias hyper-network
    std::size_t c_in = 0, c_out = 0, c_cond = 0, kappa = 0;
};

inline HyperView hyper_view(const ModelParams& p, std::size_t c_in, std::size_t c_out, std::size_t c_cond) {
    HyperView v;
    v.w1_w = p.tensor("hyper.w1.weight");
    v.w1_b = p.tensor("hyper.w1.bias");
    v.w2_w = p.tensor("hyper.w2.weight");
    v.w2_b = p.tensor("hyper.w2.bias");
    v.b1_w = p.tensor("hyper.b1.weight");
    v.b1_b = p.tensor("hyper.b1.bias");
    v.b2_w = p.tensor("hyper.b2.weight");
    v.b2_b = p.tensor("hyper.b2.bias");
    v.c_in = c_in;
    v.c_out = c_out;
    v.c_cond = c_cond;
    v.kappa = kHyperKernel;
    return v;
}

struct HyperTrace {
    Tensor1d hw;      // hidden x K, tanh activations of the weight net
    Tensor1d hb;      // hidden x K, tanh activations of the bias net
    Tensor1d wfield;  // (c_out*c_in*kappa) x K generated weights
    Tensor1d bfield;  // c_out x K generated biases
};

// Convolution whose per-bin weight block and bias are produced from the
// condition column by two-layer kernel-size-1 hyper-networks with tanh:
// z_{:,k} = sum_i W_k[:,:,i] x_{:,k+i-floor(kappa/2)} + b_k.
inline Tensor1d hyper_conv(const Tensor1d& x, const Tensor1d& c, const HyperView& v,
                           HyperTrace* trace = nullptr) {
    if (x.channels != v.c_in || c.channels != v.c_cond || x.length != c.length)
        throw DataError("hyper_conv: input/condition shape mismatch");
    const std::size_t K = x.length;
    const std::size_t H = kHyperHidden;
    const std::size_t W = v.c_out * v.c_in * v.kappa;
    const std::size_t h = v.kappa / 2;

    Tensor1d hw = Tensor1d::zeros(H, K), hb = Tensor1d::zeros(H, K);
    Tensor1d wfield = Tensor1d::zeros(W, K), bfield = Tensor1d::zeros(v.c_out, K);
    std::vector<double> col(v.c_cond);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t j = 0; j < v.c_cond; ++j) col[j] = c.at(j, k);
        for (std::size_t m = 0; m < H; ++m) {
            double acc = v.w1_b[m];
            const double* wr = v.w1_w.data() + m * v.c_cond;
            for (std::size_t j = 0; j < v.c_cond; ++j) acc += wr[j] * col[j];
            hw.at(m, k) = std::tanh(acc);
            double accb = v.b1_b[m];
            const double* br = v.b1_w.data() + m * v.c_cond;
            for (std::size_t j = 0; j < v.c_cond; ++j) accb += br[j] * col[j];
            hb.at(m, k) = std::tanh(accb);
        }
        for (std::size_t w = 0; w < W; ++w) {
            double acc = v.w2_b[w];
            const double* wr = v.w2_w.data() + w * H;
            for (std::size_t m = 0; m < H; ++m) acc += wr[m] * hw.at(m, k);
            wfield.at(w, k) = acc;
        }
        for (std::size_t o = 0; o < v.c_out; ++o) {
            double acc = v.b2_b[o];
            const double* br = v.b2_w.data() + o * H;
            for (std::size_t m = 0; m < H; ++m) acc += br[m] * hb.at(m, k);
            bfield.at(o, k) = acc;
        }
    }

    Tensor1d out = Tensor1d::zeros(v.c_out, K);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t o = 0; o < v.c_out; ++o) {
            double acc = bfield.at(o, k);
            for (std::size_t i = 0; i < v.c_in; ++i) {
                for (std::size_t u = 0; u < v.kappa; ++u) {
                    const std::ptrdiff_t xk = static_cast<std::ptrdiff_t>(k + u) - static_cast<std::ptrdiff_t>(h);
                    if (xk < 0 || xk >= static_cast<std::ptrdiff_t>(K)) continue;
                    acc += wfield.at((o * v.c_in + i) * v.kappa + u, k) * x.at(i, static_cast<std::size_t>(xk));
                }
            }
            out.at(o, k) = acc;
        }
    }
    if (trace) {
        trace->hw = std::move(hw);
        trace->hb = std::move(hb);
        trace->wfield = std::move(wfield);
        trace->bfield = std::move(bfield);
    }
    return out;
}

struct HyperGrads {
    std::span<double> w1_w, w1_b, w2_w, w2_b, b1_w, b1_b, b2_w, b2_b;
};

inline void hyper_conv_backward(const Tensor1d& x, const Tensor1d& c, const HyperView& v, const HyperTrace& tr,
                                const Tensor1d& d_out, Tensor1d& d_x, Tensor1d& d_c, const HyperGrads& g) {
    const std::size_t K = x.length;
    const std::size_t H = kHyperHidden;
    const std::size_t W = v.c_out * v.c_in * v.kappa;
    const std::size_t h = v.kappa / 2;

    d_x = Tensor1d::zeros(v.c_in, K);
    std::vector<double> d_wcol(W), d_bcol(v.c_out), d_hid(H), d_pre(H);
    for (std::size_t k = 0; k < K; ++k) {
        // gradients of the generated weight/bias fields at this bin
        for (std::size_t o = 0; o < v.c_out; ++o) d_bcol[o] = d_out.at(o, k);
        for (std::size_t o = 0; o < v.c_out; ++o) {
            const double dz = d_out.at(o, k);
            for (std::size_t i = 0; i < v.c_in; ++i) {
                for (std::size_t u = 0; u < v.kappa; ++u) {
                    const std::size_t w = (o * v.c_in + i) * v.kappa + u;
                    const std::ptrdiff_t xk = static_cast<std::ptrdiff_t>(k + u) - static_cast<std::ptrdiff_t>(h);
                    if (xk < 0 || xk >= static_cast<std::ptrdiff_t>(K)) {
                        d_wcol[w] = 0.0;
                        continue;
                    }
                    d_wcol[w] = dz * x.at(i, static_cast<std::size_t>(xk));
                    d_x.at(i, static_cast<std::size_t>(xk)) += tr.wfield.at(w, k) * dz;
                }
            }
        }
        // weight hyper-network
        std::fill(d_hid.begin(), d_hid.end(), 0.0);
        for (std::size_t w = 0; w < W; ++w) {
            const double dv = d_wcol[w];
            if (dv == 0.0) continue;
            g.w2_b[w] += dv;
            double* dwr = g.w2_w.data() + w * H;
            const double* wr = v.w2_w.data() + w * H;
            for (std::size_t m = 0; m < H; ++m) {
                dwr[m] += dv * tr.hw.at(m, k);
                d_hid[m] += dv * wr[m];
            }
        }
        for (std::size_t m = 0; m < H; ++m) {
            const double t = tr.hw.at(m, k);
            d_pre[m] = d_hid[m] * (1.0 - t * t);
            g.w1_b[m] += d_pre[m];
        }
        for (std::size_t m = 0; m < H; ++m) {
            if (d_pre[m] == 0.0) continue;
            double* dwr = g.w1_w.data() + m * v.c_cond;
            const double* wr = v.w1_w.data() + m * v.c_cond;
            for (std::size_t j = 0; j < v.c_cond; ++j) {
                dwr[j] += d_pre[m] * c.at(j, k);
                d_c.at(j, k) += d_pre[m] * wr[j];
            }
        }
        // bias hyper-network
        std::fill(d_hid.begin(), d_hid.end(), 0.0);
        for (std::size_t o = 0; o < v.c_out; ++o) {
            const double dv = d_bcol[o];
            if (dv == 0.0) continue;
            g.b2_b[o] += dv;
            double* dbr = g.b2_w.data() + o * H;
            const double* br = v.b2_w.data() + o * H;
            for (std::size_t m = 0; m < H; ++m) {
                dbr[m] += dv * tr.hb.at(m, k);
                d_hid[m] += dv * br[m];
            }
        }
        for (std::size_t m = 0; m < H; ++m) {
            const double t = tr.hb.at(m, k);
            d_pre[m] = d_hid[m] * (1.0 - t * t);
            g.b1_b[m] += d_pre[m];
        }
        for (std::size_t m = 0; m < H; ++m) {
            if (d_pre[m] == 0.0) continue;
            double* dbr = g.b1_w.data() + m * v.c_cond;
            const double* br = v.b1_w.data() + m * v.c_cond;
            for (std::size_t j = 0; j < v.c_cond; ++j) {
                dbr[j] += d_pre[m] * c.at(j, k);
                d_c.at(j, k) += d_pre[m] * br[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// full model

struct ModelInput {
    Tensor1d hrtf_stack;       // N x K, dB
    EncodedChannels offsets;   // 3N x K, encoded q_i - p
    EncodedChannels target;    // 3 x K, encoded p
    EncodedChannels anthro;    // 12 x K, encoded z-scored features
};

inline ModelInput build_model_input(const NeighborSet& ns, const Anthropometry& a, const AnthroStats& stats) {
    ModelInput in;
    const std::size_t n = ns.hrtfs.size();
    in.hrtf_stack = Tensor1d::zeros(n, kNumBins);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < kNumBins; ++k) in.hrtf_stack.at(i, k) = ns.hrtfs[i].db[k];
    in.offsets.data.reserve(3 * n * kNumBins);
    for (std::size_t i = 0; i < n; ++i) {
        const EncodedChannels e = encode_position(ns.offsets[i]);
        in.offsets.data.insert(in.offsets.data.end(), e.data.begin(), e.data.end());
        in.offsets.channels += e.channels;
    }
    in.target = encode_position(ns.target);
    in.anthro = encode_anthro(a, stats);
    return in;
}

struct ForwardTrace {
    Tensor1d cond_concat;   // b: offsets + target + anthro; c1/c2: target + anthro
    Tensor1d cond_c2;       // c1 only: 1 x K condition for the modulation block
    Tensor1d offsets;       // c1/c2: modulation input
    FilmBlockTrace condmod;
    HyperTrace hyper;
    Tensor1d cond_pre;      // c1/c2: modulated offsets, input to cond.proj
    Tensor1d cond;          // 1 x K trunk condition
    std::vector<Tensor1d> trunk_inputs;  // input to each trunk block
    std::vector<FilmBlockTrace> trunk;
    Tensor1d pc_out;
    Tensor1d raw;           // pre-clamp model output, 1 x K
};

inline void check_model_input(const ModelParams& p, const ModelInput& in) {
    const std::size_t n = p.n_neighbors;
    if (in.hrtf_stack.channels != n || in.hrtf_stack.length != kNumBins)
        throw DataError("forward: hrtf stack must be N x K");
    if (in.offsets.channels != 3 * n) throw DataError("forward: offset channels must be 3N");
    if (in.target.channels != 3 || in.anthro.channels != kNumAnthroFeatures)
        throw DataError("forward: condition channel mismatch");
}

inline Tensor1d model_forward_raw(const ModelParams& p, const ModelInput& in, ForwardTrace* trace = nullptr) {
    check_model_input(p, in);
    const std::size_t n = p.n_neighbors;
    Tensor1d pc_out = pointwise_conv(in.hrtf_stack, p.tensor("pc.weight"), p.tensor("pc.bias"));
    if (p.variant == Variant::a) {
        if (trace) {
            trace->pc_out = pc_out;
            trace->raw = pc_out;
        }
        return pc_out;
    }

    Tensor1d cond;
    Tensor1d cond_concat, cond_c2, cond_pre, offsets_t;
    FilmBlockTrace condmod_trace;
    HyperTrace hyper_trace;
    if (p.variant == Variant::b) {
        cond_concat = concat_rows(concat_rows(to_tensor(in.offsets), to_tensor(in.target)), to_tensor(in.anthro));
        cond = conv1d(cond_concat, p.tensor("cond.proj.weight"), p.tensor("cond.proj.bias"), 1, 1);
    } else {
        cond_concat = concat_rows(to_tensor(in.target), to_tensor(in.anthro));
        offsets_t = to_tensor(in.offsets);
        if (p.variant == Variant::c1) {
            cond_c2 = conv1d(cond_concat, p.tensor("tc.proj.weight"), p.tensor("tc.proj.bias"), 1, 1);
            const FilmBlockView mv = film_block_view(p, "condmod", 3 * n, 3 * n, 1);
            cond_pre = film_res_block(offsets_t, cond_c2, mv, trace ? &condmod_trace : nullptr);
        } else {
            const HyperView hv = hyper_view(p, 3 * n, 3 * n, cond_concat.channels);
            cond_pre = hyper_conv(offsets_t, cond_concat, hv, trace ? &hyper_trace : nullptr);
        }
        cond = conv1d(cond_pre, p.tensor("cond.proj.weight"), p.tensor("cond.proj.bias"), 1, 1);
    }

    Tensor1d x = in.hrtf_stack;
    std::vector<Tensor1d> trunk_inputs;
    std::vector<FilmBlockTrace> trunk_traces(trace ? kTrunkBlocks : 0);
    for (std::size_t i = 0; i < kTrunkBlocks; ++i) {
        const auto [c_in, c_out] = trunk_block_channels(n, i);
        const FilmBlockView bv = film_block_view(p, "trunk." + std::to_string(i), c_in, c_out, kTrunkKernel);
        if (trace) trunk_inputs.push_back(x);
        x = film_res_block(x, cond, bv, trace ? &trunk_traces[i] : nullptr);
    }

    Tensor1d raw = pc_out;
    for (std::size_t k = 0; k < kNumBins; ++k) raw.data[k] += x.data[k];
    if (trace) {
        trace->cond_concat = std::move(cond_concat);
        trace->cond_c2 = std::move(cond_c2);
        trace->offsets = std::move(offsets_t);
        trace->condmod = std::move(condmod_trace);
        trace->hyper = std::move(hyper_trace);
        trace->cond_pre = std::move(cond_pre);
        trace->cond = std::move(cond);
        trace->trunk_inputs = std::move(trunk_inputs);
        trace->trunk = std::move(trunk_traces);
        trace->pc_out = std::move(pc_out);
        trace->raw = raw;
    }
    return raw;
}

// Estimated HRTF at the target position; the emitted spectrum is clamped to a
// finite dB range.
inline Hrtf forward(const ModelParams& p, const ModelInput& in, ForwardTrace* trace = nullptr) {
    const Tensor1d raw = model_forward_raw(p, in, trace);
    Hrtf out;
    for (std::size_t k = 0; k < kNumBins; ++k)
        out.db[k] = std::clamp(raw.data[k], kOutputClampLoDb, kOutputClampHiDb);
    return out;
}

}  // namespace hrtffield
