#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "hrtffield/network.hpp"
#include "hrtffield/rng.hpp"
#include "reference_model.hpp"

using namespace hrtffield;

namespace {

Tensor1d random_tensor(std::size_t c, std::size_t k, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor1d t = Tensor1d::zeros(c, k);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

ModelInput random_input(std::size_t n, Rng& rng) {
    ModelInput in;
    in.hrtf_stack = random_tensor(n, kNumBins, rng, -30.0, 10.0);
    for (std::size_t i = 0; i < n; ++i) {
        const EncodedChannels e = encode_position(
            {rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)});
        in.offsets.data.insert(in.offsets.data.end(), e.data.begin(), e.data.end());
        in.offsets.channels += 3;
    }
    in.target = encode_position({rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)});
    AnthroStats stats;
    for (std::size_t j = 0; j < kNumAnthroFeatures; ++j) {
        stats.mean[j] = 10.0;
        stats.stddev[j] = 2.0;
    }
    Anthropometry a;
    for (std::size_t j = 0; j < kNumAnthroFeatures; ++j) a.features_cm[j] = rng.uniform(6.0, 14.0);
    in.anthro = encode_anthro(a, stats);
    return in;
}

void randomize(std::vector<double>& v, Rng& rng, double scale) {
    for (double& x : v) x = rng.uniform(-scale, scale);
}

}  // namespace

TEST_CASE("pointwise conv: mean weights, one-hot copy, direct-sum oracle") {
    Rng rng(1);
    const std::size_t n = 5;
    const Tensor1d x = random_tensor(n, kNumBins, rng, -20.0, 5.0);

    std::vector<double> w(n, 1.0 / 5.0), b(1, 0.0);
    const Tensor1d mean = pointwise_conv(x, w, b);
    for (std::size_t k = 0; k < kNumBins; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += x.at(i, k) / 5.0;
        CHECK(mean.at(0, k) == doctest::Approx(acc).epsilon(1e-15));
    }

    std::fill(w.begin(), w.end(), 0.0);
    w[3] = 1.0;
    const Tensor1d hot = pointwise_conv(x, w, b);
    for (std::size_t k = 0; k < kNumBins; ++k) CHECK(hot.at(0, k) == x.at(3, k));

    randomize(w, rng, 1.0);
    b[0] = rng.uniform(-1.0, 1.0);
    const Tensor1d out = pointwise_conv(x, w, b);
    for (std::size_t k = 0; k < kNumBins; ++k) {
        double acc = b[0];
        for (std::size_t i = 0; i < n; ++i) acc += w[i] * x.at(i, k);
        CHECK(std::abs(out.at(0, k) - acc) <= 1e-12);
    }
}

TEST_CASE("conv1d: identity kernel, constant output, direct-loop oracle") {
    Rng rng(2);
    const std::size_t c = 3, kappa = 3;
    const Tensor1d x = random_tensor(c, kNumBins, rng);

    std::vector<double> w(c * c * kappa, 0.0), b(c, 0.0);
    for (std::size_t i = 0; i < c; ++i) w[(i * c + i) * kappa + 1] = 1.0;  // delta at center
    const Tensor1d same = conv1d(x, w, b, c, kappa);
    for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(same.data[i] == x.data[i]);

    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t o = 0; o < c; ++o) b[o] = 0.5 + static_cast<double>(o);
    const Tensor1d flat = conv1d(x, w, b, c, kappa);
    for (std::size_t o = 0; o < c; ++o)
        for (std::size_t k = 0; k < kNumBins; ++k) CHECK(flat.at(o, k) == b[o]);

    const std::size_t c_out = 4;
    std::vector<double> wr(c_out * c * kappa), br(c_out);
    randomize(wr, rng, 1.0);
    randomize(br, rng, 1.0);
    const Tensor1d out = conv1d(x, wr, br, c_out, kappa);
    for (std::size_t o = 0; o < c_out; ++o) {
        for (std::size_t k = 0; k < kNumBins; ++k) {
            double acc = br[o];
            for (std::size_t i = 0; i < c; ++i)
                for (std::size_t u = 0; u < kappa; ++u) {
                    const std::ptrdiff_t xk = static_cast<std::ptrdiff_t>(k + u) - 1;
                    if (xk < 0 || xk >= static_cast<std::ptrdiff_t>(kNumBins)) continue;
                    acc += wr[(o * c + i) * kappa + u] * x.at(i, static_cast<std::size_t>(xk));
                }
            CHECK(std::abs(out.at(o, k) - acc) <= 1e-12);
        }
    }
    CHECK_THROWS_AS(conv1d(x, wr, br, c_out, 4), DataError);         // even kernel
    CHECK_THROWS_AS(conv1d(x, wr, {br.data(), 2}, 4, 3), DataError);  // bias mismatch
}

TEST_CASE("film_affine: identity, constant rows, direct oracle") {
    Rng rng(3);
    const std::size_t c = 4;
    const Tensor1d x = random_tensor(c, kNumBins, rng);
    const Tensor1d cond = random_tensor(1, kNumBins, rng);

    std::vector<double> gw(c * kNumBins, 0.0), gb(c, 1.0), bw(c * kNumBins, 0.0), bb(c, 0.0);
    const Tensor1d same = film_affine(x, cond, gw, gb, bw, bb);
    for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(same.data[i] == x.data[i]);

    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t j = 0; j < c; ++j) bb[j] = static_cast<double>(j) - 1.5;
    const Tensor1d flat = film_affine(x, cond, gw, gb, bw, bb);
    for (std::size_t j = 0; j < c; ++j)
        for (std::size_t k = 0; k < kNumBins; ++k) CHECK(flat.at(j, k) == bb[j]);

    randomize(gw, rng, 0.3);
    randomize(gb, rng, 1.0);
    randomize(bw, rng, 0.3);
    randomize(bb, rng, 1.0);
    FilmCache cache;
    const Tensor1d out = film_affine(x, cond, gw, gb, bw, bb, &cache);
    for (std::size_t j = 0; j < c; ++j) {
        double gamma = gb[j], beta = bb[j];
        for (std::size_t k = 0; k < kNumBins; ++k) {
            gamma += gw[j * kNumBins + k] * cond.data[k];
            beta += bw[j * kNumBins + k] * cond.data[k];
        }
        CHECK(cache.gamma[j] == doctest::Approx(gamma).epsilon(1e-14));
        for (std::size_t k = 0; k < kNumBins; ++k)
            CHECK(out.at(j, k) == doctest::Approx(gamma * x.at(j, k) + beta).epsilon(1e-12));
    }
}

TEST_CASE("film_res_block: residual identity and zero propagation") {
    Rng rng(4);
    const std::size_t c = 3;
    const Tensor1d x = random_tensor(c, kNumBins, rng);
    const Tensor1d cond = random_tensor(1, kNumBins, rng);

    ModelParams holder;  // scratch space for a lone block
    detail::add_film_block(holder, "blk", c, c, 3);
    const FilmBlockView v = film_block_view(holder, "blk", c, c, 3);

    // conv zero, beta map zero: tanh(gamma*0 + 0) = 0, so out = skip(x) = x
    for (auto& g : holder.tensor("blk.film.gamma.bias")) g = 1.0;
    const Tensor1d out = film_res_block(x, cond, v);
    for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(out.data[i] == x.data[i]);

    // all-zero input with zero biases stays zero
    randomize(holder.flat, rng, 0.4);
    for (auto& g : holder.tensor("blk.conv.bias")) g = 0.0;
    for (auto& g : holder.tensor("blk.film.beta.weight")) g = 0.0;
    for (auto& g : holder.tensor("blk.film.beta.bias")) g = 0.0;
    const Tensor1d zx = Tensor1d::zeros(c, kNumBins);
    const Tensor1d zcond = Tensor1d::zeros(1, kNumBins);
    const Tensor1d zout = film_res_block(zx, zcond, v);
    for (double e : zout.data) CHECK(e == 0.0);

    // random case vs composed oracle
    randomize(holder.flat, rng, 0.4);
    FilmBlockTrace trace;
    const Tensor1d got = film_res_block(x, cond, v, &trace);
    const Tensor1d y = conv1d(x, v.conv_w, v.conv_b, c, 3);
    const Tensor1d z = film_affine(y, cond, v.gw, v.gb, v.bw, v.bb);
    for (std::size_t i = 0; i < got.data.size(); ++i)
        CHECK(got.data[i] == doctest::Approx(std::tanh(z.data[i]) + x.data[i]).epsilon(1e-13));
}

TEST_CASE("film_res_block with projecting skip") {
    Rng rng(5);
    const std::size_t c_in = 4, c_out = 2;
    ModelParams holder;
    detail::add_film_block(holder, "blk", c_in, c_out, 3);
    randomize(holder.flat, rng, 0.5);
    const FilmBlockView v = film_block_view(holder, "blk", c_in, c_out, 3);
    REQUIRE(v.has_skip());

    const Tensor1d x = random_tensor(c_in, kNumBins, rng);
    const Tensor1d cond = random_tensor(1, kNumBins, rng);
    const Tensor1d got = film_res_block(x, cond, v);
    const Tensor1d y = conv1d(x, v.conv_w, v.conv_b, c_out, 3);
    const Tensor1d z = film_affine(y, cond, v.gw, v.gb, v.bw, v.bb);
    const Tensor1d skip = conv1d(x, v.skip_w, v.skip_b, c_out, 1);
    for (std::size_t i = 0; i < got.data.size(); ++i)
        CHECK(got.data[i] == doctest::Approx(std::tanh(z.data[i]) + skip.data[i]).epsilon(1e-13));
}

TEST_CASE("hyper_conv with constant hyper-networks reduces to conv1d") {
    Rng rng(6);
    const std::size_t n = 2;
    ModelParams p = init_model_params(Variant::c2, n, 900);
    const std::size_t c = 3 * n;
    const std::size_t W = c * c * kHyperKernel;

    // zero first layers so hidden activations are tanh(0) = 0, then steer the
    // second-layer biases to the desired constant kernel and bias
    for (auto& v : p.tensor("hyper.w1.weight")) v = 0.0;
    for (auto& v : p.tensor("hyper.w1.bias")) v = 0.0;
    for (auto& v : p.tensor("hyper.w2.weight")) v = 0.0;
    for (auto& v : p.tensor("hyper.b1.weight")) v = 0.0;
    for (auto& v : p.tensor("hyper.b1.bias")) v = 0.0;
    for (auto& v : p.tensor("hyper.b2.weight")) v = 0.0;
    std::vector<double> kernel(W), bias(c);
    Rng krng(7);
    randomize(kernel, krng, 0.7);
    randomize(bias, krng, 0.7);
    auto w2b = p.tensor("hyper.w2.bias");
    for (std::size_t i = 0; i < W; ++i) w2b[i] = kernel[i];
    auto b2b = p.tensor("hyper.b2.bias");
    for (std::size_t i = 0; i < c; ++i) b2b[i] = bias[i];

    const Tensor1d x = random_tensor(c, kNumBins, rng);
    const Tensor1d cond = random_tensor(3 + kNumAnthroFeatures, kNumBins, rng);
    const HyperView hv = hyper_view(p, c, c, cond.channels);
    const Tensor1d got = hyper_conv(x, cond, hv);
    const Tensor1d expected = conv1d(x, kernel, bias, c, kHyperKernel);
    for (std::size_t i = 0; i < got.data.size(); ++i) CHECK(std::abs(got.data[i] - expected.data[i]) <= 1e-12);

    // zero weight net: output is the generated bias field only
    for (auto& v : p.tensor("hyper.w2.bias")) v = 0.0;
    const Tensor1d bias_only = hyper_conv(x, cond, hv);
    for (std::size_t o = 0; o < c; ++o)
        for (std::size_t k = 0; k < kNumBins; ++k) CHECK(bias_only.at(o, k) == bias[o]);
}

TEST_CASE("hyper_conv matches the per-bin double-loop oracle") {
    Rng rng(8);
    const std::size_t n = 2;
    ModelParams p = init_model_params(Variant::c2, n, 31);
    randomize(p.flat, rng, 0.3);
    const std::size_t c = 3 * n;
    const std::size_t c_cond = 3 + kNumAnthroFeatures;

    const Tensor1d x = random_tensor(c, kNumBins, rng);
    const Tensor1d cond = random_tensor(c_cond, kNumBins, rng);
    const HyperView hv = hyper_view(p, c, c, c_cond);
    const Tensor1d got = hyper_conv(x, cond, hv);
    const auto expected = refmodel::ref_hyper_conv(x.data, c, cond.data, c_cond, p, c, kHyperKernel);
    for (std::size_t i = 0; i < got.data.size(); ++i)
        CHECK(got.data[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("variant a with mean weights averages the neighbors") {
    Rng rng(9);
    const std::size_t n = 4;
    ModelParams p = init_model_params(Variant::a, n, 0);  // pc starts at the mean
    const ModelInput in = random_input(n, rng);
    const Hrtf out = forward(p, in);
    for (std::size_t k = 0; k < kNumBins; ++k) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += in.hrtf_stack.at(i, k);
        mean /= static_cast<double>(n);
        CHECK(out.db[k] == doctest::Approx(mean).epsilon(1e-14));
    }
}

TEST_CASE("zero-initialized trunk makes b, c1, c2 equal variant a") {
    Rng rng(10);
    for (std::size_t n : {2, 4}) {
        const ModelInput in = random_input(n, rng);
        const ModelParams pa = init_model_params(Variant::a, n, 5);
        const Hrtf base = forward(pa, in);
        for (Variant v : {Variant::b, Variant::c1, Variant::c2}) {
            const ModelParams pv = init_model_params(v, n, 5);
            const Hrtf out = forward(pv, in);
            for (std::size_t k = 0; k < kNumBins; ++k) CHECK(std::abs(out.db[k] - base.db[k]) <= 1e-12);
        }
    }
}

TEST_CASE("all variants match the straight-line reference interpreter") {
    Rng rng(11);
    for (Variant v : {Variant::a, Variant::b, Variant::c1, Variant::c2}) {
        for (std::size_t n : {2, 3}) {
            ModelParams p = init_model_params(v, n, 77);
            randomize(p.flat, rng, 0.25);
            const ModelInput in = random_input(n, rng);
            const Hrtf got = forward(p, in);
            const auto expected = refmodel::reference_forward(p, in);
            for (std::size_t k = 0; k < kNumBins; ++k) CHECK(std::abs(got.db[k] - expected[k]) <= 1e-10);
        }
    }
}

TEST_CASE("variant a is symmetric under consistent neighbor permutation") {
    Rng rng(12);
    const std::size_t n = 5;
    ModelParams p = init_model_params(Variant::a, n, 3);
    auto w = p.tensor("pc.weight");
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    const ModelInput in = random_input(n, rng);
    const Hrtf before = forward(p, in);

    const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
    ModelInput permuted = in;
    ModelParams pp = p;
    auto wp = pp.tensor("pc.weight");
    for (std::size_t i = 0; i < n; ++i) {
        wp[i] = w[perm[i]];
        for (std::size_t k = 0; k < kNumBins; ++k) permuted.hrtf_stack.at(i, k) = in.hrtf_stack.at(perm[i], k);
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t k = 0; k < kNumBins; ++k)
                permuted.offsets.data[(3 * i + r) * kNumBins + k] = in.offsets.data[(3 * perm[i] + r) * kNumBins + k];
    }
    const Hrtf after = forward(pp, permuted);
    for (std::size_t k = 0; k < kNumBins; ++k) CHECK(std::abs(after.db[k] - before.db[k]) <= 1e-12);
}

TEST_CASE("forward rejects shape mismatches") {
    Rng rng(13);
    const ModelParams p = init_model_params(Variant::b, 4, 1);
    ModelInput in = random_input(3, rng);  // wrong N
    CHECK_THROWS_AS(forward(p, in), DataError);
}

TEST_CASE("emitted output respects the clamp range") {
    const std::size_t n = 2;
    ModelParams p = init_model_params(Variant::a, n, 0);
    auto w = p.tensor("pc.weight");
    w[0] = 1e6;  // blow the output far past the clamp
    w[1] = 1e6;
    Rng rng(14);
    const ModelInput in = random_input(n, rng);
    const Hrtf out = forward(p, in);
    for (double v : out.db) {
        CHECK(v >= kOutputClampLoDb);
        CHECK(v <= kOutputClampHiDb);
    }
}
