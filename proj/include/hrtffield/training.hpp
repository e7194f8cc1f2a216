// Reverse-mode gradients for the full model, AdamW with decoupled weight
// decay, the patience-based LR schedule, subject-wise cross-validation folds
// and the train/validate loop minimizing LSD.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hrtffield/encoding.hpp"
#include "hrtffield/errors.hpp"
#include "hrtffield/geometry.hpp"
#include "hrtffield/network.hpp"
#include "hrtffield/rng.hpp"
#include "hrtffield/spectra.hpp"

namespace hrtffield {

struct TrainConfig {
    std::size_t batch_size = 64;
    double lr0 = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t patience_epochs = 3;
    double lr_halving = 0.5;
    std::size_t max_epochs = 100;
    double delta_m = 0.3;
    std::size_t n_neighbors = 8;
    std::uint64_t seed = 0;
    std::size_t folds = 5;
    double improvement_tol = 1e-9;
    int fold_filter = -1;  // < 0 trains every fold, otherwise just that one

    void validate() const {
        if (batch_size < 1 || patience_epochs < 1 || n_neighbors < 1) throw ConfigError("train config: counts must be positive");
        if (!(lr0 >= 0.0) || !(weight_decay >= 0.0) || !(eps > 0.0)) throw ConfigError("train config: rates must be nonnegative");
        if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("train config: betas must be in (0, 1)");
        if (!(lr_halving > 0.0 && lr_halving < 1.0)) throw ConfigError("train config: lr halving factor must be in (0, 1)");
        if (!(delta_m > 0.0)) throw ConfigError("train config: delta must be positive");
        if (folds < 2) throw ConfigError("train config: need at least 2 folds");
    }
};

// ---------------------------------------------------------------------------
// loss

// LSD loss with its gradient w.r.t. the prediction. At lsd = 0 the
// subgradient 0 is used.
inline double loss_lsd(const Hrtf& pred, const Hrtf& target, std::array<double, kNumBins>* grad = nullptr) {
    const double value = lsd(pred, target);
    if (grad) {
        const double kd = static_cast<double>(kNumBins);
        for (std::size_t k = 0; k < kNumBins; ++k)
            (*grad)[k] = value > 1e-12 ? (pred.db[k] - target.db[k]) / (kd * value) : 0.0;
    }
    return value;
}

// ---------------------------------------------------------------------------
// full-model reverse pass

namespace detail {

inline std::span<double> grad_span(const ModelParams& p, std::vector<double>& grad, std::string_view name) {
    const auto& s = p.spec(name);
    return {grad.data() + s.offset, s.size};
}

inline FilmBlockGrads film_block_grads(const ModelParams& p, std::vector<double>& grad, const std::string& prefix,
                                       bool has_skip) {
    FilmBlockGrads g;
    g.conv_w = grad_span(p, grad, prefix + ".conv.weight");
    g.conv_b = grad_span(p, grad, prefix + ".conv.bias");
    if (has_skip) {
        g.skip_w = grad_span(p, grad, prefix + ".skip.weight");
        g.skip_b = grad_span(p, grad, prefix + ".skip.bias");
    }
    g.gw = grad_span(p, grad, prefix + ".film.gamma.weight");
    g.gb = grad_span(p, grad, prefix + ".film.gamma.bias");
    g.bw = grad_span(p, grad, prefix + ".film.beta.weight");
    g.bb = grad_span(p, grad, prefix + ".film.beta.bias");
    return g;
}

}  // namespace detail

// Accumulates (+=) the exact gradient of loss_lsd(forward(input), target)
// w.r.t. every parameter into `grad` (sized like params.flat) and returns the
// loss. Output bins pinned at the emit clamp propagate zero gradient.
inline double backward(const ModelInput& input, const ModelParams& p, const Hrtf& target,
                       std::vector<double>& grad) {
    if (grad.size() != p.flat.size()) throw ConfigError("backward: gradient buffer size mismatch");
    ForwardTrace trace;
    const Hrtf pred = forward(p, input, &trace);
    std::array<double, kNumBins> d_pred{};
    const double loss = loss_lsd(pred, target, &d_pred);
    if (!std::isfinite(loss)) throw NumericError("backward: non-finite loss");

    Tensor1d d_raw = Tensor1d::zeros(1, kNumBins);
    for (std::size_t k = 0; k < kNumBins; ++k) {
        const double r = trace.raw.data[k];
        d_raw.data[k] = (r > kOutputClampLoDb && r < kOutputClampHiDb) ? d_pred[k] : 0.0;
    }

    const std::size_t n = p.n_neighbors;
    // PC path
    {
        Tensor1d d_hs_unused;
        conv1d_backward(input.hrtf_stack, p.tensor("pc.weight"), 1, 1, d_raw, d_hs_unused,
                        detail::grad_span(p, grad, "pc.weight"), detail::grad_span(p, grad, "pc.bias"));
    }
    if (p.variant == Variant::a) return loss;

    // trunk, in reverse
    Tensor1d d_x = d_raw;
    Tensor1d d_cond = Tensor1d::zeros(1, kNumBins);
    for (std::size_t i = kTrunkBlocks; i-- > 0;) {
        const auto [c_in, c_out] = trunk_block_channels(n, i);
        const std::string prefix = "trunk." + std::to_string(i);
        const FilmBlockView bv = film_block_view(p, prefix, c_in, c_out, kTrunkKernel);
        const FilmBlockGrads bg = detail::film_block_grads(p, grad, prefix, bv.has_skip());
        Tensor1d d_x_prev;
        film_res_block_backward(trace.trunk_inputs[i], trace.cond, bv, trace.trunk[i], d_x, d_x_prev, d_cond, bg);
        d_x = std::move(d_x_prev);
    }

    // condition path
    if (p.variant == Variant::b) {
        Tensor1d d_concat_unused;
        conv1d_backward(trace.cond_concat, p.tensor("cond.proj.weight"), 1, 1, d_cond, d_concat_unused,
                        detail::grad_span(p, grad, "cond.proj.weight"), detail::grad_span(p, grad, "cond.proj.bias"));
        return loss;
    }
    Tensor1d d_cond_pre;
    conv1d_backward(trace.cond_pre, p.tensor("cond.proj.weight"), 1, 1, d_cond, d_cond_pre,
                    detail::grad_span(p, grad, "cond.proj.weight"), detail::grad_span(p, grad, "cond.proj.bias"));
    if (p.variant == Variant::c1) {
        const FilmBlockView mv = film_block_view(p, "condmod", 3 * n, 3 * n, 1);
        const FilmBlockGrads mg = detail::film_block_grads(p, grad, "condmod", mv.has_skip());
        Tensor1d d_off_unused;
        Tensor1d d_c2 = Tensor1d::zeros(1, kNumBins);
        film_res_block_backward(trace.offsets, trace.cond_c2, mv, trace.condmod, d_cond_pre, d_off_unused, d_c2, mg);
        Tensor1d d_ta_unused;
        conv1d_backward(trace.cond_concat, p.tensor("tc.proj.weight"), 1, 1, d_c2, d_ta_unused,
                        detail::grad_span(p, grad, "tc.proj.weight"), detail::grad_span(p, grad, "tc.proj.bias"));
    } else {
        const HyperView hv = hyper_view(p, 3 * n, 3 * n, trace.cond_concat.channels);
        HyperGrads hg;
        hg.w1_w = detail::grad_span(p, grad, "hyper.w1.weight");
        hg.w1_b = detail::grad_span(p, grad, "hyper.w1.bias");
        hg.w2_w = detail::grad_span(p, grad, "hyper.w2.weight");
        hg.w2_b = detail::grad_span(p, grad, "hyper.w2.bias");
        hg.b1_w = detail::grad_span(p, grad, "hyper.b1.weight");
        hg.b1_b = detail::grad_span(p, grad, "hyper.b1.bias");
        hg.b2_w = detail::grad_span(p, grad, "hyper.b2.weight");
        hg.b2_b = detail::grad_span(p, grad, "hyper.b2.bias");
        Tensor1d d_off_unused;
        Tensor1d d_ta = Tensor1d::zeros(trace.cond_concat.channels, kNumBins);
        hyper_conv_backward(trace.offsets, trace.cond_concat, hv, trace.hyper, d_cond_pre, d_off_unused, d_ta, hg);
    }
    return loss;
}

// ---------------------------------------------------------------------------
// optimizer and schedule

struct OptimizerState {
    std::size_t step = 0;
    std::vector<double> m, v;

    static OptimizerState make(std::size_t n_params) {
        OptimizerState s;
        s.m.assign(n_params, 0.0);
        s.v.assign(n_params, 0.0);
        return s;
    }
};

// AdamW with decoupled weight decay:
//   w <- w - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * w )
inline void adamw_step(std::vector<double>& params, const std::vector<double>& grads, OptimizerState& state,
                       const TrainConfig& cfg, double lr) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ConfigError("adamw_step: size mismatch");
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        const double w = params[i] - lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * params[i]);
        if (!std::isfinite(w)) throw NumericError("adamw_step: non-finite parameter update at index " + std::to_string(i));
        params[i] = w;
    }
}

// lr0 * halving^h, where h counts disjoint patience-length windows without a
// new best validation loss. The stagnation counter resets on improvement and
// after each halving.
inline double lr_schedule(const std::vector<double>& val_history, const TrainConfig& cfg) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t stagnant = 0;
    int halvings = 0;
    for (double loss : val_history) {
        if (loss < best - cfg.improvement_tol) {
            best = loss;
            stagnant = 0;
        } else {
            if (++stagnant >= cfg.patience_epochs) {
                ++halvings;
                stagnant = 0;
            }
        }
    }
    return cfg.lr0 * std::pow(cfg.lr_halving, halvings);
}

// ---------------------------------------------------------------------------
// folds

struct FoldSplit {
    std::size_t fold_index = 0;
    std::vector<std::string> train_subjects;
    std::vector<std::string> val_subjects;
};

// Seeded shuffle, then a contiguous partition; the first (n mod folds)
// partitions take the extra element. Fold i validates on partition i.
inline std::vector<FoldSplit> make_folds(const std::vector<std::string>& subject_ids, std::size_t folds,
                                         std::uint64_t seed) {
    if (folds < 2) throw ConfigError("make_folds: need at least 2 folds");
    if (subject_ids.size() < folds) throw DataError("make_folds: fewer subjects than folds");
    std::vector<std::string> shuffled = subject_ids;
    Rng rng(derive_seed(seed, 0xf01d));
    rng.shuffle(shuffled);
    const std::size_t n = shuffled.size();
    const std::size_t base = n / folds;
    const std::size_t rem = n % folds;
    std::vector<FoldSplit> out(folds);
    std::size_t pos = 0;
    for (std::size_t f = 0; f < folds; ++f) {
        const std::size_t len = base + (f < rem ? 1 : 0);
        out[f].fold_index = f;
        out[f].val_subjects.assign(shuffled.begin() + pos, shuffled.begin() + pos + len);
        out[f].train_subjects = shuffled;
        out[f].train_subjects.erase(out[f].train_subjects.begin() + pos,
                                    out[f].train_subjects.begin() + pos + len);
        pos += len;
    }
    return out;
}

// ---------------------------------------------------------------------------
// checkpoints and the loop

struct Checkpoint {
    ModelParams params;
    AnthroStats anthro_stats;  // statistics of the training dataset
};

struct EpochLog {
    std::size_t epoch = 0;
    std::size_t fold = 0;
    double train_lsd = 0.0;
    double val_lsd = 0.0;
    double lr = 0.0;
};

struct FoldResult {
    FoldSplit split;
    Checkpoint best;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<EpochLog> log;
    std::size_t skipped_train_targets = 0;  // targets with empty neighborhoods
    std::size_t skipped_val_targets = 0;
};

struct TrainResult {
    std::vector<FoldResult> folds;
    std::map<std::string, std::size_t> grad_contributions;  // per subject id
};

namespace detail {

// Per-subject caches: sorted neighbor candidates per target plus encodings of
// every (target, candidate) offset so epoch loops only copy rows.
struct SubjectCtx {
    const SubjectRecord* subj = nullptr;
    EncodedChannels anthro_enc;
    std::vector<EncodedChannels> target_enc;              // per measurement
    std::vector<std::vector<std::size_t>> candidates;     // per measurement, distance-sorted
    std::vector<std::vector<EncodedChannels>> offset_enc; // [target][candidate rank]
};

inline SubjectCtx make_subject_ctx(const SubjectRecord& s, const AnthroStats& stats, double delta_m) {
    SubjectCtx ctx;
    ctx.subj = &s;
    ctx.anthro_enc = encode_anthro(s.anthropometry, stats);
    std::vector<Position> positions;
    positions.reserve(s.measurements.size());
    for (const auto& [p, h] : s.measurements) positions.push_back(p);
    ctx.target_enc.reserve(positions.size());
    ctx.candidates.reserve(positions.size());
    ctx.offset_enc.reserve(positions.size());
    for (std::size_t t = 0; t < positions.size(); ++t) {
        ctx.target_enc.push_back(encode_position(positions[t]));
        ctx.candidates.push_back(neighborhood_indices(positions, positions[t], delta_m));
        std::vector<EncodedChannels> offs;
        offs.reserve(ctx.candidates.back().size());
        for (std::size_t ci : ctx.candidates.back()) offs.push_back(encode_position(positions[ci] - positions[t]));
        ctx.offset_enc.push_back(std::move(offs));
    }
    return ctx;
}

// Assembles a model input from cached pieces; `ranks` index into the
// candidate list of target t.
inline ModelInput assemble_input(const SubjectCtx& ctx, std::size_t t, const std::vector<std::size_t>& ranks) {
    ModelInput in;
    const std::size_t n = ranks.size();
    in.hrtf_stack = Tensor1d::zeros(n, kNumBins);
    in.offsets.channels = 3 * n;
    in.offsets.data.resize(3 * n * kNumBins);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t mi = ctx.candidates[t][ranks[i]];
        const Hrtf& h = ctx.subj->measurements[mi].second;
        std::copy(h.db.begin(), h.db.end(), in.hrtf_stack.data.begin() + i * kNumBins);
        const EncodedChannels& oe = ctx.offset_enc[t][ranks[i]];
        std::copy(oe.data.begin(), oe.data.end(), in.offsets.data.begin() + i * 3 * kNumBins);
    }
    in.target = ctx.target_enc[t];
    in.anthro = ctx.anthro_enc;
    return in;
}

}  // namespace detail

// Trains one model per fold. Every epoch visits all (train subject, target)
// pairs in seeded shuffled order, samples train-mode neighbors, steps AdamW
// on batch-mean gradients, then validates with test-mode N-closest sampling
// and applies the LR schedule. Targets with empty neighborhoods are skipped
// and counted. Fully deterministic given (dataset, variant, cfg).
inline TrainResult train(const Dataset& dataset, Variant variant, const TrainConfig& cfg) {
    cfg.validate();
    if (dataset.subjects.empty()) throw DataError("train: empty dataset");

    std::vector<std::string> ids;
    for (const auto& s : dataset.subjects) ids.push_back(s.subject_id);
    const std::vector<FoldSplit> folds = make_folds(ids, cfg.folds, cfg.seed);

    std::map<std::string, const SubjectRecord*> by_id;
    for (const auto& s : dataset.subjects) by_id[s.subject_id] = &s;

    TrainResult result;
    for (const auto& id : ids) result.grad_contributions[id] = 0;

    for (const FoldSplit& split : folds) {
        if (cfg.fold_filter >= 0 && static_cast<std::size_t>(cfg.fold_filter) != split.fold_index) continue;
        FoldResult fr;
        fr.split = split;

        std::vector<detail::SubjectCtx> train_ctx, val_ctx;
        for (const auto& id : split.train_subjects)
            train_ctx.push_back(detail::make_subject_ctx(*by_id.at(id), dataset.anthro_stats, cfg.delta_m));
        for (const auto& id : split.val_subjects)
            val_ctx.push_back(detail::make_subject_ctx(*by_id.at(id), dataset.anthro_stats, cfg.delta_m));

        // fixed item lists; targets with no neighbors are dropped up front
        std::vector<std::pair<std::size_t, std::size_t>> items;  // (train subject idx, target idx)
        for (std::size_t s = 0; s < train_ctx.size(); ++s) {
            for (std::size_t t = 0; t < train_ctx[s].candidates.size(); ++t) {
                if (train_ctx[s].candidates[t].empty())
                    ++fr.skipped_train_targets;
                else
                    items.emplace_back(s, t);
            }
        }
        if (items.empty()) throw DataError("train: no trainable targets under the configured delta");

        // validation inputs are test-mode, so they can be assembled once
        struct ValItem {
            ModelInput input;
            const Hrtf* truth;
        };
        std::vector<ValItem> val_items;
        for (auto& ctx : val_ctx) {
            for (std::size_t t = 0; t < ctx.candidates.size(); ++t) {
                if (ctx.candidates[t].empty()) {
                    ++fr.skipped_val_targets;
                    continue;
                }
                const auto ranks = sample_neighbor_indices(ctx.candidates[t].size(), cfg.n_neighbors,
                                                           SampleMode::test, 0);
                val_items.push_back({detail::assemble_input(ctx, t, ranks), &ctx.subj->measurements[t].second});
            }
        }

        ModelParams params = init_model_params(variant, cfg.n_neighbors, cfg.seed + split.fold_index);
        OptimizerState opt = OptimizerState::make(params.flat.size());
        std::vector<double> grad(params.flat.size(), 0.0);
        std::vector<double> val_history;

        auto validate = [&]() {
            if (val_items.empty()) return std::numeric_limits<double>::quiet_NaN();
            double acc = 0.0;
            for (const auto& vi : val_items) acc += lsd(forward(params, vi.input), *vi.truth);
            return acc / static_cast<double>(val_items.size());
        };

        fr.best = {params, dataset.anthro_stats};
        for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
            const double lr = lr_schedule(val_history, cfg);
            Rng epoch_rng(derive_seed(cfg.seed, 0xe90c, split.fold_index, epoch));
            std::vector<std::pair<std::size_t, std::size_t>> order = items;
            epoch_rng.shuffle(order);

            double train_acc = 0.0;
            std::size_t done = 0;
            while (done < order.size()) {
                const std::size_t batch = std::min(cfg.batch_size, order.size() - done);
                std::fill(grad.begin(), grad.end(), 0.0);
                for (std::size_t b = 0; b < batch; ++b) {
                    const auto [s, t] = order[done + b];
                    const auto& ctx = train_ctx[s];
                    const auto ranks = sample_neighbor_indices(ctx.candidates[t].size(), cfg.n_neighbors,
                                                               SampleMode::train, epoch_rng.next_u64());
                    const ModelInput input = detail::assemble_input(ctx, t, ranks);
                    train_acc += backward(input, params, ctx.subj->measurements[t].second, grad);
                    result.grad_contributions[ctx.subj->subject_id] += 1;
                }
                const double inv = 1.0 / static_cast<double>(batch);
                for (double& g : grad) g *= inv;
                adamw_step(params.flat, grad, opt, cfg, lr);
                done += batch;
            }

            const double train_lsd = train_acc / static_cast<double>(order.size());
            const double val_lsd = validate();
            val_history.push_back(val_lsd);
            fr.log.push_back({epoch, split.fold_index, train_lsd, val_lsd, lr});
            if (!std::isnan(val_lsd) && val_lsd < fr.best_val) {
                fr.best_val = val_lsd;
                fr.best.params = params;
            }
        }
        result.folds.push_back(std::move(fr));
    }
    if (result.folds.empty()) throw ConfigError("train: fold filter selected no folds");
    return result;
}

}  // namespace hrtffield
