// Per-plane LSD reporting, the super-resolution harness (reference grid
// coarsened by 1/T, targets spanning the full grid), the ablation runner and
// the (N, delta) neighborhood study.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "hrtffield/baseline.hpp"
#include "hrtffield/errors.hpp"
#include "hrtffield/geometry.hpp"
#include "hrtffield/network.hpp"
#include "hrtffield/spectra.hpp"
#include "hrtffield/training.hpp"

namespace hrtffield {

struct EvalConfig {
    std::size_t n_neighbors = 8;
    double delta_m = 0.3;
    std::size_t downsample = 1;  // reference grid keeps every T-th point
    double plane_tol_deg = 0.5;
    std::vector<std::string> subjects;  // empty evaluates every subject
};

struct EvalReport {
    double mean_all = 0.0, mean_hor = 0.0, mean_med = 0.0, mean_fro = 0.0;
    std::size_t count_all = 0, count_hor = 0, count_med = 0, count_fro = 0;
    std::vector<double> per_position;  // LSD per evaluated (subject, position)
    std::size_t skipped = 0;
    std::size_t reference_count = 0;  // positions in the downsampled grid
    bool has_skips = false;
    std::string predictor;
    EvalConfig config;
};

// A predictor estimates a target HRTF from a subject's reference
// measurements only; nullopt means the target is out of reach.
class Predictor {
public:
    virtual ~Predictor() = default;
    virtual std::string name() const = 0;
    virtual std::optional<Hrtf> predict(const SubjectRecord& subject,
                                        const std::vector<std::pair<Position, Hrtf>>& refs,
                                        const Position& target, const EvalConfig& cfg) const = 0;
};

// Test-mode model prediction: the N closest references within delta
// (excluding the target point itself), cycled when scarce.
class ModelPredictor : public Predictor {
public:
    explicit ModelPredictor(Checkpoint ckpt) : ckpt_(std::move(ckpt)) {}

    std::string name() const override { return "model:" + to_string(ckpt_.params.variant); }

    std::optional<Hrtf> predict(const SubjectRecord& subject, const std::vector<std::pair<Position, Hrtf>>& refs,
                                const Position& target, const EvalConfig& cfg) const override {
        std::vector<Position> positions;
        positions.reserve(refs.size());
        for (const auto& [q, h] : refs) positions.push_back(q);
        const auto cand = neighborhood_indices(positions, target, cfg.delta_m);
        if (cand.empty()) return std::nullopt;
        const auto ranks = sample_neighbor_indices(cand.size(), ckpt_.params.n_neighbors, SampleMode::test, 0);
        std::vector<std::size_t> indices;
        indices.reserve(ranks.size());
        for (std::size_t r : ranks) indices.push_back(cand[r]);
        const NeighborSet ns = make_neighbor_set(target, refs, indices, cfg.delta_m);
        const ModelInput input = build_model_input(ns, subject.anthropometry, ckpt_.anthro_stats);
        return forward(ckpt_.params, input);
    }

    const Checkpoint& checkpoint() const { return ckpt_; }

private:
    Checkpoint ckpt_;
};

class BaselinePredictor : public Predictor {
public:
    std::string name() const override { return "baseline"; }

    std::optional<Hrtf> predict(const SubjectRecord&, const std::vector<std::pair<Position, Hrtf>>& refs,
                                const Position& target, const EvalConfig& cfg) const override {
        return linear_interp(refs, target, cfg.plane_tol_deg);
    }
};

// Copies the closest reference HRTF (the target itself when it is a
// reference). Diagnostic stub.
class NearestPredictor : public Predictor {
public:
    std::string name() const override { return "nearest"; }

    std::optional<Hrtf> predict(const SubjectRecord&, const std::vector<std::pair<Position, Hrtf>>& refs,
                                const Position& target, const EvalConfig&) const override {
        if (refs.empty()) return std::nullopt;
        std::size_t best = 0;
        double best_d = distance(refs[0].first, target);
        for (std::size_t i = 1; i < refs.size(); ++i) {
            const double d = distance(refs[i].first, target);
            if (d < best_d) {
                best = i;
                best_d = d;
            }
        }
        return refs[best].second;
    }
};

namespace detail {

inline std::size_t eval_thread_count(std::size_t n_items) {
    std::size_t hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("HRTF_FIELD_THREADS")) {
        const long cap = std::atol(env);
        if (cap >= 1) hw = std::min<std::size_t>(hw, static_cast<std::size_t>(cap));
    }
    return std::max<std::size_t>(1, std::min(hw, n_items));
}

}  // namespace detail

// Downsamples the grid by T for references and scores every measured
// position of the full grid against ground truth. Predictions run per target
// (possibly in parallel); aggregation reduces in fixed order, so reports are
// deterministic.
inline EvalReport evaluate(const Predictor& predictor, const Dataset& dataset, const EvalConfig& cfg) {
    const Grid refgrid = downsample_grid(dataset.grid, cfg.downsample);
    std::map<detail::PosKey, bool> ref_keys;
    for (const auto& p : refgrid.positions) ref_keys.emplace(detail::pos_key(p), true);

    EvalReport rep;
    rep.predictor = predictor.name();
    rep.config = cfg;
    rep.reference_count = refgrid.size();

    struct Item {
        const SubjectRecord* subject;
        const std::vector<std::pair<Position, Hrtf>>* refs;
        std::size_t meas_index;
    };
    std::vector<Item> items;
    std::vector<std::vector<std::pair<Position, Hrtf>>> ref_store;
    ref_store.reserve(dataset.subjects.size());
    for (const auto& s : dataset.subjects) {
        if (!cfg.subjects.empty() &&
            std::find(cfg.subjects.begin(), cfg.subjects.end(), s.subject_id) == cfg.subjects.end())
            continue;
        std::vector<std::pair<Position, Hrtf>> refs;
        for (const auto& m : s.measurements)
            if (ref_keys.contains(detail::pos_key(m.first))) refs.push_back(m);
        ref_store.push_back(std::move(refs));
        for (std::size_t t = 0; t < s.measurements.size(); ++t)
            items.push_back({&s, &ref_store.back(), t});
    }
    if (items.empty()) throw DataError("evaluate: no subjects selected");

    std::vector<std::optional<double>> lsds(items.size());
    const std::size_t n_threads = detail::eval_thread_count(items.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const Item& it = items[i];
            const auto& [target, truth] = it.subject->measurements[it.meas_index];
            const auto pred = predictor.predict(*it.subject, *it.refs, target, cfg);
            if (pred) lsds[i] = lsd(*pred, truth);
        }
    };
    if (n_threads == 1) {
        work(0, items.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (items.size() + n_threads - 1) / n_threads;
        for (std::size_t t = 0; t < n_threads; ++t)
            pool.emplace_back(work, t * chunk, std::min(items.size(), (t + 1) * chunk));
        for (auto& th : pool) th.join();
    }

    double acc_all = 0.0, acc_hor = 0.0, acc_med = 0.0, acc_fro = 0.0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (!lsds[i]) {
            ++rep.skipped;
            continue;
        }
        const double v = *lsds[i];
        rep.per_position.push_back(v);
        acc_all += v;
        ++rep.count_all;
        const PlaneMembership m = plane_membership(items[i].subject->measurements[items[i].meas_index].first,
                                                   cfg.plane_tol_deg);
        if (m.horizontal) {
            acc_hor += v;
            ++rep.count_hor;
        }
        if (m.median) {
            acc_med += v;
            ++rep.count_med;
        }
        if (m.frontal) {
            acc_fro += v;
            ++rep.count_fro;
        }
    }
    rep.has_skips = rep.skipped > 0;
    rep.mean_all = rep.count_all ? acc_all / static_cast<double>(rep.count_all) : 0.0;
    rep.mean_hor = rep.count_hor ? acc_hor / static_cast<double>(rep.count_hor) : 0.0;
    rep.mean_med = rep.count_med ? acc_med / static_cast<double>(rep.count_med) : 0.0;
    rep.mean_fro = rep.count_fro ? acc_fro / static_cast<double>(rep.count_fro) : 0.0;
    return rep;
}

// Trains every variant with identical seed/config and reports the
// all-direction LSD of each fold's best checkpoint on its validation
// subjects. Reporting only; no ordering is asserted anywhere.
inline std::vector<std::pair<Variant, double>> ablation_run(const Dataset& dataset, const TrainConfig& cfg) {
    std::vector<std::pair<Variant, double>> table;
    for (Variant v : {Variant::a, Variant::b, Variant::c1, Variant::c2}) {
        const TrainResult tr = train(dataset, v, cfg);
        double acc = 0.0;
        std::size_t n = 0;
        for (const FoldResult& fr : tr.folds) {
            EvalConfig ec;
            ec.n_neighbors = cfg.n_neighbors;
            ec.delta_m = cfg.delta_m;
            ec.subjects = fr.split.val_subjects;
            const EvalReport rep = evaluate(ModelPredictor(fr.best), dataset, ec);
            acc += rep.mean_all * static_cast<double>(rep.count_all);
            n += rep.count_all;
        }
        table.emplace_back(v, n ? acc / static_cast<double>(n) : 0.0);
    }
    return table;
}

// All-mean LSD per (N, delta) cell; rows follow n_list, columns delta_list.
inline std::vector<std::vector<double>> neighborhood_study(const Dataset& dataset, Variant variant,
                                                           const std::vector<std::size_t>& n_list,
                                                           const std::vector<double>& delta_list,
                                                           const TrainConfig& cfg) {
    if (n_list.empty() || delta_list.empty()) throw ConfigError("neighborhood_study: empty parameter list");
    std::vector<std::vector<double>> matrix;
    for (std::size_t n : n_list) {
        std::vector<double> row;
        for (double delta : delta_list) {
            TrainConfig c = cfg;
            c.n_neighbors = n;
            c.delta_m = delta;
            const TrainResult tr = train(dataset, variant, c);
            double acc = 0.0;
            std::size_t cnt = 0;
            for (const FoldResult& fr : tr.folds) {
                EvalConfig ec;
                ec.n_neighbors = n;
                ec.delta_m = delta;
                ec.subjects = fr.split.val_subjects;
                const EvalReport rep = evaluate(ModelPredictor(fr.best), dataset, ec);
                acc += rep.mean_all * static_cast<double>(rep.count_all);
                cnt += rep.count_all;
            }
            row.push_back(cnt ? acc / static_cast<double>(cnt) : 0.0);
        }
        matrix.push_back(std::move(row));
    }
    return matrix;
}

}  // namespace hrtffield
