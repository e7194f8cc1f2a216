// hrtf-field: synthetic dataset generation, training, evaluation and plot
// emission for the HRTF field interpolation library.
//
// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
// failure.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hrtffield/evaluation.hpp"
#include "hrtffield/geometry.hpp"
#include "hrtffield/io.hpp"
#include "hrtffield/network.hpp"
#include "hrtffield/spectra.hpp"
#include "hrtffield/training.hpp"

namespace hf = hrtffield;

namespace {

// `key = value` configuration files; command-line flags take precedence.
std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw hf::ConfigError("cannot open config file '" + path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw hf::ConfigError(path + ":" + std::to_string(line_no) + ": expected 'key = value'");
        auto trim = [](std::string v) {
            const auto b = v.find_first_not_of(" \t\r");
            const auto e = v.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string{} : v.substr(b, e - b + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

template <typename T>
void config_apply(const CLI::App* cmd, const std::map<std::string, std::string>& kv, const std::string& key,
                  T& var) {
    if (cmd->count("--" + key) > 0) return;  // flags override
    const auto it = kv.find(key);
    if (it == kv.end()) return;
    if constexpr (std::is_same_v<T, std::string>) {
        var = it->second;
    } else {
        std::istringstream ss(it->second);
        ss >> var;
        if (ss.fail()) throw hf::ConfigError("config value for '" + key + "' is not parseable: " + it->second);
    }
}

struct GenDataOpts {
    std::string grid_kind = "quasi";
    std::size_t points = 60;
    double step_el = 10.0;
    double step_az = 10.0;
    std::string grid_file;
    double radius = 1.47;
    std::size_t subjects = 2;
    std::uint64_t seed = 0;
    std::string out;
    std::string config;
};

int run_gen_data(const GenDataOpts& o) {
    if (o.out.empty()) throw hf::ConfigError("gen-data: --out is required");
    hf::Grid grid;
    if (o.grid_kind == "quasi") {
        grid = hf::make_quasi_uniform_grid(o.points, o.radius);
    } else if (o.grid_kind == "geo") {
        grid = hf::make_geographical_grid(o.step_el, o.step_az, o.radius);
    } else if (o.grid_kind == "file") {
        if (o.grid_file.empty()) throw hf::ConfigError("gen-data: --grid file requires --grid-file");
        grid = hf::load_grid(o.grid_file);
    } else {
        throw hf::ConfigError("gen-data: unknown grid kind '" + o.grid_kind + "'");
    }
    const hf::Dataset d = hf::make_synthetic_dataset(grid, o.subjects, o.seed);
    hf::save_dataset(d, o.out);
    std::cout << "wrote " << o.out << ": subjects=" << d.subjects.size() << " grid_points=" << d.grid.size()
              << " measurements=" << d.subjects.size() * d.grid.size() << "\n";
    return 0;
}

struct TrainOpts {
    std::string data;
    std::string out;
    std::string variant = "c2";
    std::string config;
    hf::TrainConfig cfg;
};

int run_train(const TrainOpts& o) {
    if (o.data.empty()) throw hf::ConfigError("train: --data is required");
    if (o.out.empty()) throw hf::ConfigError("train: --out is required");
    o.cfg.validate();
    const hf::Variant variant = hf::variant_from_string(o.variant);
    const hf::Dataset d = hf::load_dataset(o.data);
    std::filesystem::create_directories(o.out);

    const hf::TrainResult result = hf::train(d, variant, o.cfg);

    std::vector<hf::EpochLog> all_logs;
    std::vector<std::pair<std::string, std::string>> summary;
    summary.emplace_back("variant", o.variant);
    summary.emplace_back("n_neighbors", std::to_string(o.cfg.n_neighbors));
    summary.emplace_back("delta_m", hf::detail::fmt_g17(o.cfg.delta_m));
    summary.emplace_back("folds", std::to_string(o.cfg.folds));
    summary.emplace_back("epochs", std::to_string(o.cfg.max_epochs));
    summary.emplace_back("seed", std::to_string(o.cfg.seed));
    for (const hf::FoldResult& fr : result.folds) {
        const std::string ckpt = o.out + "/fold" + std::to_string(fr.split.fold_index) + ".ckpt";
        hf::save_checkpoint(fr.best, ckpt);
        all_logs.insert(all_logs.end(), fr.log.begin(), fr.log.end());
        summary.emplace_back("fold" + std::to_string(fr.split.fold_index) + ".best_val",
                             hf::detail::fmt_g17(fr.best_val));
        summary.emplace_back("fold" + std::to_string(fr.split.fold_index) + ".skipped_train_targets",
                             std::to_string(fr.skipped_train_targets));
        summary.emplace_back("fold" + std::to_string(fr.split.fold_index) + ".skipped_val_targets",
                             std::to_string(fr.skipped_val_targets));
        std::cout << "fold " << fr.split.fold_index << ": best val LSD "
                  << (std::isfinite(fr.best_val) ? hf::detail::fmt_g17(fr.best_val) : "n/a") << " dB -> " << ckpt
                  << "\n";
    }
    hf::save_epoch_log_csv(all_logs, o.out + "/log.csv");
    hf::save_run_summary(summary, o.out + "/summary.txt");

    std::vector<std::pair<std::string, std::string>> config_echo = summary;
    config_echo.emplace_back("batch_size", std::to_string(o.cfg.batch_size));
    config_echo.emplace_back("lr0", hf::detail::fmt_g17(o.cfg.lr0));
    config_echo.emplace_back("weight_decay", hf::detail::fmt_g17(o.cfg.weight_decay));
    config_echo.emplace_back("patience_epochs", std::to_string(o.cfg.patience_epochs));
    hf::save_run_summary(config_echo, o.out + "/config.txt");
    return 0;
}

struct EvalOpts {
    std::string data;
    std::string ckpt;
    std::string predictor = "model";
    bool baseline = false;
    std::size_t downsample = 1;
    std::optional<std::size_t> n;
    double delta = 0.3;
    double plane_tol = 0.5;
    std::vector<std::string> subjects;
    std::string out;
    std::string config;
};

std::unique_ptr<hf::Predictor> make_predictor(const std::string& kind, const std::string& ckpt_path,
                                              std::optional<std::size_t> n_flag) {
    if (kind == "baseline") return std::make_unique<hf::BaselinePredictor>();
    if (kind == "nearest") return std::make_unique<hf::NearestPredictor>();
    if (kind != "model") throw hf::ConfigError("unknown predictor '" + kind + "'");
    if (ckpt_path.empty()) throw hf::ConfigError("model prediction requires --ckpt");
    hf::Checkpoint c = hf::load_checkpoint(ckpt_path);
    if (n_flag && *n_flag != c.params.n_neighbors)
        throw hf::DataError("checkpoint expects N=" + std::to_string(c.params.n_neighbors) +
                            " neighbors but --n=" + std::to_string(*n_flag) + " was requested");
    return std::make_unique<hf::ModelPredictor>(std::move(c));
}

int run_eval(const EvalOpts& o) {
    if (o.data.empty()) throw hf::ConfigError("eval: --data is required");
    const hf::Dataset d = hf::load_dataset(o.data);
    const std::string kind = o.baseline ? "baseline" : o.predictor;
    const auto predictor = make_predictor(kind, o.ckpt, o.n);

    hf::EvalConfig cfg;
    cfg.delta_m = o.delta;
    cfg.downsample = o.downsample;
    cfg.plane_tol_deg = o.plane_tol;
    cfg.subjects = o.subjects;
    if (const auto* mp = dynamic_cast<const hf::ModelPredictor*>(predictor.get()))
        cfg.n_neighbors = mp->checkpoint().params.n_neighbors;
    else if (o.n)
        cfg.n_neighbors = *o.n;

    const hf::EvalReport rep = hf::evaluate(*predictor, d, cfg);
    const std::string table = hf::format_report_table(rep);
    std::cout << table;
    if (!o.out.empty()) {
        std::filesystem::create_directories(o.out);
        hf::save_report_csv(rep, o.out + "/report.csv");
        auto f = hf::detail::open_out(o.out + "/report.txt");
        f << table;
    }
    return 0;
}

struct PlotOpts {
    std::string data;
    std::string ckpt;
    std::string predictor = "truth";
    std::string plane = "median";
    std::string subject;
    std::size_t downsample = 1;
    std::optional<std::size_t> n;
    double delta = 0.3;
    double plane_tol = 0.5;
    std::string out;
    std::string config;
};

// Magnitude map of one plane: rows are frequency bins, columns the plane
// sweep angle ascending.
int run_plot(const PlotOpts& o) {
    if (o.data.empty()) throw hf::ConfigError("plot: --data is required");
    if (o.out.empty()) throw hf::ConfigError("plot: --out is required");
    const hf::Dataset d = hf::load_dataset(o.data);
    const hf::SubjectRecord* subject = &d.subjects.front();
    if (!o.subject.empty()) {
        subject = nullptr;
        for (const auto& s : d.subjects)
            if (s.subject_id == o.subject) subject = &s;
        if (!subject) throw hf::DataError("plot: subject '" + o.subject + "' not in dataset");
    }

    auto plane_angle = [&](const hf::Position& p) -> std::optional<double> {
        const hf::PlaneMembership m = hf::plane_membership(p, o.plane_tol);
        double a = 0.0;
        if (o.plane == "horizontal") {
            if (!m.horizontal) return std::nullopt;
            a = std::atan2(p.y, p.x);
        } else if (o.plane == "median") {
            if (!m.median) return std::nullopt;
            a = std::atan2(p.z, p.x);
        } else if (o.plane == "frontal") {
            if (!m.frontal) return std::nullopt;
            a = std::atan2(p.z, p.y);
        } else {
            throw hf::ConfigError("plot: unknown plane '" + o.plane + "'");
        }
        a *= hf::kRadToDeg;
        if (a < 0.0) a += 360.0;
        return a;
    };

    std::vector<std::pair<double, std::size_t>> selected;  // (angle, measurement index)
    for (std::size_t i = 0; i < subject->measurements.size(); ++i)
        if (const auto a = plane_angle(subject->measurements[i].first)) selected.emplace_back(*a, i);
    std::sort(selected.begin(), selected.end());
    if (selected.empty()) throw hf::DataError("plot: no positions of subject lie in the requested plane");

    std::unique_ptr<hf::Predictor> predictor;
    if (o.predictor != "truth") predictor = make_predictor(o.predictor, o.ckpt, o.n);
    else if (!o.ckpt.empty()) predictor = make_predictor("model", o.ckpt, o.n);

    hf::EvalConfig cfg;
    cfg.delta_m = o.delta;
    cfg.downsample = o.downsample;
    cfg.plane_tol_deg = o.plane_tol;
    if (const auto* mp = dynamic_cast<const hf::ModelPredictor*>(predictor.get()))
        cfg.n_neighbors = mp->checkpoint().params.n_neighbors;
    else if (o.n)
        cfg.n_neighbors = *o.n;

    std::vector<std::pair<hf::Position, hf::Hrtf>> refs;
    if (predictor) {
        const hf::Grid refgrid = hf::downsample_grid(d.grid, o.downsample);
        std::map<hf::detail::PosKey, bool> keys;
        for (const auto& p : refgrid.positions) keys.emplace(hf::detail::pos_key(p), true);
        for (const auto& m : subject->measurements)
            if (keys.contains(hf::detail::pos_key(m.first))) refs.push_back(m);
    }

    std::vector<std::vector<double>> matrix(hf::kNumBins);
    std::size_t dropped = 0;
    for (const auto& [angle, mi] : selected) {
        hf::Hrtf h;
        if (predictor) {
            const auto pred = predictor->predict(*subject, refs, subject->measurements[mi].first, cfg);
            if (!pred) {
                ++dropped;
                continue;
            }
            h = *pred;
        } else {
            h = subject->measurements[mi].second;
        }
        for (std::size_t k = 0; k < hf::kNumBins; ++k) matrix[k].push_back(h.db[k]);
    }
    if (dropped) std::cerr << "plot: dropped " << dropped << " positions with no reachable references\n";
    if (matrix[0].empty()) throw hf::DataError("plot: every selected position was out of reach");

    hf::save_matrix_csv(matrix, o.out + ".csv");

    double lo = matrix[0][0], hi = matrix[0][0];
    for (const auto& row : matrix)
        for (double v : row) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    const std::size_t width = matrix[0].size();
    std::vector<unsigned char> pixels(hf::kNumBins * width, 0);
    if (hi - lo > 1e-12) {
        for (std::size_t k = 0; k < hf::kNumBins; ++k)
            for (std::size_t j = 0; j < width; ++j)
                pixels[k * width + j] =
                    static_cast<unsigned char>(std::lround(255.0 * (matrix[k][j] - lo) / (hi - lo)));
    }
    hf::save_pgm(pixels, width, hf::kNumBins, o.out + ".pgm");
    std::cerr << "plot: dB range [" << lo << ", " << hi << "] mapped to [0, 255]\n";
    std::cout << "wrote " << o.out << ".csv and " << o.out << ".pgm (" << hf::kNumBins << " x " << width << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"HRTF field interpolation toolkit"};
    app.require_subcommand(1);

    GenDataOpts gen;
    auto* cmd_gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
    cmd_gen->add_option("--grid", gen.grid_kind, "grid kind: quasi, geo or file")->default_str("quasi");
    cmd_gen->add_option("--points", gen.points, "point count for quasi grids");
    cmd_gen->add_option("--step-el", gen.step_el, "elevation step in degrees for geo grids");
    cmd_gen->add_option("--step-az", gen.step_az, "great-circle azimuth step in degrees for geo grids");
    cmd_gen->add_option("--grid-file", gen.grid_file, "grid file for --grid file");
    cmd_gen->add_option("--radius", gen.radius, "grid radius in meters");
    cmd_gen->add_option("--subjects", gen.subjects, "number of synthetic subjects");
    cmd_gen->add_option("--seed", gen.seed, "generator seed");
    cmd_gen->add_option("-o,--out", gen.out, "output dataset file");
    cmd_gen->add_option("--config", gen.config, "key = value configuration file; flags override");

    TrainOpts tr;
    auto* cmd_train = app.add_subcommand("train", "train interpolation models with cross-validation");
    cmd_train->add_option("--data", tr.data, "dataset file");
    cmd_train->add_option("-o,--out", tr.out, "run directory");
    cmd_train->add_option("--config", tr.config, "key = value configuration file; flags override");
    cmd_train->add_option("--variant", tr.variant, "model variant: a, b, c1 or c2");
    cmd_train->add_option("--n", tr.cfg.n_neighbors, "neighbors per target");
    cmd_train->add_option("--delta", tr.cfg.delta_m, "neighborhood radius in meters");
    cmd_train->add_option("--batch", tr.cfg.batch_size, "batch size");
    cmd_train->add_option("--lr", tr.cfg.lr0, "initial learning rate");
    cmd_train->add_option("--wd", tr.cfg.weight_decay, "decoupled weight decay");
    cmd_train->add_option("--patience", tr.cfg.patience_epochs, "epochs without improvement before halving");
    cmd_train->add_option("--folds", tr.cfg.folds, "cross-validation folds");
    cmd_train->add_option("--epochs", tr.cfg.max_epochs, "training epochs");
    cmd_train->add_option("--seed", tr.cfg.seed, "training seed");
    cmd_train->add_option("--fold", tr.cfg.fold_filter, "train only this fold index (default: all)");

    EvalOpts ev;
    auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint or the linear baseline");
    cmd_eval->add_option("--data", ev.data, "dataset file");
    cmd_eval->add_option("--config", ev.config, "key = value configuration file; flags override");
    cmd_eval->add_option("--ckpt", ev.ckpt, "model checkpoint");
    cmd_eval->add_option("--predictor", ev.predictor, "model, baseline or nearest");
    cmd_eval->add_flag("--baseline", ev.baseline, "evaluate the linear-interpolation baseline");
    cmd_eval->add_option("--downsample", ev.downsample, "reference grid keeps every T-th point");
    cmd_eval->add_option("--n", [&ev](const CLI::results_t& r) { ev.n = std::stoul(r[0]); return true; },
                         "neighbors per target (must match the checkpoint)");
    cmd_eval->add_option("--delta", ev.delta, "neighborhood radius in meters");
    cmd_eval->add_option("--plane-tol", ev.plane_tol, "plane membership tolerance in degrees");
    cmd_eval->add_option("--subject", ev.subjects, "evaluate only these subject ids");
    cmd_eval->add_option("-o,--out", ev.out, "report directory");

    PlotOpts pl;
    auto* cmd_plot = app.add_subcommand("plot", "emit a frequency x angle magnitude map (CSV + P5 image)");
    cmd_plot->add_option("--data", pl.data, "dataset file");
    cmd_plot->add_option("--config", pl.config, "key = value configuration file; flags override");
    cmd_plot->add_option("--ckpt", pl.ckpt, "model checkpoint (plots predictions instead of ground truth)");
    cmd_plot->add_option("--predictor", pl.predictor, "truth, model, baseline or nearest");
    cmd_plot->add_option("--plane", pl.plane, "median, horizontal or frontal");
    cmd_plot->add_option("--subject", pl.subject, "subject id (default: first)");
    cmd_plot->add_option("--downsample", pl.downsample, "reference grid keeps every T-th point");
    cmd_plot->add_option("--n", [&pl](const CLI::results_t& r) { pl.n = std::stoul(r[0]); return true; },
                         "neighbors per target");
    cmd_plot->add_option("--delta", pl.delta, "neighborhood radius in meters");
    cmd_plot->add_option("--plane-tol", pl.plane_tol, "plane membership tolerance in degrees");
    cmd_plot->add_option("-o,--out", pl.out, "output path prefix");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (cmd_gen->parsed()) {
            if (!gen.config.empty()) {
                const auto kv = read_config_file(gen.config);
                config_apply(cmd_gen, kv, "grid", gen.grid_kind);
                config_apply(cmd_gen, kv, "points", gen.points);
                config_apply(cmd_gen, kv, "step-el", gen.step_el);
                config_apply(cmd_gen, kv, "step-az", gen.step_az);
                config_apply(cmd_gen, kv, "grid-file", gen.grid_file);
                config_apply(cmd_gen, kv, "radius", gen.radius);
                config_apply(cmd_gen, kv, "subjects", gen.subjects);
                config_apply(cmd_gen, kv, "seed", gen.seed);
                config_apply(cmd_gen, kv, "out", gen.out);
            }
            return run_gen_data(gen);
        }
        if (cmd_train->parsed()) {
            if (!tr.config.empty()) {
                const auto kv = read_config_file(tr.config);
                config_apply(cmd_train, kv, "data", tr.data);
                config_apply(cmd_train, kv, "out", tr.out);
                config_apply(cmd_train, kv, "variant", tr.variant);
                config_apply(cmd_train, kv, "n", tr.cfg.n_neighbors);
                config_apply(cmd_train, kv, "delta", tr.cfg.delta_m);
                config_apply(cmd_train, kv, "batch", tr.cfg.batch_size);
                config_apply(cmd_train, kv, "lr", tr.cfg.lr0);
                config_apply(cmd_train, kv, "wd", tr.cfg.weight_decay);
                config_apply(cmd_train, kv, "patience", tr.cfg.patience_epochs);
                config_apply(cmd_train, kv, "folds", tr.cfg.folds);
                config_apply(cmd_train, kv, "epochs", tr.cfg.max_epochs);
                config_apply(cmd_train, kv, "seed", tr.cfg.seed);
                config_apply(cmd_train, kv, "fold", tr.cfg.fold_filter);
            }
            return run_train(tr);
        }
        if (cmd_eval->parsed()) {
            if (!ev.config.empty()) {
                const auto kv = read_config_file(ev.config);
                config_apply(cmd_eval, kv, "data", ev.data);
                config_apply(cmd_eval, kv, "ckpt", ev.ckpt);
                config_apply(cmd_eval, kv, "predictor", ev.predictor);
                config_apply(cmd_eval, kv, "downsample", ev.downsample);
                config_apply(cmd_eval, kv, "delta", ev.delta);
                config_apply(cmd_eval, kv, "plane-tol", ev.plane_tol);
                config_apply(cmd_eval, kv, "out", ev.out);
                if (cmd_eval->count("--n") == 0 && kv.contains("n")) ev.n = std::stoul(kv.at("n"));
            }
            return run_eval(ev);
        }
        if (cmd_plot->parsed()) {
            if (!pl.config.empty()) {
                const auto kv = read_config_file(pl.config);
                config_apply(cmd_plot, kv, "data", pl.data);
                config_apply(cmd_plot, kv, "ckpt", pl.ckpt);
                config_apply(cmd_plot, kv, "predictor", pl.predictor);
                config_apply(cmd_plot, kv, "plane", pl.plane);
                config_apply(cmd_plot, kv, "subject", pl.subject);
                config_apply(cmd_plot, kv, "downsample", pl.downsample);
                config_apply(cmd_plot, kv, "delta", pl.delta);
                config_apply(cmd_plot, kv, "plane-tol", pl.plane_tol);
                config_apply(cmd_plot, kv, "out", pl.out);
                if (cmd_plot->count("--n") == 0 && kv.contains("n")) pl.n = std::stoul(kv.at("n"));
            }
            return run_plot(pl);
        }
    } catch (const hf::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const hf::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const hf::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
