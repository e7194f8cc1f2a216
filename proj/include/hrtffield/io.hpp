// File formats: grid and dataset text files, the binary checkpoint
// container, CSV logs/reports/matrices and P5 grayscale images. Loaders
// validate type invariants and reject on the first violation with a line
// number; floats are serialized with 17 significant digits so text
// round-trips are lossless.
#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hrtffield/errors.hpp"
#include "hrtffield/evaluation.hpp"
#include "hrtffield/geometry.hpp"
#include "hrtffield/network.hpp"
#include "hrtffield/spectra.hpp"
#include "hrtffield/training.hpp"

namespace hrtffield {

namespace detail {

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline DataError parse_error(const std::string& path, std::size_t line_no, const std::string& what) {
    return DataError(path + ":" + std::to_string(line_no) + ": " + what);
}

inline bool parse_doubles(const std::string& s, std::vector<double>& out) {
    out.clear();
    const char* p = s.c_str();
    char* end = nullptr;
    while (*p) {
        while (*p == ' ' || *p == '\t' || *p == '\r') ++p;
        if (!*p) break;
        const double v = std::strtod(p, &end);
        if (end == p) return false;
        out.push_back(v);
        p = end;
    }
    return true;
}

inline std::ofstream open_out(const std::string& path, bool binary = false) {
    std::ofstream f(path, binary ? std::ios::binary : std::ios::out);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    return f;
}

inline std::ifstream open_in(const std::string& path, bool binary = false) {
    std::ifstream f(path, binary ? std::ios::binary : std::ios::in);
    if (!f) throw DataError("cannot open '" + path + "' for reading");
    return f;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// grid files: one `x y z` triple per line, '#' comments

inline void save_grid(const Grid& g, const std::string& path) {
    auto f = detail::open_out(path);
    f << "# grid kind=" << to_string(g.kind) << " points=" << g.size() << "\n";
    for (const auto& p : g.positions)
        f << detail::fmt_g17(p.x) << " " << detail::fmt_g17(p.y) << " " << detail::fmt_g17(p.z) << "\n";
}

inline Grid load_grid(const std::string& path) {
    auto f = detail::open_in(path);
    Grid g;
    g.kind = GridKind::loaded;
    std::string line;
    std::size_t line_no = 0;
    std::vector<double> vals;
    while (std::getline(f, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (!detail::parse_doubles(line, vals) || vals.size() != 3)
            throw detail::parse_error(path, line_no, "expected 3 coordinates");
        const Position p{vals[0], vals[1], vals[2]};
        if (!p.finite()) throw detail::parse_error(path, line_no, "non-finite coordinate");
        g.positions.push_back(p);
    }
    if (g.positions.empty()) throw DataError(path + ": grid file contains no points");
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = i + 1; j < g.size(); ++j)
            if (distance(g.positions[i], g.positions[j]) <= 1e-9)
                throw DataError(path + ": grid points " + std::to_string(i) + " and " + std::to_string(j) +
                                " coincide");
    g.radius_m = g.positions.front().norm();
    return g;
}

// ---------------------------------------------------------------------------
// dataset files: SUBJECT / ANTHRO / MEAS records

inline void save_dataset(const Dataset& d, const std::string& path) {
    auto f = detail::open_out(path);
    f << "# hrtf dataset, " << d.subjects.size() << " subjects, " << d.grid.size() << " grid points\n";
    for (const auto& s : d.subjects) {
        f << "SUBJECT " << s.subject_id << "\n";
        f << "ANTHRO";
        for (double v : s.anthropometry.features_cm) f << " " << detail::fmt_g17(v);
        f << "\n";
        for (const auto& [p, h] : s.measurements) {
            f << "MEAS " << detail::fmt_g17(p.x) << " " << detail::fmt_g17(p.y) << " " << detail::fmt_g17(p.z);
            for (double v : h.db) f << " " << detail::fmt_g17(v);
            f << "\n";
        }
    }
}

inline Dataset load_dataset(const std::string& path) {
    auto f = detail::open_in(path);
    Dataset d;
    d.provenance = Provenance::ingested;
    std::string line;
    std::size_t line_no = 0;
    std::vector<double> vals;
    SubjectRecord* cur = nullptr;
    bool cur_has_anthro = false;
    std::map<detail::PosKey, bool> grid_seen;
    std::map<detail::PosKey, bool> subj_seen;

    while (std::getline(f, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "SUBJECT") {
            std::string id;
            ss >> id;
            if (id.empty()) throw detail::parse_error(path, line_no, "SUBJECT needs an id");
            for (const auto& s : d.subjects)
                if (s.subject_id == id) throw detail::parse_error(path, line_no, "duplicate subject id '" + id + "'");
            if (cur && cur->measurements.empty())
                throw detail::parse_error(path, line_no, "subject '" + cur->subject_id + "' has no measurements");
            d.subjects.emplace_back();
            cur = &d.subjects.back();
            cur->subject_id = id;
            cur_has_anthro = false;
            subj_seen.clear();
        } else if (tag == "ANTHRO") {
            if (!cur) throw detail::parse_error(path, line_no, "ANTHRO before SUBJECT");
            if (cur_has_anthro) throw detail::parse_error(path, line_no, "duplicate ANTHRO record");
            std::string rest;
            std::getline(ss, rest);
            if (!detail::parse_doubles(rest, vals) || vals.size() != kNumAnthroFeatures)
                throw detail::parse_error(path, line_no, "ANTHRO needs exactly " + std::to_string(kNumAnthroFeatures) + " values");
            for (std::size_t j = 0; j < kNumAnthroFeatures; ++j) {
                if (!std::isfinite(vals[j])) throw detail::parse_error(path, line_no, "non-finite anthropometry value");
                cur->anthropometry.features_cm[j] = vals[j];
            }
            cur_has_anthro = true;
        } else if (tag == "MEAS") {
            if (!cur) throw detail::parse_error(path, line_no, "MEAS before SUBJECT");
            if (!cur_has_anthro) throw detail::parse_error(path, line_no, "MEAS before ANTHRO");
            std::string rest;
            std::getline(ss, rest);
            if (!detail::parse_doubles(rest, vals) || vals.size() != 3 + kNumBins)
                throw detail::parse_error(path, line_no,
                                          "MEAS needs 3 coordinates and " + std::to_string(kNumBins) + " bins");
            const Position p{vals[0], vals[1], vals[2]};
            if (!p.finite()) throw detail::parse_error(path, line_no, "non-finite position");
            Hrtf h;
            for (std::size_t k = 0; k < kNumBins; ++k) {
                const double v = vals[3 + k];
                if (!std::isfinite(v)) throw detail::parse_error(path, line_no, "non-finite HRTF bin");
                if (v < kDbFloor) throw detail::parse_error(path, line_no, "HRTF bin below the dB floor");
                h.db[k] = v;
            }
            if (!subj_seen.emplace(detail::pos_key(p), true).second)
                throw detail::parse_error(path, line_no, "duplicate measurement position within subject");
            if (grid_seen.emplace(detail::pos_key(p), true).second) d.grid.positions.push_back(p);
            cur->measurements.emplace_back(p, h);
        } else {
            throw detail::parse_error(path, line_no, "unknown record '" + tag + "'");
        }
    }
    if (d.subjects.empty()) throw DataError(path + ": dataset file contains no subjects");
    if (cur && cur->measurements.empty())
        throw DataError(path + ": subject '" + cur->subject_id + "' has no measurements");
    d.grid.kind = GridKind::loaded;
    d.grid.radius_m = d.grid.positions.front().norm();
    d.anthro_stats = compute_anthro_stats(d.subjects);
    validate_dataset(d);
    return d;
}

// ---------------------------------------------------------------------------
// checkpoint container (binary, little-endian, bit-exact round trip)

namespace detail {

constexpr char kCkptMagic[8] = {'H', 'F', 'C', 'K', 'P', 'T', '0', '1'};

inline void put_u32(std::ofstream& f, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ofstream& f, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    f.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::ifstream& f, const std::string& path) {
    unsigned char b[4];
    if (!f.read(reinterpret_cast<char*>(b), 4)) throw DataError(path + ": truncated checkpoint");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline double get_f64(std::ifstream& f, const std::string& path) {
    unsigned char b[8];
    if (!f.read(reinterpret_cast<char*>(b), 8)) throw DataError(path + ": truncated checkpoint");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

inline void put_named_tensor(std::ofstream& f, const std::string& name, const std::vector<std::size_t>& dims,
                             const double* data, std::size_t n) {
    put_u32(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(f, static_cast<std::uint32_t>(dims.size()));
    for (std::size_t d : dims) put_u32(f, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < n; ++i) put_f64(f, data[i]);
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
    auto f = detail::open_out(path, true);
    f.write(detail::kCkptMagic, 8);
    f.put(static_cast<char>(c.params.variant));
    detail::put_u32(f, static_cast<std::uint32_t>(c.params.n_neighbors));
    detail::put_u32(f, static_cast<std::uint32_t>(kNumBins));
    detail::put_u32(f, static_cast<std::uint32_t>(c.params.specs.size() + 2));
    for (const auto& s : c.params.specs)
        detail::put_named_tensor(f, s.name, s.dims, c.params.flat.data() + s.offset, s.size);
    detail::put_named_tensor(f, "stats.anthro_mean", {kNumAnthroFeatures}, c.anthro_stats.mean.data(),
                             kNumAnthroFeatures);
    detail::put_named_tensor(f, "stats.anthro_std", {kNumAnthroFeatures}, c.anthro_stats.stddev.data(),
                             kNumAnthroFeatures);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    auto f = detail::open_in(path, true);
    char magic[8];
    if (!f.read(magic, 8) || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw DataError(path + ": not a checkpoint file (bad magic)");
    const int vtag = f.get();
    if (vtag < 0 || vtag > 3) throw DataError(path + ": unknown variant tag");
    const std::uint32_t n = detail::get_u32(f, path);
    const std::uint32_t k = detail::get_u32(f, path);
    if (k != kNumBins)
        throw DataError(path + ": checkpoint bin count " + std::to_string(k) + " does not match " +
                        std::to_string(kNumBins));
    const std::uint32_t count = detail::get_u32(f, path);

    Checkpoint c;
    c.params = init_model_params(static_cast<Variant>(vtag), n, 0);
    std::fill(c.params.flat.begin(), c.params.flat.end(), 0.0);
    std::vector<bool> filled(c.params.specs.size(), false);
    bool have_mean = false, have_std = false;

    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::get_u32(f, path);
        std::string name(name_len, '\0');
        if (!f.read(name.data(), name_len)) throw DataError(path + ": truncated checkpoint");
        const std::uint32_t rank = detail::get_u32(f, path);
        std::vector<std::size_t> dims(rank);
        std::size_t numel = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            dims[r] = detail::get_u32(f, path);
            numel *= dims[r];
        }
        std::vector<double> data(numel);
        for (std::size_t e = 0; e < numel; ++e) data[e] = detail::get_f64(f, path);

        if (name == "stats.anthro_mean" || name == "stats.anthro_std") {
            if (numel != kNumAnthroFeatures) throw DataError(path + ": bad anthropometry statistics size");
            auto& dst = name == "stats.anthro_mean" ? c.anthro_stats.mean : c.anthro_stats.stddev;
            std::copy(data.begin(), data.end(), dst.begin());
            (name == "stats.anthro_mean" ? have_mean : have_std) = true;
            continue;
        }
        bool matched = false;
        for (std::size_t si = 0; si < c.params.specs.size(); ++si) {
            const auto& spec = c.params.specs[si];
            if (spec.name != name) continue;
            if (spec.dims != dims) throw DataError(path + ": tensor '" + name + "' has unexpected shape");
            std::copy(data.begin(), data.end(), c.params.flat.begin() + static_cast<std::ptrdiff_t>(spec.offset));
            filled[si] = true;
            matched = true;
            break;
        }
        if (!matched) throw DataError(path + ": unexpected tensor '" + name + "'");
    }
    for (std::size_t si = 0; si < filled.size(); ++si)
        if (!filled[si]) throw DataError(path + ": missing tensor '" + c.params.specs[si].name + "'");
    if (!have_mean || !have_std) throw DataError(path + ": missing anthropometry statistics");
    if (!c.anthro_stats.valid()) throw DataError(path + ": invalid anthropometry statistics");
    return c;
}

// ---------------------------------------------------------------------------
// CSV and text emissions

inline void save_epoch_log_csv(const std::vector<EpochLog>& log, const std::string& path) {
    auto f = detail::open_out(path);
    f << "epoch,fold,train_lsd,val_lsd,lr\n";
    for (const auto& e : log)
        f << e.epoch << "," << e.fold << "," << detail::fmt_g17(e.train_lsd) << "," << detail::fmt_g17(e.val_lsd)
          << "," << detail::fmt_g17(e.lr) << "\n";
}

inline void save_report_csv(const EvalReport& r, const std::string& path) {
    auto f = detail::open_out(path);
    f << "# predictor=" << r.predictor << "\n";
    f << "# downsample=" << r.config.downsample << "\n";
    f << "# references=" << r.reference_count << "\n";
    f << "# skipped=" << r.skipped << "\n";
    f << "plane,mean_lsd_db,count\n";
    f << "All," << detail::fmt_g17(r.mean_all) << "," << r.count_all << "\n";
    f << "Hor.," << detail::fmt_g17(r.mean_hor) << "," << r.count_hor << "\n";
    f << "Med.," << detail::fmt_g17(r.mean_med) << "," << r.count_med << "\n";
    f << "Fro.," << detail::fmt_g17(r.mean_fro) << "," << r.count_fro << "\n";
}

inline std::string format_report_table(const EvalReport& r) {
    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof(buf), "%-16s %8s %8s %8s %8s\n", "Direction", "All", "Hor.", "Med.", "Fro.");
    out += buf;
    std::snprintf(buf, sizeof(buf), "%-16s %8.3f %8.3f %8.3f %8.3f\n", r.predictor.c_str(), r.mean_all, r.mean_hor,
                  r.mean_med, r.mean_fro);
    out += buf;
    if (r.has_skips) {
        std::snprintf(buf, sizeof(buf), "(%zu targets skipped: no reachable references)\n", r.skipped);
        out += buf;
    }
    return out;
}

inline void save_matrix_csv(const std::vector<std::vector<double>>& m, const std::string& path) {
    auto f = detail::open_out(path);
    for (const auto& row : m) {
        for (std::size_t j = 0; j < row.size(); ++j) f << (j ? "," : "") << detail::fmt_g17(row[j]);
        f << "\n";
    }
}

inline std::vector<std::vector<double>> load_matrix_csv(const std::string& path) {
    auto f = detail::open_in(path);
    std::vector<std::vector<double>> m;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
        m.push_back(std::move(row));
    }
    return m;
}

// Binary P5 grayscale image; `pixels` is row-major, top row first.
inline void save_pgm(const std::vector<unsigned char>& pixels, std::size_t width, std::size_t height,
                     const std::string& path) {
    if (pixels.size() != width * height) throw ConfigError("save_pgm: pixel buffer size mismatch");
    auto f = detail::open_out(path, true);
    f << "P5\n" << width << " " << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

inline void save_run_summary(const std::vector<std::pair<std::string, std::string>>& kv, const std::string& path) {
    auto f = detail::open_out(path);
    for (const auto& [k, v] : kv) f << k << " = " << v << "\n";
}

}  // namespace hrtffield
