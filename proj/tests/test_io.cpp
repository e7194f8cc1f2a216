#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "hrtffield/io.hpp"
#include "hrtffield/rng.hpp"

using namespace hrtffield;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("hf_io_" + name)).string();
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream f(path);
    f << content;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path(temp_path(name)) {}
    ~TempFile() { std::filesystem::remove(path); }
};

}  // namespace

TEST_CASE("grid round trip with comments") {
    const Grid g = make_geographical_grid(30.0, 30.0, 1.2);
    TempFile f("grid.txt");
    save_grid(g, f.path);
    const Grid back = load_grid(f.path);
    REQUIRE(back.size() == g.size());
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(back.positions[i] == g.positions[i]);
    CHECK(back.kind == GridKind::loaded);
}

TEST_CASE("grid loader rejects malformed files with a line number") {
    TempFile f("bad_grid.txt");

    write_text(f.path, "1 0 0\n0 1\n");
    CHECK_THROWS_WITH_AS(load_grid(f.path), doctest::Contains(":2:"), DataError);

    write_text(f.path, "1 0 0\nnan 0 1\n");
    CHECK_THROWS_AS(load_grid(f.path), DataError);

    write_text(f.path, "1 0 0\n0 1 0\n1 0 0\n");
    CHECK_THROWS_AS(load_grid(f.path), DataError);  // duplicate point

    write_text(f.path, "# only comments\n");
    CHECK_THROWS_AS(load_grid(f.path), DataError);
}

TEST_CASE("dataset loader rejects invariant violations with locations") {
    TempFile f("bad_data.txt");
    const std::string anthro11 = "ANTHRO 1 2 3 4 5 6 7 8 9 10 11\n";
    write_text(f.path, "SUBJECT s0\n" + anthro11);
    CHECK_THROWS_WITH_AS(load_dataset(f.path), doctest::Contains(":2:"), DataError);

    std::string meas = "MEAS 1 0 0";
    for (int k = 0; k < 129; ++k) meas += " -3";
    meas += "\n";
    const std::string anthro12 = "ANTHRO 1 2 3 4 5 6 7 8 9 10 11 12\n";

    write_text(f.path, "SUBJECT s0\n" + anthro12 + meas + meas);  // duplicate position
    CHECK_THROWS_WITH_AS(load_dataset(f.path), doctest::Contains(":4:"), DataError);

    write_text(f.path, "SUBJECT s0\n" + meas);  // MEAS before ANTHRO
    CHECK_THROWS_AS(load_dataset(f.path), DataError);

    write_text(f.path, anthro12);  // ANTHRO before SUBJECT
    CHECK_THROWS_AS(load_dataset(f.path), DataError);

    write_text(f.path, "SUBJECT s0\n" + anthro12 + "BOGUS 1\n");
    CHECK_THROWS_AS(load_dataset(f.path), DataError);

    std::string short_meas = "MEAS 1 0 0 -3 -3\n";
    write_text(f.path, "SUBJECT s0\n" + anthro12 + short_meas);
    CHECK_THROWS_AS(load_dataset(f.path), DataError);

    write_text(f.path, "SUBJECT s0\n" + anthro12);  // subject without measurements
    CHECK_THROWS_AS(load_dataset(f.path), DataError);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    Rng rng(5);
    for (Variant v : {Variant::a, Variant::b, Variant::c1, Variant::c2}) {
        Checkpoint c;
        c.params = init_model_params(v, 3, 11);
        for (double& w : c.params.flat) w = rng.uniform(-2.0, 2.0);
        for (std::size_t j = 0; j < kNumAnthroFeatures; ++j) {
            c.anthro_stats.mean[j] = rng.uniform(5.0, 20.0);
            c.anthro_stats.stddev[j] = rng.uniform(0.1, 3.0);
        }
        TempFile f("ckpt_" + to_string(v) + ".bin");
        save_checkpoint(c, f.path);
        const Checkpoint back = load_checkpoint(f.path);
        CHECK(back.params.variant == v);
        CHECK(back.params.n_neighbors == 3);
        REQUIRE(back.params.flat.size() == c.params.flat.size());
        CHECK(std::memcmp(back.params.flat.data(), c.params.flat.data(),
                          c.params.flat.size() * sizeof(double)) == 0);
        CHECK(std::memcmp(back.anthro_stats.mean.data(), c.anthro_stats.mean.data(), 12 * sizeof(double)) == 0);
        CHECK(std::memcmp(back.anthro_stats.stddev.data(), c.anthro_stats.stddev.data(), 12 * sizeof(double)) == 0);
    }
}

TEST_CASE("checkpoint loader rejects corruption") {
    Checkpoint c;
    c.params = init_model_params(Variant::b, 2, 1);
    for (std::size_t j = 0; j < kNumAnthroFeatures; ++j) {
        c.anthro_stats.mean[j] = 10.0;
        c.anthro_stats.stddev[j] = 1.0;
    }
    TempFile f("ckpt_corrupt.bin");
    save_checkpoint(c, f.path);

    std::string bytes = slurp(f.path);
    std::string bad = bytes;
    bad[0] = 'X';
    write_text(f.path, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(f.path), doctest::Contains("magic"), DataError);

    write_text(f.path, bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(f.path), DataError);

    CHECK_THROWS_AS(load_checkpoint(temp_path("missing.bin")), DataError);
}

TEST_CASE("epoch log csv shape") {
    std::vector<EpochLog> log = {{1, 0, 2.5, 3.5, 1e-4}, {2, 0, 2.0, 3.25, 1e-4}};
    TempFile f("log.csv");
    save_epoch_log_csv(log, f.path);
    const std::string text = slurp(f.path);
    CHECK(text.find("epoch,fold,train_lsd,val_lsd,lr") == 0);
    CHECK(text.find("\n1,0,2.5,3.5,") != std::string::npos);
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}

TEST_CASE("report csv and text table") {
    EvalReport r;
    r.predictor = "baseline";
    r.mean_all = 1.5;
    r.mean_hor = 2.5;
    r.mean_med = 0.5;
    r.mean_fro = 3.25;
    r.count_all = 10;
    r.count_hor = 4;
    r.count_med = 3;
    r.count_fro = 3;
    r.reference_count = 5;
    TempFile f("report.csv");
    save_report_csv(r, f.path);
    const std::string text = slurp(f.path);
    CHECK(text.find("plane,mean_lsd_db,count") != std::string::npos);
    CHECK(text.find("All,1.5,10") != std::string::npos);
    CHECK(text.find("# references=5") != std::string::npos);

    const std::string table = format_report_table(r);
    CHECK(table.find("All") != std::string::npos);
    CHECK(table.find("Hor.") != std::string::npos);
    CHECK(table.find("Med.") != std::string::npos);
    CHECK(table.find("Fro.") != std::string::npos);
}

TEST_CASE("pgm writer emits a valid P5 header") {
    TempFile f("img.pgm");
    save_pgm({0, 64, 128, 255, 32, 16}, 3, 2, f.path);
    const std::string bytes = slurp(f.path);
    CHECK(bytes.rfind("P5\n3 2\n255\n", 0) == 0);
    CHECK(bytes.size() == std::string("P5\n3 2\n255\n").size() + 6);
    CHECK_THROWS_AS(save_pgm({0, 1}, 3, 2, f.path), ConfigError);
}

TEST_CASE("matrix csv round trip") {
    const std::vector<std::vector<double>> m = {{1.5, 2.25, -3.75}, {0.125, -0.5, 8.0}};
    TempFile f("matrix.csv");
    save_matrix_csv(m, f.path);
    CHECK(load_matrix_csv(f.path) == m);
}
