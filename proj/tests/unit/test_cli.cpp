#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "cemu/cli.hpp"
#include "cemu/dataset_io.hpp"
#include "cemu/manifest.hpp"
#include "cemu/training.hpp"

using namespace cemu;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        std::random_device rd;
        path = fs::temp_directory_path() / ("cemu-cli-test-" + std::to_string(rd()) + std::to_string(rd()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    [[nodiscard]] std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Result {
    int code;
    std::string out, err;
};

Result cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::string& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::vector<std::vector<std::string>> rows;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

double Phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
double phi(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

}  // namespace

TEST_CASE("sha256 and manifest round trip") {
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    TempDir tmp;
    RunManifest m;
    m.command = "x";
    m.argv = {"x", "--seed", "18446744073709551615"};
    m.seed = 18446744073709551615ULL;
    m.config = {{"a", 1.0 / 3.0}};
    write_text(tmp / "f.txt", "abc");
    m.outputs.push_back(file_record("f", tmp / "f.txt", "--out"));
    write_manifest(tmp / "m.json", m);
    const RunManifest r = read_manifest(tmp / "m.json");
    CHECK(r.seed == m.seed);
    CHECK(r.argv == m.argv);
    CHECK(r.config["a"].get<double>() == 1.0 / 3.0);
    REQUIRE(r.outputs.size() == 1);
    CHECK(r.outputs[0].sha256 == sha256_hex("abc"));
    CHECK(r.outputs[0].flag == "--out");
    write_text(tmp / "c.csv", "a,t,b\n1,2,3\n");
    write_text(tmp / "d.csv", "a,t,b\n1,9,3\n");
    CHECK(sha256_csv_without(tmp / "c.csv", {"t"}) == sha256_csv_without(tmp / "d.csv", {"t"}));
    CHECK(sha256_csv_without(tmp / "c.csv", {"t"}) == sha256_hex("a,b\n1,3\n"));
    CHECK_THROWS_AS(read_manifest(tmp / "none.json"), IoError);
}

TEST_CASE("dataset csv round trip and errors") {
    TempDir tmp;
    ChoiceDataset d;
    d.K = 3;
    d.p = 2;
    d.y = {0, 2, 1};
    for (int i = 0; i < 3; ++i) d.X.push_back(Eigen::MatrixXd::Random(2, 2) * 1e3);
    write_dataset_csv(tmp / "d.csv", d);
    const ChoiceDataset r = read_dataset_csv(tmp / "d.csv");
    CHECK(r.K == 3);
    CHECK(r.p == 2);
    CHECK(r.y == d.y);
    for (int i = 0; i < 3; ++i) CHECK((r.X[i] - d.X[i]).cwiseAbs().maxCoeff() == 0.0);
    write_text(tmp / "bad1.csv", "y,x1_1,x2_1\n1,0.5\n");
    CHECK_THROWS_AS(read_dataset_csv(tmp / "bad1.csv"), IoError);
    write_text(tmp / "bad2.csv", "y,x1_1,x2_1\n4,0.5,1\n");
    CHECK_THROWS_AS(read_dataset_csv(tmp / "bad2.csv"), IoError);
    write_text(tmp / "bad3.csv", "y,x2_1,x1_1\n1,0.5,1\n");
    CHECK_THROWS_AS(read_dataset_csv(tmp / "bad3.csv"), IoError);
    CHECK_THROWS_AS(read_dataset_csv(tmp / "missing.csv"), IoError);
}

TEST_CASE("gen-data writes reproducible shards") {
    TempDir tmp;
    const auto a = cli({"gen-data", "--K", "3", "--count", "10", "--R", "2000", "--seed", "7", "--out", tmp / "a.bin"});
    REQUIRE(a.code == 0);
    const std::size_t K = 3;
    CHECK(fs::file_size(tmp / "a.bin") == 44 + 10 * (K + K * K + K + K + K * K + K * K * K) * 8);
    const Shard s = read_shard(tmp / "a.bin");
    CHECK(s.header.K == 3);
    CHECK(s.header.count == 10);
    CHECK(cli({"gen-data", "--K", "3", "--count", "10", "--R", "2000", "--seed", "7", "--jobs", "3", "--out",
               tmp / "b.bin"})
              .code == 0);
    CHECK(slurp(tmp / "a.bin") == slurp(tmp / "b.bin"));

    const RunManifest m = read_manifest(tmp / "a.bin.manifest.json");
    CHECK(m.command == "gen-data");
    CHECK(m.seed == 7);
    REQUIRE(m.outputs.size() == 1);
    CHECK(m.outputs[0].sha256 == sha256_file(tmp / "a.bin"));

    CHECK(cli({"gen-data", "--K", "3", "--count", "0", "--out", tmp / "e.bin"}).code == 0);
    CHECK(fs::file_size(tmp / "e.bin") == 44);
    CHECK(read_shard(tmp / "e.bin").examples.empty());

    CHECK(cli({"gen-data", "--K", "3", "--count", "1", "--out", tmp / "no/such/dir/x.bin"}).code == kExitIo);
    CHECK(cli({"gen-data", "--K", "3", "--count", "1", "--family", "cauchy", "--out", tmp / "c.bin"}).code == kExitMismatch);
    CHECK(cli({"gen-data", "--count", "1", "--out", tmp / "c.bin"}).code == kExitMismatch);
}

TEST_CASE("verify-manifest checks digests and reruns") {
    TempDir tmp;
    REQUIRE(cli({"gen-data", "--K", "4", "--count", "3", "--R", "500", "--seed", "2", "--out", tmp / "s.bin"}).code == 0);
    const auto ok = cli({"verify-manifest", tmp / "s.bin.manifest.json", "--rerun"});
    CHECK(ok.code == 0);
    CHECK(ok.out.find("reproduced shard") != std::string::npos);
    {
        std::fstream f(tmp / "s.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(60);
        f.put('\x7f');
    }
    CHECK(cli({"verify-manifest", tmp / "s.bin.manifest.json"}).code == kExitMismatch);
    fs::remove(tmp / "s.bin");
    CHECK(cli({"verify-manifest", tmp / "s.bin.manifest.json"}).code == kExitMissing);
    CHECK(cli({"verify-manifest", tmp / "absent.json"}).code == kExitIo);
}

TEST_CASE("train: loss rows, determinism and K checks") {
    TempDir tmp;
    REQUIRE(cli({"gen-data", "--K", "3", "--count", "12", "--R", "1000", "--seed", "1", "--out", tmp / "k3.bin"}).code == 0);
    REQUIRE(cli({"gen-data", "--K", "4", "--count", "12", "--R", "1000", "--seed", "2", "--out", tmp / "k4.bin"}).code == 0);
    write_text(tmp / "t.ini", "[train]\nsteps = 30\nbatch_size = 8\nwarmup_steps = 5\neval_every = 10\neval_count = 2\n");
    const auto a = cli({"train", tmp / "k3.bin", "--config", tmp / "t.ini", "--out", tmp / "w1.json", "--seed", "4", "--quiet"});
    REQUIRE(a.code == 0);
    const auto loss = read_csv(tmp / "w1.loss.csv");
    CHECK(loss.size() == 31);
    CHECK(loss[0][0] == "step");
    CHECK(cli({"train", tmp / "k3.bin", "--config", tmp / "t.ini", "--out", tmp / "w2.json", "--seed", "4", "--quiet"}).code == 0);
    CHECK(slurp(tmp / "w1.json") == slurp(tmp / "w2.json"));
    CHECK(slurp(tmp / "w1.loss.csv") == slurp(tmp / "w2.loss.csv"));
    CHECK(cli({"verify-manifest", tmp / "w1.json.manifest.json", "--rerun"}).code == 0);

    CHECK(cli({"train", tmp / "k3.bin", tmp / "k4.bin", "--config", tmp / "t.ini", "--out", tmp / "w3.json", "--quiet"}).code ==
          kExitMismatch);
    write_text(tmp / "m.ini", "[train]\nsteps = 5\nbatch_size = 4\n[model]\npreset = 5\nmulti_k = true\nKs = 3,4\n");
    CHECK(cli({"train", tmp / "k3.bin", tmp / "k4.bin", "--config", tmp / "m.ini", "--out", tmp / "w4.json", "--quiet"}).code == 0);
    CHECK(load_weights(tmp / "w4.json").config.multi_k);
    write_text(tmp / "m5.ini", "[train]\nsteps = 5\nbatch_size = 4\n[model]\npreset = 5\nmulti_k = true\nKs = 3,4,5\n");
    CHECK(cli({"train", tmp / "k3.bin", tmp / "k4.bin", "--config", tmp / "m5.ini", "--out", tmp / "w5.json", "--quiet"}).code ==
          kExitMismatch);
    write_text(tmp / "bad.ini", "[train]\nstepz = 5\n");
    CHECK(cli({"train", tmp / "k3.bin", "--config", tmp / "bad.ini", "--out", tmp / "w6.json"}).code == kExitMismatch);
    CHECK(cli({"train", tmp / "nope.bin", "--out", tmp / "w7.json"}).code == kExitIo);

    const auto ev = cli({"eval-emulator", "--weights", tmp / "w1.json", "--shard", tmp / "k3.bin", "--out", tmp / "cal.csv"});
    CHECK(ev.code == 0);
    CHECK(read_csv(tmp / "cal.csv").size() == 1 + 12 * 3);
    CHECK(cli({"eval-emulator", "--weights", tmp / "none.json", "--shard", tmp / "k3.bin", "--out", tmp / "cal2.csv"}).code ==
          kExitMissing);
}

TEST_CASE("estimate matches an independent binary probit fit") {
    TempDir tmp;
    REQUIRE(cli({"gen-dataset", "--K", "2", "--n", "3000", "--seed", "9", "--out", tmp / "b.csv"}).code == 0);
    const auto r = cli({"estimate", "--data", tmp / "b.csv", "--lambda", "0", "--out", tmp / "e"});
    REQUIRE(r.code == 0);
    const auto rows = read_csv(tmp / "e.csv");
    REQUIRE(rows.size() == 3);

    // Newton iterations on the binary probit log-likelihood with P(y=1) = Phi(x'beta).
    const ChoiceDataset d = read_dataset_csv(tmp / "b.csv");
    Eigen::Vector2d beta = Eigen::Vector2d::Zero();
    Eigen::Matrix2d opg;
    for (int it = 0; it < 50; ++it) {
        Eigen::Vector2d g = Eigen::Vector2d::Zero();
        Eigen::Matrix2d H = Eigen::Matrix2d::Zero();
        opg.setZero();
        for (std::size_t i = 0; i < d.n(); ++i) {
            const Eigen::Vector2d x = d.X[i].row(0).transpose();
            const double z = x.dot(beta), q = d.y[i] == 0 ? 1.0 : -1.0;
            const double lam = phi(q * z) / Phi(q * z);
            const Eigen::Vector2d s = q * lam * x;
            g += s;
            opg += s * s.transpose();
            H -= lam * (lam + q * z) * x * x.transpose();
        }
        beta -= H.ldlt().solve(g);
    }
    const Eigen::Vector2d se = opg.inverse().diagonal().cwiseSqrt();
    for (int k = 0; k < 2; ++k) {
        CAPTURE(k);
        CHECK(std::stod(rows[static_cast<std::size_t>(k + 1)][1]) == doctest::Approx(beta[k]).epsilon(1e-5));
        CHECK(std::stod(rows[static_cast<std::size_t>(k + 1)][2]) == doctest::Approx(se[k]).epsilon(1e-3));
    }

    CHECK(cli({"estimate", "--data", tmp / "b.csv", "--lambda", "0", "--out", tmp / "e2"}).code == 0);
    CHECK(slurp(tmp / "e.csv") == slurp(tmp / "e2.csv"));
    CHECK(slurp(tmp / "e.txt") == slurp(tmp / "e2.txt"));
    CHECK(cli({"estimate", "--data", tmp / "b.csv", "--K", "3", "--out", tmp / "e3"}).code == kExitMismatch);
    CHECK(cli({"estimate", "--data", tmp / "b.csv", "--backend", "emulator", "--out", tmp / "e4"}).code == kExitMissing);
    CHECK(cli({"estimate", "--data", tmp / "b.csv", "--backend", "emulator", "--weights", tmp / "w.json", "--out", tmp / "e5"})
              .code == kExitMissing);
    CHECK(cli({"estimate", "--data", tmp / "none.csv", "--out", tmp / "e6"}).code == kExitIo);
}

TEST_CASE("simulate: one cell, resume and missing weights") {
    TempDir tmp;
    write_text(tmp / "s.ini",
               "[grid]\nn = 150\nK = 3\nmethod = ghk(10)\n[study]\nreps = 2\nseed = 3\nbootstrap = 20\n[paths]\nmetrics = m.csv\n");
    const auto a = cli({"simulate", tmp / "s.ini", "--jobs", "1", "--quiet"});
    REQUIRE(a.code == 0);
    const auto rows = read_csv(tmp / "m.csv");
    REQUIRE(rows.size() == 2);
    CHECK(rows[1][2] == "ghk(10)");
    const RunManifest m = read_manifest(tmp / "m.csv.manifest.json");
    REQUIRE(m.extra["cells"].size() == 1);
    CHECK(m.extra["cells"][0]["rep_seeds"].size() == 2);

    const std::string before = slurp(tmp / "m.csv");
    const auto b = cli({"simulate", tmp / "s.ini", "--resume", "--quiet"});
    REQUIRE(b.code == 0);
    CHECK(read_manifest(tmp / "m.csv.manifest.json").extra["cells_resumed"].get<int>() == 1);
    CHECK(slurp(tmp / "m.csv") == before);
    CHECK(cli({"verify-manifest", tmp / "m.csv.manifest.json", "--rerun"}).code == 0);

    write_text(tmp / "e.ini", "[grid]\nmethod = emulator\n[study]\nreps = 1\n");
    CHECK(cli({"simulate", tmp / "e.ini"}).code == kExitMissing);
    write_text(tmp / "f.ini", "[grid]\nmethod = emulator\n[study]\nreps = 1\n[weights]\nK3 = nothing.json\n");
    CHECK(cli({"simulate", tmp / "f.ini"}).code == kExitMissing);
    write_text(tmp / "g.ini", "[grid]\nmethod = probit\n");
    CHECK(cli({"simulate", tmp / "g.ini"}).code == kExitMismatch);
}

TEST_CASE("recover-check") {
    TempDir tmp;
    const auto a = cli({"recover-check", "--K", "4", "--instances", "100", "--seed", "3", "--out", tmp / "r.csv"});
    REQUIRE(a.code == 0);
    CHECK(a.out.find("recovered=100") != std::string::npos);
    CHECK(a.out.find("success_rate=1") != std::string::npos);
    const auto b = cli({"recover-check", "--K", "4", "--instances", "100", "--seed", "3", "--out", tmp / "r2.csv"});
    CHECK(slurp(tmp / "r.csv") == slurp(tmp / "r2.csv"));
    CHECK(cli({"recover-check", "--K", "5", "--j", "2", "--instances", "20"}).code == 0);
    CHECK(cli({"recover-check", "--K", "9"}).code == kExitCapability);
    CHECK(cli({"recover-check", "--K", "4", "--j", "4"}).code == kExitMismatch);
}
