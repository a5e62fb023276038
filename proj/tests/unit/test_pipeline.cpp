#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "ckba/ba.hpp"
#include "ckba/error.hpp"
#include "ckba/io.hpp"
#include "ckba/pipeline.hpp"

using namespace ckba;
using namespace ckba::pipeline;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json small_json() {
    return json::parse(R"({
        "seed": 7,
        "grid": {"nx": 12, "ny": 10},
        "n_xi": 12,
        "n_y": [8, 16, 32],
        "wells": {"n_u": 6, "n_diagnostic": 3},
        "q_train": 120,
        "q_test": 80,
        "ba": {"variants": ["1D", "2x1D", "2D"], "level": 3},
        "uq": {"n_y": 16},
        "inversion": {"max_iterations": 400}
    })");
}

ExperimentConfig small_config() { return parse_config(small_json()); }

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("ckba_pipeline_" + name);
    fs::remove_all(p);
    return p;
}

std::vector<std::string> csv_column(const fs::path& p, std::size_t col) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    std::vector<std::string> out;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string cell;
        for (std::size_t i = 0; i <= col; ++i) std::getline(ss, cell, ',');
        out.push_back(cell);
    }
    return out;
}

json read_json(const fs::path& p) { return json::parse(io::read_file(p)); }

// One full run shared by the read-only checks below.
const fs::path& full_run() {
    static const fs::path dir = [] {
        const fs::path d = fresh_dir("full");
        run_all(small_config(), d);
        return d;
    }();
    return dir;
}

}  // namespace

TEST_CASE("stage names round trip") {
    for (Stage s : kAllStages) CHECK(parse_stage(to_string(s)) == s);
    CHECK_THROWS_AS(parse_stage("fit"), ValidationError);
    CHECK(case_name(0) == "unconditional");
    CHECK(case_name(25) == "cond_25");
    CHECK(case_list(small_config()) == std::vector<int>{0, 8, 16, 32});
}

TEST_CASE("synth is deterministic and nests the field subsets") {
    const auto cfg = small_config();
    const fs::path a = fresh_dir("synth_a"), b = fresh_dir("synth_b");
    run_stage(cfg, Stage::synth, a);
    run_stage(cfg, Stage::synth, b);
    for (const auto& e : fs::recursive_directory_iterator(a / "synth")) {
        if (!e.is_regular_file()) continue;
        const fs::path other = b / fs::relative(e.path(), a);
        CHECK(io::read_file(e.path()) == io::read_file(other));
    }
    const Eigen::MatrixXd f8 = io::read_matrix(a / "synth/field_8.ckba");
    const Eigen::MatrixXd f32 = io::read_matrix(a / "synth/field_32.ckba");
    CHECK(f32.topRows(8) == f8);

    const json obs = read_json(a / "synth/observations.json");
    const auto wells = obs.at("well_cells").get<std::vector<long>>();
    CHECK(wells.size() == 6);
    CHECK(std::set<long>(wells.begin(), wells.end()).size() == 6);
    CHECK(obs.at("diagnostic_wells").size() == 3);
}

TEST_CASE("exact field data without noise") {
    auto j = small_json();
    j["sigma_y"] = 0.0;
    j["inversion"]["unconditional"] = false;
    const fs::path d = fresh_dir("noiseless");
    run_stage(parse_config(j), Stage::synth, d);
    const Eigen::VectorXd y = io::read_matrix(d / "synth/y_ref.ckba").col(0);
    const Eigen::MatrixXd f = io::read_matrix(d / "synth/field_16.ckba");
    for (Eigen::Index i = 0; i < f.rows(); ++i) CHECK(f(i, 1) == y(static_cast<Eigen::Index>(f(i, 0))));
}

TEST_CASE("without nesting every subset is drawn independently") {
    auto j = small_json();
    j["nested_sampling"] = false;
    const fs::path d = fresh_dir("unnested");
    run_stage(parse_config(j), Stage::synth, d);
    const Eigen::MatrixXd f8 = io::read_matrix(d / "synth/field_8.ckba");
    const Eigen::MatrixXd f32 = io::read_matrix(d / "synth/field_32.ckba");
    CHECK(f32.topRows(8).col(0) != f8.col(0));
}

TEST_CASE("missing, stale and tampered upstream artifacts are rejected") {
    const auto cfg = small_config();
    const fs::path d = fresh_dir("stale");
    CHECK_THROWS_WITH_AS(run_stage(cfg, Stage::eigs, d), doctest::Contains("run `ckba synth` first"), ValidationError);
    run_stage(cfg, Stage::synth, d);
    run_stage(cfg, Stage::eigs, d);

    // Another configuration cannot consume these artifacts.
    auto j = small_json();
    j["seed"] = 8;
    CHECK_THROWS_WITH_AS(run_stage(parse_config(j), Stage::ensemble, d),
                         doctest::Contains("different configuration"), ValidationError);

    // Rerunning synth under another seed makes eigs stale.
    run_stage(parse_config(j), Stage::synth, d);
    CHECK_THROWS_WITH_AS(run_stage(parse_config(j), Stage::ensemble, d), doctest::Contains("eigs"), ValidationError);

    // Back to the original inputs: synth output is identical, so eigs is current again.
    run_stage(cfg, Stage::synth, d);
    CHECK_NOTHROW(run_stage(cfg, Stage::ensemble, d));

    // An eigs record that consumed some other synth output is stale.
    json m = read_json(d / "manifest.json");
    m["stages"]["eigs"]["upstream"]["synth"] = "0000";
    io::write_file_atomic(d / "manifest.json", m.dump(2));
    CHECK_THROWS_WITH_AS(run_stage(cfg, Stage::ensemble, d), doctest::Contains("stale"), ValidationError);
    run_stage(cfg, Stage::eigs, d);
    CHECK_NOTHROW(run_stage(cfg, Stage::ensemble, d));

    // Tampering with a recorded file.
    {
        std::ofstream out(d / "eigs/cond_8/eigenvalues.ckba", std::ios::app | std::ios::binary);
        out << "x";
    }
    CHECK_THROWS_WITH_AS(run_stage(cfg, Stage::train, d), doctest::Contains("modified"), ValidationError);
    fs::remove(d / "eigs/cond_8/eigenvalues.ckba");
    CHECK_THROWS_WITH_AS(run_stage(cfg, Stage::train, d), doctest::Contains("missing"), ValidationError);
}

TEST_CASE("stages are idempotent") {
    const auto cfg = small_config();
    const fs::path d = fresh_dir("idem");
    run_stage(cfg, Stage::synth, d);
    run_stage(cfg, Stage::eigs, d);
    run_stage(cfg, Stage::ensemble, d);
    const auto before = read_json(d / "manifest.json").at("stages").at("ensemble").at("artifacts");
    run_stage(cfg, Stage::ensemble, d);
    CHECK(read_json(d / "manifest.json").at("stages").at("ensemble").at("artifacts") == before);
}

TEST_CASE("report tables are ordered by N_y") {
    const fs::path& d = full_run();
    for (const char* table : {"rmse_test.csv", "rmse_train.csv", "variance.csv"}) {
        const auto col = csv_column(d / "report" / table, 0);
        REQUIRE(col.size() == 4);
        for (std::size_t i = 1; i < col.size(); ++i) CHECK(std::stoi(col[i]) > std::stoi(col[i - 1]));
    }
    const auto inv = csv_column(d / "report/inversion.csv", 0);
    for (std::size_t i = 1; i < inv.size(); ++i) CHECK(std::stoi(inv[i]) >= std::stoi(inv[i - 1]));
    // Per N_y: 2 conditional BA-MAP, CKLEMAP, 2 unconditional BA-MAP.
    CHECK(inv.size() == 3 * 5);
}

TEST_CASE("every reported artifact traces to a recorded stage") {
    const fs::path& d = full_run();
    const json manifest = read_json(d / "manifest.json");
    const json report = read_json(d / "report/report.json");
    CHECK(report.at("config_hash") == manifest.at("config_hash"));
    CHECK_FALSE(report.at("sources").empty());
    for (const auto& [path, src] : report.at("sources").items()) {
        const auto& stage = manifest.at("stages").at(src.at("stage").get<std::string>());
        CHECK(stage.at("config_hash") == manifest.at("config_hash"));
        REQUIRE(stage.at("artifacts").contains(path));
        CHECK(io::sha256_file(d / path) == stage.at("artifacts").at(path).get<std::string>());
    }
    for (const auto& [name, stage] : manifest.at("stages").items())
        for (const auto& [path, sum] : stage.at("artifacts").items()) CHECK(fs::exists(d / path));
}

TEST_CASE("query accounting") {
    const fs::path& d = full_run();
    const auto cfg = small_config();
    const json stages = read_json(d / "manifest.json").at("stages");
    CHECK(stages.at("synth").at("queries").at("reference") == 1);
    CHECK(stages.at("ensemble").at("queries").at("cond_8/train") == cfg.q_train);
    for (int ny : case_list(cfg))
        for (const auto& v : cfg.ba.variants) {
            const auto s = ba::load_surrogate(d / "train" / case_name(ny) / v);
            std::int64_t quadrature = 0;
            for (const auto& e : s.entries) quadrature += e.queries;
            const auto& q = stages.at("train").at("queries");
            CHECK(q.at(case_name(ny) + "/" + v).get<std::int64_t>() == cfg.q_train + quadrature);
            CHECK(q.at(case_name(ny) + "/" + v + "/solver_calls").get<std::int64_t>() == quadrature);
        }
}

TEST_CASE("trained surrogates satisfy the ridge invariants") {
    const fs::path& d = full_run();
    const auto cfg = small_config();
    for (int ny : case_list(cfg))
        for (const auto& v : cfg.ba.variants) {
            const auto s = ba::load_surrogate(d / "train" / case_name(ny) / v);
            CHECK(s.n_outputs() == cfg.wells.n_u);
            for (const auto& e : s.entries) {
                const Eigen::MatrixXd gram = e.rows * e.rows.transpose();
                CHECK((gram - Eigen::MatrixXd::Identity(e.k(), e.k())).cwiseAbs().maxCoeff() < 1e-10);
                if (s.variant == ba::Variant::kx1d)
                    for (std::size_t k = 1; k < e.train_rmse.size(); ++k)
                        CHECK(e.train_rmse[k] <= e.train_rmse[k - 1] + 1e-10);
            }
        }
}

TEST_CASE("a second full run reproduces the report byte for byte") {
    const fs::path& a = full_run();
    const fs::path b = fresh_dir("full_again");
    run_all(small_config(), b);
    const auto files = report_files(a);
    CHECK(files == report_files(b));
    CHECK(files.size() == 5 + 2 * 3);
    for (const auto& f : files) CHECK(io::read_file(a / "report" / f) == io::read_file(b / "report" / f));
}
