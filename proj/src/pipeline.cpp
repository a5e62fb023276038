#include "ckba/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include <Eigen/Cholesky>

#include "ckba/ba.hpp"
#include "ckba/darcy.hpp"
#include "ckba/error.hpp"
#include "ckba/gp.hpp"
#include "ckba/inverse.hpp"
#include "ckba/io.hpp"
#include "ckba/kle.hpp"
#include "ckba/parallel.hpp"
#include "ckba/rng.hpp"
#include "ckba/uq.hpp"

#ifndef CKBA_VERSION
#define CKBA_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace ckba::pipeline {

std::string_view to_string(Stage stage) {
    switch (stage) {
        case Stage::synth: return "synth";
        case Stage::eigs: return "eigs";
        case Stage::ensemble: return "ensemble";
        case Stage::train: return "train";
        case Stage::uq: return "uq";
        case Stage::invert: return "invert";
        case Stage::report: return "report";
    }
    return "?";
}

Stage parse_stage(std::string_view name) {
    for (Stage s : kAllStages)
        if (to_string(s) == name) return s;
    throw ValidationError("unknown stage '" + std::string(name) + "'");
}

std::vector<Stage> upstream_of(Stage stage) {
    switch (stage) {
        case Stage::synth: return {};
        case Stage::eigs: return {Stage::synth};
        case Stage::ensemble: return {Stage::eigs};
        case Stage::train: return {Stage::eigs, Stage::ensemble};
        case Stage::uq: return {Stage::synth, Stage::ensemble, Stage::train};
        case Stage::invert: return {Stage::synth, Stage::eigs, Stage::train};
        case Stage::report: return {Stage::synth, Stage::ensemble, Stage::train, Stage::uq, Stage::invert};
    }
    return {};
}

std::string case_name(int n_y) { return n_y == 0 ? "unconditional" : "cond_" + std::to_string(n_y); }

std::vector<int> case_list(const ExperimentConfig& config) {
    std::vector<int> cases{0};
    cases.insert(cases.end(), config.n_y.begin(), config.n_y.end());
    return cases;
}

// ---------------------------------------------------------------- manifest

json StageRecord::to_json() const {
    return {{"config_hash", config_hash},
            {"wall_seconds", wall_seconds},
            {"artifacts", artifacts},
            {"queries", queries},
            {"upstream", upstream}};
}

StageRecord StageRecord::from_json(const json& j) {
    StageRecord r;
    r.config_hash = j.at("config_hash").get<std::string>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    r.queries = j.at("queries").get<std::map<std::string, std::int64_t>>();
    r.upstream = j.at("upstream").get<std::map<std::string, std::string>>();
    return r;
}

std::string StageRecord::fingerprint() const {
    return io::sha256_hex(json{{"config_hash", config_hash}, {"artifacts", artifacts}}.dump());
}

json RunManifest::to_json() const {
    json stages_j = json::object();
    for (const auto& [name, rec] : stages) stages_j[name] = rec.to_json();
    return {{"tool_version", tool_version}, {"config_hash", config_hash}, {"stages", stages_j}};
}

RunManifest RunManifest::from_json(const json& j) {
    RunManifest m;
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& [name, rec] : j.at("stages").items()) m.stages[name] = StageRecord::from_json(rec);
    return m;
}

Workspace::Workspace(fs::path root, const ExperimentConfig& config)
    : root_(std::move(root)), config_(config), config_hash_(config.hash()) {
    config_.validate();
    const fs::path mpath = root_ / "manifest.json";
    if (fs::exists(mpath)) {
        try {
            manifest_ = RunManifest::from_json(json::parse(io::read_file(mpath)));
        } catch (const json::exception& e) {
            throw ValidationError("unreadable manifest " + mpath.string() + ": " + e.what());
        }
    }
    manifest_.tool_version = CKBA_VERSION;
}

void Workspace::verify(Stage stage) const {
    const std::string name(to_string(stage));
    const auto it = manifest_.stages.find(name);
    if (it == manifest_.stages.end()) throw ValidationError("stage '" + name + "' has not been run");
    for (const auto& [rel, sum] : it->second.artifacts) {
        const fs::path p = root_ / rel;
        if (!fs::exists(p))
            throw ValidationError("stage '" + name + "': artifact " + rel + " is missing; rerun `ckba " + name + "`");
        if (io::sha256_file(p) != sum)
            throw ValidationError("stage '" + name + "': artifact " + rel +
                                  " was modified after it was written; rerun `ckba " + name + "`");
    }
}

void Workspace::require(Stage stage, Stage upstream) const {
    const std::string me(to_string(stage)), up(to_string(upstream));
    const auto it = manifest_.stages.find(up);
    if (it == manifest_.stages.end())
        throw ValidationError("stage '" + me + "' needs the output of '" + up + "'; run `ckba " + up + "` first");
    if (it->second.config_hash != config_hash_)
        throw ValidationError("stage '" + me + "': the output of '" + up +
                              "' was produced by a different configuration (hash " +
                              it->second.config_hash.substr(0, 12) + " vs " + config_hash_.substr(0, 12) +
                              "); rerun `ckba " + up + "`");
    verify(upstream);
    // The upstream stage must itself be consistent with what it consumed.
    for (Stage grand : upstream_of(upstream)) {
        const std::string g(to_string(grand));
        const auto git = manifest_.stages.find(g);
        const auto rec = it->second.upstream.find(g);
        if (git == manifest_.stages.end() || rec == it->second.upstream.end() ||
            rec->second != git->second.fingerprint())
            throw ValidationError("stage '" + me + "': the output of '" + up + "' is stale because '" + g +
                                  "' changed after it ran; rerun `ckba " + up + "`");
    }
}

void Workspace::commit(Stage stage, StageRecord record) {
    record.config_hash = config_hash_;
    for (Stage up : upstream_of(stage)) {
        const std::string u(to_string(up));
        record.upstream[u] = manifest_.stages.at(u).fingerprint();
    }
    manifest_.config_hash = config_hash_;
    manifest_.stages[std::string(to_string(stage))] = std::move(record);
    save();
}

void Workspace::save() const {
    fs::create_directories(root_);
    io::write_file_atomic(root_ / "manifest.json", manifest_.to_json().dump(2) + "\n");
}

// ------------------------------------------------------------------ helpers

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

void write_json(const fs::path& p, const json& j) {
    fs::create_directories(p.parent_path());
    io::write_file_atomic(p, j.dump(2) + "\n");
}

json read_json(const fs::path& p) {
    try {
        return json::parse(io::read_file(p));
    } catch (const json::exception& e) {
        throw ValidationError("bad JSON in " + p.string() + ": " + e.what());
    }
}

class Csv {
public:
    explicit Csv(const std::vector<std::string>& header) { row(header); }
    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
        out_ << "\n";
    }
    void save(const fs::path& p) const {
        fs::create_directories(p.parent_path());
        io::write_file_atomic(p, out_.str());
    }

private:
    std::ostringstream out_;
};

void write_matrix(const fs::path& p, const Eigen::MatrixXd& m) {
    fs::create_directories(p.parent_path());
    io::write_matrix(p, m);
}

std::vector<Eigen::Index> to_index(const Eigen::VectorXd& v) {
    std::vector<Eigen::Index> out(static_cast<std::size_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<Eigen::Index>(v(i));
    return out;
}

gp::Points points_of(const darcy::GridGeometry& grid, const std::vector<Eigen::Index>& cells) {
    gp::Points p(static_cast<Eigen::Index>(cells.size()), 2);
    for (std::size_t i = 0; i < cells.size(); ++i) p.row(static_cast<Eigen::Index>(i)) = grid.center(cells[i]).transpose();
    return p;
}

// Unbiased enough for shuffling a few thousand cells, and identical on every
// standard library (unlike std::shuffle).
std::vector<Eigen::Index> permutation(Rng& rng, Eigen::Index n) {
    std::vector<Eigen::Index> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), Eigen::Index{0});
    for (Eigen::Index i = n - 1; i > 0; --i) {
        const auto j = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(i + 1));
        std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
    }
    return p;
}

Eigen::VectorXd normals(Rng& rng, Eigen::Index n) {
    std::normal_distribution<double> N;
    Eigen::VectorXd v(n);
    for (auto& x : v) x = N(rng);
    return v;
}

double uniform(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Exact prior draw through a Cholesky factor of the full covariance.
Eigen::VectorXd draw_prior_field(const ExperimentConfig& c, const gp::Points& centers, Rng& rng) {
    const Eigen::MatrixXd k = gp::kernel_matrix(c.kernel, centers, centers);
    const Eigen::Index n = k.rows();
    double jitter = 0.0;
    for (int attempt = 0; attempt < 12; ++attempt) {
        Eigen::LLT<Eigen::MatrixXd> llt(k + jitter * Eigen::MatrixXd::Identity(n, n));
        if (llt.info() == Eigen::Success) {
            const Eigen::VectorXd z = normals(rng, n);
            return Eigen::VectorXd::Constant(n, c.mean) + llt.matrixL() * z;
        }
        jitter = jitter == 0.0 ? 1e-12 * c.kernel.variance : jitter * 10.0;
    }
    throw NumericalError("reference field covariance could not be factored");
}

struct WellLayout {
    std::vector<Eigen::Index> cells;
    std::vector<int> diagnostic;  // indices into cells
};

/// Jittered lattice over the central 80% of the domain, one well per cell.
WellLayout place_wells(const ExperimentConfig& c, Rng& rng) {
    const auto& g = c.grid;
    const int n = c.wells.n_u;
    const int nc = std::max(1, static_cast<int>(std::ceil(std::sqrt(n * g.lx / g.ly))));
    const int nr = (n + nc - 1) / nc;
    const double sx = 0.8 * g.lx / nc, sy = 0.8 * g.ly / nr;
    WellLayout w;
    std::set<Eigen::Index> taken;
    for (int k = 0; k < n; ++k) {
        const int i = k % nc, j = k / nc;
        const double jx = (2.0 * uniform(rng) - 1.0) * 0.5 * c.wells.jitter * sx;
        const double jy = (2.0 * uniform(rng) - 1.0) * 0.5 * c.wells.jitter * sy;
        const gp::Point p(0.1 * g.lx + (i + 0.5) * sx + jx, 0.1 * g.ly + (j + 0.5) * sy + jy);
        Eigen::Index cell = g.locate(p);
        if (taken.count(cell)) {
            // Nearest free cell.
            double best = INFINITY;
            for (Eigen::Index q = 0; q < g.n_cells(); ++q) {
                if (taken.count(q)) continue;
                const double d = (g.center(q) - p).squaredNorm();
                if (d < best) best = d, cell = q;
            }
        }
        taken.insert(cell);
        w.cells.push_back(cell);
    }

    // Diagnostic subset: greedy k-center starting nearest the domain center.
    const gp::Point mid(0.5 * g.lx, 0.5 * g.ly);
    auto dist = [&](int a, const gp::Point& p) { return (g.center(w.cells[static_cast<std::size_t>(a)]) - p).norm(); };
    int first = 0;
    for (int k = 1; k < n; ++k)
        if (dist(k, mid) < dist(first, mid)) first = k;
    w.diagnostic.push_back(first);
    std::vector<double> dmin(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) dmin[static_cast<std::size_t>(k)] = dist(k, g.center(w.cells[static_cast<std::size_t>(first)]));
    while (static_cast<int>(w.diagnostic.size()) < std::min(n, c.wells.n_diagnostic)) {
        const int next = static_cast<int>(std::max_element(dmin.begin(), dmin.end()) - dmin.begin());
        w.diagnostic.push_back(next);
        for (int k = 0; k < n; ++k)
            dmin[static_cast<std::size_t>(k)] =
                std::min(dmin[static_cast<std::size_t>(k)], dist(k, g.center(w.cells[static_cast<std::size_t>(next)])));
    }
    return w;
}

// ------------------------------------------------------------ shared loads

struct Observations {
    std::vector<Eigen::Index> wells;
    std::vector<int> diagnostic;
    Eigen::VectorXd y_ref;
    Eigen::VectorXd u_true;
    Eigen::VectorXd u_obs;
    std::map<int, std::vector<Eigen::Index>> field_cells;
    std::map<int, Eigen::VectorXd> field_values;
};

Observations load_observations(const Workspace& ws) {
    Observations o;
    const json j = read_json(ws.path("synth/observations.json"));
    o.wells = j.at("well_cells").get<std::vector<Eigen::Index>>();
    o.diagnostic = j.at("diagnostic_wells").get<std::vector<int>>();
    o.y_ref = io::read_matrix(ws.path("synth/y_ref.ckba")).col(0);
    o.u_true = io::read_matrix(ws.path("synth/u_true.ckba")).col(0);
    o.u_obs = io::read_matrix(ws.path("synth/u_obs.ckba")).col(0);
    for (int ny : ws.config().n_y) {
        const Eigen::MatrixXd f = io::read_matrix(ws.path("synth/field_" + std::to_string(ny) + ".ckba"));
        o.field_cells[ny] = to_index(f.col(0));
        o.field_values[ny] = f.col(1);
    }
    return o;
}

std::shared_ptr<const kle::FieldBasis> load_case_basis(const Workspace& ws, int ny) {
    return std::make_shared<const kle::FieldBasis>(
        kle::load_basis(ws.path("eigs/" + case_name(ny)), ws.config().grid.hash()));
}

ba::EnsembleDataset load_ensemble(const Workspace& ws, int ny, ba::DatasetRole role) {
    const std::string tag = role == ba::DatasetRole::train ? "train" : "test";
    const std::string dir = "ensemble/" + case_name(ny) + "/";
    ba::EnsembleDataset d;
    d.xi = io::read_matrix(ws.path(dir + "xi_" + tag + ".ckba"));
    d.u = io::read_matrix(ws.path(dir + "u_" + tag + ".ckba"));
    d.role = role;
    d.validate();
    return d;
}

std::shared_ptr<const ba::RidgeSurrogate> load_case_surrogate(const Workspace& ws, int ny, const std::string& variant) {
    return std::make_shared<const ba::RidgeSurrogate>(
        ba::load_surrogate(ws.path("train/" + case_name(ny) + "/" + variant)));
}

darcy::ObservableFn observable(const ExperimentConfig& c, std::shared_ptr<const kle::FieldBasis> basis,
                               const std::vector<Eigen::Index>& wells) {
    return darcy::ObservableFn(c.grid, c.bvp, std::move(basis), wells);
}

// ------------------------------------------------------------------ stages

void stage_synth(Workspace& ws, StageRecord& rec, const Logger& log) {
    const auto& c = ws.config();
    const gp::Points centers = c.grid.centers();

    Rng ref_rng = make_stream(c.seed, "synth/reference");
    const Eigen::VectorXd y_ref = draw_prior_field(c, centers, ref_rng);
    log("synth: reference field on " + std::to_string(y_ref.size()) + " cells");

    Rng well_rng = make_stream(c.seed, "synth/wells");
    const WellLayout wells = place_wells(c, well_rng);

    const Eigen::VectorXd head = darcy::solve_head(c.grid, c.bvp, y_ref);
    rec.queries["reference"] = 1;
    const Eigen::VectorXd u_true = darcy::observe(head, wells.cells);
    Rng head_noise = make_stream(c.seed, "synth/head-noise");
    const Eigen::VectorXd u_obs = u_true + c.sigma_u * normals(head_noise, u_true.size());

    // Direct field observations: one shared ordering when nested, otherwise
    // an independent ordering per N_y.
    const Eigen::Index n_cells = c.grid.n_cells();
    Rng loc_rng = make_stream(c.seed, "synth/field-locations");
    Rng noise_rng = make_stream(c.seed, "synth/field-noise");
    std::vector<Eigen::Index> order = permutation(loc_rng, n_cells);
    Eigen::VectorXd noise = normals(noise_rng, n_cells);
    for (int ny : c.n_y) {
        if (!c.nested_sampling) {
            Rng r1 = make_stream(c.seed, "synth/field-locations/" + std::to_string(ny));
            Rng r2 = make_stream(c.seed, "synth/field-noise/" + std::to_string(ny));
            order = permutation(r1, n_cells);
            noise = normals(r2, n_cells);
        }
        Eigen::MatrixXd f(ny, 2);
        for (int i = 0; i < ny; ++i) {
            const Eigen::Index cell = order[static_cast<std::size_t>(i)];
            f(i, 0) = static_cast<double>(cell);
            f(i, 1) = y_ref(cell) + c.sigma_y * noise(i);
        }
        write_matrix(ws.path("synth/field_" + std::to_string(ny) + ".ckba"), f);
    }

    json wj = json::array();
    for (auto cell : wells.cells) {
        const gp::Point p = c.grid.center(cell);
        wj.push_back({{"cell", cell}, {"x", p(0)}, {"y", p(1)}});
    }
    write_json(ws.path("synth/observations.json"), {{"well_cells", wells.cells},
                                                     {"wells", wj},
                                                     {"diagnostic_wells", wells.diagnostic},
                                                     {"sigma_u", c.sigma_u},
                                                     {"sigma_y", c.sigma_y},
                                                     {"nested_sampling", c.nested_sampling}});
    write_matrix(ws.path("synth/y_ref.ckba"), y_ref);
    write_matrix(ws.path("synth/head_ref.ckba"), head);
    write_matrix(ws.path("synth/u_true.ckba"), u_true);
    write_matrix(ws.path("synth/u_obs.ckba"), u_obs);
}

void stage_eigs(Workspace& ws, StageRecord&, const Logger& log) {
    const auto& c = ws.config();
    const Observations obs = load_observations(ws);
    const gp::Points centers = c.grid.centers();
    const Eigen::VectorXd w = c.grid.cell_areas();
    const gp::GpModel prior(c.kernel, c.mean);
    const std::vector<int> cases = case_list(c);
    std::vector<kle::FieldBasis> bases(cases.size());
    parallel_for(cases.size(), [&](std::size_t i) {
        const int ny = cases[i];
        const gp::GpModel model =
            ny == 0 ? prior
                    : prior.condition(points_of(c.grid, obs.field_cells.at(ny)), obs.field_values.at(ny),
                                      c.sigma_y * c.sigma_y);
        auto pairs = kle::eigensolve(gp::cond_cov_matrix(model, centers), w, c.n_xi);
        bases[i] = kle::make_basis(ny == 0 ? kle::BasisKind::unconditional : kle::BasisKind::conditional,
                                   model.mean(centers), std::move(pairs), w);
    });
    for (std::size_t i = 0; i < cases.size(); ++i) {
        kle::save_basis(ws.path("eigs/" + case_name(cases[i])), bases[i], c.grid.hash());
        log("eigs: " + case_name(cases[i]) + " leading eigenvalue " + fmt(bases[i].eigenvalues(0)));
    }
}

void stage_ensemble(Workspace& ws, StageRecord& rec, const Logger& log) {
    const auto& c = ws.config();
    const json oj = read_json(ws.path("synth/observations.json"));
    const auto wells = oj.at("well_cells").get<std::vector<Eigen::Index>>();
    for (int ny : case_list(c)) {
        const std::string name = case_name(ny);
        const auto fn = observable(c, load_case_basis(ws, ny), wells);
        for (const char* role : {"train", "test"}) {
            const int q = std::string(role) == "train" ? c.q_train : c.q_test;
            Rng rng = make_stream(c.seed, "ensemble/" + name + "/" + role);
            const Eigen::MatrixXd xi = kle::sample_coeffs(rng, q, c.n_xi);
            Eigen::MatrixXd u(static_cast<Eigen::Index>(wells.size()), q);
            parallel_for(static_cast<std::size_t>(q), [&](std::size_t j) {
                u.col(static_cast<Eigen::Index>(j)) = fn(xi.col(static_cast<Eigen::Index>(j)));
            });
            write_matrix(ws.path("ensemble/" + name + "/xi_" + role + ".ckba"), xi);
            write_matrix(ws.path("ensemble/" + name + "/u_" + role + ".ckba"), u);
            rec.queries[name + "/" + role] = q;
        }
        log("ensemble: " + name + " done");
    }
}

void stage_train(Workspace& ws, StageRecord& rec, const Logger& log) {
    const auto& c = ws.config();
    const json oj = read_json(ws.path("synth/observations.json"));
    const auto wells = oj.at("well_cells").get<std::vector<Eigen::Index>>();
    for (int ny : case_list(c)) {
        const std::string name = case_name(ny);
        const auto train = load_ensemble(ws, ny, ba::DatasetRole::train);
        const auto basis = load_case_basis(ws, ny);
        for (const auto& vname : c.ba.variants) {
            const VariantSpec v = parse_variant_name(vname);
            const auto fn = observable(c, basis, wells);
            const ba::VectorFn g = [fn](const Eigen::VectorXd& xi) { return fn(xi); };
            ba::FitOptions opt;
            opt.K = v.K;
            opt.variant = v.variant;
            opt.pce = {c.ba.degree, c.ba.level};
            opt.direction = {c.ba.tau, c.ba.penalize_bias, c.ba.debias};
            const auto t0 = std::chrono::steady_clock::now();
            const ba::RidgeSurrogate s = ba::fit(g, train, opt);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            ba::save_surrogate(ws.path("train/" + name + "/" + vname), s);
            rec.queries[name + "/" + vname] = s.total_queries();
            rec.queries[name + "/" + vname + "/solver_calls"] = fn.query_count();
            log("train: " + name + " " + vname + " queries " + std::to_string(s.total_queries()) + " (" +
                fmt(secs) + " s)");
        }
    }
}

void stage_uq(Workspace& ws, StageRecord&, const Logger& log) {
    const auto& c = ws.config();
    const Observations obs = load_observations(ws);
    json summary = json::object();
    json variances = json::object();
    for (int ny : case_list(c)) {
        const auto test = load_ensemble(ws, ny, ba::DatasetRole::test);
        json v = json::array();
        for (int d : obs.diagnostic) {
            const Eigen::VectorXd row = test.u.row(d).transpose();
            v.push_back((row.array() - row.mean()).square().sum() / static_cast<double>(row.size() - 1));
        }
        variances[case_name(ny)] = v;
    }
    for (int ny : {0, c.uq.n_y}) {
        const std::string name = case_name(ny);
        const auto test = load_ensemble(ws, ny, ba::DatasetRole::test);
        std::vector<Eigen::MatrixXd> preds;
        for (const auto& vname : c.ba.variants) preds.push_back(ba::predict(*load_case_surrogate(ws, ny, vname), test.xi));
        json kl = json::object();
        for (std::size_t k = 0; k < obs.diagnostic.size(); ++k) {
            const int d = obs.diagnostic[k];
            const auto mc = uq::kde(test.u.row(d).transpose(), c.uq.kde_points);
            std::vector<uq::PdfEstimate> est;
            double lo = mc.grid(0), hi = mc.grid(mc.grid.size() - 1);
            for (std::size_t v = 0; v < preds.size(); ++v) {
                est.push_back(uq::kde(preds[v].row(d).transpose(), c.uq.kde_points));
                kl[c.ba.variants[v]].push_back(uq::kl_divergence(est.back(), mc, c.uq.kl_points));
                lo = std::min(lo, est.back().grid(0));
                hi = std::max(hi, est.back().grid(est.back().grid.size() - 1));
            }
            std::vector<std::string> header{"u", "mc"};
            for (const auto& vname : c.ba.variants) header.push_back(vname);
            Csv csv(header);
            const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(c.uq.kde_points, lo, hi);
            const Eigen::VectorXd pm = mc.evaluate(x);
            std::vector<Eigen::VectorXd> pv;
            for (const auto& e : est) pv.push_back(e.evaluate(x));
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                std::vector<std::string> r{fmt(x(i)), fmt(pm(i))};
                for (const auto& p : pv) r.push_back(fmt(p(i)));
                csv.row(r);
            }
            csv.save(ws.path("uq/" + name + "/pdf_well" + std::to_string(d) + ".csv"));
        }
        summary[name] = {{"kl", kl}};
        log("uq: " + name + " done");
    }
    write_json(ws.path("uq/summary.json"), {{"diagnostic_wells", obs.diagnostic},
                                            {"variance", variances},
                                            {"cases", summary},
                                            {"uq_case", case_name(c.uq.n_y)}});
}

struct InversionTask {
    std::string label;   // cond_<n> or unconditional_<n>
    std::string method;  // BA-MAP-<variant> or CKLEMAP
    int n_y = 0;
    bool conditional = true;
    std::string variant;
};

void stage_invert(Workspace& ws, StageRecord& rec, const Logger& log) {
    const auto& c = ws.config();
    const auto& ic = c.inversion;
    const Observations obs = load_observations(ws);
    std::vector<InversionTask> tasks;
    for (int ny : c.n_y) {
        for (const auto& v : ic.variants) tasks.push_back({case_name(ny), "BA-MAP-" + v, ny, true, v});
        if (ic.cklemap) tasks.push_back({case_name(ny), "CKLEMAP", ny, true, ""});
        if (ic.unconditional)
            for (const auto& v : ic.variants)
                tasks.push_back({"unconditional_" + std::to_string(ny), "BA-MAP-" + v, ny, false, v});
    }
    // Heaviest first so that the tail of the parallel loop stays short.
    std::stable_sort(tasks.begin(), tasks.end(),
                     [](const auto& a, const auto& b) { return (a.method == "CKLEMAP") > (b.method == "CKLEMAP"); });

    std::vector<inverse::InversionResult> results(tasks.size());
    std::vector<std::int64_t> queries(tasks.size(), 0);
    inverse::SolverOptions opts;
    opts.gtol = ic.gtol;
    opts.max_iterations = ic.max_iterations;
    parallel_for(tasks.size(), [&](std::size_t i) {
        const auto& t = tasks[i];
        const int basis_case = t.conditional ? t.n_y : 0;
        const auto basis = load_case_basis(ws, basis_case);
        inverse::InverseProblemSpec spec;
        spec.u_obs = obs.u_obs;
        spec.sigma_u = c.sigma_u;
        spec.gamma = t.conditional ? ic.gamma_conditional : ic.gamma_unconditional;
        if (!t.conditional) {
            spec.field_cells = obs.field_cells.at(t.n_y);
            spec.y_obs = obs.field_values.at(t.n_y);
            spec.sigma_y = c.sigma_y;
        }
        const Eigen::VectorXd xi0 = Eigen::VectorXd::Zero(basis->n_terms());
        if (t.method == "CKLEMAP") {
            const auto fn = observable(c, basis, obs.wells);
            results[i] = inverse::solve_map(spec, inverse::pde_forward(fn), *basis, xi0, opts, &obs.y_ref);
            queries[i] = fn.query_count();
        } else {
            const auto s = load_case_surrogate(ws, basis_case, t.variant);
            results[i] = inverse::solve_map(spec, inverse::surrogate_forward(s), *basis, xi0, opts, &obs.y_ref);
        }
    });

    const auto& g = c.grid;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const auto& t = tasks[i];
        const auto& r = results[i];
        const std::string dir = "invert/" + t.label + "/" + t.method + "/";
        write_json(ws.path(dir + "result.json"), {{"method", t.method},
                                                  {"n_y", t.n_y},
                                                  {"conditional", t.conditional},
                                                  {"iterations", r.iterations},
                                                  {"accepted_steps", r.accepted_steps},
                                                  {"objective", r.objective},
                                                  {"gradient_norm", r.gradient_norm},
                                                  {"converged", r.converged},
                                                  {"stop_reason", r.stop_reason},
                                                  {"rel_l2", r.errors->rel_l2},
                                                  {"linf", r.errors->linf},
                                                  {"solver_queries", queries[i]},
                                                  {"config_hash", ws.config().hash()}});
        write_matrix(ws.path(dir + "xi.ckba"), r.xi);
        write_matrix(ws.path(dir + "field.ckba"), r.field);
        // Point-error map, one CSV row per grid row (bottom row first).
        std::vector<std::string> header;
        for (int col = 0; col < g.nx; ++col) header.push_back("i" + std::to_string(col));
        Csv csv(header);
        for (int row = 0; row < g.ny; ++row) {
            std::vector<std::string> cells;
            for (int col = 0; col < g.nx; ++col) {
                const auto k = g.index(col, row);
                cells.push_back(fmt(std::abs(r.field(k) - obs.y_ref(k))));
            }
            csv.row(cells);
        }
        csv.save(ws.path(dir + "error_map.csv"));
        if (queries[i]) rec.queries[t.label + "/" + t.method] = queries[i];
        log("invert: " + t.label + " " + t.method + " iterations " + std::to_string(r.iterations) + " rel_l2 " +
            fmt(r.errors->rel_l2) + (r.converged ? "" : " (not converged: " + r.stop_reason + ")"));
    }
}

void stage_report(Workspace& ws, StageRecord&, const Logger& log) {
    const auto& c = ws.config();
    const Observations obs = load_observations(ws);
    std::vector<std::string> sources{"synth/observations.json", "uq/summary.json"};
    const std::vector<int> cases = case_list(c);

    // RMSE against the training and testing ensembles.
    for (const char* role : {"test", "train"}) {
        std::vector<std::string> header{"n_y", "case"};
        for (const auto& v : c.ba.variants) header.push_back(v + "_mean");
        for (const auto& v : c.ba.variants)
            for (int d : obs.diagnostic) header.push_back(v + "_well" + std::to_string(d));
        Csv csv(header);
        for (int ny : cases) {
            const auto data =
                load_ensemble(ws, ny, std::string(role) == "test" ? ba::DatasetRole::test : ba::DatasetRole::train);
            sources.push_back("ensemble/" + case_name(ny) + "/u_" + role + ".ckba");
            std::vector<std::string> row{std::to_string(ny), case_name(ny)};
            std::vector<Eigen::VectorXd> rmse;
            for (const auto& v : c.ba.variants) {
                sources.push_back("train/" + case_name(ny) + "/" + v + "/surrogate.json");
                rmse.push_back(uq::rmse_rows(ba::predict(*load_case_surrogate(ws, ny, v), data.xi), data.u));
                row.push_back(fmt(rmse.back().mean()));
            }
            for (const auto& r : rmse)
                for (int d : obs.diagnostic) row.push_back(fmt(r(d)));
            csv.row(row);
        }
        csv.save(ws.path(std::string("report/rmse_") + role + ".csv"));
    }

    const json uqj = read_json(ws.path("uq/summary.json"));
    {
        Csv csv([&] {
            std::vector<std::string> h{"n_y", "case", "well", "cell"};
            for (const auto& v : c.ba.variants) h.push_back("kl_" + v);
            return h;
        }());
        for (int ny : {0, c.uq.n_y}) {
            const auto& kl = uqj.at("cases").at(case_name(ny)).at("kl");
            for (std::size_t k = 0; k < obs.diagnostic.size(); ++k) {
                const int d = obs.diagnostic[k];
                std::vector<std::string> row{std::to_string(ny), case_name(ny), std::to_string(d),
                                             std::to_string(obs.wells[static_cast<std::size_t>(d)])};
                for (const auto& v : c.ba.variants) row.push_back(fmt(kl.at(v).at(k).get<double>()));
                csv.row(row);
            }
            for (int d : obs.diagnostic)
                sources.push_back("uq/" + case_name(ny) + "/pdf_well" + std::to_string(d) + ".csv");
        }
        csv.save(ws.path("report/kl.csv"));
    }
    {
        std::vector<std::string> h{"n_y", "case"};
        for (int d : obs.diagnostic) h.push_back("var_well" + std::to_string(d));
        Csv csv(h);
        for (int ny : cases) {
            std::vector<std::string> row{std::to_string(ny), case_name(ny)};
            for (const auto& v : uqj.at("variance").at(case_name(ny))) row.push_back(fmt(v.get<double>()));
            csv.row(row);
        }
        csv.save(ws.path("report/variance.csv"));
    }
    {
        Csv csv({"n_y", "setting", "method", "iterations", "converged", "rel_l2", "linf", "objective"});
        const auto& ic = c.inversion;
        for (int ny : c.n_y) {
            std::vector<std::pair<std::string, std::string>> runs;
            for (const auto& v : ic.variants) runs.emplace_back(case_name(ny), "BA-MAP-" + v);
            if (ic.cklemap) runs.emplace_back(case_name(ny), "CKLEMAP");
            if (ic.unconditional)
                for (const auto& v : ic.variants) runs.emplace_back("unconditional_" + std::to_string(ny), "BA-MAP-" + v);
            for (const auto& [label, method] : runs) {
                const std::string rel = "invert/" + label + "/" + method + "/result.json";
                sources.push_back(rel);
                const json r = read_json(ws.path(rel));
                csv.row({std::to_string(ny), label.rfind("cond_", 0) == 0 ? "conditional" : "unconditional", method,
                         std::to_string(r.at("iterations").get<int>()), r.at("converged").get<bool>() ? "1" : "0",
                         fmt(r.at("rel_l2").get<double>()), fmt(r.at("linf").get<double>()),
                         fmt(r.at("objective").get<double>())});
            }
        }
        csv.save(ws.path("report/inversion.csv"));
    }
    for (int ny : {0, c.uq.n_y})
        for (int d : obs.diagnostic) {
            const std::string from = "uq/" + case_name(ny) + "/pdf_well" + std::to_string(d) + ".csv";
            const std::string bytes = io::read_file(ws.path(from));
            io::write_file_atomic(ws.path("report/pdf_" + case_name(ny) + "_well" + std::to_string(d) + ".csv"), bytes);
        }

    // Every consumed artifact must trace to a recorded stage.
    std::sort(sources.begin(), sources.end());
    sources.erase(std::unique(sources.begin(), sources.end()), sources.end());
    json traced = json::object();
    for (const auto& src : sources) {
        std::string owner;
        for (const auto& [name, r] : ws.manifest().stages)
            if (r.artifacts.count(src)) owner = name;
        if (owner.empty()) throw ValidationError("report: " + src + " is not recorded by any stage");
        traced[src] = {{"stage", owner}, {"config_hash", ws.manifest().stages.at(owner).config_hash}};
    }
    json files = json::array();
    for (const auto& f : report_files(ws.root())) files.push_back(f);
    write_json(ws.path("report/report.json"), {{"config_hash", c.hash()},
                                               {"tool_version", CKBA_VERSION},
                                               {"diagnostic_wells", obs.diagnostic},
                                               {"well_cells", obs.wells},
                                               {"tables", files},
                                               {"sources", traced}});
    log("report: " + std::to_string(files.size()) + " tables");
}

void record_artifacts(const Workspace& ws, Stage stage, StageRecord& rec) {
    const fs::path dir = ws.path(std::string(to_string(stage)));
    if (!fs::exists(dir)) return;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), ws.root()).generic_string();
        rec.artifacts[rel] = io::sha256_file(e.path());
    }
}

}  // namespace

std::vector<std::string> report_files(const fs::path& root) {
    std::vector<std::string> out;
    const fs::path dir = root / "report";
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".csv") out.push_back(e.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
}

void run_stage(const ExperimentConfig& config, Stage stage, const fs::path& root, const Logger& logger) {
    const Logger log = logger ? logger : [](const std::string&) {};
    Workspace ws(root, config);
    for (Stage up : upstream_of(stage)) ws.require(stage, up);

    const fs::path out = ws.path(std::string(to_string(stage)));
    fs::remove_all(out);
    fs::create_directories(out);
    const auto t0 = std::chrono::steady_clock::now();
    StageRecord rec;
    switch (stage) {
        case Stage::synth: stage_synth(ws, rec, log); break;
        case Stage::eigs: stage_eigs(ws, rec, log); break;
        case Stage::ensemble: stage_ensemble(ws, rec, log); break;
        case Stage::train: stage_train(ws, rec, log); break;
        case Stage::uq: stage_uq(ws, rec, log); break;
        case Stage::invert: stage_invert(ws, rec, log); break;
        case Stage::report: stage_report(ws, rec, log); break;
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_artifacts(ws, stage, rec);
    ws.commit(stage, std::move(rec));
    log(std::string(to_string(stage)) + ": " + fmt(ws.manifest().stages.at(std::string(to_string(stage))).wall_seconds) +
        " s");
}

void run_all(const ExperimentConfig& config, const fs::path& root, const Logger& log) {
    for (Stage s : kAllStages) run_stage(config, s, root, log);
}

}  // namespace ckba::pipeline
