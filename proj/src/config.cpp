#include "ckba/config.hpp"

#include <cmath>
#include <functional>
#include <regex>
#include <set>
#include <sstream>

#include "ckba/error.hpp"
#include "ckba/io.hpp"

namespace ckba::pipeline {

using nlohmann::json;

VariantSpec parse_variant_name(const std::string& name) {
    static const std::regex kd(R"(([1-9][0-9]*)D)");
    static const std::regex kx1d(R"(([1-9][0-9]*)x1D)");
    std::smatch m;
    VariantSpec v{name, 1, ba::Variant::kx1d};
    if (std::regex_match(name, m, kx1d)) {
        v.K = std::stoi(m[1]);
        v.variant = ba::Variant::kx1d;
    } else if (std::regex_match(name, m, kd)) {
        v.K = std::stoi(m[1]);
        v.variant = v.K == 1 ? ba::Variant::kx1d : ba::Variant::kd;
    } else {
        throw ValidationError("unknown surrogate variant '" + name + "' (expected e.g. 1D, 2x1D, 2D)");
    }
    return v;
}

namespace {

// Reads keys from one JSON object, recording problems instead of throwing,
// and flags any key that was never read.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(errors) {
        if (!j_.is_object()) errors_.push_back(path_ + ": expected an object");
    }

    ~ObjectReader() {
        if (!j_.is_object()) return;
        for (const auto& [key, _] : j_.items())
            if (!seen_.count(key)) errors_.push_back(where(key) + ": unknown key");
    }

    template <class T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        if (!j_.is_object() || !j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            errors_.push_back(where(key) + ": " + e.what());
        }
    }

    void object(const std::string& key, const std::function<void(ObjectReader&)>& fn) {
        seen_.insert(key);
        if (!j_.is_object() || !j_.contains(key)) return;
        ObjectReader sub(j_.at(key), where(key), errors_);
        fn(sub);
    }

    bool has(const std::string& key) const { return j_.is_object() && j_.contains(key); }

private:
    std::string where(const std::string& key) const { return path_ + "." + key; }

    const json& j_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> seen_;
};

void read_edge(ObjectReader& r, const std::string& key, darcy::EdgeCondition& edge,
               std::vector<std::string>& errors) {
    r.object(key, [&](ObjectReader& e) {
        std::string type = edge.type == darcy::BoundaryType::dirichlet ? "dirichlet" : "neumann";
        e.get("type", type);
        e.get("value", edge.value);
        if (type == "dirichlet")
            edge.type = darcy::BoundaryType::dirichlet;
        else if (type == "neumann")
            edge.type = darcy::BoundaryType::neumann;
        else
            errors.push_back("bvp." + key + ".type: expected dirichlet or neumann");
    });
}

json edge_json(const darcy::EdgeCondition& e) {
    return {{"type", e.type == darcy::BoundaryType::dirichlet ? "dirichlet" : "neumann"}, {"value", e.value}};
}

}  // namespace

ExperimentConfig default_config() {
    ExperimentConfig c;
    c.kernel.lengthscale = 0.2 * std::hypot(c.grid.lx, c.grid.ly);
    return c;
}

ExperimentConfig parse_config(const json& j) {
    ExperimentConfig c = default_config();
    std::vector<std::string> errors;
    bool lengthscale_given = false;
    {
        ObjectReader r(j, "config", errors);
        r.get("seed", c.seed);
        r.get("output_dir", c.output_dir);
        r.object("grid", [&](ObjectReader& g) {
            g.get("nx", c.grid.nx);
            g.get("ny", c.grid.ny);
            g.get("lx", c.grid.lx);
            g.get("ly", c.grid.ly);
        });
        r.object("bvp", [&](ObjectReader& b) {
            read_edge(b, "left", c.bvp.at(darcy::Edge::left), errors);
            read_edge(b, "right", c.bvp.at(darcy::Edge::right), errors);
            read_edge(b, "bottom", c.bvp.at(darcy::Edge::bottom), errors);
            read_edge(b, "top", c.bvp.at(darcy::Edge::top), errors);
        });
        r.object("kernel", [&](ObjectReader& k) {
            std::string family(gp::to_string(c.kernel.family));
            k.get("family", family);
            try {
                c.kernel.family = gp::parse_kernel_family(family);
            } catch (const ValidationError& e) {
                errors.push_back(std::string("kernel.family: ") + e.what());
            }
            k.get("variance", c.kernel.variance);
            lengthscale_given = k.has("lengthscale");
            k.get("lengthscale", c.kernel.lengthscale);
            k.get("mean", c.mean);
        });
        r.get("n_xi", c.n_xi);
        r.get("n_y", c.n_y);
        r.get("nested_sampling", c.nested_sampling);
        r.get("sigma_y", c.sigma_y);
        r.get("sigma_u", c.sigma_u);
        r.object("wells", [&](ObjectReader& w) {
            w.get("n_u", c.wells.n_u);
            w.get("jitter", c.wells.jitter);
            w.get("n_diagnostic", c.wells.n_diagnostic);
        });
        r.get("q_train", c.q_train);
        r.get("q_test", c.q_test);
        r.object("ba", [&](ObjectReader& b) {
            b.get("variants", c.ba.variants);
            b.get("degree", c.ba.degree);
            b.get("level", c.ba.level);
            b.get("tau", c.ba.tau);
            b.get("penalize_bias", c.ba.penalize_bias);
            b.get("debias", c.ba.debias);
        });
        r.object("uq", [&](ObjectReader& u) {
            u.get("kde_points", c.uq.kde_points);
            u.get("kl_points", c.uq.kl_points);
            u.get("n_y", c.uq.n_y);
        });
        r.object("inversion", [&](ObjectReader& v) {
            v.get("gamma_conditional", c.inversion.gamma_conditional);
            v.get("gamma_unconditional", c.inversion.gamma_unconditional);
            v.get("variants", c.inversion.variants);
            v.get("cklemap", c.inversion.cklemap);
            v.get("unconditional", c.inversion.unconditional);
            v.get("max_iterations", c.inversion.max_iterations);
            v.get("gtol", c.inversion.gtol);
        });
    }
    if (!lengthscale_given) c.kernel.lengthscale = 0.2 * std::hypot(c.grid.lx, c.grid.ly);
    if (!errors.empty()) {
        std::ostringstream ss;
        ss << "invalid config:";
        for (const auto& e : errors) ss << "\n  " << e;
        throw ValidationError(ss.str());
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(io::read_file(path));
    } catch (const json::exception& e) {
        throw ValidationError("cannot parse config " + path.string() + ": " + e.what());
    }
    return parse_config(j);
}

void ExperimentConfig::validate() const {
    std::vector<std::string> errors;
    auto check = [&](bool ok, const std::string& msg) {
        if (!ok) errors.push_back(msg);
    };
    check(grid.nx >= 2 && grid.ny >= 2, "grid: nx and ny must be >= 2");
    check(grid.lx > 0.0 && grid.ly > 0.0, "grid: lx and ly must be > 0");
    try {
        bvp.validate();
    } catch (const ValidationError& e) {
        errors.push_back(std::string("bvp: ") + e.what());
    }
    check(kernel.variance > 0.0, "kernel.variance must be > 0");
    check(kernel.lengthscale > 0.0, "kernel.lengthscale must be > 0");
    check(std::isfinite(mean), "kernel.mean must be finite");
    const auto cells = Eigen::Index{grid.nx} * grid.ny;
    check(n_xi >= 1 && n_xi <= cells, "n_xi must lie in [1, nx*ny]");
    check(!n_y.empty(), "n_y must list at least one value");
    for (std::size_t i = 0; i < n_y.size(); ++i) {
        check(n_y[i] >= 1 && n_y[i] <= cells, "n_y values must lie in [1, nx*ny]");
        if (i > 0) check(n_y[i] > n_y[i - 1], "n_y must be strictly increasing");
    }
    check(sigma_y >= 0.0, "sigma_y must be >= 0");
    check(sigma_u > 0.0, "sigma_u must be > 0");
    check(wells.n_u >= 1 && wells.n_u <= cells, "wells.n_u must lie in [1, nx*ny]");
    check(wells.jitter >= 0.0 && wells.jitter < 1.0, "wells.jitter must lie in [0, 1)");
    check(wells.n_diagnostic >= 1 && wells.n_diagnostic <= wells.n_u,
          "wells.n_diagnostic must lie in [1, n_u]");
    check(q_train >= 2 && q_test >= 2, "q_train and q_test must be >= 2");
    check(!ba.variants.empty(), "ba.variants must not be empty");
    for (const auto& v : ba.variants) {
        try {
            parse_variant_name(v);
        } catch (const ValidationError& e) {
            errors.push_back(std::string("ba.variants: ") + e.what());
        }
    }
    check(ba.degree >= 0, "ba.degree must be >= 0");
    check(ba.level >= 1, "ba.level must be >= 1");
    check(ba.tau >= 0.0, "ba.tau must be >= 0");
    check(uq.kde_points >= 2 && uq.kl_points >= 2, "uq grid sizes must be >= 2");
    bool uq_case = false;
    for (int v : n_y) uq_case = uq_case || v == uq.n_y;
    check(uq_case, "uq.n_y must be one of n_y");
    check(inversion.gamma_conditional >= 0.0 && inversion.gamma_unconditional >= 0.0,
          "inversion gammas must be >= 0");
    check(inversion.max_iterations >= 1, "inversion.max_iterations must be >= 1");
    check(inversion.gtol > 0.0, "inversion.gtol must be > 0");
    for (const auto& v : inversion.variants) {
        bool trained = false;
        for (const auto& t : ba.variants) trained = trained || t == v;
        check(trained, "inversion variant '" + v + "' is not listed in ba.variants");
    }
    check(!inversion.unconditional || sigma_y > 0.0,
          "unconditional inversion needs sigma_y > 0 for the field misfit");
    if (!errors.empty()) {
        std::ostringstream ss;
        ss << "invalid config:";
        for (const auto& e : errors) ss << "\n  " << e;
        throw ValidationError(ss.str());
    }
}

nlohmann::json ExperimentConfig::canonical() const {
    return {
        {"seed", seed},
        {"grid", {{"nx", grid.nx}, {"ny", grid.ny}, {"lx", grid.lx}, {"ly", grid.ly}}},
        {"bvp",
         {{"left", edge_json(bvp.at(darcy::Edge::left))},
          {"right", edge_json(bvp.at(darcy::Edge::right))},
          {"bottom", edge_json(bvp.at(darcy::Edge::bottom))},
          {"top", edge_json(bvp.at(darcy::Edge::top))}}},
        {"kernel",
         {{"family", std::string(gp::to_string(kernel.family))},
          {"variance", kernel.variance},
          {"lengthscale", kernel.lengthscale},
          {"mean", mean}}},
        {"n_xi", n_xi},
        {"n_y", n_y},
        {"nested_sampling", nested_sampling},
        {"sigma_y", sigma_y},
        {"sigma_u", sigma_u},
        {"wells", {{"n_u", wells.n_u}, {"jitter", wells.jitter}, {"n_diagnostic", wells.n_diagnostic}}},
        {"q_train", q_train},
        {"q_test", q_test},
        {"ba",
         {{"variants", ba.variants},
          {"degree", ba.degree},
          {"level", ba.level},
          {"tau", ba.tau},
          {"penalize_bias", ba.penalize_bias},
          {"debias", ba.debias}}},
        {"uq", {{"kde_points", uq.kde_points}, {"kl_points", uq.kl_points}, {"n_y", uq.n_y}}},
        {"inversion",
         {{"gamma_conditional", inversion.gamma_conditional},
          {"gamma_unconditional", inversion.gamma_unconditional},
          {"variants", inversion.variants},
          {"cklemap", inversion.cklemap},
          {"unconditional", inversion.unconditional},
          {"max_iterations", inversion.max_iterations},
          {"gtol", inversion.gtol}}},
    };
}

std::string ExperimentConfig::hash() const { return io::sha256_hex(canonical().dump()); }

}  // namespace ckba::pipeline
