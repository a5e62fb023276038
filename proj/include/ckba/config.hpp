#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckba/ba.hpp"
#include "ckba/darcy.hpp"
#include "ckba/gp.hpp"

namespace ckba::pipeline {

/// A surrogate flavour named as in the result tables: "1D", "2x1D", "2D", ...
struct VariantSpec {
    std::string name;
    int K = 1;
    ba::Variant variant = ba::Variant::kx1d;
};

VariantSpec parse_variant_name(const std::string& name);

struct WellConfig {
    int n_u = 20;
    double jitter = 0.3;  // fraction of lattice spacing
    int n_diagnostic = 5;
};

struct BaConfig {
    std::vector<std::string> variants{"1D", "2x1D", "2D"};
    int degree = 3;
    int level = 5;
    double tau = 1e-6;
    bool penalize_bias = true;
    bool debias = true;
};

struct UqConfig {
    int kde_points = 512;
    int kl_points = 1024;
    int n_y = 100;  // conditional case used for the PDF curves
};

struct InversionConfig {
    double gamma_conditional = 1e-6;
    double gamma_unconditional = 1e-1;
    std::vector<std::string> variants{"1D", "2x1D"};
    bool cklemap = true;
    bool unconditional = true;
    int max_iterations = 50000;
    double gtol = 1e-8;
};

struct ExperimentConfig {
    std::uint64_t seed = 20240611;
    std::string output_dir = "ckba-run";
    darcy::GridGeometry grid;
    darcy::BvpSpec bvp;
    gp::KernelSpec kernel;  // lengthscale defaults to 0.2 x domain diagonal
    double mean = 0.0;
    int n_xi = 128;
    std::vector<int> n_y{25, 50, 100, 200};
    bool nested_sampling = true;
    double sigma_y = 0.01;
    double sigma_u = 1e-4;  // below the smallest conditional head spread of the default sweep
    WellConfig wells;
    int q_train = 1000;
    int q_test = 1000;
    BaConfig ba;
    UqConfig uq;
    InversionConfig inversion;

    /// Collects every problem; throws ValidationError listing all of them.
    void validate() const;
    /// Canonical JSON (defaults filled, keys sorted, output_dir omitted).
    nlohmann::json canonical() const;
    /// SHA-256 of the canonical JSON; independent of key order in the file.
    std::string hash() const;
};

ExperimentConfig default_config();
/// Strict parse: unknown keys are errors.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace ckba::pipeline
