#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "ckba/pce.hpp"

namespace ckba::ba {

enum class DatasetRole { train, test };

/// Paired samples: column j of `xi` produced column j of `u`.
struct EnsembleDataset {
    Eigen::MatrixXd xi;  // n_terms x q
    Eigen::MatrixXd u;   // n_outputs x q
    std::uint64_t seed = 0;
    DatasetRole role = DatasetRole::train;

    Eigen::Index size() const noexcept { return xi.cols(); }
    void validate() const;
};

struct BpdnOptions {
    /// Columns excluded from the l1 penalty (e.g. the bias column).
    std::vector<Eigen::Index> unpenalized;
    int max_outer = 200;
    int max_sweeps = 20000;
    double step_tol = 1e-10;
    double feasibility_tol = 1e-6;
};

struct BpdnResult {
    Eigen::VectorXd x;
    double epsilon = 0.0;
    double residual = 0.0;
    double lambda = 0.0;  // penalty weight of the returned iterate
    int sweeps = 0;
    bool converged = false;
};

/// Basis pursuit denoising: min |x|_1 s.t. |target - design x|_2 <= eps.
/// Solved through the penalized form 1/2|t - Dx|^2 + lambda |x|_1 with
/// proximal coordinate descent, continuing lambda until the residual meets
/// eps. Throws ConvergenceError if eps is below the least-squares residual
/// or the budget runs out.
BpdnResult bpdn(const Eigen::MatrixXd& design, const Eigen::VectorXd& target, double eps,
                const BpdnOptions& options = {});

/// Least-squares residual |t - D x_ls|.
double least_squares_residual(const Eigen::MatrixXd& design, const Eigen::VectorXd& target);

struct DirectionOptions {
    /// eps = r_ls * sqrt((q + m + 1) / (q - m - 1)) + tau |u_hat|, where r_ls
    /// is the affine least-squares misfit over q samples and m coefficients.
    double tau = 1e-6;
    bool penalize_bias = true;
    /// Refit the affine model by least squares on the BPDN support, which
    /// removes the l1 shrinkage from the retained coefficients.
    bool debias = true;
};

struct DirectionReport {
    double mean = 0.0;
    double stddev = 0.0;
    double epsilon = 0.0;
    double residual = 0.0;
    int sweeps = 0;
};

struct Direction {
    Eigen::VectorXd a_hat;
    DirectionReport report;
};

/// Dominant direction of the observable samples `u` (length q) over the
/// coefficient samples `xi` (n_terms x q): normalize u, fit the affine model
/// by BPDN, drop the bias, normalize, and orient so corr(a^T xi, u) >= 0.
/// Throws DegenerateObservableError for constant u or a zero fit.
Direction dominant_direction(const Eigen::MatrixXd& xi, const Eigen::VectorXd& u,
                             const DirectionOptions& options = {});

/// Next direction from the residual u - f_k (both length q) with the samples
/// projected onto the orthogonal complement of the rows of `rows` (k x n).
/// Returns nullopt when the residual carries no identifiable signal.
std::optional<Direction> next_direction(const Eigen::MatrixXd& xi, const Eigen::VectorXd& u,
                                        const Eigen::VectorXd& f_k, const Eigen::MatrixXd& rows,
                                        const DirectionOptions& options = {});

enum class Variant { kd, kx1d };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

struct PceConfig {
    int degree = 3;
    int level = 5;
};

struct FitOptions {
    int K = 1;
    Variant variant = Variant::kx1d;
    PceConfig pce;
    DirectionOptions direction;
};

/// Ridge surrogate of one observable.
struct ObservableSurrogate {
    Eigen::MatrixXd rows;               // k x n_terms, orthonormal
    pce::PceModel joint;                // KD: dimension k
    std::vector<pce::PceModel> terms;   // Kx1D: one 1-D model per row
    std::vector<double> offsets;        // Kx1D: f_{k-1}(0) used when fitting term k
    std::vector<DirectionReport> stages;
    std::vector<double> train_rmse;     // after each stage
    std::int64_t queries = 0;
    bool exhausted = false;             // stopped before K directions

    Eigen::Index k() const noexcept { return rows.rows(); }
};

struct RidgeSurrogate {
    Variant variant = Variant::kx1d;
    int K = 1;
    PceConfig pce;
    double tau = 1e-3;
    bool penalize_bias = true;
    Eigen::Index n_terms = 0;
    std::int64_t train_size = 0;
    std::vector<ObservableSurrogate> entries;

    Eigen::Index n_outputs() const noexcept { return static_cast<Eigen::Index>(entries.size()); }
    /// q_train plus quadrature queries of every observable.
    std::int64_t total_queries() const;
};

using VectorFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

/// Basis-adaptation fit of every observable of `g` (which generated
/// `train`). Observables are fitted independently and in parallel, so `g`
/// must be safe to call concurrently.
RidgeSurrogate fit(const VectorFn& g, const EnsembleDataset& train, const FitOptions& options);

/// Single-observable fit. `component` selects the output of `g`.
ObservableSurrogate fit_observable(const VectorFn& g, Eigen::Index component,
                                   const Eigen::MatrixXd& xi, const Eigen::VectorXd& u,
                                   const FitOptions& options);

double predict_one(const RidgeSurrogate& s, Eigen::Index output, const Eigen::VectorXd& xi);
/// n_outputs x batch.
Eigen::MatrixXd predict(const RidgeSurrogate& s, const Eigen::MatrixXd& xi);
/// Values at one point plus the Jacobian (n_outputs x n_terms).
Eigen::VectorXd predict_with_jacobian(const RidgeSurrogate& s, const Eigen::VectorXd& xi,
                                      Eigen::MatrixXd* jacobian);

/// surrogate.json plus rows.ckba / coefficients.ckba.
void save_surrogate(const std::filesystem::path& dir, const RidgeSurrogate& s);
RidgeSurrogate load_surrogate(const std::filesystem::path& dir);

}  // namespace ckba::ba
