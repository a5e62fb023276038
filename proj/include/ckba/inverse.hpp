#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ckba/ba.hpp"
#include "ckba/darcy.hpp"
#include "ckba/kle.hpp"

namespace ckba::inverse {

/// Forward map xi -> predicted heads; fills the Jacobian when asked.
using Forward = std::function<Eigen::VectorXd(const Eigen::VectorXd& xi, Eigen::MatrixXd* jacobian)>;

/// BA-MAP forward: the ridge surrogate with analytic PCE gradients.
Forward surrogate_forward(std::shared_ptr<const ba::RidgeSurrogate> surrogate);

enum class JacobianMode { sensitivity, finite_difference };

/// CKLEMAP forward: the flow solver. Sensitivities reuse the factored
/// system; the finite-difference mode is a cross-check.
Forward pde_forward(darcy::ObservableFn fn, JacobianMode mode = JacobianMode::sensitivity);

/// Data and weights of the MAP objective
///   1/2 |(u_obs - g(xi)) / sigma_u|^2 [+ 1/2 |(y_obs - y(X; xi)) / sigma_y|^2] + gamma/2 |xi|^2.
/// The field-misfit term is used only when `field_cells` is non-empty.
struct InverseProblemSpec {
    Eigen::VectorXd u_obs;
    double sigma_u = 1.0;
    Eigen::VectorXd y_obs;
    double sigma_y = 1.0;
    std::vector<Eigen::Index> field_cells;
    double gamma = 1e-6;

    void validate() const;
};

struct Residuals {
    Eigen::VectorXd r;
    Eigen::MatrixXd jacobian;  // empty unless requested
};

Residuals residuals(const Eigen::VectorXd& xi, const InverseProblemSpec& spec, const Forward& forward,
                    const kle::FieldBasis& basis, bool with_jacobian);

struct SolverOptions {
    double gtol = 1e-8;
    double ftol = 1e-15;
    double xtol = 1e-15;
    int max_iterations = 50000;
};

struct FieldErrors {
    double rel_l2 = 0.0;
    double linf = 0.0;
};

FieldErrors field_errors(const Eigen::VectorXd& estimate, const Eigen::VectorXd& reference);

struct InversionResult {
    Eigen::VectorXd xi;
    Eigen::VectorXd field;
    int iterations = 0;
    int accepted_steps = 0;
    double objective = 0.0;
    double gradient_norm = 0.0;
    bool converged = false;
    std::string stop_reason;
    std::vector<double> objective_history;  // after each accepted step
    std::optional<FieldErrors> errors;
};

/// Trust-region (Levenberg-Marquardt) nonlinear least squares from xi0.
/// Non-convergence is reported in the result, with the best iterate.
InversionResult solve_map(const InverseProblemSpec& spec, const Forward& forward, const kle::FieldBasis& basis,
                          const Eigen::VectorXd& xi0, const SolverOptions& options = {},
                          const Eigen::VectorXd* reference = nullptr);

}  // namespace ckba::inverse
