#include "ckba/inverse.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Cholesky>

#include "ckba/error.hpp"

namespace ckba::inverse {

Forward surrogate_forward(std::shared_ptr<const ba::RidgeSurrogate> surrogate) {
    if (!surrogate) throw ValidationError("surrogate is null");
    return [s = std::move(surrogate)](const Eigen::VectorXd& xi, Eigen::MatrixXd* jac) {
        return ba::predict_with_jacobian(*s, xi, jac);
    };
}

Forward pde_forward(darcy::ObservableFn fn, JacobianMode mode) {
    return [fn = std::move(fn), mode](const Eigen::VectorXd& xi, Eigen::MatrixXd* jac) {
        if (!jac || mode == JacobianMode::sensitivity) return fn.evaluate(xi, jac);
        const Eigen::VectorXd v = fn(xi);
        jac->resize(v.size(), xi.size());
        for (Eigen::Index k = 0; k < xi.size(); ++k) {
            const double h = 1e-6 * std::max(1.0, std::abs(xi(k)));
            Eigen::VectorXd xp = xi, xm = xi;
            xp(k) += h;
            xm(k) -= h;
            jac->col(k) = (fn(xp) - fn(xm)) / (2.0 * h);
        }
        return v;
    };
}

void InverseProblemSpec::validate() const {
    if (!(sigma_u > 0.0)) throw ValidationError("sigma_u must be > 0");
    if (!(gamma >= 0.0)) throw ValidationError("gamma must be >= 0");
    if (!field_cells.empty()) {
        if (!(sigma_y > 0.0)) throw ValidationError("sigma_y must be > 0 when field data are used");
        if (static_cast<Eigen::Index>(field_cells.size()) != y_obs.size())
            throw ValidationError("field data and field cells differ in length");
    }
}

Residuals residuals(const Eigen::VectorXd& xi, const InverseProblemSpec& spec, const Forward& forward,
                    const kle::FieldBasis& basis, bool with_jacobian) {
    const Eigen::Index n = basis.n_terms();
    if (xi.size() != n) throw ValidationError("coefficient vector does not match the basis");
    const Eigen::Index nu = spec.u_obs.size();
    const Eigen::Index ny = static_cast<Eigen::Index>(spec.field_cells.size());

    Eigen::MatrixXd jg;
    const Eigen::VectorXd g = forward(xi, with_jacobian ? &jg : nullptr);
    if (g.size() != nu) throw ValidationError("forward map output does not match observed heads");

    Residuals out;
    out.r.resize(nu + ny + n);
    out.r.head(nu) = (spec.u_obs - g) / spec.sigma_u;
    Eigen::MatrixXd field_rows;
    if (ny > 0) {
        const Eigen::MatrixXd modes = basis.modes();
        field_rows.resize(ny, n);
        for (Eigen::Index k = 0; k < ny; ++k) {
            const auto c = spec.field_cells[static_cast<std::size_t>(k)];
            if (c < 0 || c >= basis.n_cells()) throw ValidationError("field cell out of range");
            field_rows.row(k) = modes.row(c);
            out.r(nu + k) = (spec.y_obs(k) - basis.mean(c) - modes.row(c).dot(xi)) / spec.sigma_y;
        }
    }
    const double sg = std::sqrt(spec.gamma);
    out.r.tail(n) = sg * xi;

    if (with_jacobian) {
        if (jg.rows() != nu || jg.cols() != n) throw ValidationError("forward Jacobian has the wrong shape");
        out.jacobian.resize(nu + ny + n, n);
        out.jacobian.topRows(nu) = -jg / spec.sigma_u;
        if (ny > 0) out.jacobian.middleRows(nu, ny) = -field_rows / spec.sigma_y;
        out.jacobian.bottomRows(n) = sg * Eigen::MatrixXd::Identity(n, n);
    }
    return out;
}

FieldErrors field_errors(const Eigen::VectorXd& estimate, const Eigen::VectorXd& reference) {
    if (estimate.size() != reference.size()) throw ValidationError("fields live on different grids");
    FieldErrors e;
    const double ref = reference.norm();
    const Eigen::VectorXd diff = estimate - reference;
    e.rel_l2 = ref > 0.0 ? diff.norm() / ref : diff.norm();
    e.linf = diff.size() ? diff.cwiseAbs().maxCoeff() : 0.0;
    return e;
}

InversionResult solve_map(const InverseProblemSpec& spec, const Forward& forward, const kle::FieldBasis& basis,
                          const Eigen::VectorXd& xi0, const SolverOptions& options,
                          const Eigen::VectorXd* reference) {
    spec.validate();
    if (!xi0.allFinite()) throw ValidationError("initial coefficients must be finite");
    const Eigen::Index n = basis.n_terms();

    InversionResult res;
    Eigen::VectorXd x = xi0;
    Residuals cur = residuals(x, spec, forward, basis, true);
    double cost = 0.5 * cur.r.squaredNorm();
    Eigen::MatrixXd jtj = cur.jacobian.transpose() * cur.jacobian;
    Eigen::VectorXd grad = cur.jacobian.transpose() * cur.r;
    double mu = 1e-3 * std::max(jtj.diagonal().maxCoeff(), 1e-12);
    double nu = 2.0;
    res.objective_history.push_back(cost);

    while (true) {
        if (grad.lpNorm<Eigen::Infinity>() < options.gtol) {
            res.converged = true;
            res.stop_reason = "gradient tolerance";
            break;
        }
        if (res.iterations >= options.max_iterations) {
            res.stop_reason = "iteration limit";
            break;
        }
        ++res.iterations;

        Eigen::MatrixXd lhs = jtj;
        lhs.diagonal().array() += mu;
        const Eigen::VectorXd step = lhs.ldlt().solve(-grad);
        if (!step.allFinite()) throw NumericalError("trust-region step is not finite");
        if (step.norm() <= options.xtol * (x.norm() + options.xtol)) {
            res.converged = true;
            res.stop_reason = "step tolerance";
            break;
        }

        const Eigen::VectorXd trial = x + step;
        Residuals next = residuals(trial, spec, forward, basis, false);
        const double next_cost = 0.5 * next.r.squaredNorm();
        const double predicted = 0.5 * step.dot(mu * step - grad);
        const double rho = predicted > 0.0 ? (cost - next_cost) / predicted : -1.0;

        if (rho > 0.0 && std::isfinite(next_cost)) {
            const double reduction = cost - next_cost;
            x = trial;
            cur = residuals(x, spec, forward, basis, true);
            cost = 0.5 * cur.r.squaredNorm();
            jtj = cur.jacobian.transpose() * cur.jacobian;
            grad = cur.jacobian.transpose() * cur.r;
            mu *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
            nu = 2.0;
            ++res.accepted_steps;
            res.objective_history.push_back(cost);
            if (reduction <= options.ftol * cost) {
                res.converged = true;
                res.stop_reason = "objective tolerance";
                break;
            }
        } else {
            mu *= nu;
            nu *= 2.0;
            if (!std::isfinite(mu) || mu > 1e300) {
                res.stop_reason = "trust region collapsed";
                break;
            }
        }
    }

    res.xi = x;
    res.objective = cost;
    res.gradient_norm = grad.lpNorm<Eigen::Infinity>();
    res.field = kle::expand(basis, x);
    if (n == 0) res.converged = true;
    if (reference) res.errors = field_errors(res.field, *reference);
    return res;
}

}  // namespace ckba::inverse
