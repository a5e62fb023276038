#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Core>

namespace ckba::pce {

/// Probabilists' Hermite polynomial He_n(x) / sqrt(n!), orthonormal under
/// the standard normal density.
double hermite_norm(int n, double x);

/// Values H_0(x) .. H_n(x).
Eigen::VectorXd hermite_norm_all(int n, double x);

using MultiIndex = std::vector<int>;

/// All multi-indices of dimension r with total degree <= p, ordered by total
/// degree and then lexicographically descending in the leading coordinate
/// (graded lexicographic): (0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...
struct MultiIndexSet {
    int dim = 0;
    int degree = 0;
    std::vector<MultiIndex> indices;

    std::size_t size() const noexcept { return indices.size(); }
    /// Position of `alpha`, or -1.
    std::ptrdiff_t find(const MultiIndex& alpha) const;
};

MultiIndexSet multi_index_set(int r, int p);

/// Quadrature for the r-dimensional standard normal measure; weights sum
/// to one.
struct QuadratureRule {
    int dim = 0;
    int level = 0;
    Eigen::MatrixXd nodes;  // dim x n_nodes
    Eigen::VectorXd weights;

    Eigen::Index size() const noexcept { return weights.size(); }
};

/// n-point probabilists' Gauss-Hermite rule (Golub-Welsch).
QuadratureRule gauss_hermite(int n);

/// Smolyak combination of 1-D Gauss-Hermite rules with linear growth
/// (level i uses i points). For r = 1 this is the L-point rule. Coincident
/// nodes (within 1e-12 per coordinate) are merged.
QuadratureRule smolyak_gh(int r, int level);

struct PceModel {
    MultiIndexSet basis;
    Eigen::VectorXd coefficients;

    int dim() const noexcept { return basis.dim; }
};

/// H_alpha(eta) for every alpha in `set`.
Eigen::VectorXd basis_values(const MultiIndexSet& set, const Eigen::VectorXd& eta);

/// Projection from precomputed function values at the rule's nodes.
PceModel project_values(const Eigen::VectorXd& f_values, const MultiIndexSet& set,
                        const QuadratureRule& rule);

/// c_alpha = sum_i w_i f(eta_i) H_alpha(eta_i). Calls f once per node.
/// Throws NumericalError when f returns a non-finite value.
PceModel project(const std::function<double(const Eigen::VectorXd&)>& f, const MultiIndexSet& set,
                 const QuadratureRule& rule);

double eval(const PceModel& model, const Eigen::VectorXd& eta);
Eigen::VectorXd eval_grad(const PceModel& model, const Eigen::VectorXd& eta);

}  // namespace ckba::pce
