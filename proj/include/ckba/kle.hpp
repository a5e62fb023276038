#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <Eigen/Core>

#include "ckba/rng.hpp"

namespace ckba::kle {

enum class BasisKind { unconditional, conditional };

std::string_view to_string(BasisKind kind);
BasisKind parse_basis_kind(std::string_view name);

/// Discrete Mercer eigenpairs, largest first.
struct Eigenpairs {
    Eigen::VectorXd values;     // n_terms, descending, >= 0
    Eigen::MatrixXd functions;  // n_cells x n_terms, W-orthonormal columns
};

/// Truncated (conditional) Karhunen-Loeve representation of a field on
/// grid cells: y = mean + sum_i sqrt(lambda_i) xi_i phi_i.
struct FieldBasis {
    BasisKind kind = BasisKind::unconditional;
    Eigen::VectorXd mean;
    Eigen::VectorXd eigenvalues;
    Eigen::MatrixXd eigenfunctions;  // n_cells x n_terms
    Eigen::VectorXd weights;         // quadrature weights per cell

    Eigen::Index n_terms() const noexcept { return eigenvalues.size(); }
    Eigen::Index n_cells() const noexcept { return mean.size(); }

    /// phi * diag(sqrt(lambda)): d(field)/d(xi).
    Eigen::MatrixXd modes() const;
};

/// Largest `n_terms` eigenpairs of the weighted eigenproblem
/// W^1/2 C W^1/2 v = lambda v, phi = W^-1/2 v. Negative eigenvalues are
/// clamped to zero; each phi is signed so its largest-magnitude entry
/// (lowest index on ties) is positive.
Eigenpairs eigensolve(const Eigen::MatrixXd& cov, const Eigen::VectorXd& weights,
                      Eigen::Index n_terms);

FieldBasis make_basis(BasisKind kind, Eigen::VectorXd mean, Eigenpairs pairs,
                      Eigen::VectorXd weights);

/// Field for one coefficient vector.
Eigen::VectorXd expand(const FieldBasis& basis, const Eigen::VectorXd& xi);
/// Fields for a batch of coefficient vectors (one per column).
Eigen::MatrixXd expand(const FieldBasis& basis, const Eigen::MatrixXd& xi);

/// n_xi x count matrix of i.i.d. standard normal draws, column by column.
Eigen::MatrixXd sample_coeffs(Rng& rng, Eigen::Index count, Eigen::Index n_xi);
Eigen::MatrixXd sample_coeffs(std::uint64_t seed, Eigen::Index count, Eigen::Index n_xi);

/// Directory layout: basis.json (kind, n_terms, n_cells, grid hash) plus
/// mean/eigenvalues/eigenfunctions/weights in the binary matrix format.
void save_basis(const std::filesystem::path& dir, const FieldBasis& basis,
                const std::string& grid_hash);
/// Throws ValidationError if `expected_grid_hash` is non-empty and differs.
FieldBasis load_basis(const std::filesystem::path& dir, const std::string& expected_grid_hash = {});

}  // namespace ckba::kle
