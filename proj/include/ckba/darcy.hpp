#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include "ckba/gp.hpp"
#include "ckba/kle.hpp"

namespace ckba::darcy {

/// Uniform rectangular grid on [0, lx] x [0, ly]. Cell (i, j) has linear
/// index i + nx * j; i runs along x.
struct GridGeometry {
    int nx = 32;
    int ny = 32;
    double lx = 1.0;
    double ly = 1.0;

    void validate() const;
    double dx() const noexcept { return lx / nx; }
    double dy() const noexcept { return ly / ny; }
    Eigen::Index n_cells() const noexcept { return Eigen::Index{nx} * ny; }
    Eigen::Index index(int i, int j) const noexcept { return i + Eigen::Index{nx} * j; }
    gp::Point center(Eigen::Index cell) const;
    gp::Points centers() const;
    /// Cell areas, the quadrature weights of the discrete eigenproblem.
    Eigen::VectorXd cell_areas() const;
    /// Cell containing a point (clamped to the domain).
    Eigen::Index locate(const gp::Point& x) const;
    std::string hash() const;
};

enum class Edge { left = 0, right = 1, bottom = 2, top = 3 };
enum class BoundaryType { dirichlet, neumann };

/// Dirichlet: prescribed head. Neumann: prescribed outward normal flux q_N,
/// i.e. T grad(u) . n = -q_N.
struct EdgeCondition {
    BoundaryType type = BoundaryType::neumann;
    double value = 0.0;
};

struct BvpSpec {
    std::array<EdgeCondition, 4> edges{
        EdgeCondition{BoundaryType::dirichlet, 1.0}, EdgeCondition{BoundaryType::dirichlet, 0.0},
        EdgeCondition{BoundaryType::neumann, 0.0}, EdgeCondition{BoundaryType::neumann, 0.0}};

    const EdgeCondition& at(Edge e) const { return edges[static_cast<std::size_t>(e)]; }
    EdgeCondition& at(Edge e) { return edges[static_cast<std::size_t>(e)]; }
    /// Requires at least one Dirichlet edge and finite values.
    void validate() const;
};

struct ObservationLayout {
    std::vector<Eigen::Index> head_cells;   // X_u
    std::vector<Eigen::Index> field_cells;  // X_y

    void validate(Eigen::Index n_cells) const;
};

/// Outward boundary flux totals (per edge) of a solved head field.
struct BoundaryFlux {
    std::array<double, 4> outward{};
    double net() const { return outward[0] + outward[1] + outward[2] + outward[3]; }
    double gross() const;
};

/// Two-point-flux finite-volume discretization of div(T grad u) = 0 with
/// T = exp(y), harmonic face transmissivities, half-cell Dirichlet
/// couplings and flux Neumann edges. Construction assembles and factors the
/// system; the factorization is reused for sensitivity solves.
class FlowSolver {
public:
    FlowSolver(const GridGeometry& grid, const BvpSpec& bvp, const Eigen::VectorXd& log_t);

    const Eigen::VectorXd& head() const noexcept { return head_; }
    const Eigen::SparseMatrix<double>& system() const noexcept { return a_; }
    const Eigen::VectorXd& rhs() const noexcept { return b_; }

    /// |A u - b| / |b| of the computed solution.
    double relative_residual() const;
    BoundaryFlux boundary_flux() const;

    /// d(head)/d(y) applied to the columns of `dy` (n_cells x k).
    Eigen::MatrixXd head_sensitivity(const Eigen::MatrixXd& dy) const;

private:
    Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const;

    GridGeometry grid_;
    BvpSpec bvp_;
    Eigen::VectorXd t_;
    Eigen::SparseMatrix<double> a_;
    Eigen::VectorXd b_;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt_;
    bool factored_ = false;
    Eigen::VectorXd head_;
};

Eigen::VectorXd solve_head(const GridGeometry& grid, const BvpSpec& bvp, const Eigen::VectorXd& log_t);

/// Head values at `cells`, in order.
Eigen::VectorXd observe(const Eigen::VectorXd& head, const std::vector<Eigen::Index>& cells);

/// The observation map xi -> heads at wells, composed from expand,
/// solve_head and observe. Copies share one query counter.
class ObservableFn {
public:
    ObservableFn(GridGeometry grid, BvpSpec bvp, std::shared_ptr<const kle::FieldBasis> basis,
                 std::vector<Eigen::Index> head_cells);

    Eigen::VectorXd operator()(const Eigen::VectorXd& xi) const;
    /// Value and Jacobian (n_wells x n_terms) by forward sensitivities.
    Eigen::VectorXd evaluate(const Eigen::VectorXd& xi, Eigen::MatrixXd* jacobian) const;

    std::int64_t query_count() const noexcept { return queries_->load(); }
    Eigen::Index n_terms() const noexcept { return basis_->n_terms(); }
    Eigen::Index n_outputs() const noexcept { return static_cast<Eigen::Index>(cells_.size()); }
    const kle::FieldBasis& basis() const noexcept { return *basis_; }

private:
    GridGeometry grid_;
    BvpSpec bvp_;
    std::shared_ptr<const kle::FieldBasis> basis_;
    std::vector<Eigen::Index> cells_;
    std::shared_ptr<std::atomic<std::int64_t>> queries_;
};

}  // namespace ckba::darcy
