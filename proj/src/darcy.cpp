#include "ckba/darcy.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <Eigen/IterativeLinearSolvers>

#include "ckba/error.hpp"
#include "ckba/io.hpp"

namespace ckba::darcy {

void GridGeometry::validate() const {
    if (nx < 2 || ny < 2) throw ValidationError("grid needs nx, ny >= 2");
    if (!(lx > 0.0) || !(ly > 0.0)) throw ValidationError("grid lengths must be > 0");
}

gp::Point GridGeometry::center(Eigen::Index cell) const {
    const auto i = cell % nx;
    const auto j = cell / nx;
    return {(static_cast<double>(i) + 0.5) * dx(), (static_cast<double>(j) + 0.5) * dy()};
}

gp::Points GridGeometry::centers() const {
    gp::Points pts(n_cells(), 2);
    for (Eigen::Index c = 0; c < n_cells(); ++c) pts.row(c) = center(c).transpose();
    return pts;
}

Eigen::VectorXd GridGeometry::cell_areas() const {
    return Eigen::VectorXd::Constant(n_cells(), dx() * dy());
}

Eigen::Index GridGeometry::locate(const gp::Point& x) const {
    const int i = std::clamp(static_cast<int>(std::floor(x(0) / dx())), 0, nx - 1);
    const int j = std::clamp(static_cast<int>(std::floor(x(1) / dy())), 0, ny - 1);
    return index(i, j);
}

std::string GridGeometry::hash() const {
    std::ostringstream ss;
    ss.precision(17);
    ss << "grid:" << nx << ':' << ny << ':' << lx << ':' << ly;
    return io::sha256_hex(ss.str()).substr(0, 16);
}

void BvpSpec::validate() const {
    bool any_dirichlet = false;
    for (const auto& e : edges) {
        if (!std::isfinite(e.value)) throw ValidationError("boundary values must be finite");
        any_dirichlet |= e.type == BoundaryType::dirichlet;
    }
    if (!any_dirichlet) throw ValidationError("at least one Dirichlet edge is required");
}

void ObservationLayout::validate(Eigen::Index n_cells) const {
    for (const auto* list : {&head_cells, &field_cells}) {
        std::set<Eigen::Index> seen;
        for (auto c : *list) {
            if (c < 0 || c >= n_cells)
                throw ValidationError("observation cell " + std::to_string(c) + " out of range");
            if (!seen.insert(c).second)
                throw ValidationError("duplicate observation cell " + std::to_string(c));
        }
    }
}

double BoundaryFlux::gross() const {
    return std::abs(outward[0]) + std::abs(outward[1]) + std::abs(outward[2]) + std::abs(outward[3]);
}

namespace {

struct BoundaryFace {
    Edge edge;
    Eigen::Index cell;
    double length;     // face length
    double half_span;  // center-to-face distance
};

template <class Fn>
void for_each_boundary_face(const GridGeometry& g, Fn&& fn) {
    for (int j = 0; j < g.ny; ++j) {
        fn(BoundaryFace{Edge::left, g.index(0, j), g.dy(), 0.5 * g.dx()});
        fn(BoundaryFace{Edge::right, g.index(g.nx - 1, j), g.dy(), 0.5 * g.dx()});
    }
    for (int i = 0; i < g.nx; ++i) {
        fn(BoundaryFace{Edge::bottom, g.index(i, 0), g.dx(), 0.5 * g.dy()});
        fn(BoundaryFace{Edge::top, g.index(i, g.ny - 1), g.dx(), 0.5 * g.dy()});
    }
}

// Interior faces as (left/lower cell, right/upper cell, length / distance).
template <class Fn>
void for_each_interior_face(const GridGeometry& g, Fn&& fn) {
    const double gx = g.dy() / g.dx();
    const double gy = g.dx() / g.dy();
    for (int j = 0; j < g.ny; ++j)
        for (int i = 0; i < g.nx; ++i) {
            if (i + 1 < g.nx) fn(g.index(i, j), g.index(i + 1, j), gx);
            if (j + 1 < g.ny) fn(g.index(i, j), g.index(i, j + 1), gy);
        }
}

double harmonic(double a, double b) { return 2.0 * a * b / (a + b); }

}  // namespace

FlowSolver::FlowSolver(const GridGeometry& grid, const BvpSpec& bvp, const Eigen::VectorXd& log_t)
    : grid_(grid), bvp_(bvp) {
    grid_.validate();
    bvp_.validate();
    const Eigen::Index n = grid_.n_cells();
    if (log_t.size() != n)
        throw ValidationError("field has " + std::to_string(log_t.size()) + " entries, grid has " +
                              std::to_string(n) + " cells");
    if (!log_t.allFinite()) throw NumericalError("non-finite log-transmissivity field");
    t_ = log_t.array().exp();
    if (!t_.allFinite() || (t_.array() <= 0.0).any())
        throw NumericalError("transmissivity overflow or underflow");

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(5 * n));
    b_ = Eigen::VectorXd::Zero(n);
    for_each_interior_face(grid_, [&](Eigen::Index p, Eigen::Index q, double geom) {
        const double t = geom * harmonic(t_(p), t_(q));
        trip.emplace_back(p, p, t);
        trip.emplace_back(q, q, t);
        trip.emplace_back(p, q, -t);
        trip.emplace_back(q, p, -t);
    });
    for_each_boundary_face(grid_, [&](const BoundaryFace& f) {
        const auto& bc = bvp_.at(f.edge);
        if (bc.type == BoundaryType::dirichlet) {
            const double t = t_(f.cell) * f.length / f.half_span;
            trip.emplace_back(f.cell, f.cell, t);
            b_(f.cell) += t * bc.value;
        } else {
            b_(f.cell) -= bc.value * f.length;
        }
    });
    a_.resize(n, n);
    a_.setFromTriplets(trip.begin(), trip.end());
    a_.makeCompressed();

    ldlt_.compute(a_);
    factored_ = ldlt_.info() == Eigen::Success;
    head_ = solve(b_);
}

Eigen::VectorXd FlowSolver::solve(const Eigen::VectorXd& rhs) const {
    const double scale = std::max(rhs.norm(), 1e-300);
    if (factored_) {
        Eigen::VectorXd x = ldlt_.solve(rhs);
        if (ldlt_.info() == Eigen::Success && x.allFinite() &&
            (a_ * x - rhs).norm() <= 1e-10 * scale)
            return x;
    }
    Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper,
                             Eigen::IncompleteCholesky<double>>
        cg;
    cg.setTolerance(1e-12);
    cg.setMaxIterations(static_cast<Eigen::Index>(10 * a_.rows()));
    cg.compute(a_);
    Eigen::VectorXd x = cg.solve(rhs);
    if (cg.info() != Eigen::Success || !x.allFinite())
        throw ConvergenceError("flow linear solve did not converge", static_cast<int>(cg.iterations()));
    return x;
}

double FlowSolver::relative_residual() const {
    return (a_ * head_ - b_).norm() / std::max(b_.norm(), 1e-300);
}

BoundaryFlux FlowSolver::boundary_flux() const {
    BoundaryFlux flux;
    for_each_boundary_face(grid_, [&](const BoundaryFace& f) {
        const auto& bc = bvp_.at(f.edge);
        double out;
        if (bc.type == BoundaryType::dirichlet)
            out = t_(f.cell) * f.length / f.half_span * (head_(f.cell) - bc.value);
        else
            out = bc.value * f.length;
        flux.outward[static_cast<std::size_t>(f.edge)] += out;
    });
    return flux;
}

Eigen::MatrixXd FlowSolver::head_sensitivity(const Eigen::MatrixXd& dy) const {
    const Eigen::Index n = grid_.n_cells();
    if (dy.rows() != n) throw ValidationError("sensitivity directions do not match grid");
    // Derivative of the cell flux residual A(y) u - b(y) with respect to y.
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(5 * n));
    for_each_interior_face(grid_, [&](Eigen::Index p, Eigen::Index q, double geom) {
        const double tp = t_(p), tq = t_(q);
        const double t = geom * harmonic(tp, tq);
        const double dt_dp = t * tq / (tp + tq);
        const double dt_dq = t * tp / (tp + tq);
        const double jump = head_(p) - head_(q);
        trip.emplace_back(p, p, dt_dp * jump);
        trip.emplace_back(p, q, dt_dq * jump);
        trip.emplace_back(q, p, -dt_dp * jump);
        trip.emplace_back(q, q, -dt_dq * jump);
    });
    for_each_boundary_face(grid_, [&](const BoundaryFace& f) {
        const auto& bc = bvp_.at(f.edge);
        if (bc.type == BoundaryType::dirichlet) {
            const double t = t_(f.cell) * f.length / f.half_span;
            trip.emplace_back(f.cell, f.cell, t * (head_(f.cell) - bc.value));
        }
    });
    Eigen::SparseMatrix<double> dfdy(n, n);
    dfdy.setFromTriplets(trip.begin(), trip.end());
    const Eigen::MatrixXd rhs = -(dfdy * dy);
    Eigen::MatrixXd out(n, dy.cols());
    for (Eigen::Index k = 0; k < dy.cols(); ++k) out.col(k) = solve(rhs.col(k));
    return out;
}

Eigen::VectorXd solve_head(const GridGeometry& grid, const BvpSpec& bvp, const Eigen::VectorXd& log_t) {
    return FlowSolver(grid, bvp, log_t).head();
}

Eigen::VectorXd observe(const Eigen::VectorXd& head, const std::vector<Eigen::Index>& cells) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(cells.size()));
    for (std::size_t k = 0; k < cells.size(); ++k) {
        if (cells[k] < 0 || cells[k] >= head.size())
            throw ValidationError("observation cell out of range");
        out(static_cast<Eigen::Index>(k)) = head(cells[k]);
    }
    return out;
}

ObservableFn::ObservableFn(GridGeometry grid, BvpSpec bvp, std::shared_ptr<const kle::FieldBasis> basis,
                           std::vector<Eigen::Index> head_cells)
    : grid_(grid),
      bvp_(bvp),
      basis_(std::move(basis)),
      cells_(std::move(head_cells)),
      queries_(std::make_shared<std::atomic<std::int64_t>>(0)) {
    grid_.validate();
    bvp_.validate();
    if (!basis_ || basis_->n_cells() != grid_.n_cells())
        throw ValidationError("field basis does not match the grid");
    ObservationLayout{cells_, {}}.validate(grid_.n_cells());
}

Eigen::VectorXd ObservableFn::operator()(const Eigen::VectorXd& xi) const {
    return evaluate(xi, nullptr);
}

Eigen::VectorXd ObservableFn::evaluate(const Eigen::VectorXd& xi, Eigen::MatrixXd* jacobian) const {
    queries_->fetch_add(1);
    const FlowSolver solver(grid_, bvp_, kle::expand(*basis_, xi));
    if (jacobian) {
        const Eigen::MatrixXd du = solver.head_sensitivity(basis_->modes());
        jacobian->resize(n_outputs(), basis_->n_terms());
        for (std::size_t k = 0; k < cells_.size(); ++k)
            jacobian->row(static_cast<Eigen::Index>(k)) = du.row(cells_[k]);
    }
    return observe(solver.head(), cells_);
}

}  // namespace ckba::darcy
