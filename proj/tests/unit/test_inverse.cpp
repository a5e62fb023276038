#include <doctest.h>

#include <quadmath.h>

#include <cmath>
#include <memory>
#include <random>

#include <Eigen/QR>

#include "ckba/darcy.hpp"
#include "ckba/error.hpp"
#include "ckba/gp.hpp"
#include "ckba/inverse.hpp"
#include "ckba/kle.hpp"

using namespace ckba;

namespace {

Eigen::VectorXd gaussian(Eigen::Index n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> N;
    Eigen::VectorXd v(n);
    for (auto& x : v) x = N(rng);
    return v;
}

// A basis with identity modes on n cells, so the field equals xi.
kle::FieldBasis identity_basis(Eigen::Index n) {
    kle::Eigenpairs p{Eigen::VectorXd::Ones(n), Eigen::MatrixXd::Identity(n, n)};
    return kle::make_basis(kle::BasisKind::conditional, Eigen::VectorXd::Zero(n), p, Eigen::VectorXd::Ones(n));
}

// Surrogate f(eta) = c1 * eta with a single row `a`.
std::shared_ptr<ba::RidgeSurrogate> linear_surrogate(const Eigen::VectorXd& a, double c1) {
    auto s = std::make_shared<ba::RidgeSurrogate>();
    s->n_terms = a.size();
    ba::ObservableSurrogate e;
    e.rows = a.transpose();
    pce::PceModel term{pce::multi_index_set(1, 3), Eigen::Vector4d(0.0, c1, 0.0, 0.0)};
    e.terms.push_back(term);
    e.offsets.push_back(0.0);
    s->entries.push_back(e);
    return s;
}

}  // namespace

TEST_CASE("regularization block vanishes at the origin") {
    const auto basis = identity_basis(4);
    inverse::InverseProblemSpec spec;
    spec.u_obs = Eigen::VectorXd::Constant(1, 2.0);
    spec.gamma = 0.5;
    const auto fwd = inverse::surrogate_forward(linear_surrogate(Eigen::Vector4d(1, 0, 0, 0), 1.0));
    const auto r = inverse::residuals(Eigen::VectorXd::Zero(4), spec, fwd, basis, true);
    CHECK(r.r.tail(4).cwiseAbs().maxCoeff() == 0.0);
    CHECK(r.r(0) == 2.0);
    CHECK(r.jacobian.rows() == 5);
    CHECK_THROWS_AS(inverse::residuals(Eigen::VectorXd::Zero(3), spec, fwd, basis, false), ValidationError);
}

TEST_CASE("quadratic objective has the closed-form minimizer") {
    const auto basis = identity_basis(5);
    const auto fwd = inverse::surrogate_forward(linear_surrogate(Eigen::VectorXd::Unit(5, 0), 1.0));
    for (double gamma : {0.0, 1e-6, 0.3, 2.0}) {
        inverse::InverseProblemSpec spec;
        spec.u_obs = Eigen::VectorXd::Constant(1, 2.0);
        spec.sigma_u = 1.0;
        spec.gamma = gamma;
        const auto res = inverse::solve_map(spec, fwd, basis, Eigen::VectorXd::Zero(5));
        CHECK(res.converged);
        CHECK(std::abs(res.xi(0) - 2.0 / (1.0 + gamma)) < 1e-8);
        CHECK(res.xi.tail(4).cwiseAbs().maxCoeff() < 1e-8);
        for (std::size_t i = 1; i < res.objective_history.size(); ++i)
            CHECK(res.objective_history[i] <= res.objective_history[i - 1]);
    }
}

TEST_CASE("strong regularization pins the estimate at the prior mean") {
    const auto basis = identity_basis(3);
    const auto fwd = inverse::surrogate_forward(linear_surrogate(Eigen::Vector3d(0.6, 0.8, 0.0), 2.0));
    inverse::InverseProblemSpec spec;
    spec.u_obs = Eigen::VectorXd::Constant(1, 1.0);
    spec.gamma = 1e6;
    const auto res = inverse::solve_map(spec, fwd, basis, Eigen::VectorXd::Zero(3));
    CHECK(res.xi.norm() < 1e-3);
}

TEST_CASE("ridge subspace is recovered from noiseless data") {
    const int n = 10;
    const auto basis = identity_basis(n);
    // Two observables through one nonlinear ridge direction each.
    Eigen::MatrixXd q = Eigen::MatrixXd(Eigen::MatrixXd::Random(n, n)).householderQr().householderQ();
    auto sur = std::make_shared<ba::RidgeSurrogate>();
    sur->n_terms = n;
    sur->variant = ba::Variant::kd;
    ba::ObservableSurrogate e;
    e.rows = q.leftCols(2).transpose();
    e.joint = pce::PceModel{pce::multi_index_set(2, 3), Eigen::VectorXd::Zero(10)};
    e.joint.coefficients << 0.5, 1.0, 0.7, 0.1, 0.0, 0.05, 0.02, 0.0, 0.0, 0.0;
    sur->entries.push_back(e);
    e.joint.coefficients << -0.2, 0.3, 1.1, 0.0, 0.1, 0.0, 0.0, 0.0, 0.03, 0.0;
    sur->entries.push_back(e);
    const auto fwd = inverse::surrogate_forward(sur);

    Eigen::VectorXd xi_true = Eigen::VectorXd::Zero(n);
    xi_true = q.leftCols(2) * Eigen::Vector2d(0.4, -0.3);
    inverse::InverseProblemSpec spec;
    spec.u_obs = fwd(xi_true, nullptr);
    spec.sigma_u = 1.0;
    spec.gamma = 0.0;
    const auto res = inverse::solve_map(spec, fwd, basis, Eigen::VectorXd::Zero(n));
    CHECK((e.rows * res.xi - e.rows * xi_true).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("surrogate Jacobian matches finite differences inside the residual") {
    const auto basis = identity_basis(4);
    auto sur = std::make_shared<ba::RidgeSurrogate>();
    sur->n_terms = 4;
    ba::ObservableSurrogate e;
    e.rows = Eigen::RowVector4d(0.5, 0.5, 0.5, 0.5);
    e.terms.push_back({pce::multi_index_set(1, 3), Eigen::Vector4d(0.1, 1.0, 0.4, 0.2)});
    e.offsets.push_back(0.0);
    sur->entries.push_back(e);
    const auto fwd = inverse::surrogate_forward(sur);
    inverse::InverseProblemSpec spec;
    spec.u_obs = Eigen::VectorXd::Constant(1, 0.3);
    spec.sigma_u = 0.1;
    spec.gamma = 0.2;
    spec.field_cells = {1, 3};
    spec.y_obs = Eigen::Vector2d(0.5, -0.2);
    spec.sigma_y = 0.05;
    const Eigen::VectorXd x = gaussian(4, 1);
    const auto r = inverse::residuals(x, spec, fwd, basis, true);
    for (int k = 0; k < 4; ++k) {
        Eigen::VectorXd xp = x, xm = x;
        xp(k) += 1e-6;
        xm(k) -= 1e-6;
        const Eigen::VectorXd fd = (inverse::residuals(xp, spec, fwd, basis, false).r -
                                    inverse::residuals(xm, spec, fwd, basis, false).r) / 2e-6;
        CHECK((fd - r.jacobian.col(k)).cwiseAbs().maxCoeff() < 1e-6 * std::max(1.0, fd.cwiseAbs().maxCoeff()));
    }
}

TEST_CASE("spec validation") {
    inverse::InverseProblemSpec spec;
    spec.sigma_u = 0.0;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    spec.sigma_u = 1.0;
    spec.gamma = -1.0;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
}

TEST_CASE("field errors") {
    const Eigen::VectorXd y = gaussian(50, 2);
    auto e = inverse::field_errors(y, y);
    CHECK(e.rel_l2 == 0.0);
    CHECK(e.linf == 0.0);
    e = inverse::field_errors(Eigen::VectorXd(y.array() - 0.25), y);
    CHECK(e.linf == doctest::Approx(0.25).epsilon(1e-14));

    const Eigen::VectorXd a = gaussian(1000, 3), b = gaussian(1000, 4);
    __float128 num = 0, den = 0, mx = 0;
    for (int i = 0; i < 1000; ++i) {
        const __float128 d = static_cast<__float128>(a(i)) - b(i);
        num += d * d;
        den += static_cast<__float128>(b(i)) * b(i);
        if (fabsq(d) > mx) mx = fabsq(d);
    }
    const double rel = static_cast<double>(sqrtq(num) / sqrtq(den));
    e = inverse::field_errors(a, b);
    CHECK(std::abs(e.rel_l2 - rel) < 1e-12);
    CHECK(std::abs(e.linf - static_cast<double>(mx)) < 1e-12);
    CHECK_THROWS_AS(inverse::field_errors(a, b.head(10)), ValidationError);
}

TEST_CASE("CKLEMAP recovers a field from exact head data") {
    darcy::GridGeometry grid{16, 16, 1.0, 1.0};
    const int n_xi = 32;
    gp::KernelSpec kernel{gp::KernelFamily::matern52, 1.0, 0.2 * std::sqrt(2.0)};
    gp::GpModel prior(kernel, 0.0);
    const auto w = grid.cell_areas();
    const auto pairs = kle::eigensolve(gp::cond_cov_matrix(prior, grid.centers()), w, n_xi);
    auto basis = std::make_shared<kle::FieldBasis>(
        kle::make_basis(kle::BasisKind::unconditional, Eigen::VectorXd::Zero(grid.n_cells()), pairs, w));

    // Heads on an 8 x 8 lattice of wells.
    std::vector<Eigen::Index> wells;
    for (int j = 0; j < 8; ++j)
        for (int i = 0; i < 8; ++i) wells.push_back(grid.index(2 * i + 1, 2 * j + 1));
    darcy::ObservableFn fn(grid, darcy::BvpSpec{}, basis, wells);

    const Eigen::VectorXd xi_true = gaussian(n_xi, 5);
    const Eigen::VectorXd y_ref = kle::expand(*basis, xi_true);
    inverse::InverseProblemSpec spec;
    spec.u_obs = fn(xi_true);
    spec.sigma_u = 1e-3;
    spec.gamma = 1e-6;
    const auto res = inverse::solve_map(spec, inverse::pde_forward(fn), *basis, Eigen::VectorXd::Zero(n_xi), {}, &y_ref);
    REQUIRE(res.errors.has_value());
    MESSAGE("rel l2 " << res.errors->rel_l2 << " iterations " << res.iterations << " " << res.stop_reason);
    CHECK(res.errors->rel_l2 < 0.15);
}

TEST_CASE("sensitivity and finite-difference Jacobians agree") {
    darcy::GridGeometry grid{8, 8, 1.0, 1.0};
    gp::GpModel prior(gp::KernelSpec{gp::KernelFamily::matern52, 1.0, 0.3}, 0.0);
    const auto w = grid.cell_areas();
    auto basis = std::make_shared<kle::FieldBasis>(kle::make_basis(
        kle::BasisKind::unconditional, Eigen::VectorXd::Zero(64),
        kle::eigensolve(gp::cond_cov_matrix(prior, grid.centers()), w, 6), w));
    darcy::ObservableFn fn(grid, darcy::BvpSpec{}, basis, {9, 20, 45});
    Eigen::MatrixXd js, jf;
    const Eigen::VectorXd x = gaussian(6, 6);
    inverse::pde_forward(fn)(x, &js);
    inverse::pde_forward(fn, inverse::JacobianMode::finite_difference)(x, &jf);
    CHECK((js - jf).cwiseAbs().maxCoeff() < 1e-6);
}
