#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>

#include <Eigen/Eigenvalues>

#include "ckba/darcy.hpp"
#include "ckba/error.hpp"
#include "ckba/gp.hpp"
#include "ckba/kle.hpp"

using namespace ckba;

namespace {

Eigen::MatrixXd random_spd(int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> N;
    Eigen::MatrixXd a(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = N(rng);
    return a * a.transpose() + 0.5 * Eigen::MatrixXd::Identity(n, n);
}

// Independent dense oracle: right eigenvectors of C W (a non-symmetric
// problem sharing the spectrum), W-normalized and sign-fixed.
kle::Eigenpairs brute_force(const Eigen::MatrixXd& c, const Eigen::VectorXd& w) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(c * w.asDiagonal());
    const Eigen::Index n = c.rows();
    std::vector<Eigen::Index> order(n);
    std::iota(order.begin(), order.end(), 0);
    const Eigen::VectorXd vals = es.eigenvalues().real();
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return vals(a) > vals(b); });
    kle::Eigenpairs out;
    out.values.resize(n);
    out.functions.resize(n, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        Eigen::VectorXd v = es.eigenvectors().col(order[k]).real();
        v /= std::sqrt(v.dot(w.asDiagonal() * v));
        Eigen::Index imax;
        v.cwiseAbs().maxCoeff(&imax);
        if (v(imax) < 0) v = -v;
        out.values(k) = vals(order[k]);
        out.functions.col(k) = v;
    }
    return out;
}

}  // namespace

TEST_CASE("rank-one covariance") {
    Eigen::VectorXd g(6);
    g << 1.0, -2.0, 0.5, 3.0, 0.0, 1.5;
    const Eigen::VectorXd w = Eigen::VectorXd::Constant(6, 1.0 / 6.0);
    const auto pairs = kle::eigensolve(g * g.transpose(), w, 3);
    CHECK(pairs.values(0) == doctest::Approx(w.dot(g.cwiseProduct(g))).epsilon(1e-12));
    CHECK(std::abs(pairs.values(1)) < 1e-12);
    CHECK(std::abs(pairs.values(2)) < 1e-12);
    const Eigen::VectorXd phi = pairs.functions.col(0);
    // phi is parallel to g with the largest entry (3.0) positive.
    CHECK(std::abs(std::abs(phi.normalized().dot(g.normalized())) - 1.0) < 1e-12);
    CHECK(phi(3) > 0);
}

TEST_CASE("identity covariance with uniform weights") {
    const int n = 8;
    const Eigen::VectorXd w = Eigen::VectorXd::Constant(n, 1.0 / n);
    const auto pairs = kle::eigensolve(Eigen::MatrixXd::Identity(n, n), w, n);
    for (int i = 0; i < n; ++i) CHECK(pairs.values(i) == doctest::Approx(1.0 / n).epsilon(1e-14));
}

TEST_CASE("eigenpairs match a dense oracle") {
    const Eigen::MatrixXd c = random_spd(10, 42);
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> U(0.5, 2.0);
    Eigen::VectorXd w(10);
    for (int i = 0; i < 10; ++i) w(i) = U(rng);
    const auto got = kle::eigensolve(c, w, 10);
    const auto want = brute_force(c, w);
    CHECK((got.values - want.values).cwiseAbs().maxCoeff() < 1e-8 * want.values(0));
    CHECK((got.functions - want.functions).cwiseAbs().maxCoeff() < 1e-8);
    for (int i = 0; i + 1 < 10; ++i) CHECK(got.values(i) >= got.values(i + 1));
    // W-orthonormal columns.
    const Eigen::MatrixXd gram = got.functions.transpose() * w.asDiagonal() * got.functions;
    CHECK((gram - Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff() < 1e-10);
    // Full reconstruction of the covariance.
    const Eigen::MatrixXd rec = got.functions * got.values.asDiagonal() * got.functions.transpose();
    CHECK((rec - c).norm() / c.norm() < 1e-6);
}

TEST_CASE("negative eigenvalues are clamped and truncation is validated") {
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(3, 3);
    c.diagonal() << 2.0, -1e-9, 1.0;
    const auto pairs = kle::eigensolve(c, Eigen::VectorXd::Ones(3), 3);
    CHECK(pairs.values(2) == 0.0);
    CHECK_THROWS_AS(kle::eigensolve(c, Eigen::VectorXd::Ones(3), 4), ValidationError);
    CHECK_THROWS_AS(kle::eigensolve(c, Eigen::VectorXd::Ones(2), 2), ValidationError);
}

TEST_CASE("conditioning shrinks the spectrum") {
    darcy::GridGeometry grid{8, 8, 1.0, 1.0};
    gp::GpModel prior(gp::KernelSpec{gp::KernelFamily::matern52, 1.0, 0.3}, 0.0);
    gp::Points X(4, 2);
    X << 0.1, 0.1, 0.6, 0.2, 0.3, 0.8, 0.9, 0.9;
    auto post = prior.condition(X, Eigen::Vector4d(0.2, -0.1, 0.4, 0.0), 1e-4);
    const auto w = grid.cell_areas();
    const auto pu = kle::eigensolve(gp::cond_cov_matrix(prior, grid.centers()), w, grid.n_cells());
    const auto pc = kle::eigensolve(gp::cond_cov_matrix(post, grid.centers()), w, grid.n_cells());
    CHECK(pc.values.sum() <= pu.values.sum() + 1e-8);
}

TEST_CASE("expand is affine in the coefficients") {
    const auto pairs = kle::eigensolve(random_spd(12, 7), Eigen::VectorXd::Constant(12, 0.5), 5);
    Eigen::VectorXd mean = Eigen::VectorXd::LinSpaced(12, -1.0, 1.0);
    const auto basis = kle::make_basis(kle::BasisKind::unconditional, mean, pairs, Eigen::VectorXd::Constant(12, 0.5));
    CHECK(kle::expand(basis, Eigen::VectorXd(Eigen::VectorXd::Zero(5))) == mean);
    Eigen::VectorXd a = Eigen::VectorXd::Random(5), b = Eigen::VectorXd::Random(5);
    const Eigen::VectorXd lhs = kle::expand(basis, Eigen::VectorXd(a + b));
    const Eigen::VectorXd rhs = kle::expand(basis, a) + kle::expand(basis, b) - mean;
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::MatrixXd batch(5, 2);
    batch << a, b;
    const Eigen::MatrixXd fields = kle::expand(basis, batch);
    CHECK((fields.col(0) - kle::expand(basis, a)).cwiseAbs().maxCoeff() < 1e-13);
    CHECK_THROWS_AS(kle::expand(basis, Eigen::VectorXd(Eigen::VectorXd::Zero(4))), ValidationError);
}

TEST_CASE("ensemble covariance matches the truncated covariance") {
    const int n = 6;
    const Eigen::VectorXd w = Eigen::VectorXd::Constant(n, 1.0 / n);
    const auto pairs = kle::eigensolve(random_spd(n, 3), w, 4);
    const auto basis = kle::make_basis(kle::BasisKind::unconditional, Eigen::VectorXd::Zero(n), pairs, w);
    const Eigen::Index draws = 100000;
    const Eigen::MatrixXd fields = kle::expand(basis, kle::sample_coeffs(17, draws, 4));
    const Eigen::MatrixXd emp = fields * fields.transpose() / static_cast<double>(draws);
    const Eigen::MatrixXd exact = pairs.functions * pairs.values.asDiagonal() * pairs.functions.transpose();
    // Entrywise Monte-Carlo error ~ sqrt((C_ii C_jj + C_ij^2) / draws); allow 5 sigma.
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double sd = std::sqrt((exact(i, i) * exact(j, j) + exact(i, j) * exact(i, j)) / draws);
            CHECK(std::abs(emp(i, j) - exact(i, j)) < 5.0 * sd);
        }
}

TEST_CASE("coefficient sampling") {
    const auto a = kle::sample_coeffs(5, 100, 7);
    const auto b = kle::sample_coeffs(5, 100, 7);
    CHECK(a == b);
    CHECK(a.rows() == 7);
    CHECK(a.cols() == 100);
    CHECK(kle::sample_coeffs(5, 0, 7).size() == 0);
    const auto big = kle::sample_coeffs(6, 100000, 4);
    for (int i = 0; i < 4; ++i) CHECK(std::abs(big.row(i).mean()) < 0.02);
    CHECK(kle::sample_coeffs(5, 10, 3) != kle::sample_coeffs(6, 10, 3));
}

TEST_CASE("basis persistence round trip") {
    const auto pairs = kle::eigensolve(random_spd(9, 1), Eigen::VectorXd::Ones(9), 4);
    const auto basis = kle::make_basis(kle::BasisKind::conditional, Eigen::VectorXd::Ones(9), pairs, Eigen::VectorXd::Ones(9));
    const auto dir = std::filesystem::temp_directory_path() / "ckba_kle_roundtrip";
    std::filesystem::remove_all(dir);
    kle::save_basis(dir, basis, "abc");
    const auto back = kle::load_basis(dir, "abc");
    CHECK(back.kind == kle::BasisKind::conditional);
    CHECK(back.eigenfunctions == basis.eigenfunctions);
    CHECK(back.eigenvalues == basis.eigenvalues);
    CHECK_THROWS_AS(kle::load_basis(dir, "other"), ValidationError);
    std::filesystem::remove_all(dir);
}
