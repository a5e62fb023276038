#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "ckba/error.hpp"
#include "ckba/uq.hpp"

using namespace ckba;

namespace {

Eigen::VectorXd normal_draws(Eigen::Index n, double sd, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> N(0.0, sd);
    Eigen::VectorXd v(n);
    for (auto& x : v) x = N(rng);
    return v;
}

}  // namespace

TEST_CASE("Scott bandwidth") {
    Eigen::VectorXd s(4);
    s << 1.0, 2.0, 3.0, 4.0;
    const double sd = std::sqrt(5.0 / 3.0);
    CHECK(uq::scott_bandwidth(s) == doctest::Approx(sd * std::pow(4.0, -0.2)));
}

TEST_CASE("standard normal peak density") {
    const auto est = uq::kde(normal_draws(100000, 1.0, 1));
    const double peak = est.evaluate(0.0);
    const double smoothed = 1.0 / std::sqrt(2.0 * std::numbers::pi * (1.0 + est.bandwidth * est.bandwidth));
    CHECK(std::abs(peak - 0.399) < 0.02);
    CHECK(std::abs(peak - smoothed) < 0.01);
}

TEST_CASE("density is nonnegative and normalized") {
    for (std::uint64_t seed : {2u, 3u}) {
        for (Eigen::Index n : {50, 5000}) {
            const auto est = uq::kde(normal_draws(n, 2.0, seed));
            CHECK(est.density.minCoeff() >= 0.0);
            const double mass = uq::trapezoid(est.grid, est.density);
            CHECK(mass >= 0.98);
            CHECK(mass <= 1.02);
            CHECK(est.grid.size() == 512);
            CHECK(est.masses.sum() == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("degenerate samples") {
    CHECK_THROWS_AS(uq::kde(Eigen::VectorXd::Constant(10, 1.5)), DegenerateSampleError);
    CHECK_THROWS_AS(uq::kde(Eigen::VectorXd::Constant(1, 1.5)), DegenerateSampleError);
}

TEST_CASE("KL divergence") {
    const auto p = uq::kde(normal_draws(1000, 1.0, 4));
    CHECK(std::abs(uq::kl_divergence(p, p)) <= 1e-10);

    const auto a = uq::kde(normal_draws(1000000, 1.0, 5));
    const auto b = uq::kde(normal_draws(1000000, 2.0, 6));
    const double closed = std::log(2.0) + 1.0 / 8.0 - 0.5;
    const double kl = uq::kl_divergence(a, b);
    MESSAGE("KL " << kl << " closed form " << closed);
    CHECK(std::abs(kl - 0.318) < 0.02);
}

TEST_CASE("RMSE tables") {
    Eigen::MatrixXd u(2, 4);
    u << 1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 0.5;
    CHECK(uq::rmse_rows(u, u).cwiseAbs().maxCoeff() == 0.0);
    Eigen::MatrixXd mean_pred = u.rowwise().mean().replicate(1, 4);
    const Eigen::VectorXd r = uq::rmse_rows(mean_pred, u);
    for (int i = 0; i < 2; ++i) {
        const double sd = std::sqrt((u.row(i).array() - u.row(i).mean()).square().mean());
        CHECK(r(i) == doctest::Approx(sd).epsilon(1e-14));
    }
    CHECK_THROWS_AS(uq::rmse_rows(u, u.leftCols(3)), ValidationError);
}

TEST_CASE("RMSE of a linear observable surrogate") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> N;
    auto draw = [&](int q) {
        Eigen::MatrixXd xi(6, q);
        for (auto& v : xi.reshaped()) v = N(rng);
        return xi;
    };
    const Eigen::VectorXd a = Eigen::VectorXd::LinSpaced(6, 1.0, -0.5).normalized();
    ba::VectorFn g = [a](const Eigen::VectorXd& x) { return Eigen::VectorXd::Constant(1, 1.0 + a.dot(x)); };
    auto make = [&](const Eigen::MatrixXd& xi, ba::DatasetRole role) {
        Eigen::MatrixXd u(1, xi.cols());
        for (Eigen::Index j = 0; j < xi.cols(); ++j) u(0, j) = g(xi.col(j))(0);
        return ba::EnsembleDataset{xi, u, 0, role};
    };
    const auto train = make(draw(200), ba::DatasetRole::train);
    const auto test = make(draw(200), ba::DatasetRole::test);
    const auto sur = ba::fit(g, train, {});
    CHECK(uq::rmse_table(sur, test)(0) < 1e-6);
    CHECK_THROWS_AS(uq::rmse_table(sur, train), ValidationError);
}
