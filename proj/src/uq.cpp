#include "ckba/uq.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ckba/error.hpp"

namespace ckba::uq {
namespace {

// Above this many samples the estimate keeps a linear binning on
// kBins points instead of the raw sample.
constexpr Eigen::Index kExactLimit = 4096;
constexpr Eigen::Index kBins = 4096;

}  // namespace

double PdfEstimate::evaluate(double x) const {
    const double inv_h = 1.0 / bandwidth;
    const double norm = inv_h / std::sqrt(2.0 * std::numbers::pi);
    double s = 0.0;
    for (Eigen::Index k = 0; k < centers.size(); ++k) {
        const double z = (x - centers(k)) * inv_h;
        if (std::abs(z) < 40.0) s += masses(k) * std::exp(-0.5 * z * z);
    }
    return s * norm;
}

Eigen::VectorXd PdfEstimate::evaluate(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) out(i) = evaluate(x(i));
    return out;
}

double scott_bandwidth(const Eigen::VectorXd& samples) {
    const auto n = samples.size();
    if (n < 2) throw DegenerateSampleError("KDE needs at least two samples");
    const double mean = samples.mean();
    const double sd = std::sqrt((samples.array() - mean).square().sum() / static_cast<double>(n - 1));
    if (!(sd > 1e-14 * std::max(1.0, std::abs(mean))))
        throw DegenerateSampleError("KDE samples are constant");
    return sd * std::pow(static_cast<double>(n), -0.2);
}

PdfEstimate kde(const Eigen::VectorXd& samples, Eigen::Index grid_points) {
    if (!samples.allFinite()) throw ValidationError("KDE samples must be finite");
    if (grid_points < 2) throw ValidationError("KDE grid needs at least two points");
    PdfEstimate est;
    est.bandwidth = scott_bandwidth(samples);
    est.sample_count = samples.size();
    const double lo = samples.minCoeff();
    const double hi = samples.maxCoeff();

    if (samples.size() <= kExactLimit) {
        est.centers = samples;
        est.masses = Eigen::VectorXd::Constant(samples.size(), 1.0 / static_cast<double>(samples.size()));
    } else {
        const double delta = (hi - lo) / static_cast<double>(kBins - 1);
        est.centers = Eigen::VectorXd::LinSpaced(kBins, lo, hi);
        est.masses = Eigen::VectorXd::Zero(kBins);
        const double w = 1.0 / static_cast<double>(samples.size());
        for (Eigen::Index i = 0; i < samples.size(); ++i) {
            const double pos = (samples(i) - lo) / delta;
            const auto k = std::min<Eigen::Index>(static_cast<Eigen::Index>(pos), kBins - 2);
            const double frac = pos - static_cast<double>(k);
            est.masses(k) += w * (1.0 - frac);
            est.masses(k + 1) += w * frac;
        }
    }
    est.grid = Eigen::VectorXd::LinSpaced(grid_points, lo - 3.0 * est.bandwidth, hi + 3.0 * est.bandwidth);
    est.density = est.evaluate(est.grid);
    return est;
}

double trapezoid(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    double s = 0.0;
    for (Eigen::Index i = 1; i < x.size(); ++i) s += 0.5 * (x(i) - x(i - 1)) * (y(i) + y(i - 1));
    return s;
}

double kl_divergence(const PdfEstimate& p, const PdfEstimate& q, Eigen::Index grid_points) {
    const double lo = std::min(p.grid(0), q.grid(0));
    const double hi = std::max(p.grid(p.grid.size() - 1), q.grid(q.grid.size() - 1));
    const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(grid_points, lo, hi);
    const Eigen::VectorXd pv = p.evaluate(x);
    const Eigen::VectorXd qv = q.evaluate(x);
    Eigen::VectorXd integrand(grid_points);
    for (Eigen::Index i = 0; i < grid_points; ++i) {
        if (pv(i) <= 0.0 || pv(i) == qv(i))
            integrand(i) = 0.0;
        else
            integrand(i) = pv(i) * std::log(pv(i) / (qv(i) + 1e-12));
    }
    return trapezoid(x, integrand);
}

Eigen::VectorXd rmse_rows(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& truth) {
    if (predicted.rows() != truth.rows() || predicted.cols() != truth.cols())
        throw ValidationError("prediction and truth shapes differ");
    if (truth.cols() == 0) throw ValidationError("RMSE needs at least one sample");
    return ((predicted - truth).rowwise().squaredNorm() / static_cast<double>(truth.cols())).cwiseSqrt();
}

Eigen::VectorXd rmse_table(const ba::RidgeSurrogate& surrogate, const ba::EnsembleDataset& test) {
    if (test.role != ba::DatasetRole::test) throw ValidationError("RMSE table expects a test dataset");
    test.validate();
    return rmse_rows(ba::predict(surrogate, test.xi), test.u);
}

}  // namespace ckba::uq
