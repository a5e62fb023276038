#pragma once

#include <Eigen/Core>

#include "ckba/ba.hpp"

namespace ckba::uq {

/// Gaussian kernel density estimate of a scalar sample. Keeps a weighted
/// point representation (the samples, or a linear binning of them for large
/// samples) so it can be re-evaluated anywhere.
struct PdfEstimate {
    Eigen::VectorXd grid;
    Eigen::VectorXd density;
    double bandwidth = 0.0;
    Eigen::Index sample_count = 0;
    Eigen::VectorXd centers;
    Eigen::VectorXd masses;  // sums to 1

    double evaluate(double x) const;
    Eigen::VectorXd evaluate(const Eigen::VectorXd& x) const;
};

/// Scott's rule bandwidth h = sd * n^(-1/5), sd the sample standard deviation.
double scott_bandwidth(const Eigen::VectorXd& samples);

/// Density on `grid_points` points spanning [min - 3h, max + 3h].
/// Throws DegenerateSampleError for fewer than two or constant samples.
PdfEstimate kde(const Eigen::VectorXd& samples, Eigen::Index grid_points = 512);

double trapezoid(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

/// KL(p || q) by the trapezoid rule on `grid_points` points spanning both
/// estimates, with q floored by 1e-12. Can come out slightly negative.
double kl_divergence(const PdfEstimate& p, const PdfEstimate& q, Eigen::Index grid_points = 1024);

/// Per-row RMSE between two n_outputs x n matrices.
Eigen::VectorXd rmse_rows(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& truth);
Eigen::VectorXd rmse_table(const ba::RidgeSurrogate& surrogate, const ba::EnsembleDataset& test);

}  // namespace ckba::uq
