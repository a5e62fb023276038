#pragma once

#include <functional>
#include <memory>
#include <string_view>

#include <Eigen/Cholesky>
#include <Eigen/Core>

namespace ckba::gp {

using Point = Eigen::Vector2d;
/// One point per row.
using Points = Eigen::Matrix<double, Eigen::Dynamic, 2>;

enum class KernelFamily { matern52, squared_exponential };

KernelFamily parse_kernel_family(std::string_view name);
std::string_view to_string(KernelFamily family);

struct KernelSpec {
    KernelFamily family = KernelFamily::matern52;
    double variance = 1.0;
    double lengthscale = 1.0;

    /// Throws ValidationError unless variance > 0 and lengthscale > 0.
    void validate() const;
};

/// Stationary covariance C(x1, x2) as a function of r = |x1 - x2|.
double kernel_eval(const KernelSpec& spec, const Point& x1, const Point& x2);
double kernel_eval_r(const KernelSpec& spec, double r);

/// C(A, B) for two point sets.
Eigen::MatrixXd kernel_matrix(const KernelSpec& spec, const Points& a, const Points& b);

using MeanFunction = std::function<double(const Point&)>;

/// Gaussian process prior on the log-transmissivity field, optionally
/// conditioned on direct point measurements (simple Kriging).
///
/// Conditioned models evaluate
///   mean_c(x)   = m(x) + C(x,X) [C(X,X) + s2 I]^-1 (yhat - m(X))
///   cov_c(x,x') = C(x,x') - C(x,X) [C(X,X) + s2 I]^-1 C(X,x')
/// Instances are immutable and cheap to copy.
class GpModel {
public:
    GpModel(KernelSpec kernel, double constant_mean);
    GpModel(KernelSpec kernel, MeanFunction mean);

    const KernelSpec& kernel() const noexcept { return kernel_; }
    bool conditioned() const noexcept { return static_cast<bool>(cond_); }
    /// Number of conditioning points, 0 when unconditional.
    Eigen::Index n_conditioning() const noexcept;
    /// Diagonal jitter that was needed to factor the Gram matrix.
    double jitter() const noexcept;

    double prior_mean(const Point& x) const { return mean_(x); }
    double mean(const Point& x) const;
    double covariance(const Point& a, const Point& b) const;

    Eigen::VectorXd mean(const Points& x) const;
    /// Dense covariance over a point set (conditional if conditioned).
    Eigen::MatrixXd covariance(const Points& x) const;

    /// Condition on observations `values` at `locations` with noise variance
    /// `noise_variance`. Empty data returns a copy of this model. Throws
    /// DegenerateGramError for duplicate locations without noise or when the
    /// jittered Gram matrix still fails to factor.
    GpModel condition(const Points& locations, const Eigen::VectorXd& values,
                      double noise_variance) const;

private:
    struct Conditioning {
        Points locations;
        Eigen::VectorXd values;
        double noise_variance = 0.0;
        double jitter = 0.0;
        Eigen::LLT<Eigen::MatrixXd> gram;
        Eigen::VectorXd weights;  // gram^-1 (values - m(X))
    };

    KernelSpec kernel_;
    MeanFunction mean_;
    std::shared_ptr<const Conditioning> cond_;
};

/// Covariance of `gp` materialized on grid cell centers.
Eigen::MatrixXd cond_cov_matrix(const GpModel& gp, const Points& cell_centers);

}  // namespace ckba::gp
