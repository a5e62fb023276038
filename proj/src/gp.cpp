#include "ckba/gp.hpp"

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "ckba/error.hpp"
#include "ckba/parallel.hpp"

namespace ckba::gp {

KernelFamily parse_kernel_family(std::string_view name) {
    if (name == "matern52") return KernelFamily::matern52;
    if (name == "squared-exponential") return KernelFamily::squared_exponential;
    throw ValidationError("unknown kernel family '" + std::string(name) + "'");
}

std::string_view to_string(KernelFamily family) {
    switch (family) {
        case KernelFamily::matern52: return "matern52";
        case KernelFamily::squared_exponential: return "squared-exponential";
    }
    return "?";
}

void KernelSpec::validate() const {
    if (!(variance > 0.0)) throw ValidationError("kernel variance must be > 0");
    if (!(lengthscale > 0.0)) throw ValidationError("kernel lengthscale must be > 0");
}

double kernel_eval_r(const KernelSpec& spec, double r) {
    const double s = r / spec.lengthscale;
    switch (spec.family) {
        case KernelFamily::matern52: {
            const double t = std::sqrt(5.0) * s;
            return spec.variance * (1.0 + t + 5.0 * s * s / 3.0) * std::exp(-t);
        }
        case KernelFamily::squared_exponential:
            return spec.variance * std::exp(-0.5 * s * s);
    }
    return 0.0;
}

double kernel_eval(const KernelSpec& spec, const Point& x1, const Point& x2) {
    return kernel_eval_r(spec, (x1 - x2).norm());
}

Eigen::MatrixXd kernel_matrix(const KernelSpec& spec, const Points& a, const Points& b) {
    Eigen::MatrixXd k(a.rows(), b.rows());
    parallel_for(static_cast<std::size_t>(a.rows()), [&](std::size_t i) {
        const Point xi = a.row(static_cast<Eigen::Index>(i)).transpose();
        for (Eigen::Index j = 0; j < b.rows(); ++j)
            k(static_cast<Eigen::Index>(i), j) = kernel_eval(spec, xi, b.row(j).transpose());
    });
    return k;
}

GpModel::GpModel(KernelSpec kernel, double constant_mean)
    : GpModel(kernel, [constant_mean](const Point&) { return constant_mean; }) {}

GpModel::GpModel(KernelSpec kernel, MeanFunction mean)
    : kernel_(kernel), mean_(std::move(mean)) {
    kernel_.validate();
    if (!mean_) throw ValidationError("GP mean function is empty");
}

Eigen::Index GpModel::n_conditioning() const noexcept {
    return cond_ ? cond_->locations.rows() : 0;
}

double GpModel::jitter() const noexcept { return cond_ ? cond_->jitter : 0.0; }

double GpModel::mean(const Point& x) const {
    double m = mean_(x);
    if (!cond_) return m;
    for (Eigen::Index i = 0; i < cond_->locations.rows(); ++i)
        m += kernel_eval(kernel_, x, cond_->locations.row(i).transpose()) * cond_->weights(i);
    return m;
}

double GpModel::covariance(const Point& a, const Point& b) const {
    double c = kernel_eval(kernel_, a, b);
    if (!cond_) return c;
    const Eigen::Index n = cond_->locations.rows();
    Eigen::VectorXd ka(n), kb(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Point xi = cond_->locations.row(i).transpose();
        ka(i) = kernel_eval(kernel_, a, xi);
        kb(i) = kernel_eval(kernel_, b, xi);
    }
    return c - ka.dot(cond_->gram.solve(kb));
}

Eigen::VectorXd GpModel::mean(const Points& x) const {
    Eigen::VectorXd m(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) m(i) = mean_(x.row(i).transpose());
    if (cond_) m += kernel_matrix(kernel_, x, cond_->locations) * cond_->weights;
    return m;
}

Eigen::MatrixXd GpModel::covariance(const Points& x) const {
    Eigen::MatrixXd c = kernel_matrix(kernel_, x, x);
    if (!cond_) return c;
    // C - V^T V with V = L^-1 C(X, x)
    Eigen::MatrixXd v = kernel_matrix(kernel_, cond_->locations, x);
    cond_->gram.matrixL().solveInPlace(v);
    c.noalias() -= v.transpose() * v;
    // Exact symmetry for the eigensolver.
    c = 0.5 * (c + c.transpose()).eval();
    return c;
}

GpModel GpModel::condition(const Points& locations, const Eigen::VectorXd& values,
                           double noise_variance) const {
    if (cond_) throw ValidationError("GP model is already conditioned");
    if (locations.rows() != values.size())
        throw ValidationError("conditioning locations and values differ in length");
    if (!(noise_variance >= 0.0)) throw ValidationError("noise variance must be >= 0");
    if (!locations.allFinite() || !values.allFinite())
        throw ValidationError("conditioning data must be finite");
    GpModel out = *this;
    const Eigen::Index n = locations.rows();
    if (n == 0) return out;

    if (noise_variance == 0.0) {
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = i + 1; j < n; ++j)
                if (locations.row(i) == locations.row(j))
                    throw DegenerateGramError(
                        "duplicate noiseless observation locations " + std::to_string(i) +
                        " and " + std::to_string(j));
    }

    auto c = std::make_shared<Conditioning>();
    c->locations = locations;
    c->values = values;
    c->noise_variance = noise_variance;

    Eigen::MatrixXd gram = kernel_matrix(kernel_, locations, locations);
    gram.diagonal().array() += noise_variance;
    c->gram.compute(gram);
    double jitter = 1e-10;
    for (int attempt = 0; c->gram.info() != Eigen::Success; ++attempt) {
        if (attempt > 10)
            throw DegenerateGramError("Gram matrix not factorizable after jitter " +
                                      std::to_string(jitter / 2));
        Eigen::MatrixXd g = gram;
        g.diagonal().array() += jitter;
        c->gram.compute(g);
        c->jitter = jitter;
        jitter *= 2.0;
    }

    Eigen::VectorXd resid(n);
    for (Eigen::Index i = 0; i < n; ++i) resid(i) = values(i) - mean_(locations.row(i).transpose());
    c->weights = c->gram.solve(resid);
    out.cond_ = std::move(c);
    return out;
}

Eigen::MatrixXd cond_cov_matrix(const GpModel& gp, const Points& cell_centers) {
    if (cell_centers.rows() == 0) throw ValidationError("grid is empty");
    return gp.covariance(cell_centers);
}

}  // namespace ckba::gp
