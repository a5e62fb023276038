#include "ckba/ba.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/QR>
#include <json.hpp>

#include "ckba/error.hpp"
#include "ckba/io.hpp"
#include "ckba/parallel.hpp"

namespace ckba::ba {

void EnsembleDataset::validate() const {
    if (xi.cols() != u.cols())
        throw ValidationError("dataset has " + std::to_string(xi.cols()) + " coefficient columns but " +
                              std::to_string(u.cols()) + " observable columns");
    if (!xi.allFinite() || !u.allFinite()) throw ValidationError("dataset has non-finite entries");
}

namespace {

double soft_threshold(double v, double t) {
    if (v > t) return v - t;
    if (v < -t) return v + t;
    return 0.0;
}

// Coordinate descent on 1/2 x'Gx - c'x + sum_j pen_j |x_j|, warm-started
// from x. Returns the number of sweeps; sets `converged` when the largest
// coordinate change in a sweep falls below tol.
int coordinate_descent(const Eigen::MatrixXd& gram, const Eigen::VectorXd& c, const Eigen::VectorXd& pen,
                       Eigen::VectorXd& x, double tol, int max_sweeps, bool& converged) {
    const Eigen::Index n = x.size();
    Eigen::VectorXd grad = gram * x - c;
    converged = false;
    int sweep = 0;
    while (sweep < max_sweeps) {
        ++sweep;
        double max_change = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            const double gjj = gram(j, j);
            if (gjj <= 1e-300) continue;
            const double old = x(j);
            const double updated = soft_threshold(gjj * old - grad(j), pen(j)) / gjj;
            const double delta = updated - old;
            if (delta != 0.0) {
                x(j) = updated;
                grad.noalias() += delta * gram.col(j);
                max_change = std::max(max_change, std::abs(delta));
            }
        }
        if (max_change < tol) {
            converged = true;
            break;
        }
    }
    return sweep;
}

}  // namespace

double least_squares_residual(const Eigen::MatrixXd& design, const Eigen::VectorXd& target) {
    if (design.rows() == 0) return target.norm();
    const Eigen::VectorXd x = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(design).solve(target);
    return (target - design * x).norm();
}

BpdnResult bpdn(const Eigen::MatrixXd& design, const Eigen::VectorXd& target, double eps,
                const BpdnOptions& options) {
    if (design.rows() != target.size()) throw ValidationError("design and target row counts differ");
    if (!(eps >= 0.0)) throw ValidationError("BPDN tolerance must be >= 0");
    if (!design.allFinite() || !target.allFinite()) throw ValidationError("BPDN data must be finite");

    const Eigen::Index n = design.cols();
    const Eigen::MatrixXd gram = design.transpose() * design;
    const Eigen::VectorXd c = design.transpose() * target;
    Eigen::VectorXd mask = Eigen::VectorXd::Ones(n);
    for (auto j : options.unpenalized) {
        if (j < 0 || j >= n) throw ValidationError("unpenalized column out of range");
        mask(j) = 0.0;
    }
    const double feas = eps + 0.5 * options.feasibility_tol;
    auto residual = [&](const Eigen::VectorXd& x) { return (target - design * x).norm(); };

    BpdnResult out;
    out.epsilon = eps;
    int sweeps_total = 0;
    bool cd_ok = true;

    // lambda = infinity: penalized coefficients vanish, free ones are least squares.
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    {
        Eigen::VectorXd pen = mask * 1e300;
        sweeps_total += coordinate_descent(gram, c, pen, x, options.step_tol, options.max_sweeps, cd_ok);
    }
    double r = residual(x);
    const double lambda_max = ((gram * x - c).cwiseAbs().cwiseProduct(mask)).maxCoeff();
    if (r <= feas || lambda_max <= 0.0) {
        out.x = x;
        out.residual = r;
        out.lambda = lambda_max;
        out.sweeps = sweeps_total;
        out.converged = r <= feas;
        if (!out.converged)
            throw ConvergenceError("BPDN infeasible: residual " + std::to_string(r) + " > eps " +
                                   std::to_string(eps),
                                   0);
        return out;
    }

    const double r_ls = least_squares_residual(design, target);
    if (r_ls > feas)
        throw ConvergenceError("BPDN infeasible: least-squares residual " + std::to_string(r_ls) +
                                   " exceeds eps " + std::to_string(eps),
                               0);

    double log_hi = std::log(lambda_max);
    double log_lo = log_hi + std::log(1e-15);
    Eigen::VectorXd x_lo = x;
    {
        Eigen::VectorXd pen = mask * std::exp(log_lo);
        sweeps_total += coordinate_descent(gram, c, pen, x_lo, options.step_tol, options.max_sweeps, cd_ok);
    }
    double r_lo = residual(x_lo);
    if (r_lo > feas) {
        // Coordinate descent stalls on ill-conditioned designs near the
        // least-squares limit; the minimum-norm solution is feasible there.
        Eigen::VectorXd x_ls = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(design).solve(target);
        const double r = residual(x_ls);
        if (r < r_lo) {
            x_lo = std::move(x_ls);
            r_lo = r;
        }
    }
    if (r_lo > feas) {
        out.x = x_lo;
        out.residual = r_lo;
        out.sweeps = sweeps_total;
        throw ConvergenceError("BPDN could not reach eps " + std::to_string(eps) + "; best residual " +
                                   std::to_string(r_lo),
                               sweeps_total);
    }

    Eigen::VectorXd x_cur = x_lo;
    int outer = 0;
    for (; outer < options.max_outer; ++outer) {
        if (log_hi - log_lo < 1e-9) break;
        if (r_lo >= eps * (1.0 - 1e-9)) break;
        const double log_mid = 0.5 * (log_lo + log_hi);
        Eigen::VectorXd pen = mask * std::exp(log_mid);
        bool ok = true;
        sweeps_total += coordinate_descent(gram, c, pen, x_cur, options.step_tol, options.max_sweeps, ok);
        const double r_mid = residual(x_cur);
        if (r_mid <= feas) {
            log_lo = log_mid;
            x_lo = x_cur;
            r_lo = r_mid;
            cd_ok = ok;
        } else {
            log_hi = log_mid;
            x_cur = x_lo;
        }
    }
    out.x = x_lo;
    out.residual = r_lo;
    out.lambda = std::exp(log_lo);
    out.sweeps = sweeps_total;
    out.converged = cd_ok && outer < options.max_outer;
    if (!out.converged)
        throw ConvergenceError("BPDN did not converge; best residual " + std::to_string(r_lo), outer);
    return out;
}

Direction dominant_direction(const Eigen::MatrixXd& xi, const Eigen::VectorXd& u,
                             const DirectionOptions& options) {
    const Eigen::Index q = u.size();
    const Eigen::Index m = xi.rows();
    if (xi.cols() != q) throw ValidationError("coefficient and observable sample counts differ");
    if (q < 2) throw ValidationError("at least two samples are required");

    Direction out;
    out.report.mean = u.mean();
    out.report.stddev = std::sqrt((u.array() - out.report.mean).square().sum() / static_cast<double>(q - 1));
    if (!(out.report.stddev >= 1e-14))
        throw DegenerateObservableError("observable is constant over the ensemble");
    const Eigen::VectorXd u_hat = (u.array() - out.report.mean) / out.report.stddev;

    Eigen::MatrixXd design(q, m + 1);
    design.leftCols(m) = xi.transpose();
    design.col(m).setOnes();
    // The least-squares misfit understates the unexplained part of u by the
    // degrees of freedom it absorbed; inflate it back before adding slack.
    // When that tolerance admits the zero vector (no resolvable affine
    // trend), fall back to the bare least-squares level.
    const double r_ls = least_squares_residual(design, u_hat);
    const double dof = static_cast<double>(q - m - 1);
    const double inflate = dof > 0.0 ? std::sqrt(static_cast<double>(q + m + 1) / dof) : 1.0;
    const double slack = options.tau * u_hat.norm();

    BpdnOptions bo;
    if (!options.penalize_bias) bo.unpenalized.push_back(m);
    BpdnResult fit = bpdn(design, u_hat, inflate * r_ls + slack, bo);
    if (fit.x.head(m).cwiseAbs().maxCoeff() == 0.0 && inflate > 1.0) fit = bpdn(design, u_hat, r_ls + slack, bo);
    out.report.epsilon = fit.epsilon;
    out.report.residual = fit.residual;
    out.report.sweeps = fit.sweeps;

    if (options.debias) {
        std::vector<Eigen::Index> support;
        for (Eigen::Index j = 0; j < m; ++j)
            if (fit.x(j) != 0.0) support.push_back(j);
        if (!support.empty()) {
            Eigen::MatrixXd sub(q, static_cast<Eigen::Index>(support.size()) + 1);
            for (std::size_t k = 0; k < support.size(); ++k) sub.col(static_cast<Eigen::Index>(k)) = design.col(support[k]);
            sub.rightCols(1).setOnes();
            const Eigen::VectorXd coef = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(sub).solve(u_hat);
            fit.x.setZero();
            for (std::size_t k = 0; k < support.size(); ++k) fit.x(support[k]) = coef(static_cast<Eigen::Index>(k));
        }
    }

    Eigen::VectorXd a = fit.x.head(m);
    const double norm = a.norm();
    if (!(norm > 0.0)) throw DegenerateObservableError("BPDN returned a zero direction");
    a /= norm;
    if ((xi.transpose() * a).dot(u_hat) < 0.0) a = -a;
    out.a_hat = std::move(a);
    return out;
}

std::optional<Direction> next_direction(const Eigen::MatrixXd& xi, const Eigen::VectorXd& u,
                                        const Eigen::VectorXd& f_k, const Eigen::MatrixXd& rows,
                                        const DirectionOptions& options) {
    if (rows.cols() != xi.rows()) throw ValidationError("rotation rows do not match coefficient dimension");
    if (f_k.size() != u.size()) throw ValidationError("surrogate predictions do not match samples");
    const Eigen::VectorXd resid = u - f_k;
    const double q = static_cast<double>(u.size());
    const double sd_u = std::sqrt((u.array() - u.mean()).square().sum() / (q - 1.0));
    const double sd_r = std::sqrt((resid.array() - resid.mean()).square().sum() / (q - 1.0));
    if (sd_r < 1e-14 || sd_r <= 1e-10 * sd_u) return std::nullopt;

    const Eigen::MatrixXd projected = xi - rows.transpose() * (rows * xi);
    Direction dir;
    try {
        dir = dominant_direction(projected, resid, options);
    } catch (const DegenerateObservableError&) {
        return std::nullopt;
    }
    Eigen::VectorXd a = dir.a_hat;
    for (int pass = 0; pass < 2; ++pass) a -= rows.transpose() * (rows * a);
    const double norm = a.norm();
    if (norm < 1e-8) return std::nullopt;
    a /= norm;
    const Eigen::VectorXd r_hat = resid.array() - resid.mean();
    if ((projected.transpose() * a).dot(r_hat) < 0.0) a = -a;
    dir.a_hat = std::move(a);
    return dir;
}

std::string_view to_string(Variant v) { return v == Variant::kd ? "KD" : "Kx1D"; }

Variant parse_variant(std::string_view s) {
    if (s == "KD") return Variant::kd;
    if (s == "Kx1D") return Variant::kx1d;
    throw ValidationError("unknown surrogate variant '" + std::string(s) + "'");
}

std::int64_t RidgeSurrogate::total_queries() const {
    std::int64_t n = train_size;
    for (const auto& e : entries) n += e.queries;
    return n;
}

namespace {

double rmse(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

double predict_entry(const ObservableSurrogate& e, Variant variant, const Eigen::VectorXd& xi,
                     Eigen::VectorXd* grad) {
    const Eigen::VectorXd eta = e.rows * xi;
    if (variant == Variant::kd) {
        if (grad) *grad = e.rows.transpose() * pce::eval_grad(e.joint, eta);
        return pce::eval(e.joint, eta);
    }
    double v = 0.0;
    if (grad) grad->setZero(xi.size());
    for (Eigen::Index k = 0; k < e.k(); ++k) {
        Eigen::VectorXd h(1);
        h(0) = eta(k);
        const auto& term = e.terms[static_cast<std::size_t>(k)];
        v += pce::eval(term, h);
        if (grad) *grad += pce::eval_grad(term, h)(0) * e.rows.row(k).transpose();
    }
    return v;
}

}  // namespace

ObservableSurrogate fit_observable(const VectorFn& g, Eigen::Index component, const Eigen::MatrixXd& xi,
                                   const Eigen::VectorXd& u, const FitOptions& options) {
    if (options.K < 1) throw ValidationError("K must be >= 1");
    const Eigen::Index m = xi.rows();
    const Eigen::Index q = xi.cols();

    ObservableSurrogate out;
    out.rows.resize(0, m);
    Eigen::VectorXd f_train = Eigen::VectorXd::Zero(q);

    const auto set1 = pce::multi_index_set(1, options.pce.degree);
    const auto rule1 = pce::smolyak_gh(1, options.pce.level);

    auto query = [&](const Eigen::VectorXd& x) {
        const Eigen::VectorXd v = g(x);
        if (component >= v.size()) throw ValidationError("observable index out of range");
        return v(component);
    };

    for (int k = 1; k <= options.K; ++k) {
        std::optional<Direction> dir;
        if (k == 1)
            dir = dominant_direction(xi, u, options.direction);
        else
            dir = next_direction(xi, u, f_train, out.rows, options.direction);
        if (!dir) {
            out.exhausted = true;
            break;
        }
        out.rows.conservativeResize(k, Eigen::NoChange);
        out.rows.row(k - 1) = dir->a_hat.transpose();
        out.stages.push_back(dir->report);

        if (options.variant == Variant::kd) {
            const auto set = pce::multi_index_set(k, options.pce.degree);
            const auto rule = pce::smolyak_gh(k, options.pce.level);
            Eigen::VectorXd values(rule.size());
            // Least-squares preimage xi = A^T eta.
            for (Eigen::Index i = 0; i < rule.size(); ++i)
                values(i) = query(out.rows.transpose() * rule.nodes.col(i));
            out.queries += rule.size();
            out.joint = pce::project_values(values, set, rule);
            const Eigen::MatrixXd eta = out.rows * xi;
            for (Eigen::Index j = 0; j < q; ++j) f_train(j) = pce::eval(out.joint, eta.col(j));
        } else {
            double offset = 0.0;
            for (const auto& term : out.terms) offset += pce::eval(term, Eigen::VectorXd::Zero(1));
            Eigen::VectorXd values(rule1.size());
            for (Eigen::Index i = 0; i < rule1.size(); ++i)
                values(i) = query(dir->a_hat * rule1.nodes(0, i)) - offset;
            out.queries += rule1.size();
            pce::PceModel term = pce::project_values(values, set1, rule1);
            const Eigen::VectorXd eta = xi.transpose() * dir->a_hat;
            Eigen::VectorXd f_new = f_train;
            for (Eigen::Index j = 0; j < q; ++j) f_new(j) += pce::eval(term, eta.segment(j, 1));
            if (k > 1 && rmse(f_new, u) > rmse(f_train, u) + 1e-10) {
                term.coefficients.setZero();
                f_new = f_train;
            }
            out.terms.push_back(std::move(term));
            out.offsets.push_back(offset);
            f_train = std::move(f_new);
        }
        out.train_rmse.push_back(rmse(f_train, u));
    }
    return out;
}

RidgeSurrogate fit(const VectorFn& g, const EnsembleDataset& train, const FitOptions& options) {
    train.validate();
    if (options.K < 1) throw ValidationError("K must be >= 1");
    RidgeSurrogate s;
    s.variant = options.variant;
    s.K = options.K;
    s.pce = options.pce;
    s.tau = options.direction.tau;
    s.penalize_bias = options.direction.penalize_bias;
    s.n_terms = train.xi.rows();
    s.train_size = train.size();
    s.entries.resize(static_cast<std::size_t>(train.u.rows()));
    parallel_for(s.entries.size(), [&](std::size_t i) {
        const auto idx = static_cast<Eigen::Index>(i);
        try {
            s.entries[i] = fit_observable(g, idx, train.xi, train.u.row(idx).transpose(), options);
        } catch (const DegenerateObservableError& e) {
            throw DegenerateObservableError("observable " + std::to_string(i) + ": " + e.what());
        } catch (const ConvergenceError& e) {
            throw ConvergenceError("observable " + std::to_string(i) + ": " + e.what(), e.index());
        }
    });
    return s;
}

double predict_one(const RidgeSurrogate& s, Eigen::Index output, const Eigen::VectorXd& xi) {
    if (xi.size() != s.n_terms) throw ValidationError("coefficient vector does not match surrogate");
    return predict_entry(s.entries.at(static_cast<std::size_t>(output)), s.variant, xi, nullptr);
}

Eigen::MatrixXd predict(const RidgeSurrogate& s, const Eigen::MatrixXd& xi) {
    if (xi.rows() != s.n_terms) throw ValidationError("coefficient batch does not match surrogate");
    Eigen::MatrixXd out(s.n_outputs(), xi.cols());
    for (Eigen::Index i = 0; i < s.n_outputs(); ++i) {
        const auto& e = s.entries[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < xi.cols(); ++j) out(i, j) = predict_entry(e, s.variant, xi.col(j), nullptr);
    }
    return out;
}

Eigen::VectorXd predict_with_jacobian(const RidgeSurrogate& s, const Eigen::VectorXd& xi,
                                      Eigen::MatrixXd* jacobian) {
    if (xi.size() != s.n_terms) throw ValidationError("coefficient vector does not match surrogate");
    Eigen::VectorXd v(s.n_outputs());
    if (jacobian) jacobian->resize(s.n_outputs(), s.n_terms);
    Eigen::VectorXd grad;
    for (Eigen::Index i = 0; i < s.n_outputs(); ++i) {
        v(i) = predict_entry(s.entries[static_cast<std::size_t>(i)], s.variant, xi, jacobian ? &grad : nullptr);
        if (jacobian) jacobian->row(i) = grad.transpose();
    }
    return v;
}

void save_surrogate(const std::filesystem::path& dir, const RidgeSurrogate& s) {
    nlohmann::json header = {
        {"variant", std::string(to_string(s.variant))},
        {"K", s.K},
        {"degree", s.pce.degree},
        {"level", s.pce.level},
        {"growth_rule", "linear m(i)=i"},
        {"tau", s.tau},
        {"penalize_bias", s.penalize_bias},
        {"n_terms", s.n_terms},
        {"train_size", s.train_size},
        {"total_queries", s.total_queries()},
    };
    Eigen::Index total_rows = 0, total_coef = 0;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : s.entries) {
        nlohmann::json stages = nlohmann::json::array();
        for (const auto& st : e.stages)
            stages.push_back({{"mean", st.mean},
                              {"stddev", st.stddev},
                              {"epsilon", st.epsilon},
                              {"residual", st.residual},
                              {"sweeps", st.sweeps}});
        entries.push_back({{"k", e.k()},
                           {"queries", e.queries},
                           {"exhausted", e.exhausted},
                           {"offsets", e.offsets},
                           {"train_rmse", e.train_rmse},
                           {"bpdn", stages}});
        total_rows += e.k();
        total_coef += s.variant == Variant::kd ? e.joint.coefficients.size()
                                               : e.k() * (s.pce.degree + 1);
    }
    header["entries"] = std::move(entries);

    Eigen::MatrixXd rows(total_rows, s.n_terms);
    Eigen::VectorXd coef(total_coef);
    Eigen::Index r = 0, c = 0;
    for (const auto& e : s.entries) {
        rows.middleRows(r, e.k()) = e.rows;
        r += e.k();
        if (s.variant == Variant::kd) {
            coef.segment(c, e.joint.coefficients.size()) = e.joint.coefficients;
            c += e.joint.coefficients.size();
        } else {
            for (const auto& t : e.terms) {
                coef.segment(c, t.coefficients.size()) = t.coefficients;
                c += t.coefficients.size();
            }
        }
    }
    std::filesystem::create_directories(dir);
    io::write_matrix(dir / "rows.ckba", rows);
    io::write_matrix(dir / "coefficients.ckba", coef);
    io::write_file_atomic(dir / "surrogate.json", header.dump(2) + "\n");
}

RidgeSurrogate load_surrogate(const std::filesystem::path& dir) {
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(io::read_file(dir / "surrogate.json"));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("bad surrogate header in " + dir.string() + ": " + e.what());
    }
    RidgeSurrogate s;
    try {
        s.variant = parse_variant(h.at("variant").get<std::string>());
        s.K = h.at("K").get<int>();
        s.pce.degree = h.at("degree").get<int>();
        s.pce.level = h.at("level").get<int>();
        s.tau = h.at("tau").get<double>();
        s.penalize_bias = h.at("penalize_bias").get<bool>();
        s.n_terms = h.at("n_terms").get<Eigen::Index>();
        s.train_size = h.at("train_size").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("bad surrogate header in " + dir.string() + ": " + e.what());
    }
    const Eigen::MatrixXd rows = io::read_matrix(dir / "rows.ckba");
    const Eigen::MatrixXd coef_m = io::read_matrix(dir / "coefficients.ckba");
    const Eigen::VectorXd coef = coef_m.size() ? Eigen::VectorXd(coef_m.col(0)) : Eigen::VectorXd();
    if (rows.rows() > 0 && rows.cols() != s.n_terms)
        throw ValidationError("surrogate rows do not match header in " + dir.string());

    Eigen::Index r = 0, c = 0;
    const auto set1 = pce::multi_index_set(1, s.pce.degree);
    for (const auto& je : h.at("entries")) {
        ObservableSurrogate e;
        const auto k = je.at("k").get<Eigen::Index>();
        e.queries = je.at("queries").get<std::int64_t>();
        e.exhausted = je.at("exhausted").get<bool>();
        e.offsets = je.at("offsets").get<std::vector<double>>();
        e.train_rmse = je.at("train_rmse").get<std::vector<double>>();
        for (const auto& st : je.at("bpdn"))
            e.stages.push_back({st.at("mean").get<double>(), st.at("stddev").get<double>(),
                                st.at("epsilon").get<double>(), st.at("residual").get<double>(),
                                st.at("sweeps").get<int>()});
        if (r + k > rows.rows()) throw ValidationError("surrogate rows truncated in " + dir.string());
        e.rows = rows.middleRows(r, k);
        r += k;
        if (s.variant == Variant::kd) {
            e.joint.basis = pce::multi_index_set(static_cast<int>(k), s.pce.degree);
            const auto n = static_cast<Eigen::Index>(e.joint.basis.size());
            if (c + n > coef.size()) throw ValidationError("surrogate coefficients truncated");
            e.joint.coefficients = coef.segment(c, n);
            c += n;
        } else {
            for (Eigen::Index t = 0; t < k; ++t) {
                const auto n = static_cast<Eigen::Index>(set1.size());
                if (c + n > coef.size()) throw ValidationError("surrogate coefficients truncated");
                e.terms.push_back({set1, coef.segment(c, n)});
                c += n;
            }
        }
        s.entries.push_back(std::move(e));
    }
    return s;
}

}  // namespace ckba::ba
