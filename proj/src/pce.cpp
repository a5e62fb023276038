#include "ckba/pce.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include <Eigen/Eigenvalues>

#include "ckba/error.hpp"

namespace ckba::pce {

Eigen::VectorXd hermite_norm_all(int n, double x) {
    if (n < 0) throw ValidationError("Hermite degree must be >= 0");
    // Normalized recurrence: H_{k+1} = (x H_k - sqrt(k) H_{k-1}) / sqrt(k+1).
    Eigen::VectorXd h(n + 1);
    h(0) = 1.0;
    if (n >= 1) h(1) = x;
    for (int k = 1; k < n; ++k)
        h(k + 1) = (x * h(k) - std::sqrt(static_cast<double>(k)) * h(k - 1)) /
                   std::sqrt(static_cast<double>(k + 1));
    return h;
}

double hermite_norm(int n, double x) { return hermite_norm_all(n, x)(n); }

std::ptrdiff_t MultiIndexSet::find(const MultiIndex& alpha) const {
    auto it = std::find(indices.begin(), indices.end(), alpha);
    return it == indices.end() ? -1 : std::distance(indices.begin(), it);
}

namespace {

// Multi-indices of dimension r summing exactly to d, leading coordinate
// descending.
void compositions(int r, int d, MultiIndex& cur, int pos, std::vector<MultiIndex>& out) {
    if (pos == r - 1) {
        cur[static_cast<std::size_t>(pos)] = d;
        out.push_back(cur);
        return;
    }
    for (int k = d; k >= 0; --k) {
        cur[static_cast<std::size_t>(pos)] = k;
        compositions(r, d - k, cur, pos + 1, out);
    }
}

}  // namespace

MultiIndexSet multi_index_set(int r, int p) {
    if (r < 1) throw ValidationError("multi-index dimension must be >= 1");
    if (p < 0) throw ValidationError("polynomial degree must be >= 0");
    MultiIndexSet set{r, p, {}};
    MultiIndex cur(static_cast<std::size_t>(r), 0);
    for (int d = 0; d <= p; ++d) compositions(r, d, cur, 0, set.indices);
    return set;
}

QuadratureRule gauss_hermite(int n) {
    if (n < 1) throw ValidationError("Gauss-Hermite rule needs at least one point");
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd sub(std::max(n - 1, 0));
    for (int k = 1; k < n; ++k) sub(k - 1) = std::sqrt(static_cast<double>(k));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
    es.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
    if (es.info() != Eigen::Success) throw ConvergenceError("Golub-Welsch eigensolve failed", n);

    Eigen::VectorXd x = es.eigenvalues();
    Eigen::VectorXd w = es.eigenvectors().row(0).transpose().array().square();
    // Enforce the exact symmetry of the rule.
    Eigen::VectorXd xs(n), ws(n);
    for (int k = 0; k < n; ++k) {
        xs(k) = 0.5 * (x(k) - x(n - 1 - k));
        ws(k) = 0.5 * (w(k) + w(n - 1 - k));
    }
    if (n % 2 == 1) xs(n / 2) = 0.0;
    ws /= ws.sum();

    QuadratureRule rule;
    rule.dim = 1;
    rule.level = n;
    rule.nodes = xs.transpose();
    rule.weights = ws;
    return rule;
}

namespace {

double binomial(int n, int k) {
    if (k < 0 || k > n) return 0.0;
    double b = 1.0;
    for (int i = 1; i <= k; ++i) b = b * (n - k + i) / i;
    return b;
}

// Multi-indices i in N_{>=1}^r with |i| == total.
void level_tuples(int r, int total, std::vector<int>& cur, int pos, std::vector<std::vector<int>>& out) {
    if (pos == r - 1) {
        if (total >= 1) {
            cur[static_cast<std::size_t>(pos)] = total;
            out.push_back(cur);
        }
        return;
    }
    for (int k = 1; k <= total - (r - 1 - pos); ++k) {
        cur[static_cast<std::size_t>(pos)] = k;
        level_tuples(r, total - k, cur, pos + 1, out);
    }
}

struct NodeLess {
    bool operator()(const std::vector<double>& a, const std::vector<double>& b) const {
        return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
    }
};

}  // namespace

QuadratureRule smolyak_gh(int r, int level) {
    if (r < 1) throw ValidationError("quadrature dimension must be >= 1");
    if (level < 1) throw ValidationError("Smolyak level must be >= 1");

    std::vector<QuadratureRule> rules1d;
    const int max_points = level;
    for (int m = 1; m <= max_points; ++m) rules1d.push_back(gauss_hermite(m));

    std::vector<std::pair<std::vector<double>, double>> raw;
    const int q = level + r - 1;
    for (int total = std::max(r, level); total <= q; ++total) {
        const double coef = ((q - total) % 2 == 0 ? 1.0 : -1.0) * binomial(r - 1, q - total);
        if (coef == 0.0) continue;
        std::vector<std::vector<int>> tuples;
        std::vector<int> cur(static_cast<std::size_t>(r), 1);
        level_tuples(r, total, cur, 0, tuples);
        for (const auto& t : tuples) {
            // Tensor product of the 1-D rules with t[d] points.
            std::vector<int> counter(static_cast<std::size_t>(r), 0);
            while (true) {
                std::vector<double> node(static_cast<std::size_t>(r));
                double w = coef;
                for (int d = 0; d < r; ++d) {
                    const auto& rule = rules1d[static_cast<std::size_t>(t[d] - 1)];
                    node[static_cast<std::size_t>(d)] = rule.nodes(0, counter[d]);
                    w *= rule.weights(counter[d]);
                }
                raw.emplace_back(std::move(node), w);
                int d = 0;
                while (d < r && ++counter[d] == t[d]) counter[d++] = 0;
                if (d == r) break;
            }
        }
    }

    std::sort(raw.begin(), raw.end(),
              [](const auto& a, const auto& b) { return NodeLess{}(a.first, b.first); });
    std::vector<std::pair<std::vector<double>, double>> merged;
    for (auto& [node, w] : raw) {
        bool same = false;
        if (!merged.empty()) {
            same = true;
            for (int d = 0; d < r; ++d)
                same = same && std::abs(merged.back().first[d] - node[d]) <= 1e-12;
        }
        if (same)
            merged.back().second += w;
        else
            merged.emplace_back(std::move(node), w);
    }

    QuadratureRule rule;
    rule.dim = r;
    rule.level = level;
    rule.nodes.resize(r, static_cast<Eigen::Index>(merged.size()));
    rule.weights.resize(static_cast<Eigen::Index>(merged.size()));
    for (std::size_t k = 0; k < merged.size(); ++k) {
        for (int d = 0; d < r; ++d) rule.nodes(d, static_cast<Eigen::Index>(k)) = merged[k].first[d];
        rule.weights(static_cast<Eigen::Index>(k)) = merged[k].second;
    }
    return rule;
}

Eigen::VectorXd basis_values(const MultiIndexSet& set, const Eigen::VectorXd& eta) {
    if (eta.size() != set.dim)
        throw ValidationError("point dimension " + std::to_string(eta.size()) +
                              " does not match PCE dimension " + std::to_string(set.dim));
    Eigen::MatrixXd table(set.dim, set.degree + 1);
    for (int d = 0; d < set.dim; ++d) table.row(d) = hermite_norm_all(set.degree, eta(d)).transpose();
    Eigen::VectorXd out(static_cast<Eigen::Index>(set.size()));
    for (std::size_t k = 0; k < set.size(); ++k) {
        double v = 1.0;
        for (int d = 0; d < set.dim; ++d) v *= table(d, set.indices[k][static_cast<std::size_t>(d)]);
        out(static_cast<Eigen::Index>(k)) = v;
    }
    return out;
}

PceModel project_values(const Eigen::VectorXd& f_values, const MultiIndexSet& set,
                        const QuadratureRule& rule) {
    if (rule.dim != set.dim) throw ValidationError("quadrature and index set dimensions differ");
    if (f_values.size() != rule.size()) throw ValidationError("one function value per node required");
    PceModel model{set, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(set.size()))};
    for (Eigen::Index i = 0; i < rule.size(); ++i) {
        if (!std::isfinite(f_values(i)))
            throw NumericalError("non-finite function value at quadrature node " + std::to_string(i));
        model.coefficients += rule.weights(i) * f_values(i) * basis_values(set, rule.nodes.col(i));
    }
    return model;
}

PceModel project(const std::function<double(const Eigen::VectorXd&)>& f, const MultiIndexSet& set,
                 const QuadratureRule& rule) {
    if (rule.dim != set.dim) throw ValidationError("quadrature and index set dimensions differ");
    Eigen::VectorXd values(rule.size());
    for (Eigen::Index i = 0; i < rule.size(); ++i) values(i) = f(rule.nodes.col(i));
    return project_values(values, set, rule);
}

double eval(const PceModel& model, const Eigen::VectorXd& eta) {
    return model.coefficients.dot(basis_values(model.basis, eta));
}

Eigen::VectorXd eval_grad(const PceModel& model, const Eigen::VectorXd& eta) {
    const auto& set = model.basis;
    if (eta.size() != set.dim) throw ValidationError("point dimension does not match PCE dimension");
    const int p = set.degree;
    Eigen::MatrixXd h(set.dim, p + 1), dh(set.dim, p + 1);
    for (int d = 0; d < set.dim; ++d) {
        h.row(d) = hermite_norm_all(p, eta(d)).transpose();
        dh(d, 0) = 0.0;
        for (int n = 1; n <= p; ++n) dh(d, n) = std::sqrt(static_cast<double>(n)) * h(d, n - 1);
    }
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(set.dim);
    for (std::size_t k = 0; k < set.size(); ++k) {
        const auto& alpha = set.indices[k];
        const double c = model.coefficients(static_cast<Eigen::Index>(k));
        if (c == 0.0) continue;
        for (int g = 0; g < set.dim; ++g) {
            double v = c;
            for (int d = 0; d < set.dim; ++d) {
                const int a = alpha[static_cast<std::size_t>(d)];
                v *= d == g ? dh(d, a) : h(d, a);
            }
            grad(g) += v;
        }
    }
    return grad;
}

}  // namespace ckba::pce
