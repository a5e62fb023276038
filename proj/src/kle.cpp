#include "ckba/kle.hpp"

#include <cmath>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "ckba/error.hpp"
#include "ckba/io.hpp"

namespace ckba::kle {

std::string_view to_string(BasisKind kind) {
    return kind == BasisKind::conditional ? "conditional" : "unconditional";
}

BasisKind parse_basis_kind(std::string_view name) {
    if (name == "conditional") return BasisKind::conditional;
    if (name == "unconditional") return BasisKind::unconditional;
    throw ValidationError("unknown basis kind '" + std::string(name) + "'");
}

Eigen::MatrixXd FieldBasis::modes() const {
    return eigenfunctions * eigenvalues.cwiseSqrt().asDiagonal();
}

Eigenpairs eigensolve(const Eigen::MatrixXd& cov, const Eigen::VectorXd& weights,
                      Eigen::Index n_terms) {
    const Eigen::Index n = cov.rows();
    if (cov.cols() != n) throw ValidationError("covariance matrix is not square");
    if (weights.size() != n) throw ValidationError("weights do not match covariance size");
    if ((weights.array() <= 0.0).any()) throw ValidationError("quadrature weights must be > 0");
    if (n_terms < 0 || n_terms > n) throw ValidationError("n_terms must lie in [0, n_cells]");
    if (!cov.allFinite()) throw ValidationError("covariance matrix has non-finite entries");

    const Eigen::VectorXd sw = weights.cwiseSqrt();
    const Eigen::MatrixXd scaled = sw.asDiagonal() * cov * sw.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(scaled);
    if (solver.info() != Eigen::Success) {
        Eigen::Index bad = 0;
        while (bad < n && std::isfinite(solver.eigenvalues()(n - 1 - bad))) ++bad;
        throw ConvergenceError("symmetric eigensolver did not converge", static_cast<int>(bad));
    }

    Eigenpairs out;
    out.values.resize(n_terms);
    out.functions.resize(n, n_terms);
    // Eigen returns ascending order.
    for (Eigen::Index k = 0; k < n_terms; ++k) {
        const Eigen::Index src = n - 1 - k;
        out.values(k) = std::max(0.0, solver.eigenvalues()(src));
        Eigen::VectorXd phi = solver.eigenvectors().col(src).cwiseQuotient(sw);
        Eigen::Index arg = 0;
        double best = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double a = std::abs(phi(i));
            if (a > best) {
                best = a;
                arg = i;
            }
        }
        if (phi(arg) < 0.0) phi = -phi;
        out.functions.col(k) = phi;
    }
    return out;
}

FieldBasis make_basis(BasisKind kind, Eigen::VectorXd mean, Eigenpairs pairs,
                      Eigen::VectorXd weights) {
    if (pairs.functions.rows() != mean.size() || weights.size() != mean.size())
        throw ValidationError("basis components have inconsistent cell counts");
    if (pairs.functions.cols() != pairs.values.size())
        throw ValidationError("eigenvalue and eigenfunction counts differ");
    FieldBasis b;
    b.kind = kind;
    b.mean = std::move(mean);
    b.eigenvalues = std::move(pairs.values);
    b.eigenfunctions = std::move(pairs.functions);
    b.weights = std::move(weights);
    return b;
}

Eigen::VectorXd expand(const FieldBasis& basis, const Eigen::VectorXd& xi) {
    if (xi.size() != basis.n_terms())
        throw ValidationError("coefficient vector has length " + std::to_string(xi.size()) +
                              ", basis has " + std::to_string(basis.n_terms()) + " terms");
    return basis.mean + basis.eigenfunctions * basis.eigenvalues.cwiseSqrt().cwiseProduct(xi);
}

Eigen::MatrixXd expand(const FieldBasis& basis, const Eigen::MatrixXd& xi) {
    if (xi.rows() != basis.n_terms())
        throw ValidationError("coefficient matrix row count does not match basis");
    Eigen::MatrixXd out = basis.modes() * xi;
    out.colwise() += basis.mean;
    return out;
}

Eigen::MatrixXd sample_coeffs(Rng& rng, Eigen::Index count, Eigen::Index n_xi) {
    if (count < 0 || n_xi < 0) throw ValidationError("sample counts must be >= 0");
    std::normal_distribution<double> normal;
    Eigen::MatrixXd xi(n_xi, count);
    for (Eigen::Index j = 0; j < count; ++j)
        for (Eigen::Index i = 0; i < n_xi; ++i) xi(i, j) = normal(rng);
    return xi;
}

Eigen::MatrixXd sample_coeffs(std::uint64_t seed, Eigen::Index count, Eigen::Index n_xi) {
    Rng rng = make_stream(seed, "coefficients");
    return sample_coeffs(rng, count, n_xi);
}

void save_basis(const std::filesystem::path& dir, const FieldBasis& basis,
                const std::string& grid_hash) {
    nlohmann::json header = {
        {"kind", std::string(to_string(basis.kind))},
        {"n_terms", basis.n_terms()},
        {"n_cells", basis.n_cells()},
        {"grid_hash", grid_hash},
    };
    std::filesystem::create_directories(dir);
    io::write_matrix(dir / "mean.ckba", basis.mean);
    io::write_matrix(dir / "eigenvalues.ckba", basis.eigenvalues);
    io::write_matrix(dir / "eigenfunctions.ckba", basis.eigenfunctions);
    io::write_matrix(dir / "weights.ckba", basis.weights);
    io::write_file_atomic(dir / "basis.json", header.dump(2) + "\n");
}

FieldBasis load_basis(const std::filesystem::path& dir, const std::string& expected_grid_hash) {
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(io::read_file(dir / "basis.json"));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("bad basis header in " + dir.string() + ": " + e.what());
    }
    const auto hash = header.at("grid_hash").get<std::string>();
    if (!expected_grid_hash.empty() && hash != expected_grid_hash)
        throw ValidationError("basis in " + dir.string() + " was built for a different grid");
    Eigenpairs pairs{io::read_matrix(dir / "eigenvalues.ckba").col(0),
                     io::read_matrix(dir / "eigenfunctions.ckba")};
    FieldBasis b = make_basis(parse_basis_kind(header.at("kind").get<std::string>()),
                              io::read_matrix(dir / "mean.ckba").col(0), std::move(pairs),
                              io::read_matrix(dir / "weights.ckba").col(0));
    if (b.n_terms() != header.at("n_terms").get<Eigen::Index>())
        throw ValidationError("basis header term count disagrees with arrays in " + dir.string());
    return b;
}

}  // namespace ckba::kle
