#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ckba/ba.hpp"
#include "ckba/config.hpp"
#include "ckba/darcy.hpp"
#include "ckba/error.hpp"
#include "ckba/gp.hpp"
#include "ckba/io.hpp"
#include "ckba/pce.hpp"
#include "ckba/pipeline.hpp"
#include "ckba/uq.hpp"

namespace py = pybind11;
using namespace ckba;

namespace {

pipeline::ExperimentConfig config_from(const py::object& obj) {
    if (py::isinstance<py::str>(obj)) {
        const std::string s = obj.cast<std::string>();
        // A JSON document or a path to one.
        if (!s.empty() && s.find('{') != std::string::npos) return pipeline::parse_config(nlohmann::json::parse(s));
        return pipeline::load_config(s);
    }
    if (py::isinstance<py::dict>(obj)) {
        const std::string s = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
        return pipeline::parse_config(nlohmann::json::parse(s));
    }
    return pipeline::load_config(obj.cast<std::filesystem::path>());
}

}  // namespace

PYBIND11_MODULE(_ckba, m) {
    m.doc() = "Basis-adaptation ridge surrogates for Darcy flow with conditional KL fields";
    m.attr("__version__") = CKBA_VERSION;

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

    m.def("matern52", [](double r, double variance, double lengthscale) {
        return gp::kernel_eval_r({gp::KernelFamily::matern52, variance, lengthscale}, r);
    }, py::arg("r"), py::arg("variance") = 1.0, py::arg("lengthscale") = 1.0);

    m.def("hermite", &pce::hermite_norm, py::arg("n"), py::arg("x"),
          "Probabilists' Hermite polynomial of degree n, normalized to unit variance.");
    m.def("smolyak_rule", [](int r, int level) {
        const auto rule = pce::smolyak_gh(r, level);
        return py::make_tuple(rule.nodes, rule.weights);
    }, py::arg("dim"), py::arg("level"), "Sparse Gauss-Hermite rule: (nodes dim x n, weights n).");

    m.def("solve_head", [](int nx, int ny, double lx, double ly, const Eigen::VectorXd& log_t) {
        return darcy::solve_head(darcy::GridGeometry{nx, ny, lx, ly}, darcy::BvpSpec{}, log_t);
    }, py::arg("nx"), py::arg("ny"), py::arg("lx"), py::arg("ly"), py::arg("log_t"),
       "Head on the grid for unit head on the left edge, zero on the right, no flow elsewhere.");

    m.def("kde", [](const Eigen::VectorXd& samples, Eigen::Index points) {
        const auto p = uq::kde(samples, points);
        return py::make_tuple(p.grid, p.density, p.bandwidth);
    }, py::arg("samples"), py::arg("points") = 512, "Gaussian KDE with Scott's bandwidth: (grid, density, h).");
    m.def("kl_divergence", [](const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
        return uq::kl_divergence(uq::kde(p), uq::kde(q));
    }, py::arg("p_samples"), py::arg("q_samples"));

    m.def("dominant_direction", [](const Eigen::MatrixXd& xi, const Eigen::VectorXd& u) {
        return ba::dominant_direction(xi, u).a_hat;
    }, py::arg("xi"), py::arg("u"), "Unit dominant direction of samples u (q) over xi (n x q).");

    py::class_<ba::RidgeSurrogate>(m, "RidgeSurrogate")
        .def_static("load", [](const std::filesystem::path& dir) { return ba::load_surrogate(dir); })
        .def_readonly("K", &ba::RidgeSurrogate::K)
        .def_readonly("n_terms", &ba::RidgeSurrogate::n_terms)
        .def_property_readonly("variant", [](const ba::RidgeSurrogate& s) { return std::string(ba::to_string(s.variant)); })
        .def_property_readonly("name", [](const ba::RidgeSurrogate& s) {
            // Same spelling as the config: 1D, 2x1D, 3D, ...
            if (s.K == 1) return std::string("1D");
            return std::to_string(s.K) + (s.variant == ba::Variant::kd ? "D" : "x1D");
        })
        .def_property_readonly("n_outputs", &ba::RidgeSurrogate::n_outputs)
        .def_property_readonly("total_queries", &ba::RidgeSurrogate::total_queries)
        .def("rows", [](const ba::RidgeSurrogate& s, Eigen::Index i) {
            if (i < 0 || i >= s.n_outputs()) throw py::index_error();
            return s.entries[static_cast<std::size_t>(i)].rows;
        })
        .def("predict", [](const ba::RidgeSurrogate& s, const Eigen::MatrixXd& xi) { return ba::predict(s, xi); },
             py::arg("xi"), "Predictions (n_outputs x batch) for coefficient columns.");

    m.def("fit", [](const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& g, const Eigen::MatrixXd& xi,
                    const Eigen::MatrixXd& u, const std::string& variant) {
        const auto v = pipeline::parse_variant_name(variant);
        ba::FitOptions opt;
        opt.K = v.K;
        opt.variant = v.variant;
        ba::EnsembleDataset data{xi, u, 0, ba::DatasetRole::train};
        // Workers take the GIL for each callback.
        py::gil_scoped_release release;
        return ba::fit(g, data, opt);
    }, py::arg("g"), py::arg("xi"), py::arg("u"), py::arg("variant") = "1D");

    m.def("read_matrix", &io::read_matrix, py::arg("path"));
    m.def("write_matrix", &io::write_matrix, py::arg("path"), py::arg("matrix"));

    m.def("config_hash", [](const py::object& cfg) { return config_from(cfg).hash(); }, py::arg("config"));
    m.def("run_stage", [](const py::object& cfg, const std::string& stage, const std::filesystem::path& workdir) {
        const auto c = config_from(cfg);
        py::gil_scoped_release release;
        pipeline::run_stage(c, pipeline::parse_stage(stage), workdir);
    }, py::arg("config"), py::arg("stage"), py::arg("workdir"));
    m.def("run_all", [](const py::object& cfg, const std::filesystem::path& workdir) {
        const auto c = config_from(cfg);
        py::gil_scoped_release release;
        pipeline::run_all(c, workdir);
    }, py::arg("config"), py::arg("workdir"));
}
