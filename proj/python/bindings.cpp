// Python bindings for the core library.
#include <cmath>
#include <optional>

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cprf/bands.hpp"
#include "cprf/error.hpp"
#include "cprf/forest.hpp"
#include "cprf/gpcov.hpp"
#include "cprf/simlab.hpp"

namespace py = pybind11;
using namespace cprf;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

SplitRule make_rule(const std::string& kind, int ehr_b, double ehr_delta) {
    return parse_forest_kind(kind) == ForestKind::Ehrenfest ? SplitRule::ehrenfest_rule(ehr_b, ehr_delta)
                                                            : SplitRule::uniform();
}

std::vector<double> points_of(const Array& a, int dim) {
    if (a.ndim() != 2 || a.shape(1) != dim) throw Error(ErrorKind::Shape, "points must have shape (m, p)");
    return {a.data(), a.data() + a.size()};
}

TrainingSample sample_of(const Array& x, const Array& y) {
    if (x.ndim() != 2) throw Error(ErrorKind::Shape, "x must have shape (n, p)");
    if (y.ndim() != 1 || y.shape(0) != x.shape(0)) throw Error(ErrorKind::Shape, "y must have shape (n,)");
    TrainingSample s;
    s.dim = static_cast<int>(x.shape(1));
    s.x.assign(x.data(), x.data() + x.size());
    s.y.assign(y.data(), y.data() + y.size());
    s.validate();
    return s;
}

Array to_array(const std::vector<double>& v) {
    Array out(static_cast<py::ssize_t>(v.size()));
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

py::dict result_dict(const ExperimentResult& r) {
    py::dict d;
    d["kind"] = to_string(r.config.rule.kind);
    d["betas"] = r.config.betas;
    d["coverage"] = r.coverage;
    d["radius"] = r.mean_radius;
    d["critical_values"] = r.critical_values;
    d["replications"] = r.replications;
    d["psi"] = r.psi;
    d["mean_sigma_hat"] = r.mean_sigma_hat;
    d["mean_sup_error"] = r.mean_sup_error;
    d["seed"] = r.config.seed;
    d["wall_seconds"] = r.wall_seconds;
    return d;
}

} // namespace

PYBIND11_MODULE(_cprf, m) {
    m.doc() = "Centered purely random forests with simultaneous confidence bands";

    static py::exception<Error> error(m, "CprfError", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            PyErr_SetString(error.ptr(), (std::string(to_string(e.kind())) + ": " + e.what()).c_str());
        }
    });

    py::class_<FittedForest>(m, "Forest")
        .def_property_readonly("tree_count", &FittedForest::tree_count)
        .def_property_readonly("fallback_moves", &FittedForest::fallback_moves)
        .def(
            "predict",
            [](const FittedForest& f, const Array& points) {
                const auto pts = points_of(points, f.sample().dim);
                std::vector<double> out;
                {
                    py::gil_scoped_release release;
                    out = f.predict_many(pts);
                }
                return to_array(out);
            },
            py::arg("points"), "Forest estimate at each row of `points`.")
        .def(
            "fine_cells", [](const FittedForest& f) { return to_array(f.predict_fine_cells()); },
            "Values on all level-k dyadic cells, last axis fastest.")
        .def("save_manifest", &save_forest_manifest, py::arg("path"));

    m.def(
        "fit_forest",
        [](const Array& x, const Array& y, const std::string& kind, int k, int trees, int rn, std::uint64_t seed,
           int ehr_b, double ehr_delta, bool poisson, unsigned workers) {
            auto sample = std::make_shared<TrainingSample>(sample_of(x, y));
            ForestConfig cfg{make_rule(kind, ehr_b, ehr_delta), k, trees, rn,
                             poisson ? SubsampleMode::Poissonized : SubsampleMode::FixedCount, seed};
            py::gil_scoped_release release;
            return fit_forest(cfg, sample, workers);
        },
        py::arg("x"), py::arg("y"), py::arg("kind") = "uniform", py::arg("k") = 5, py::arg("trees") = 100,
        py::arg("rn") = 1, py::arg("seed") = 0, py::arg("ehr_b") = 12, py::arg("ehr_delta") = 7.0,
        py::arg("poisson") = false, py::arg("workers") = 0);

    py::class_<CovTable>(m, "CovTable")
        .def_readonly("depth", &CovTable::depth)
        .def_readonly("dim", &CovTable::dim)
        .def_readonly("pairs", &CovTable::pairs)
        .def_readonly("v_cap", &CovTable::v_cap)
        .def_readonly("values", &CovTable::values)
        .def_readonly("fallback_moves", &CovTable::fallback_moves)
        .def_property_readonly("kind", [](const CovTable& t) { return to_string(t.rule.kind); })
        .def_property_readonly("psi", [](const CovTable& t) { return psi_uniform(t).values.front(); })
        .def("undividable_resolution", &detect_undividable_resolution, py::arg("tol") = 1e-3)
        .def("save", &save_cov_table, py::arg("path"));

    m.def(
        "approximate_covariance",
        [](const std::string& kind, int k, int p, std::uint64_t pairs, std::uint64_t seed, int ehr_b,
           double ehr_delta, unsigned workers) {
            py::gil_scoped_release release;
            return approximate_covariance(make_rule(kind, ehr_b, ehr_delta), k, p, pairs, seed, workers);
        },
        py::arg("kind") = "uniform", py::arg("k") = 5, py::arg("p") = 2, py::arg("pairs") = 50000,
        py::arg("seed") = 0, py::arg("ehr_b") = 12, py::arg("ehr_delta") = 7.0, py::arg("workers") = 0);
    m.def("load_cov_table", &load_cov_table, py::arg("path"));

    m.def(
        "covariance_matrix",
        [](const CovTable& t, int grid_depth) { return covariance_matrix(t, make_eval_grid(grid_depth, t.dim)); },
        py::arg("table"), py::arg("grid_depth"));

    m.def(
        "sup_quantiles",
        [](const CovTable& t, std::vector<double> betas, std::uint64_t n_sup, std::uint64_t seed,
           std::optional<int> grid_depth, unsigned workers) {
            const GridPlan plan = grid_depth ? plan_gp_grid_at(t, *grid_depth) : plan_gp_grid(t);
            py::gil_scoped_release release;
            auto q = gp_quantiles(t, plan, n_sup, std::move(betas), seed, workers);
            return std::make_pair(q.betas, q.quantiles);
        },
        py::arg("table"), py::arg("betas") = std::vector<double>{0.1, 0.05, 0.01}, py::arg("n_sup") = 100000,
        py::arg("seed") = 0, py::arg("grid_depth") = py::none(), py::arg("workers") = 0,
        "Returns (betas, quantiles) of the Gaussian supremum.");

    m.def(
        "sigma2_shen",
        [](const Array& x, const Array& y, std::optional<double> bandwidth) {
            const auto s = sample_of(x, y);
            return sigma2_shen(s, bandwidth ? *bandwidth : 1.0 / std::sqrt(static_cast<double>(s.size())));
        },
        py::arg("x"), py::arg("y"), py::arg("bandwidth") = py::none());

    m.def(
        "sup_grid", [](int depth, int dim, double eps) {
            const auto g = make_sup_grid(depth, dim, eps);
            Array out({static_cast<py::ssize_t>(g.size() / static_cast<std::size_t>(dim)),
                       static_cast<py::ssize_t>(dim)});
            std::copy(g.begin(), g.end(), out.mutable_data());
            return out;
        },
        py::arg("depth"), py::arg("dim"), py::arg("eps") = 0x1p-30);

    m.def(
        "regression_value",
        [](const std::string& name, const Array& points) {
            if (points.ndim() != 2) throw Error(ErrorKind::Shape, "points must have shape (m, p)");
            const auto id = parse_regression(name);
            const auto dim = static_cast<std::size_t>(points.shape(1));
            std::vector<double> out(static_cast<std::size_t>(points.shape(0)));
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = regression_value(id, PointView(points.data() + i * dim, dim));
            return to_array(out);
        },
        py::arg("name"), py::arg("points"));

    m.def(
        "run_experiments",
        [](const std::string& json, std::uint64_t seed, const std::string& cache_dir, unsigned workers) {
            auto configs = parse_experiment_json(json);
            py::list out;
            for (auto& c : configs) {
                c.seed = seed;
                c.validate();
                ExperimentResult r;
                {
                    py::gil_scoped_release release;
                    r = run_experiment(c, cache_dir, workers);
                }
                out.append(result_dict(r));
            }
            return out;
        },
        py::arg("config_json"), py::arg("seed"), py::arg("cache_dir") = "", py::arg("workers") = 0);
}
