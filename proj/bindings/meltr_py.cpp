#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "meltr/gradcheck.hpp"
#include "meltr/harness.hpp"
#include "meltr/hypergrad.hpp"
#include "meltr/quadratic.hpp"

namespace py = pybind11;
using namespace meltr;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Shape shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] = a.shape(i);
    std::vector<double> values(a.data(), a.data() + a.size());
    return Tensor(std::move(shape), std::move(values));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

QuadraticTestbed testbed_from_lists(const std::vector<py::array_t<double>>& As,
                                    const std::vector<py::array_t<double>>& cs,
                                    const std::vector<double>& phi) {
    QuadraticTestbed tb;
    for (const auto& a : As) tb.A.push_back(tensor_from_array(a));
    for (const auto& c : cs) {
        Tensor t = tensor_from_array(c);
        tb.c.push_back(t.rank() == 1 ? reshape(t, {t.size(), 1}) : t);
    }
    tb.phi = phi;
    tb.validate();
    return tb;
}

}  // namespace

PYBIND11_MODULE(_meltr, m) {
    m.doc() = "Bi-level auxiliary-loss optimization: loss-combining transformer, "
              "hypergradient schemes and synthetic testbeds";

    py::register_exception<Error>(m, "MeltrError");

    py::class_<MeltrNet>(m, "MeltrNet")
        .def_static(
            "init",
            [](int d, int heads, int num_tasks, const std::string& variant, uint64_t seed) {
                MeltrConfig cfg{.d = d,
                                .heads = heads,
                                .num_tasks = num_tasks,
                                .variant = variant_from_string(variant)};
                return MeltrNet::init(cfg, seed);
            },
            py::arg("d") = 32, py::arg("heads") = 4, py::arg("num_tasks") = 2,
            py::arg("variant") = "full", py::arg("seed") = 0)
        .def_property_readonly("param_count", &MeltrNet::param_count)
        .def_property_readonly("param_names", [](const MeltrNet& n) { return n.names; })
        .def("param", [](const MeltrNet& n, const std::string& name) {
            return array_from_tensor(n.param(name));
        })
        .def("forward",
             [](const MeltrNet& net, const std::vector<double>& losses,
                std::optional<std::vector<int64_t>> task_ids) {
                 LossVector l = task_ids ? LossVector(losses, *task_ids) : LossVector::of(losses);
                 return meltr_value(l, net);
             },
             py::arg("losses"), py::arg("task_ids") = py::none())
        .def("partials",
             [](const MeltrNet& net, const std::vector<double>& losses,
                std::optional<std::vector<int64_t>> task_ids) {
                 LossVector l = task_ids ? LossVector(losses, *task_ids) : LossVector::of(losses);
                 return probe_partials(l, net);
             },
             py::arg("losses"), py::arg("task_ids") = py::none())
        .def("scale_embed",
             [](const MeltrNet& net, double value) { return scale_embed(value, net); })
        .def("task_embed", [](const MeltrNet& net, int64_t t) { return task_embed(t, net); })
        .def("sweep",
             [](const MeltrNet& net, int64_t task, double lo, double hi, int steps,
                const std::vector<double>& baseline) {
                 auto rows = sweep_surface(net, task, lo, hi, steps, LossVector::of(baseline));
                 py::list out;
                 for (const auto& r : rows)
                     out.append(py::make_tuple(r.loss_value, r.output, r.partial));
                 return out;
             },
             py::arg("task"), py::arg("lo") = 0.0, py::arg("hi") = 3.0, py::arg("steps") = 31,
             py::arg("baseline"));

    m.def("quad_closed_form",
          [](const std::vector<py::array_t<double>>& As, const std::vector<py::array_t<double>>& cs,
             const std::vector<double>& phi) {
              auto oracle = quad_closed_form(testbed_from_lists(As, cs, phi));
              return py::make_tuple(oracle.w_star, oracle.hypergrad);
          },
          py::arg("A"), py::arg("c"), py::arg("phi"),
          "Exact minimizer and hypergradient of the quadratic testbed");

    m.def("quad_hypergrad",
          [](const std::string& scheme, const std::vector<py::array_t<double>>& As,
             const std::vector<py::array_t<double>>& cs, const std::vector<double>& phi,
             const std::vector<double>& w, double alpha) {
              QuadraticTestbed tb = testbed_from_lists(As, cs, phi);
              BilevelProblem prob;
              prob.aux = [&tb](Graph&, const std::vector<Tensor>& wv,
                               const std::vector<Tensor>& pv) { return quad_aux(tb, wv[0], pv); };
              prob.pri = [&tb](Graph&, const std::vector<Tensor>& wv) {
                  return quad_pri(tb, wv[0]);
              };
              std::vector<Tensor> phi_t;
              for (double p : tb.phi) phi_t.push_back(Tensor::scalar(p));
              Tensor w0({static_cast<int64_t>(w.size()), 1}, w);
              auto res = compute_hypergrad(scheme_from_string(scheme), prob, {w0}, phi_t, alpha);
              std::vector<double> flat = flatten(res.dphi);
              return py::make_tuple(flat, res.warning, res.note);
          },
          py::arg("scheme"), py::arg("A"), py::arg("c"), py::arg("phi"), py::arg("w"),
          py::arg("alpha") = 0.05,
          "Apply one hypergradient scheme to the quadratic testbed at w");

    m.def("run_config",
          [](const std::string& config_json, const std::string& out_dir) {
              nlohmann::json doc = nlohmann::json::parse(config_json);
              TrainConfig cfg = parse_run_config(doc);
              TaskSpec task = suite_by_name(cfg.suite, cfg.seed);
              RunRecord rec = train_loop(cfg, task);
              write_run_artifacts(rec, out_dir);
              return py::module_::import("json").attr("loads")(rec.to_json().dump());
          },
          py::arg("config_json"), py::arg("out_dir"),
          "Train one configuration, write run artifacts and return the record");

    m.def("gradcheck",
          [](bool inject_sign_flip) {
              auto rep = run_gradcheck({.inject_sign_flip = inject_sign_flip});
              return py::make_tuple(rep.passed(), rep.summary());
          },
          py::arg("inject_sign_flip") = false);

    m.attr("__version__") = "0.1.0";
}
