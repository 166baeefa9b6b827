#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mbdl/error.hpp"
#include "mbdl/experiment.hpp"
#include "mbdl/nonlinear.hpp"
#include "mbdl/sparse.hpp"
#include "mbdl/state_space.hpp"
#include "mbdl/unfolded.hpp"

namespace py = pybind11;
using namespace mbdl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Tensor::Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from_external(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

// nlohmann <-> python through json text; configs are small
Json to_json(const py::object& o) {
  return Json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::object from_json(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

SparseProblem problem(const Array& H, double rho) {
  SparseProblem p{to_tensor(H), std::nullopt, rho, 0.0};
  p.validate();
  return p;
}

py::dict result_dict(const SolverResult& r) {
  std::vector<double> objective, residual;
  for (const auto& rec : r.trace) {
    objective.push_back(rec.objective);
    residual.push_back(rec.residual);
  }
  py::dict d;
  d["coefficients"] = to_array(r.coefficients);
  d["iterations"] = r.iterations;
  d["converged"] = r.converged;
  d["objective"] = objective;
  d["residual"] = residual;
  return d;
}

StateSpaceModel model_from(const py::dict& m) {
  if (m.contains("preset")) return model_preset(m["preset"].cast<std::string>());
  StateSpaceModel s;
  auto get = [&](const char* k) { return to_tensor(m[k].cast<Array>()); };
  s.A = get("A");
  s.B = get("B");
  s.C = get("C");
  s.V = get("V");
  s.W = get("W");
  s.Q = m.contains("Q") ? get("Q") : Tensor::identity(s.A.rows());
  s.R = m.contains("R") ? get("R") : Tensor::identity(s.B.cols());
  s.z0 = m.contains("z0") ? get("z0") : Tensor({s.A.rows()});
  s.P0 = m.contains("P0") ? get("P0") : Tensor({s.A.rows(), s.A.rows()});
  s.validate();
  return s;
}

}  // namespace

PYBIND11_MODULE(_core, mod) {
  mod.doc() = "mbdl core: sparse solvers, unfolded networks, Kalman filtering and experiment runs";
  py::register_exception<ConfigError>(mod, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(mod, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<ShapeError>(mod, "ShapeError", PyExc_ValueError);

  mod.def("soft_threshold", [](const Array& x, double beta) { return to_array(soft_threshold(to_tensor(x), beta)); },
          py::arg("x"), py::arg("beta"));
  mod.def(
      "lasso_objective",
      [](const Array& H, const Array& x, const Array& r, double rho) {
        return lasso_objective(problem(H, rho), to_tensor(x), to_tensor(r));
      },
      py::arg("H"), py::arg("x"), py::arg("r"), py::arg("rho"));
  mod.def(
      "ista",
      [](const Array& H, const Array& x, double rho, int iterations, std::optional<double> mu) {
        const auto p = problem(H, rho);
        return result_dict(ista(p, to_tensor(x), mu.value_or(default_step(p)), iterations, {true, {}}));
      },
      py::arg("H"), py::arg("x"), py::arg("rho"), py::arg("iterations") = 100, py::arg("mu") = py::none());
  mod.def(
      "fista",
      [](const Array& H, const Array& x, double rho, int iterations, std::optional<double> mu) {
        const auto p = problem(H, rho);
        return result_dict(fista(p, to_tensor(x), mu.value_or(default_step(p)), iterations, {true, {}}));
      },
      py::arg("H"), py::arg("x"), py::arg("rho"), py::arg("iterations") = 100, py::arg("mu") = py::none());
  mod.def(
      "admm",
      [](const Array& H, const Array& x, double rho, double lam, double mu, int max_iter, double tol) {
        AdmmHyper h{lam, mu, max_iter, tol};
        return result_dict(admm(problem(H, rho), to_tensor(x), h, SolverOptions{true, {}}));
      },
      py::arg("H"), py::arg("x"), py::arg("rho"), py::arg("lam") = 1.0, py::arg("mu") = 1.0, py::arg("max_iter") = 5000,
      py::arg("tol") = 1e-8);
  mod.def(
      "lista_forward",
      [](const Array& H, const Array& x, double rho, std::size_t K) {
        const auto p = problem(H, rho);
        return to_array(lista_forward(lista_init(p, default_step(p), K), to_tensor(x)));
      },
      py::arg("H"), py::arg("x"), py::arg("rho"), py::arg("K"),
      "LISTA at its ISTA initialization; equals K ISTA steps from zero.");

  mod.def(
      "kalman_filter",
      [](const py::dict& model, const Array& X) {
        const auto m = model_from(model);
        Trajectory traj;
        traj.X = to_tensor(X);
        traj.S = Tensor({traj.X.rows(), m.action_dim()});
        traj.Z = Tensor({traj.X.rows(), m.state_dim()});
        return to_array(kalman_filter(m, traj));
      },
      py::arg("model"), py::arg("X"), "Filtered states [T x n] for observations X [T x q] with zero actions.");
  mod.def(
      "simulate",
      [](const py::dict& model, std::size_t T, std::uint64_t seed) {
        const auto m = model_from(model);
        const auto traj = simulate(m, zero_policy(m.action_dim()), T, seed);
        return py::make_tuple(to_array(traj.Z), to_array(traj.X));
      },
      py::arg("model"), py::arg("T"), py::arg("seed") = 0);
  mod.def("lqr_gain", [](const py::dict& model) { return to_array(lqr_stationary_gain(model_from(model))); },
          py::arg("model"));
  mod.def(
      "lorenz_transition",
      [](const Array& z, double dt, int J) { return to_array(lorenz_transition(to_tensor(z), dt, J)); }, py::arg("z"),
      py::arg("dt") = 0.02, py::arg("J") = 5);

  mod.def("methods", [] {
    py::dict d;
    for (const auto& t : experiment_tasks()) d[py::str(t)] = experiment_methods(t);
    return d;
  });
  mod.def(
      "resolve_config", [](const py::object& c, bool quick) { return from_json(resolve_config(to_json(c), quick)); },
      py::arg("config"), py::arg("quick") = false);
  mod.def(
      "config_hash", [](const py::object& c, bool quick) { return config_hash(resolve_config(to_json(c), quick)); },
      py::arg("config"), py::arg("quick") = false);
  mod.def(
      "run_experiment",
      [](const py::object& c, const std::string& out_root, bool quick) {
        ExperimentOptions opts;
        opts.quick = quick;
        const Json config = to_json(c);
        ExperimentReport r;
        {
          py::gil_scoped_release release;
          r = run_experiment(config, out_root, opts);
        }
        py::dict d = from_json(r.metrics);
        d["run_dir"] = r.run_dir.string();
        return d;
      },
      py::arg("config"), py::arg("out_root"), py::arg("quick") = false);
  mod.def(
      "solve",
      [](const py::object& c, const std::string& out_dir) { return from_json(solve_instance(to_json(c), out_dir)); },
      py::arg("config"), py::arg("out_dir"));
}
