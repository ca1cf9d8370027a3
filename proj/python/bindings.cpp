#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "structdgp/checkpoint.hpp"
#include "structdgp/harness.hpp"
#include "structdgp/oracle.hpp"

namespace py = pybind11;
using namespace sdgp;

namespace {

Batch make_batch(const Matrix& x, const Vector& y) { return Batch::full(x, y); }

ElboOptions elbo_options(int samples, std::uint64_t seed, bool sampled_inducing) {
  ElboOptions o;
  o.samples = samples;
  o.seed = seed;
  o.estimator = sampled_inducing ? Estimator::SampledInducing : Estimator::Analytic;
  return o;
}

py::list history_list(const TrainResult& r) {
  py::list out;
  for (const TrainRecord& rec : r.history) {
    py::dict d;
    d["iteration"] = rec.iteration;
    d["elbo"] = rec.elbo;
    d["lr"] = rec.lr;
    d["val_tll"] = rec.val_tll ? py::cast(*rec.val_tll) : py::none();
    d["wall_ms"] = rec.wall_ms;
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Deep Gaussian processes with structured variational posteriors";

  auto base = py::register_exception<Error>(m, "Error", PyExc_ValueError);
  py::register_exception<NotPositiveDefinite>(m, "NotPositiveDefinite", base.ptr());
  py::register_exception<DimensionMismatch>(m, "DimensionMismatch", base.ptr());
  py::register_exception<IndexOutOfRange>(m, "IndexOutOfRange", base.ptr());
  py::register_exception<TooLarge>(m, "TooLarge", base.ptr());
  py::register_exception<DegenerateWeights>(m, "DegenerateWeights", base.ptr());
  py::register_exception<NumericalFailure>(m, "NumericalFailure", base.ptr());

  py::enum_<Structure>(m, "Structure")
      .value("MEAN_FIELD", Structure::MeanField)
      .value("STRIPES_AND_ARROW", Structure::StripesAndArrow)
      .value("FULLY_COUPLED", Structure::FullyCoupled);
  m.def("parse_structure", [](const std::string& s) { return parse_structure(s); });

  m.def("nonzero_count", &nonzero_count, py::arg("structure"), py::arg("tau"),
        py::arg("layers"), py::arg("inducing"));
  m.def("cholesky", [](const Matrix& a, double jitter) { return Matrix(cholesky(a, jitter).matrix()); },
        py::arg("a"), py::arg("jitter") = 0.0);
  m.def("kmat",
        [](const Matrix& x1, const Matrix& x2, const Vector& lengthscales, double variance) {
          KernelParams p = KernelParams::with_dim(static_cast<int>(lengthscales.size()));
          p.log_lengthscales = lengthscales.array().log().matrix();
          p.log_variance = std::log(variance);
          return kmat(p, x1, x2);
        },
        py::arg("x1"), py::arg("x2"), py::arg("lengthscales"), py::arg("variance") = 1.0);
  m.def("exact_gp_lml",
        [](const Matrix& x, const Vector& y, const Vector& lengthscales, double variance, double noise) {
          KernelParams p = KernelParams::with_dim(static_cast<int>(lengthscales.size()));
          p.log_lengthscales = lengthscales.array().log().matrix();
          p.log_variance = std::log(variance);
          return oracle::exact_gp_lml(x, y, p, noise);
        },
        py::arg("x"), py::arg("y"), py::arg("lengthscales"), py::arg("variance"), py::arg("noise"));
  m.def("toy_sinusoid",
        [](Index n, std::uint64_t seed) {
          const Dataset d = toy_sinusoid(n, seed);
          return py::make_tuple(d.x, d.y);
        },
        py::arg("n"), py::arg("seed") = 0);
  m.def("make_split",
        [](const Matrix& x, const std::string& mode, double fraction, std::uint64_t seed) {
          SplitSpec s;
          s.mode = parse_split_mode(mode);
          s.fraction = fraction;
          s.seed = seed;
          const Split sp = make_split(x, s);
          return py::make_tuple(sp.train, sp.test);
        },
        py::arg("x"), py::arg("mode") = "interp", py::arg("fraction") = -1.0, py::arg("seed") = 0);

  py::class_<DGPModel>(m, "Model")
      .def(py::init([](const Matrix& x, const std::string& structure, int layers, int width,
                       int inducing, double noise, std::uint64_t seed) {
             ModelSpec spec;
             spec.structure = parse_structure(structure);
             spec.layers = layers;
             spec.width = width;
             spec.inducing = inducing;
             spec.noise = noise;
             spec.seed = seed;
             return build_model(x, spec);
           }),
           py::arg("x"), py::arg("structure") = "star", py::arg("layers") = 3,
           py::arg("width") = 5, py::arg("inducing") = 128, py::arg("noise") = 0.01,
           py::arg("seed") = 0)
      .def_property_readonly("structure", &DGPModel::structure)
      .def_property_readonly("layers", [](const DGPModel& d) { return d.arch.layers(); })
      .def_property_readonly("noise", &DGPModel::noise)
      .def_property_readonly("num_params", [](const DGPModel& d) { return param_layout(d).size; })
      .def("params", [](const DGPModel& d) { return flatten(d); })
      .def("set_params", [](DGPModel& d, const Vector& t) { unflatten(d, t); }, py::arg("theta"))
      .def("inducing", [](const DGPModel& d, int l) { return d.layer(l).inducing; }, py::arg("layer"))
      .def("covariance", [](const DGPModel& d) { return densify(d.factor).covariance; })
      .def("kl", [](const DGPModel& d) { return kl_term(d); })
      .def("elbo",
           [](const DGPModel& d, const Matrix& x, const Vector& y, int samples, std::uint64_t seed,
              bool sampled_inducing) {
             return elbo_and_gradient(d, make_batch(x, y), elbo_options(samples, seed, sampled_inducing))
                 .terms.value;
           },
           py::arg("x"), py::arg("y"), py::arg("samples") = 5, py::arg("seed") = 0,
           py::arg("sampled_inducing") = false)
      .def("elbo_and_gradient",
           [](const DGPModel& d, const Matrix& x, const Vector& y, int samples, std::uint64_t seed) {
             const ElboGradient g = elbo_and_gradient(d, make_batch(x, y), elbo_options(samples, seed, false));
             return py::make_tuple(g.terms.value, g.gradient);
           },
           py::arg("x"), py::arg("y"), py::arg("samples") = 5, py::arg("seed") = 0)
      .def("train",
           [](DGPModel& d, const Matrix& x, const Vector& y, int iterations, int minibatch,
              int samples, double lr, double validation_fraction, std::uint64_t seed,
              bool sampled_inducing, int log_every) {
             TrainConfig c;
             c.iterations = iterations;
             c.minibatch = minibatch;
             c.samples = samples;
             c.learning_rate = lr;
             c.validation_fraction = validation_fraction;
             c.seed = seed;
             c.log_every = log_every;
             c.estimator = sampled_inducing ? Estimator::SampledInducing : Estimator::Analytic;
             py::gil_scoped_release release;
             const TrainResult r = train(d, x, y, c);
             py::gil_scoped_acquire acquire;
             return history_list(r);
           },
           py::arg("x"), py::arg("y"), py::arg("iterations") = 1000, py::arg("minibatch") = 512,
           py::arg("samples") = 5, py::arg("lr") = 0.005, py::arg("validation_fraction") = 0.0,
           py::arg("seed") = 0, py::arg("sampled_inducing") = false, py::arg("log_every") = 100)
      .def("predict",
           [](const DGPModel& d, const Matrix& x, int r_test, std::uint64_t seed) {
             const PreparedModel prep(d);
             Vector mean(x.rows()), var(x.rows());
             for (Index i = 0; i < x.rows(); ++i) {
               const auto paths = predict(prep, x.row(i), r_test, seed, static_cast<std::uint64_t>(i));
               double m1 = 0, m2 = 0;
               for (const GaussianMoments& p : paths) {
                 m1 += p.mean(0);
                 m2 += p.cov(0, 0) + d.noise() + p.mean(0) * p.mean(0);
               }
               m1 /= static_cast<double>(paths.size());
               m2 /= static_cast<double>(paths.size());
               mean(i) = m1;
               var(i) = m2 - m1 * m1;
             }
             return py::make_tuple(mean, var);
           },
           py::arg("x"), py::arg("r_test") = 100, py::arg("seed") = 0)
      .def("log_predictive",
           [](const DGPModel& d, const Matrix& x, const Vector& y, int r_test, std::uint64_t seed) {
             return mean_log_predictive(d, x, y, r_test, seed);
           },
           py::arg("x"), py::arg("y"), py::arg("r_test") = 100, py::arg("seed") = 0)
      .def("save", [](const DGPModel& d, const std::string& path) { save_checkpoint(d, path); },
           py::arg("path"))
      .def_static("load", [](const std::string& path) { return load_checkpoint(path); },
                  py::arg("path"));
}
