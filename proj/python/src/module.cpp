#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "miam/cli.hpp"
#include "miam/data_model.hpp"
#include "miam/evaluation.hpp"
#include "miam/gradcheck.hpp"
#include "miam/ingestion.hpp"
#include "miam/io.hpp"
#include "miam/metrics.hpp"
#include "miam/model.hpp"
#include "miam/run_config.hpp"
#include "miam/synthetic.hpp"
#include "miam/training.hpp"

namespace py = pybind11;
using namespace miam;

namespace {

template <class T>
py::array_t<T> to_array(const Matrix<T>& m) {
  py::array_t<T> a({m.rows, m.cols});
  std::copy(m.data.begin(), m.data.end(), a.mutable_data());
  return a;
}

template <class T>
Matrix<T> from_array(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  Matrix<T> m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  return m;
}

py::dict sample_dict(const TimeSeriesSample& s) {
  py::dict d;
  d["subject_id"] = s.subject_id;
  d["timestamps"] = py::array_t<double>(s.timestamps.size(), s.timestamps.data());
  d["values"] = to_array(s.values);
  d["mask"] = to_array(s.mask);
  d["intervals"] = to_array(s.intervals);
  d["label"] = s.label ? py::object(py::int_(*s.label)) : py::object(py::none());
  return d;
}

RunConfig run_config(const std::map<std::string, std::string>& overrides) {
  RunConfig c;
  c.apply(overrides);
  return c;
}

SyntheticConfig synthetic_config(const py::kwargs& kw) {
  SyntheticConfig c;
  for (const auto& [k, v] : kw) {
    const auto key = py::cast<std::string>(k);
    if (key == "n_samples") c.n_samples = py::cast<std::size_t>(v);
    else if (key == "num_variables") c.num_variables = py::cast<std::size_t>(v);
    else if (key == "t_min") c.t_min = py::cast<std::size_t>(v);
    else if (key == "t_max") c.t_max = py::cast<std::size_t>(v);
    else if (key == "horizon") c.horizon = py::cast<double>(v);
    else if (key == "n_factors") c.n_factors = py::cast<std::size_t>(v);
    else if (key == "noise_std") c.noise_std = py::cast<double>(v);
    else if (key == "regime") c.regime = parse_missing_regime(py::cast<std::string>(v));
    else if (key == "label_rule") c.label_rule = parse_label_rule(py::cast<std::string>(v));
    else if (key == "missing_p") c.missing_p = py::cast<double>(v);
    else if (key == "missing_p_neg") c.missing_p_neg = py::cast<double>(v);
    else if (key == "missing_p_pos") c.missing_p_pos = py::cast<double>(v);
    else if (key == "threshold") c.threshold = py::cast<double>(v);
    else if (key == "observe_low") c.observe_low = py::cast<double>(v);
    else if (key == "observe_high") c.observe_high = py::cast<double>(v);
    else if (key == "prevalence") c.prevalence = py::cast<double>(v);
    else if (key == "label_temperature") c.label_temperature = py::cast<double>(v);
    else if (key == "hide_mask_in_values") c.hide_mask_in_values = py::cast<bool>(v);
    else if (key == "seed") c.seed = py::cast<std::uint64_t>(v);
    else throw ConfigError("unknown synthetic option '" + key + "'");
  }
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-view integration attention for irregular clinical time series";

  py::register_exception<Error>(m, "MiamError", PyExc_RuntimeError);

  py::class_<Dataset>(m, "Dataset")
      .def(py::init<>())
      .def("__len__", &Dataset::size)
      .def_readonly("vocabulary", &Dataset::vocabulary)
      .def_readonly("num_variables", &Dataset::num_variables)
      .def("positives", &Dataset::positives)
      .def("labels", [](const Dataset& d) { return labels_of(d); })
      .def("sample", [](const Dataset& d, std::size_t i) { return sample_dict(d.samples.at(i)); })
      .def("subset", [](const Dataset& d, const std::vector<std::size_t>& idx) { return d.subset(idx); })
      .def("add_sample",
           [](Dataset& d, const std::string& id, const std::vector<double>& t,
              py::array_t<double, py::array::c_style | py::array::forcecast> x,
              py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> mask,
              std::optional<int> label) {
             auto s = make_sample(id, t, from_array(x), from_array(mask), label);
             if (d.samples.empty() && d.num_variables == 0) d.num_variables = s.num_variables();
             if (d.vocabulary.empty())
               for (std::size_t k = 0; k < d.num_variables; ++k) d.vocabulary.push_back("v" + std::to_string(k));
             d.samples.push_back(std::move(s));
             d.check_consistent();
           },
           py::arg("subject_id"), py::arg("timestamps"), py::arg("values"), py::arg("mask"),
           py::arg("label") = py::none());

  m.def("compute_intervals",
        [](const std::vector<double>& t,
           py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> mask) {
          return to_array(compute_intervals(t, from_array(mask)));
        },
        py::arg("timestamps"), py::arg("mask"));
  m.def("time_embedding",
        [](const std::vector<double>& t, std::size_t d_model, double l_max) {
          return to_array(time_embedding(t, d_model, l_max));
        },
        py::arg("timestamps"), py::arg("d_model"), py::arg("l_max") = 48.0);

  m.def("auc", [](const std::vector<double>& s, const std::vector<int>& y) { return auc(s, y); },
        py::arg("scores"), py::arg("labels"));
  m.def("auprc", [](const std::vector<double>& s, const std::vector<int>& y) { return auprc(s, y); },
        py::arg("scores"), py::arg("labels"));
  m.def("focal_term", &focal_term, py::arg("p"), py::arg("label"), py::arg("beta") = 7.0,
        py::arg("gamma") = 0.15);

  m.def("generate_synthetic",
        [](const py::kwargs& kw) {
          auto syn = generate(synthetic_config(kw));
          py::list lat;
          for (const auto& z : syn.latents) lat.append(to_array(z));
          return py::make_tuple(std::move(syn.dataset), lat);
        },
        "Synthetic dataset and its noise-free latents; keyword options mirror `miam synth`.");
  m.def("load_dataset", [](const std::filesystem::path& p) { return load_dataset(p); });
  m.def("save_dataset",
        [](const std::filesystem::path& p, const Dataset& d, const std::string& fp) { save_dataset(p, d, fp); },
        py::arg("path"), py::arg("dataset"), py::arg("fingerprint") = "");
  m.def("load_physionet",
        [](const std::filesystem::path& dir, std::optional<std::filesystem::path> outcomes,
           std::size_t workers) {
          auto l = load_physionet(dir, outcomes, workers);
          return py::make_tuple(std::move(l.dataset), l.report.to_text());
        },
        py::arg("records_dir"), py::arg("outcomes") = py::none(), py::arg("workers") = 1);

  m.def("config_fingerprint",
        [](const std::map<std::string, std::string>& kv) { return run_config(kv).fingerprint(); },
        py::arg("overrides") = std::map<std::string, std::string>{});
  m.def("config_values",
        [](const std::map<std::string, std::string>& kv) { return run_config(kv).to_key_values(); },
        py::arg("overrides") = std::map<std::string, std::string>{});

  m.def("make_folds",
        [](const Dataset& d, std::size_t k, std::uint64_t seed) {
          const auto f = make_folds(d, k, seed);
          std::vector<std::size_t> out;
          for (const auto& a : f.assignments) out.push_back(a.second);
          return out;
        },
        py::arg("dataset"), py::arg("k") = 5, py::arg("seed") = 0);

  m.def("fit_and_score",
        [](const Dataset& train, const Dataset& test, const std::map<std::string, std::string>& kv,
           std::uint64_t split_seed) {
          py::gil_scoped_release release;
          const auto fitted = fit_model(train, run_config(kv), split_seed);
          if (fitted.diverged) throw NumericError(fitted.message);
          return score(fitted, test);
        },
        py::arg("train"), py::arg("test"), py::arg("overrides") = std::map<std::string, std::string>{},
        py::arg("split_seed") = 0,
        "Trains on `train` and returns probabilities for `test`.");

  m.def("cross_validate",
        [](const Dataset& d, const std::map<std::string, std::string>& kv) {
          CrossValReport r;
          {
            py::gil_scoped_release release;
            const auto cfg = run_config(kv);
            r = cross_validate(d, make_folds(d, cfg.folds, cfg.fold_seed), cfg);
          }
          py::dict out;
          py::list folds;
          for (const auto& f : r.folds) {
            py::dict row;
            row["fold"] = f.fold;
            row["auc"] = f.test.auc;
            row["auprc"] = f.test.auprc;
            row["n_test"] = f.test.n;
            folds.append(row);
          }
          out["folds"] = folds;
          out["auc_mean"] = r.auc.mean;
          out["auc_std"] = r.auc.std;
          out["auprc_mean"] = r.auprc.mean;
          out["auprc_std"] = r.auprc.std;
          out["complete"] = r.complete;
          out["error"] = r.error;
          out["fingerprint"] = r.fingerprint;
          return out;
        },
        py::arg("dataset"), py::arg("overrides") = std::map<std::string, std::string>{});

  m.def("gradcheck",
        [](std::uint64_t seed, bool inject_bug) {
          GradcheckOptions o;
          o.seed = seed;
          o.inject_bug = inject_bug;
          const auto r = gradcheck(o);
          return py::make_tuple(r.passed, r.max_rel_error);
        },
        py::arg("seed") = 0, py::arg("inject_bug") = false,
        "(passed, max relative error) of the finite-difference check.");

  m.def("main",
        [](std::vector<std::string> args) {
          args.insert(args.begin(), "miam");
          std::vector<char*> argv;
          for (auto& a : args) argv.push_back(a.data());
          return cli::run(static_cast<int>(argv.size()), argv.data());
        },
        py::arg("args"), "Runs the command-line tool in-process and returns its exit code.");
}
