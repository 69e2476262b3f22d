#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "lasro/harness.hpp"

namespace py = pybind11;
using namespace lasro;

namespace {

// Python side holds points as rows; the core stores them as columns.
using RowPoints = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix to_cols(const RowPoints& x) { return x.transpose(); }
RowPoints to_rows(const Matrix& x) { return x.transpose(); }

py::dict eval_dict(const analysis::EvalResult& e) {
  py::dict d;
  d["reward_1step"] = e.reward_1step;
  d["reward_2step"] = e.reward_2step;
  d["fidelity"] = e.fidelity;
  return d;
}

}  // namespace

PYBIND11_MODULE(_lasro, m) {
  m.doc() = "Latent-space surrogate-reward fine-tuning of two-step samplers on 2-D toy data";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<PreconditionError>(m, "PreconditionError", PyExc_RuntimeError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<NoDensityError>(m, "NoDensityError", PyExc_ValueError);
  py::register_exception<InvalidStateError>(m, "InvalidStateError", PyExc_RuntimeError);

  m.def(
      "alpha_bar",
      [](int T, const std::string& kind, double beta_min, double beta_max) {
        return diffusion::make_schedule(T, diffusion::parse_schedule_kind(kind), beta_min, beta_max)
            .alpha_bar;
      },
      py::arg("T") = 100, py::arg("kind") = "cosine", py::arg("beta_min") = 0.02,
      py::arg("beta_max") = 0.3, "Cumulative signal fraction for t = 0..T.");

  m.def(
      "sample_dataset",
      [](const std::string& kind, int n, int num_classes, std::uint64_t seed) {
        const auto data = diffusion::make_toy_dataset(kind, 2, num_classes, 0);
        Rng rng(seed);
        std::vector<int> labels;
        const Matrix x = data.sample_labeled(rng, n, labels);
        return py::make_tuple(to_rows(x), labels);
      },
      py::arg("kind") = "mixture", py::arg("n") = 1000, py::arg("num_classes") = 4,
      py::arg("seed") = 0, "Labelled draws (points as rows) from a toy dataset.");

  m.def("pair_loss_from_gap", &rewards::pair_loss_from_gap, py::arg("gap"));
  m.def("spearman", &analysis::spearman, py::arg("x"), py::arg("y"));
  m.def("wasserstein1_1d", &analysis::wasserstein1_1d, py::arg("a"), py::arg("b"));
  m.def(
      "fidelity_proxy",
      [](const RowPoints& a, const RowPoints& b, int projections, std::uint64_t seed) {
        return analysis::fidelity_proxy(to_cols(a), to_cols(b), projections, seed);
      },
      py::arg("a"), py::arg("b"), py::arg("projections") = 64, py::arg("seed") = 0,
      "Sliced 1-D Wasserstein distance between two point sets (rows are points).");

  py::class_<train::RunningStats>(m, "RunningStats")
      .def(py::init<int, double, double>(), py::arg("window") = 1024, py::arg("decay") = 0.99,
           py::arg("floor") = 1e-6)
      .def("update", &train::RunningStats::update)
      .def("normalize_clip", &train::RunningStats::normalize_clip)
      .def_property_readonly("mean", &train::RunningStats::mean)
      .def_property_readonly("p90", &train::RunningStats::p90)
      .def_property_readonly("count", &train::RunningStats::count)
      .def("window", &train::RunningStats::window);

  m.def(
      "parse_config",
      [](const std::string& text) {
        return harness::emit_config(harness::parse_config_text(text));
      },
      py::arg("text"), "Validates a JSON config and returns it with every default spelled out.");

  py::class_<harness::Pipeline>(m, "Pipeline")
      .def(py::init(
               [](const std::string& config_text, const std::string& run_dir, std::uint64_t seed) {
                 return std::make_unique<harness::Pipeline>(harness::parse_config_text(config_text),
                                                            run_dir, seed);
               }),
           py::arg("config"), py::arg("run_dir"), py::arg("seed") = 0)
      .def("train_teacher", &harness::Pipeline::train_teacher,
           py::call_guard<py::gil_scoped_release>())
      .def("distill", &harness::Pipeline::distill, py::call_guard<py::gil_scoped_release>())
      .def("pretrain_reward", &harness::Pipeline::pretrain_reward,
           py::call_guard<py::gil_scoped_release>())
      .def(
          "finetune",
          [](harness::Pipeline& p, const std::string& method) {
            runner::FinetuneResult res;
            {
              py::gil_scoped_release release;
              res = p.finetune(runner::parse_method(method));
            }
            py::list evals;
            for (const auto& [step, e] : res.evals) {
              auto d = eval_dict(e);
              d["step"] = step;
              evals.append(d);
            }
            return evals;
          },
          py::arg("method") = "lasro", "Runs one fine-tuning method; returns its evaluations.")
      .def("analyze", &harness::Pipeline::analyze, py::arg("probe"), py::arg("method") = "lasro",
           py::call_guard<py::gil_scoped_release>())
      .def("report", &harness::Pipeline::report)
      .def("report_path", &harness::Pipeline::report_path, py::arg("probe"))
      .def_property_readonly("metrics_path",
                             [](harness::Pipeline& p) { return p.metrics().path(); })
      .def(
          "sample_student",
          [](const harness::Pipeline& p, const std::vector<int>& labels, int steps,
             std::uint64_t seed) {
            const auto f = p.load_student();
            return to_rows(consistency::cm_sample(f, labels, steps, seed).outputs.back());
          },
          py::arg("labels"), py::arg("steps") = 2, py::arg("seed") = 0,
          "Draws from the distilled student, one row per label.");
}
