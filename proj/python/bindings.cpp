// Python module: models, symmetry transforms, re-alignment, metrics, the
// attack ROC and whole-experiment runs. Tensors cross as float32 numpy arrays.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "shadowalign/config.hpp"
#include "shadowalign/data.hpp"
#include "shadowalign/error.hpp"
#include "shadowalign/harness.hpp"
#include "shadowalign/io.hpp"
#include "shadowalign/metrics.hpp"
#include "shadowalign/realign.hpp"
#include "shadowalign/symmetry.hpp"

namespace py = pybind11;
namespace sa = shadowalign;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_numpy(const sa::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<float> out(shape);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

sa::Tensor from_numpy(const FloatArray& a) {
  sa::Shape shape(a.shape(), a.shape() + a.ndim());
  return sa::Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

std::vector<sa::Tensor> records(const FloatArray& batch) {
  if (batch.ndim() < 2) throw sa::ShapeError("expected a batch with a leading record axis");
  const sa::Shape shape(batch.shape() + 1, batch.shape() + batch.ndim());
  const std::size_t per = sa::shape_size(shape);
  std::vector<sa::Tensor> out;
  for (py::ssize_t i = 0; i < batch.shape(0); ++i) {
    const float* p = batch.data() + i * per;
    out.emplace_back(shape, std::vector<float>(p, p + per));
  }
  return out;
}

sa::LabeledDataset dataset(const FloatArray& x, const std::vector<std::size_t>& labels) {
  sa::LabeledDataset d;
  d.records = records(x);
  d.labels = labels;
  if (d.labels.size() != d.records.size()) throw sa::ShapeError("labels and records differ in length");
  for (std::size_t i = 0; i < d.records.size(); ++i) d.ids.push_back(i);
  return d;
}

}  // namespace

PYBIND11_MODULE(_shadowalign, m) {
  m.doc() = "Neuron misalignment and re-alignment for white-box membership inference";

  auto base = py::register_exception<sa::Error>(m, "Error");
  py::register_exception<sa::ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<sa::NumericError>(m, "NumericError", base.ptr());
  py::register_exception<sa::InvalidArgument>(m, "InvalidArgument", base.ptr());
  py::register_exception<sa::FormatError>(m, "FormatError", base.ptr());
  py::register_exception<sa::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<sa::IoError>(m, "IoError", base.ptr());

  py::class_<sa::SeedBundle>(m, "SeedBundle")
      .def(py::init([](std::uint64_t wi, std::uint64_t bo, std::uint64_t ds) { return sa::SeedBundle{wi, bo, ds}; }),
           py::arg("wi"), py::arg("bo"), py::arg("ds"))
      .def_static("from_master", &sa::SeedBundle::from_master)
      .def_readwrite("wi", &sa::SeedBundle::wi)
      .def_readwrite("bo", &sa::SeedBundle::bo)
      .def_readwrite("ds", &sa::SeedBundle::ds);

  py::class_<sa::Model>(m, "Model")
      .def(py::init([](const std::string& d) { return sa::build_model(d); }), py::arg("descriptor"))
      .def_property_readonly("descriptor", [](const sa::Model& self) { return sa::describe(self); })
      .def_property_readonly("num_layers", &sa::Model::num_param_layers)
      .def_property_readonly("num_classes", &sa::Model::num_classes)
      .def("weight", [](const sa::Model& self, std::size_t l) { return to_numpy(self.param(l).weight); })
      .def("bias", [](const sa::Model& self, std::size_t l) { return to_numpy(self.param(l).bias); })
      .def("set_weight",
           [](sa::Model& self, std::size_t l, const FloatArray& w) {
             sa::Tensor t = from_numpy(w);
             if (t.shape != self.param(l).weight.shape) throw sa::ShapeError("weight shape mismatch");
             self.param(l).weight = std::move(t);
           })
      .def("set_bias",
           [](sa::Model& self, std::size_t l, const FloatArray& b) {
             sa::Tensor t = from_numpy(b);
             if (t.shape != self.param(l).bias.shape) throw sa::ShapeError("bias shape mismatch");
             self.param(l).bias = std::move(t);
           })
      .def("predict", [](const sa::Model& self, const FloatArray& x) { return to_numpy(sa::predict(self, from_numpy(x))); })
      .def("layer_output",
           [](const sa::Model& self, const FloatArray& x, std::size_t l) {
             const sa::Tensor in = from_numpy(x);
             return to_numpy(sa::layer_output(self, sa::forward(self, in), l));
           })
      .def("save", [](const sa::Model& self, const std::string& path, const sa::SeedBundle& seeds) {
        sa::save_checkpoint(path, self, seeds);
      });

  m.def("init_weights", &sa::init_weights, py::arg("arch"), py::arg("seed_wi"));
  m.def("load_checkpoint", [](const std::string& path) {
    sa::Checkpoint c = sa::load_checkpoint(path);
    return py::make_tuple(c.model, c.seeds);
  });

  m.def(
      "train",
      [](const sa::Model& arch, const FloatArray& x, const std::vector<std::size_t>& y, const FloatArray& vx,
         const std::vector<std::size_t>& vy, const sa::SeedBundle& seeds, std::size_t batch_size, float lr,
         std::size_t max_epochs) {
        sa::TrainConfig cfg;
        cfg.batch_size = batch_size;
        cfg.lr = lr;
        cfg.max_epochs = max_epochs;
        const sa::LabeledDataset d = dataset(x, y), v = dataset(vx, vy);
        py::gil_scoped_release release;
        sa::TrainResult r = sa::train(arch, d, v, seeds, cfg);
        return std::make_pair(std::move(r.model), r.best_epoch);
      },
      py::arg("arch"), py::arg("x"), py::arg("y"), py::arg("val_x"), py::arg("val_y"), py::arg("seeds"),
      py::arg("batch_size") = 32, py::arg("lr") = 0.01f, py::arg("max_epochs") = 100);

  m.def("accuracy", [](const sa::Model& model, const FloatArray& x, const std::vector<std::size_t>& y) {
    return sa::accuracy(model, dataset(x, y));
  });

  m.def(
      "synthetic",
      [](const std::string& kind, std::size_t classes, std::size_t dim, std::size_t image_size, std::size_t per_class,
         double separation, double label_noise, std::uint64_t seed) {
        sa::SyntheticSpec spec;
        spec.kind = sa::parse_synthetic_kind(kind);
        spec.classes = classes;
        spec.dim = dim;
        spec.image_size = image_size;
        spec.per_class = per_class;
        spec.separation = separation;
        spec.label_noise = label_noise;
        sa::Rng rng(seed);
        const sa::LabeledDataset d = sa::gen_synthetic(spec, rng);
        std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(d.size())};
        for (auto s : d.records.at(0).shape) shape.push_back(static_cast<py::ssize_t>(s));
        py::array_t<float> x(shape);
        float* out = x.mutable_data();
        for (const auto& r : d.records) out = std::copy(r.data.begin(), r.data.end(), out);
        return py::make_tuple(x, d.labels);
      },
      py::arg("kind") = "blobs", py::arg("classes") = 4, py::arg("dim") = 32, py::arg("image_size") = 16,
      py::arg("per_class") = 500, py::arg("separation") = 3.0, py::arg("label_noise") = 0.0, py::arg("seed") = 0);

  // Symmetry
  m.def("random_permutation", [](std::size_t n, std::uint64_t seed) {
    sa::Rng rng(seed);
    return sa::random_permutation(n, rng).mapping();
  });
  m.def("permute_layer", [](const sa::Model& model, std::size_t l, const std::vector<std::size_t>& perm) {
    return sa::permute_layer(model, l, sa::Permutation(perm));
  });
  m.def("rescale_neurons", [](const sa::Model& model, std::size_t l, const std::vector<float>& factors) {
    return sa::rescale_neurons(model, l, factors);
  });
  m.def("flip_signs", [](const sa::Model& model, std::size_t l, const std::vector<int>& signs) {
    return sa::flip_signs(model, l, signs);
  });

  // Re-alignment
  m.def("hungarian", [](const std::vector<std::vector<double>>& cost) {
    std::vector<double> flat;
    for (const auto& row : cost) {
      if (row.size() != cost.size()) throw sa::ShapeError("cost matrix must be square");
      flat.insert(flat.end(), row.begin(), row.end());
    }
    const sa::Assignment a = sa::hungarian(sa::CostMatrix(cost.size(), flat));
    return py::make_tuple(a.perm.mapping(), a.cost);
  });
  m.def(
      "realign",
      [](const sa::Model& model, const sa::Model& reference, const std::string& method, const std::string& direction,
         std::optional<FloatArray> probe) {
        const std::vector<sa::Tensor> p = probe ? records(*probe) : std::vector<sa::Tensor>{};
        const sa::RealignResult r = sa::realign(model, reference, sa::parse_realign_method(method),
                                                sa::parse_realign_direction(direction), p);
        std::vector<std::vector<std::size_t>> perms;
        for (const auto& q : r.plan.perms) perms.push_back(q.mapping());
        return py::make_tuple(r.model, perms);
      },
      py::arg("model"), py::arg("reference"), py::arg("method") = "weight", py::arg("direction") = "top-down",
      py::arg("probe") = py::none());
  m.def("weight_sort_canonical", &sa::weight_sort_canonical, py::arg("model"), py::arg("include_bias") = true);

  // Metrics
  m.def("wms", &sa::wms, py::arg("a"), py::arg("b"), py::arg("layer"));
  m.def("ams", [](const sa::Model& a, const sa::Model& b, std::size_t l, const FloatArray& probe) {
    return sa::ams(a, b, l, records(probe));
  });
  m.def(
      "cba",
      [](const sa::Model& a, const sa::Model& b, std::size_t l, const FloatArray& probe, std::size_t pixels,
         std::uint64_t seed) {
        sa::Rng rng(seed);
        return sa::cba(a, b, l, records(probe), pixels, rng);
      },
      py::arg("a"), py::arg("b"), py::arg("layer"), py::arg("probe"), py::arg("pixels") = 50, py::arg("seed") = 0);

  // Attack evaluation
  py::class_<sa::RocCurve>(m, "RocCurve")
      .def_readonly("fpr", &sa::RocCurve::fpr)
      .def_readonly("tpr", &sa::RocCurve::tpr)
      .def_readonly("auc", &sa::RocCurve::auc)
      .def("tpr_at_fpr", &sa::RocCurve::tpr_at_fpr)
      .def("to_csv", &sa::RocCurve::to_csv);
  m.def(
      "roc_curve",
      [](const std::vector<double>& scores, const std::vector<int>& labels, const std::vector<double>& fpr_targets) {
        return sa::roc_curve(scores, labels, fpr_targets);
      },
      py::arg("scores"), py::arg("labels"), py::arg("fpr_targets") = sa::kDefaultFprTargets);

  // Whole experiments from key = value text
  m.def(
      "run_scenarios",
      [](const std::string& config_text) {
        const sa::ExperimentConfig cfg = sa::ExperimentConfig::from(sa::KeyValueConfig::parse(config_text));
        std::string summary;
        {
          py::gil_scoped_release release;
          const sa::LabeledDataset data = sa::load_experiment_data(cfg);
          sa::ModelCache cache(cfg.cache_dir);
          summary = sa::run_scenarios(cfg, data, cache).summary_csv();
        }
        return summary;
      },
      py::arg("config_text"));
  m.def("cause_study", [](const std::string& config_text) {
    const sa::ExperimentConfig cfg = sa::ExperimentConfig::from(sa::KeyValueConfig::parse(config_text));
    py::gil_scoped_release release;
    const sa::LabeledDataset data = sa::load_experiment_data(cfg);
    sa::ModelCache cache(cfg.cache_dir);
    return sa::run_cause_study(cfg, data, cache).to_csv();
  });
}
