#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <iostream>
#include <sstream>

#include "cli.hpp"
#include "xmgan/errors.hpp"
#include "xmgan/gradcheck_suite.hpp"
#include "xmgan/metrics.hpp"
#include "xmgan/trainer.hpp"

namespace py = pybind11;
using namespace xmgan;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const Tensor& t) {
  const auto& shape = t.shape();
  Array out(std::vector<py::ssize_t>(shape.begin(), shape.end()));
  auto src = t.data();
  std::copy(src.begin(), src.end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const Array& a, std::size_t ndim, const char* what) {
  if (static_cast<std::size_t>(a.ndim()) != ndim)
    throw py::value_error(std::string(what) + ": expected a " + std::to_string(ndim) + "-d array");
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

TrainConfig config_from(const py::dict& settings) {
  TrainConfig c;
  for (auto [key, value] : settings) apply_setting(c, py::str(key).cast<std::string>(), py::str(value).cast<std::string>());
  validate(c);
  return c;
}

py::dict row_dict(const MetricsRow& r) {
  py::dict d;
  d["step"] = r.step;
  d["fid_lite"] = r.fid_lite;
  d["lpips_lite"] = r.lpips_lite;
  d["l_adv_d"] = r.l_adv_d;
  d["l_adv_g"] = r.l_adv_g;
  d["l_p"] = r.l_p;
  d["l_cl"] = r.l_cl;
  return d;
}

}  // namespace

PYBIND11_MODULE(_xmgan, m) {
  m.doc() = "Few-shot texture generation with cross-attention feature blending";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);

  m.def(
      "make_dataset",
      [](std::uint64_t seed, std::size_t image_size, std::size_t per_class) {
        DatasetSpec spec;
        spec.seed = seed;
        spec.image_size = image_size;
        spec.per_class = per_class;
        validate(spec);
        const Dataset data = make_dataset(spec);
        Array out({spec.class_count, per_class, std::size_t{3}, image_size, image_size});
        double* dst = out.mutable_data();
        for (const auto& cls : data.images)
          for (const auto& img : cls) dst = std::copy(img.data().begin(), img.data().end(), dst);
        return out;
      },
      py::arg("seed") = 0, py::arg("image_size") = 32, py::arg("per_class") = 40,
      "Synthetic textures as a [classes x per_class x 3 x H x W] array in [-1, 1].");

  m.def("seen_classes", [] { return DatasetSpec{}.seen; });
  m.def("unseen_classes", [] { return DatasetSpec{}.unseen; });

  m.def(
      "fid_lite",
      [](const Array& real, const Array& fake) {
        const PerceptualExtractor phi;
        return fid_lite(from_numpy(real, 4, "real"), from_numpy(fake, 4, "fake"), phi);
      },
      py::arg("real"), py::arg("fake"), "Frechet distance between extractor features of two [N x 3 x H x W] sets.");

  m.def(
      "lpips_lite",
      [](const Array& images) {
        const PerceptualExtractor phi;
        return lpips_lite(from_numpy(images, 4, "images"), phi);
      },
      py::arg("images"), "Mean pairwise extractor-feature distance of a [N x 3 x H x W] set.");

  m.def(
      "default_config",
      [](const py::dict& settings) { return describe(config_from(settings)); }, py::arg("settings") = py::dict(),
      "Effective training config (key=value lines) after applying `settings`.");

  m.def(
      "train",
      [](const std::string& run_dir, const py::dict& settings, bool verbose) {
        TrainConfig c = config_from(settings);
        c.run_dir = run_dir;
        std::vector<MetricsRow> rows;
        {
          py::gil_scoped_release release;
          Trainer trainer(c);
          rows = trainer.run(verbose ? &std::cout : nullptr);
        }
        py::list out;
        for (const auto& r : rows) out.append(row_dict(r));
        return out;
      },
      py::arg("run_dir"), py::arg("settings") = py::dict(), py::arg("verbose") = false,
      "Trains (or resumes) a run and returns its metrics rows.");

  m.def(
      "generate",
      [](const std::string& run, int class_id, std::vector<double> alphas, std::size_t num, std::uint64_t seed) {
        TrainedModel trained = load_trained(run);
        const Dataset data = make_dataset(dataset_spec(trained.config));
        if (alphas.empty()) alphas.assign(trained.config.k - 1, 1.0 / static_cast<double>(trained.config.k - 1));
        Tensor samples;
        {
          py::gil_scoped_release release;
          samples = sample_class(trained, data, class_id, alphas, num, seed);
        }
        return to_numpy(samples);
      },
      py::arg("run"), py::arg("class_id"), py::arg("alphas") = std::vector<double>{}, py::arg("num") = 9,
      py::arg("seed") = 0, "Samples [num x 3 x H x W] images of one class from a trained run (uniform alphas by default).");

  m.def(
      "gradcheck",
      [](std::size_t seeds, double h) {
        std::vector<GradcheckEntry> entries;
        {
          py::gil_scoped_release release;
          entries = run_gradcheck_suite(seeds, h);
        }
        py::dict out;
        for (const auto& e : entries) out[py::str(e.name)] = e.max_rel_error;
        return out;
      },
      py::arg("seeds") = 10, py::arg("h") = 1e-5, "Worst relative gradient error per checked operation.");

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        py::gil_scoped_release release;
        const int code = cli::dispatch(args, std::cout, std::cerr);
        std::cout.flush();
        return code;
      },
      py::arg("args"), "Runs the command line with `args` (no program name) and returns its exit code.");

  m.def(
      "cli_captured",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::dispatch(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Like cli() but returns (exit_code, stdout, stderr).");
}
