#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "mikecoco/cli.hpp"
#include "mikecoco/error.hpp"
#include "mikecoco/evaluator.hpp"
#include "mikecoco/spectral.hpp"
#include "mikecoco/synth.hpp"
#include "mikecoco/trainer.hpp"

namespace py = pybind11;
using namespace mikecoco;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// numpy arrays are H x W x C; Image is planar.
Image to_image(const Array& a) {
  if (a.ndim() != 3 && a.ndim() != 2) throw ValidationError("expected an H x W or H x W x C array");
  const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
  const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
  Image img(h, w, c);
  const double* p = a.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) img.at(k, y, x) = p[(static_cast<std::size_t>(y) * w + x) * c + k];
  return img;
}

Array from_image(const Image& img) {
  Array out({img.height, img.width, img.channels});
  double* p = out.mutable_data();
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int k = 0; k < img.channels; ++k)
        p[(static_cast<std::size_t>(y) * img.width + x) * img.channels + k] = img.at(k, y, x);
  return out;
}

spectral::Grid to_grid(const Array& a) {
  if (a.ndim() != 2) throw ValidationError("expected a 2-D array");
  spectral::Grid g(a.shape(0), a.shape(1));
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    for (py::ssize_t j = 0; j < a.shape(1); ++j) g(i, j) = a.at(i, j);
  return g;
}

Array from_matrix(const ag::Matrix& m) {
  Array out({m.rows(), m.cols()});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out.mutable_at(i, j) = m(i, j);
  return out;
}

train::TrainConfig make_config(const py::dict& overrides, bool desk) {
  auto c = desk ? train::TrainConfig::desk() : train::TrainConfig{};
  for (const auto& [k, v] : overrides) {
    const auto key = py::str(k).cast<std::string>();
    std::string value = py::isinstance<py::bool_>(v) ? (v.cast<bool>() ? "true" : "false") : py::str(v).cast<std::string>();
    c.set(key, value);
  }
  return c;
}

py::dict report_dict(const eval::EvalReport& r) {
  py::dict d;
  d["map"] = r.map;
  d["rank1"] = r.rank1();
  d["cmc"] = r.cmc;
  d["num_queries"] = r.num_queries;
  d["dropped_queries"] = r.dropped_queries;
  d["protocol"] = r.protocol;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Two-stage domain-generalizable re-identification core";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<RuntimeFailure>(m, "RuntimeFailure", PyExc_RuntimeError);

  m.def("dct2", [](const Array& a) { return from_matrix(spectral::dct2(to_grid(a))); }, py::arg("grid"));
  m.def("idct2", [](const Array& a) { return from_matrix(spectral::idct2(to_grid(a))); }, py::arg("coeffs"));

  m.def(
      "band_pass_mask",
      [](int height, int width) {
        const auto mask = spectral::BandPassMask::build(height, width);
        py::dict d;
        d["weights"] = from_matrix(mask.weights());
        d["v1"] = mask.v1();
        d["v2"] = mask.v2();
        d["v3"] = mask.v3();
        return d;
      },
      py::arg("height"), py::arg("width"));

  m.def(
      "extract_dii",
      [](const Array& image) {
        const Image img = to_image(image);
        return from_image(spectral::extract_dii(img, spectral::BandPassMask::build(img.height, img.width)));
      },
      py::arg("image"), "domain-invariant image (signed, before any display shift)");
  m.def(
      "make_spi",
      [](const Array& image, std::uint64_t seed) {
        const Image img = to_image(image);
        return from_image(spectral::make_spi(img, spectral::BandPassMask::build(img.height, img.width), seed));
      },
      py::arg("image"), py::arg("seed"));

  m.def(
      "synth_dataset",
      [](const std::string& out_dir, std::uint64_t seed, int num_ids, int num_cameras, int images_per_id_per_camera,
         int image_size) {
        synth::SynthSpec spec;
        spec.seed = seed;
        spec.num_ids = num_ids;
        spec.num_cameras = num_cameras;
        spec.images_per_id_per_camera = images_per_id_per_camera;
        spec.image_size = image_size;
        const auto r = synth::synth_dataset(spec, out_dir);
        py::dict d;
        d["source"] = r.source.string();
        d["target_query"] = r.target_query.string();
        d["target_gallery"] = r.target_gallery.string();
        d["source_images"] = r.source_images;
        d["query_images"] = r.query_images;
        d["gallery_images"] = r.gallery_images;
        return d;
      },
      py::arg("out_dir"), py::arg("seed") = 0, py::arg("num_ids") = 8, py::arg("num_cameras") = 4,
      py::arg("images_per_id_per_camera") = 4, py::arg("image_size") = 32);

  m.def(
      "lr_schedule", [](int step, int total, const py::dict& cfg) { return train::lr_schedule(step, total, make_config(cfg, false)); },
      py::arg("step"), py::arg("total_steps"), py::arg("config") = py::dict());

  m.def(
      "train_stage1",
      [](const std::string& manifest, const std::string& out_dir, const py::dict& cfg, bool desk) {
        const auto config = make_config(cfg, desk);
        const auto ds = data::load_manifest(manifest, data::Domain::Source);
        py::gil_scoped_release release;
        const auto r = train::train_stage1(config, *ds, {out_dir, {}});
        py::gil_scoped_acquire acquire;
        py::dict d;
        d["checkpoint"] = r.checkpoint.string();
        d["epoch_totals"] = r.epoch_totals;
        d["latent_distance_initial"] = r.latent_distance_initial;
        d["latent_distance_final"] = r.latent_distance_final;
        return d;
      },
      py::arg("manifest"), py::arg("out_dir"), py::arg("config") = py::dict(), py::arg("desk") = true);

  m.def(
      "train_stage2",
      [](const std::string& checkpoint, const std::string& manifest, const std::string& out_dir, const py::dict& cfg) {
        const auto ds = data::load_manifest(manifest, data::Domain::Source);
        std::optional<train::TrainConfig> config;
        if (!cfg.empty()) {
          config = train::load_checkpoint(checkpoint).config;
          for (const auto& [k, v] : cfg) config->set(py::str(k).cast<std::string>(), py::str(v).cast<std::string>());
        }
        py::gil_scoped_release release;
        const auto r = train::train_stage2(checkpoint, *ds, {out_dir, {}}, config);
        py::gil_scoped_acquire acquire;
        py::dict d;
        d["checkpoint"] = r.checkpoint.string();
        d["epoch_totals"] = r.epoch_totals;
        d["held_in_id_initial"] = r.held_in_id_initial;
        d["held_in_id_final"] = r.held_in_id_final;
        d["report"] = r.report ? py::object(report_dict(*r.report)) : py::object(py::none());
        return d;
      },
      py::arg("checkpoint"), py::arg("manifest"), py::arg("out_dir"), py::arg("config") = py::dict());

  m.def(
      "evaluate_checkpoint",
      [](const std::string& checkpoint, const std::string& query, const std::string& gallery, int max_rank) {
        const auto model = train::load_checkpoint(checkpoint);
        const auto q = data::load_manifest(query, data::Domain::Target);
        const auto g = data::load_manifest(gallery, data::Domain::Target);
        return report_dict(train::evaluate_checkpoint(model, *q, *g, max_rank));
      },
      py::arg("checkpoint"), py::arg("query_manifest"), py::arg("gallery_manifest"), py::arg("max_rank") = 20);

  m.def(
      "evaluate",
      [](const Array& qf, std::vector<int> qid, std::vector<int> qcam, const Array& gf, std::vector<int> gid,
         std::vector<int> gcam, int max_rank) {
        eval::FeatureSet q, g;
        q.features = to_grid(qf);
        g.features = to_grid(gf);
        for (Eigen::Index i = 0; i < q.features.rows(); ++i) q.features.row(i).normalize();
        for (Eigen::Index i = 0; i < g.features.rows(); ++i) g.features.row(i).normalize();
        q.identities = std::move(qid);
        q.cameras = std::move(qcam);
        g.identities = std::move(gid);
        g.cameras = std::move(gcam);
        return report_dict(eval::evaluate(q, g, max_rank));
      },
      py::arg("query_features"), py::arg("query_ids"), py::arg("query_cameras"), py::arg("gallery_features"),
      py::arg("gallery_ids"), py::arg("gallery_cameras"), py::arg("max_rank") = 20,
      "rows are normalised here; camera -1 means unknown");

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "mikecoco");
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "runs one command line in-process; returns (exit code, stdout, stderr)");
}
