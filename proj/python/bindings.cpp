#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "recess/checkpoint.hpp"
#include "recess/cli.hpp"
#include "recess/dataset.hpp"
#include "recess/error.hpp"
#include "recess/evolve.hpp"
#include "recess/losses.hpp"
#include "recess/metrics.hpp"
#include "recess/phantom.hpp"
#include "recess/preprocess.hpp"
#include "recess/training.hpp"

namespace py = pybind11;
using namespace recess;

namespace {

using Box = std::tuple<double, double, double, double>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

BBox to_box(const Box& b) { return {std::get<0>(b), std::get<1>(b), std::get<2>(b), std::get<3>(b)}; }
Box from_box(const BBox& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }

GrayImage to_image(const FloatArray& a) {
    if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
    const auto h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
    return GrayImage(w, h, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray from_image(const GrayImage& img) {
    FloatArray out({img.height(), img.width()});
    std::copy(img.pixels().begin(), img.pixels().end(), out.mutable_data());
    return out;
}

py::dict annotation_dict(const dataset::Annotation& a) {
    py::dict d;
    d["image_id"] = a.image_id;
    d["patient_id"] = a.patient_id;
    d["label"] = std::string(to_string(a.label));
    d["box"] = from_box(a.sqr_box);
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Knee recess detection and distension classification";

    // Translators run newest first, so the most derived type goes last.
    auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<UserError>(m, "UserError", PyExc_ValueError);
    py::register_exception<NoFrameFound>(m, "NoFrameFound", error.ptr());

    m.def("iou", [](const Box& a, const Box& b) { return iou(to_box(a), to_box(b)); }, py::arg("a"), py::arg("b"));
    m.def("ciou_loss", [](const Box& p, const Box& g) { return losses::ciou_loss(to_box(p), to_box(g)); },
          py::arg("pred"), py::arg("gt"));
    m.def("weighted_cls_loss",
          [](double p, bool distended, double w_pos) {
              return losses::weighted_cls_loss(p, distended ? Label::Distended : Label::NonDistended, w_pos);
          },
          py::arg("p_distended"), py::arg("distended"), py::arg("w_pos"));

    m.def("classification_metrics",
          [](long tp, long tn, long fp, long fn) {
              const auto c = metrics::classification_metrics({tp, tn, fp, fn});
              py::dict d;
              d["balanced_accuracy"] = c.balanced_accuracy;
              d["sensitivity"] = c.sensitivity;
              d["specificity"] = c.specificity;
              return d;
          },
          py::arg("tp"), py::arg("tn"), py::arg("fp"), py::arg("fn"));
    m.def("interpolated_ap", &metrics::interpolated_ap, py::arg("hits"), py::arg("n_gt"));

    m.def("early_stopper",
          [](const std::vector<double>& h, int patience) {
              const auto d = training::early_stopper(h, patience);
              return std::make_tuple(d.stop, d.best_epoch, d.stop_epoch);
          },
          py::arg("history"), py::arg("patience"));

    m.def("class_weight",
          [](const std::vector<bool>& distended) {
              std::vector<dataset::Annotation> entries;
              std::vector<std::string> ids;
              for (std::size_t i = 0; i < distended.size(); ++i) {
                  dataset::Annotation a;
                  a.image_id = a.patient_id = "i" + std::to_string(i);
                  a.label = distended[i] ? Label::Distended : Label::NonDistended;
                  a.sqr_box = {0, 0, 1, 1};
                  entries.push_back(a);
                  ids.push_back(a.image_id);
              }
              return dataset::class_weight(ids, dataset::DatasetManifest(entries));
          },
          py::arg("distended"));

    m.def("grouped_kfold",
          [](const std::string& manifest, int k, std::uint64_t seed) {
              py::list out;
              for (const auto& f : dataset::grouped_kfold(dataset::load_manifest(manifest), k, seed))
                  out.append(py::make_tuple(f.train_ids, f.test_ids));
              return out;
          },
          py::arg("manifest"), py::arg("k") = 5, py::arg("seed") = 0);

    m.def("phantom",
          [](std::uint64_t index, std::uint64_t seed, int size) {
              phantom::PhantomParams p;
              p.seed = seed;
              p.image_size = size;
              auto [img, ann] = phantom::generate_phantom(p, index);
              return py::make_tuple(from_image(img), annotation_dict(ann));
          },
          py::arg("index"), py::arg("seed") = 0, py::arg("size") = 256);

    m.def("raw_canvas",
          [](std::uint64_t index, std::uint64_t seed) {
              phantom::PhantomParams p;
              p.seed = seed;
              const auto rc = phantom::generate_raw_canvas(p, index);
              return py::make_tuple(from_image(rc.raw), from_box(rc.truth.box));
          },
          py::arg("index"), py::arg("seed") = 0);

    m.def("extract_scan_frame",
          [](const FloatArray& raw, int resize_to) {
              preprocess::FrameConfig cfg;
              if (resize_to > 0) cfg.resize_to = resize_to;
              const auto ex = preprocess::extract_scan_frame(to_image(raw), cfg);
              return py::make_tuple(from_image(ex.image), from_box(ex.region.box));
          },
          py::arg("raw"), py::arg("resize_to") = 0);

    m.def("predict",
          [](const std::string& checkpoint, const FloatArray& image, double conf_threshold) {
              const auto ck = model::load_checkpoint(checkpoint);
              const auto p = training::predict_image(ck.network, to_image(image), conf_threshold);
              py::dict d;
              d["label"] = std::string(to_string(p.label));
              if (p.top) {
                  d["box"] = from_box(p.top->box);
                  d["confidence"] = p.top->confidence;
              } else {
                  d["box"] = py::none();
                  d["confidence"] = py::none();
              }
              d["p_distended"] = p.probs ? py::cast((*p.probs)[1]) : py::none();
              return d;
          },
          py::arg("checkpoint"), py::arg("image"), py::arg("conf_threshold") = 0.001);

    m.def("run_cli",
          [](const std::vector<std::string>& args) {
              std::ostringstream out, err;
              int code;
              {
                  py::gil_scoped_release release;
                  code = cli::dispatch(args, out, err);
              }
              return py::make_tuple(code, out.str(), err.str());
          },
          py::arg("args"), "Runs the command-line tool in-process; returns (exit_code, stdout, stderr).");
}
