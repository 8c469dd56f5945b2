#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "triplex/encoders.hpp"
#include "triplex/evaluation.hpp"
#include "triplex/pipeline.hpp"
#include "triplex/training.hpp"

namespace py = pybind11;
using namespace triplex;

namespace {

Tensor<double> to_tensor2d(const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
                           const char* name) {
  if (a.ndim() != 2) throw ShapeError(std::string(name) + ": expected a 2-d array");
  Tensor<double> t({a.shape(0), a.shape(1)});
  std::copy(a.data(), a.data() + t.numel(), t.data());
  return t;
}

py::dict report_dict(const MetricsReport& rep) {
  py::dict d;
  d["pcc_m"] = rep.pcc_m;
  d["pcc_h"] = rep.pcc_h;
  d["mse"] = rep.mse;
  d["mae"] = rep.mae;
  py::list slides;
  for (const auto& s : rep.per_slide) {
    py::dict sd;
    sd["slide_id"] = s.slide_id;
    sd["spots"] = s.spots;
    sd["mse"] = s.mse;
    sd["mae"] = s.mae;
    sd["pcc_mean"] = s.mean_pcc;
    sd["pcc"] = s.pcc;
    slides.append(sd);
  }
  d["slides"] = slides;
  return d;
}

py::list fold_list(const std::vector<FoldSpec>& folds) {
  py::list out;
  for (const auto& f : folds) {
    py::dict d;
    d["fold_id"] = f.fold_id;
    d["train_slides"] = f.train_slides;
    d["test_slides"] = f.test_slides;
    d["test_patients"] = f.test_patients;
    out.append(d);
  }
  return out;
}

std::vector<SlideInfo> to_infos(const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::vector<SlideInfo> infos;
  for (const auto& [slide, patient] : pairs) infos.push_back({slide, patient});
  return infos;
}

RunConfig config_from(const std::string& path,
                      const std::map<std::string, std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
  for (const auto& [k, v] : overrides) apply_config_override(cfg, k, v);
  return cfg;
}

}  // namespace

PYBIND11_MODULE(triplex_core, m) {
  m.doc() = "Multi-resolution spot expression prediction: core operations";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_IOError);
  py::register_exception<ValueError>(m, "ValueError", PyExc_ValueError);

  m.def(
      "lr_schedule",
      [](int epoch, double lr0, int step_size, double gamma) {
        return lr_schedule(epoch, lr0, step_size, gamma);
      },
      py::arg("epoch"), py::arg("lr0") = 1e-4, py::arg("step_size") = 50, py::arg("gamma") = 0.9,
      "Step-decayed learning rate: lr0 * gamma^floor(epoch/step_size)");

  m.def(
      "fusion_loss",
      [](const std::vector<double>& q_ta, const std::vector<double>& q_ne,
         const std::vector<double>& q_gl, const std::vector<double>& q_f,
         const std::vector<double>& y, double alpha) {
        LossBreakdown b = fusion_loss(q_ta, q_ne, q_gl, q_f, y, alpha);
        py::dict d;
        d["l_ta"] = b.l_ta;
        d["l_ne"] = b.l_ne;
        d["l_gl"] = b.l_gl;
        d["l_f"] = b.l_f;
        d["total"] = b.total;
        return d;
      },
      py::arg("q_ta"), py::arg("q_ne"), py::arg("q_gl"), py::arg("q_f"), py::arg("y"),
      py::arg("alpha"));

  m.def(
      "pcc_per_gene",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& truth) {
        return pcc_per_gene(to_tensor2d(pred, "pred"), to_tensor2d(truth, "truth"));
      },
      py::arg("pred"), py::arg("truth"),
      "Per-gene Pearson correlation; NaN marks zero-variance genes");

  m.def(
      "slide_metrics",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& truth) {
        SlideMetrics s = slide_metrics("slide", to_tensor2d(pred, "pred"),
                                       to_tensor2d(truth, "truth"));
        py::dict d;
        d["mse"] = s.mse;
        d["mae"] = s.mae;
        d["pcc"] = s.pcc;
        d["pcc_mean"] = s.mean_pcc;
        return d;
      },
      py::arg("pred"), py::arg("truth"));

  m.def(
      "lopcv_folds",
      [](const std::vector<std::pair<std::string, std::string>>& slides) {
        return fold_list(make_lopcv_folds(to_infos(slides)));
      },
      py::arg("slides"), "Leave-one-patient-out folds from (slide_id, patient_id) pairs");

  m.def(
      "grouped_kfold",
      [](const std::vector<std::pair<std::string, std::string>>& slides, int k) {
        return fold_list(make_grouped_kfold(to_infos(slides), k));
      },
      py::arg("slides"), py::arg("k"));

  m.def(
      "apeg",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& tokens,
         const std::vector<int64_t>& grid_x, const std::vector<int64_t>& grid_y,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& kernel) {
        Tensor<double> t = to_tensor2d(tokens, "tokens");
        if (kernel.ndim() != 3 || kernel.shape(0) != t.dim(1))
          throw ShapeError("apeg: kernel must be (d, k, k)");
        const int64_t d = t.dim(1), kh = kernel.shape(1), kw = kernel.shape(2);
        if (kh != kw) throw ShapeError("apeg: kernel must be square");
        Tensor<double> kt({d, 1, kh, kw});
        std::copy(kernel.data(), kernel.data() + kt.numel(), kt.data());
        GridCoordinates coords = GridCoordinates::from_points(grid_x, grid_y);
        NoGradGuard ng;
        Var<double> tok = Var<double>::constant(t);
        Var<double> dense = scatter_rows(tok, coords.cell_indices(), coords.h * coords.w);
        Var<double> grid = permute(reshape(dense, {coords.h, coords.w, d}), {2, 0, 1});
        Var<double> conved = conv2d(grid, Var<double>::constant(kt), 1, static_cast<int>(d));
        Var<double> flat = reshape(permute(conved, {1, 2, 0}), {coords.h * coords.w, d});
        Var<double> out = add(tok, gather_rows(flat, coords.cell_indices()));
        py::array_t<double> result({t.dim(0), d});
        std::copy(out.value().data(), out.value().data() + out.value().numel(),
                  result.mutable_data());
        return result;
      },
      py::arg("tokens"), py::arg("grid_x"), py::arg("grid_y"), py::arg("kernel"),
      "Irregular-grid position encoding: scatter, depthwise conv, gather, residual add");

  m.def(
      "read_features",
      [](const std::string& path) {
        Tensor<float> t = read_feature_file(path);
        std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
        py::array_t<float> out(shape);
        std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
        return out;
      },
      py::arg("path"));

  m.def(
      "write_features",
      [](const std::string& path,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& arr) {
        std::vector<int64_t> shape(arr.shape(), arr.shape() + arr.ndim());
        Tensor<float> t(shape);
        std::copy(arr.data(), arr.data() + t.numel(), t.data());
        write_feature_file(path, t);
      },
      py::arg("path"), py::arg("array"));

  m.def(
      "synth",
      [](const std::string& out_dir, int patients, int slides, int grid, int64_t genes,
         double noise, uint64_t seed, bool images) {
        SynthSpec spec;
        spec.patients = patients;
        spec.slides_per_patient = slides;
        spec.grid = grid;
        spec.genes = genes;
        spec.noise = noise;
        spec.seed = seed;
        spec.images = images;
        run_synth(spec, out_dir);
      },
      py::arg("out_dir"), py::arg("patients") = 4, py::arg("slides") = 2, py::arg("grid") = 8,
      py::arg("genes") = 16, py::arg("noise") = 0.05, py::arg("seed") = 2021,
      py::arg("images") = false);

  m.def(
      "prepare",
      [](const std::string& config, const std::map<std::string, std::string>& overrides) {
        PrepareResult r = run_prepare(config_from(config, overrides));
        py::dict d;
        d["slides"] = r.slides;
        d["spots"] = r.spots;
        d["genes"] = r.genes;
        d["dropped_spots"] = r.dropped_spots;
        return d;
      },
      py::arg("config"), py::arg("overrides") = std::map<std::string, std::string>{});

  m.def(
      "cv",
      [](const std::string& config, const std::map<std::string, std::string>& overrides) {
        CvResult r = run_cv(config_from(config, overrides));
        py::dict d;
        d["pcc_m"] = r.pcc_m;
        d["pcc_h"] = r.pcc_h;
        d["mse"] = r.mse;
        d["mae"] = r.mae;
        d["folds"] = r.folds;
        d["fold_dirs"] = r.fold_dirs;
        return d;
      },
      py::arg("config"), py::arg("overrides") = std::map<std::string, std::string>{});

  m.def(
      "train",
      [](const std::string& config, const std::map<std::string, std::string>& overrides) {
        run_train(config_from(config, overrides));
      },
      py::arg("config"), py::arg("overrides") = std::map<std::string, std::string>{});

  m.def(
      "predict",
      [](const std::string& config, const std::string& checkpoint, const std::string& slide,
         const std::string& out_csv, const std::map<std::string, std::string>& overrides) {
        run_predict(config_from(config, overrides), checkpoint, slide, out_csv);
      },
      py::arg("config"), py::arg("checkpoint"), py::arg("slide"), py::arg("out_csv"),
      py::arg("overrides") = std::map<std::string, std::string>{});

  m.def(
      "evaluate",
      [](const std::string& config, const std::string& predictions_csv, const std::string& out_dir,
         const std::map<std::string, std::string>& overrides) {
        return report_dict(run_eval(config_from(config, overrides), predictions_csv, out_dir));
      },
      py::arg("config"), py::arg("predictions_csv"), py::arg("out_dir") = std::string{},
      py::arg("overrides") = std::map<std::string, std::string>{});

  m.def(
      "heatmap",
      [](const std::string& config, const std::string& predictions_csv, const std::string& gene,
         const std::string& prefix, const std::map<std::string, std::string>& overrides) {
        run_heatmap(config_from(config, overrides), predictions_csv, gene, prefix);
      },
      py::arg("config"), py::arg("predictions_csv"), py::arg("gene"), py::arg("prefix"),
      py::arg("overrides") = std::map<std::string, std::string>{});
}
