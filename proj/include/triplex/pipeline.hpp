#pragma once

#include <string>
#include <vector>

#include "triplex/encoders.hpp"
#include "triplex/evaluation.hpp"
#include "triplex/st_data.hpp"
#include "triplex/training.hpp"

namespace triplex {

// Run configuration: a key=value file with [section] headers; every key has a
// default and command-line flags override file values.
struct RunConfig {
  // [paths]
  std::string spots, counts, images_dir, features_dir, out_dir;
  std::string image_format = "ppm";  // or "raw"
  int64_t image_h = 0, image_w = 0;  // raw planar dimensions
  // [model]
  EncoderConfig model;
  // [train]
  TrainConfig train;
  std::string precision = "f32";  // or "f64"
  int threads = 1;
  // [data]
  int64_t m_keep = 250;
  bool smoothing = true;
  int neighborhood = 8;
  std::string cv_mode = "lopcv";  // or "kfold:<k>"
  double val_fraction = 0.1;
  uint64_t extractor_seed = 7;

  void validate() const;
  int kfold_k() const;  // parsed from cv_mode, 0 when lopcv
};

RunConfig load_run_config(const std::string& path);

// Apply a `key=value` or `section.key=value` override.
void apply_config_override(RunConfig& cfg, const std::string& key, const std::string& value);

// ---------------------------------------------------------------------------
// Commands (shared by the CLI and the python bindings)
// ---------------------------------------------------------------------------

struct PrepareResult {
  int64_t slides = 0, spots = 0, genes = 0;
  std::vector<std::string> dropped_spots;
};

// Raw CSVs (+ optional slide images) -> processed labels CSV, shifted spots
// CSV, and per-slide feature files under out_dir.
PrepareResult run_prepare(const RunConfig& cfg);

struct CvResult {
  double pcc_m = 0, pcc_h = 0, mse = 0, mae = 0;
  int folds = 0;
  std::vector<std::string> fold_dirs;
};

// Grouped cross-validation: trains one model per fold on prepared data,
// evaluates on the fold's test slides, writes per-fold checkpoints and
// reports plus the aggregate report, summary, and gene ranking.
CvResult run_cv(const RunConfig& cfg);

// Trains one model on all prepared slides (validation split still held out
// for early stopping) and writes a checkpoint + training log.
void run_train(const RunConfig& cfg);

// Predictions for every spot of one slide using a saved checkpoint.
void run_predict(const RunConfig& cfg, const std::string& checkpoint,
                 const std::string& slide_id, const std::string& out_csv);

// Scores an external predictions CSV against the prepared labels.
MetricsReport run_eval(const RunConfig& cfg, const std::string& predictions_csv,
                       const std::string& out_dir);

// Prediction and truth grids for one gene: CSV (voids "NA") and 8-bit
// portable graymaps (voids black, occupied cells min-max scaled to 1..255).
void run_heatmap(const RunConfig& cfg, const std::string& predictions_csv,
                 const std::string& gene, const std::string& out_prefix);

struct SynthSpec {
  int patients = 4;
  int slides_per_patient = 2;
  int grid = 8;  // grid x grid spots per slide
  int64_t genes = 16;
  int64_t latent_rank = 16;  // intrinsic dimension of the global features
  double noise = 0.05;
  uint64_t seed = 2021;
  bool images = false;  // emit a small raw-counts + slide-image dataset instead
};

// Bundled synthetic data generator. Default mode writes prepared artifacts
// (spots, labels, features) where expression is a fixed random linear map of
// the pooled global feature plus Gaussian noise; image mode writes a tiny
// raw dataset (counts + PPM slides) for exercising `prepare`.
void run_synth(const SynthSpec& spec, const std::string& out_dir);

// ---------------------------------------------------------------------------
// Helpers shared with tests
// ---------------------------------------------------------------------------

// Training-ready tensors for the slides listed in `ids` (all when empty).
template <typename T>
std::vector<SlideTensors<T>> load_slide_tensors(const std::string& spots_csv,
                                                const std::string& labels_csv,
                                                const std::string& features_dir,
                                                const std::vector<std::string>& ids = {});

// Held-out validation patients covering ~fraction of the training slides
// (at least one patient, never all of them). Returns val slide ids.
std::vector<std::string> make_val_split(const std::vector<SlideInfo>& train_slides,
                                        double fraction);

std::string format_double(double v);

}  // namespace triplex
