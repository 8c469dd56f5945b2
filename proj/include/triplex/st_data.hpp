#pragma once

#include <memory>
#include <string>
#include <vector>

#include "triplex/image.hpp"
#include "triplex/tensor.hpp"

namespace triplex {

// One measured spot: array coordinates, pixel center, and its expression
// vector (raw counts on ingestion, processed values downstream).
struct SpotRecord {
  std::string spot_id;
  int64_t grid_x = 0, grid_y = 0;
  int64_t pixel_x = 0, pixel_y = 0;
  std::vector<double> expression;
};

enum class ProcessingStage { raw, selected, normalized, smoothed };

// All spots of one whole-slide image.
struct SlideDataset {
  std::string slide_id, patient_id;
  std::vector<SpotRecord> spots;
  std::vector<std::string> gene_names;
  int64_t patch_h = 224, patch_w = 224;
  ProcessingStage stage = ProcessingStage::raw;

  int64_t n() const { return static_cast<int64_t>(spots.size()); }
  int64_t m() const { return static_cast<int64_t>(gene_names.size()); }
};

// Per-spot feature blocks produced by the extraction contract.
struct FeatureSet {
  Tensor<float> target;    // (n, 49, 512)
  Tensor<float> neighbor;  // (n, 25, 512)
  Tensor<float> global;    // (n, 512)

  void validate(int64_t n) const;
};

// Maps a 224x224x3 image to 49x512 tokens (the 7x7x512 map flattened
// row-major) plus a pooled 512 vector. Must be deterministic for fixed
// weights and produce finite values.
class FeatureExtractor {
 public:
  static constexpr int64_t kTokens = 49;
  static constexpr int64_t kDim = 512;

  virtual ~FeatureExtractor() = default;
  // image (3, 224, 224) in [0,1] -> tokens (49, 512), pooled (512)
  virtual void extract(const Tensor<float>& image, Tensor<float>& tokens,
                       Tensor<float>& pooled) const = 0;
};

// The bundled trainable convolutional extractor with weights fixed by seed.
std::unique_ptr<FeatureExtractor> make_toy_extractor(uint64_t seed = 7);

// ---------------------------------------------------------------------------
// Ingestion and preprocessing
// ---------------------------------------------------------------------------

// Reads the spots and counts CSVs, joins them by spot_id, groups by slide,
// and min-shifts grid coordinates to start at 0. Counts must be non-negative.
std::vector<SlideDataset> load_dataset(const std::string& spots_csv,
                                       const std::string& counts_csv);

// Same join, but expression values may be arbitrary finite floats
// (prepared-label files).
std::vector<SlideDataset> load_prepared_dataset(const std::string& spots_csv,
                                                const std::string& labels_csv);

// Indices of the m_keep genes with the highest mean log1p count over all
// spots of the given datasets, ranked descending; ties broken by gene name.
std::vector<int64_t> select_genes(const std::vector<SlideDataset>& datasets, int64_t m_keep);

SlideDataset apply_gene_selection(const SlideDataset& ds, const std::vector<int64_t>& keep);

struct NormalizeResult {
  SlideDataset dataset;
  std::vector<std::string> dropped_spots;  // total count was zero
};

// y = log(1 + c / T) with T the spot's total count over the selected genes.
NormalizeResult normalize_expression(const SlideDataset& ds);

// Each spot's vector becomes the mean over itself and its existing grid
// neighbors (8-neighborhood by default, 4 optional), from a pre-update
// snapshot.
SlideDataset smooth_expression(const SlideDataset& ds, int neighborhood = 8);

// ---------------------------------------------------------------------------
// Patch geometry
// ---------------------------------------------------------------------------

// The patch_h x patch_w window centered on the spot's pixel center,
// zero-padded where it leaves the slide.
ImageU8 extract_target_patch(const ImageU8& slide, int64_t pixel_x, int64_t pixel_y,
                             int64_t patch = 224);

// The 5*patch x 5*patch window centered on the spot, tiled row-major into 25
// patch-sized sub-images. Tile 12 coincides with the target patch.
std::vector<ImageU8> extract_neighbor_view(const ImageU8& slide, int64_t pixel_x, int64_t pixel_y,
                                           int64_t patch = 224);

// Runs the extractor over every spot of the slide image: target tokens from
// the target patch, one pooled vector per neighbor tile, and the target
// patch's pooled vector as the spot's global feature.
FeatureSet extract_features(const FeatureExtractor& extractor, const SlideDataset& ds,
                            const ImageU8& slide);

// ---------------------------------------------------------------------------
// Feature file format
// ---------------------------------------------------------------------------

// Little-endian binary: magic "TPLXFEAT", u32 version, u32 n, u32 tokens,
// u32 dim, then n*tokens*dim f32 values row-major. A (n, dim) tensor is
// stored with tokens == 1.
void write_feature_file(const std::string& path, const Tensor<float>& data);
Tensor<float> read_feature_file(const std::string& path);

}  // namespace triplex
