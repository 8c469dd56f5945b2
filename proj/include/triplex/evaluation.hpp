#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "triplex/tensor.hpp"

namespace triplex {

// Per-slide evaluation results. PCC entries are NaN for genes whose
// prediction or truth column has zero variance on that slide.
struct SlideMetrics {
  std::string slide_id;
  int64_t spots = 0;
  double mse = 0, mae = 0;
  std::vector<double> pcc;  // per gene
  double mean_pcc = std::numeric_limits<double>::quiet_NaN();  // over defined genes
};

struct MetricsReport {
  std::vector<SlideMetrics> per_slide;
  std::vector<double> gene_mean_pcc;  // mean over slides where defined, NaN if never
  double pcc_m = std::numeric_limits<double>::quiet_NaN();
  double pcc_h = std::numeric_limits<double>::quiet_NaN();
  double mse = 0, mae = 0;
};

struct GeneRanking {
  std::vector<std::vector<int>> fold_ranks;  // per fold, rank per gene in 1..m
  std::vector<double> average_rank;
  std::vector<int64_t> top_genes;  // indices, lowest average rank first
};

struct SlideInfo {
  std::string slide_id, patient_id;
};

// One cross-validation fold. Train and test never share a patient.
struct FoldSpec {
  int fold_id = 0;
  std::vector<std::string> train_slides, test_slides;
  std::vector<std::string> test_patients;
};

// Sample Pearson correlation per gene column. Requires n >= 2 rows.
std::vector<double> pcc_per_gene(const Tensor<double>& pred, const Tensor<double>& truth);

SlideMetrics slide_metrics(const std::string& slide_id, const Tensor<double>& pred,
                           const Tensor<double>& truth);

// Unweighted means across slides. pcc_m averages the per-gene cross-slide
// means over genes defined on at least one slide; pcc_h restricts that mean
// to top_genes (NaN when top_genes is empty).
MetricsReport aggregate_metrics(const std::vector<SlideMetrics>& slides,
                                const std::vector<int64_t>& top_genes = {});

// Rank genes per fold by descending PCC (undefined last, ties by name),
// average the ranks across folds, and keep the min(top_k, m) best.
GeneRanking rank_genes(const std::vector<std::vector<double>>& fold_gene_pcc,
                       const std::vector<std::string>& gene_names, int top_k = 50);

// One fold per patient; all of that patient's slides form the test set.
std::vector<FoldSpec> make_lopcv_folds(const std::vector<SlideInfo>& slides);

// Patients greedily assigned to k folds balancing slide counts
// (largest patient first into the lightest fold).
std::vector<FoldSpec> make_grouped_kfold(const std::vector<SlideInfo>& slides, int k);

}  // namespace triplex
