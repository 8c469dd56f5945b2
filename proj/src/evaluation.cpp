#include "triplex/evaluation.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>

namespace triplex {

namespace {
constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

void check_pair(const char* op, const Tensor<double>& pred, const Tensor<double>& truth) {
  if (pred.rank() != 2 || truth.rank() != 2 || pred.shape() != truth.shape())
    throw ShapeError(std::string(op) + ": shape " + shape_str(pred.shape()) + " vs " +
                     shape_str(truth.shape()));
}
}  // namespace

std::vector<double> pcc_per_gene(const Tensor<double>& pred, const Tensor<double>& truth) {
  check_pair("pcc_per_gene", pred, truth);
  const int64_t n = pred.dim(0), m = pred.dim(1);
  if (n < 2) throw ValueError("pcc_per_gene: need at least 2 spots, got " + std::to_string(n));
  std::vector<double> out(m, kNan);
  for (int64_t j = 0; j < m; ++j) {
    double mp = 0, mt = 0;
    for (int64_t i = 0; i < n; ++i) {
      mp += pred.at2(i, j);
      mt += truth.at2(i, j);
    }
    mp /= n;
    mt /= n;
    double spt = 0, sp = 0, st = 0;
    for (int64_t i = 0; i < n; ++i) {
      const double dp = pred.at2(i, j) - mp;
      const double dt = truth.at2(i, j) - mt;
      spt += dp * dt;
      sp += dp * dp;
      st += dt * dt;
    }
    if (sp > 0 && st > 0) out[j] = spt / (std::sqrt(sp) * std::sqrt(st));
  }
  return out;
}

SlideMetrics slide_metrics(const std::string& slide_id, const Tensor<double>& pred,
                           const Tensor<double>& truth) {
  check_pair("slide_metrics", pred, truth);
  SlideMetrics out;
  out.slide_id = slide_id;
  out.spots = pred.dim(0);
  const int64_t total = pred.numel();
  double se = 0, ae = 0;
  for (int64_t i = 0; i < total; ++i) {
    const double d = pred.data()[i] - truth.data()[i];
    se += d * d;
    ae += std::abs(d);
  }
  out.mse = se / static_cast<double>(total);
  out.mae = ae / static_cast<double>(total);
  out.pcc = pcc_per_gene(pred, truth);
  double s = 0;
  int64_t defined = 0;
  for (double v : out.pcc)
    if (!std::isnan(v)) {
      s += v;
      ++defined;
    }
  if (defined > 0) out.mean_pcc = s / static_cast<double>(defined);
  return out;
}

MetricsReport aggregate_metrics(const std::vector<SlideMetrics>& slides,
                                const std::vector<int64_t>& top_genes) {
  if (slides.empty()) throw ValueError("aggregate_metrics: no slides");
  const size_t m = slides.front().pcc.size();
  for (const auto& s : slides)
    if (s.pcc.size() != m) throw ShapeError("aggregate_metrics: inconsistent gene counts");

  MetricsReport rep;
  rep.per_slide = slides;
  for (const auto& s : slides) {
    rep.mse += s.mse;
    rep.mae += s.mae;
  }
  rep.mse /= static_cast<double>(slides.size());
  rep.mae /= static_cast<double>(slides.size());

  rep.gene_mean_pcc.assign(m, kNan);
  for (size_t j = 0; j < m; ++j) {
    double s = 0;
    int64_t defined = 0;
    for (const auto& sl : slides)
      if (!std::isnan(sl.pcc[j])) {
        s += sl.pcc[j];
        ++defined;
      }
    if (defined > 0) rep.gene_mean_pcc[j] = s / static_cast<double>(defined);
  }

  double s = 0;
  int64_t defined = 0;
  for (size_t j = 0; j < m; ++j)
    if (!std::isnan(rep.gene_mean_pcc[j])) {
      s += rep.gene_mean_pcc[j];
      ++defined;
    }
  if (defined > 0) rep.pcc_m = s / static_cast<double>(defined);

  if (!top_genes.empty()) {
    double sh = 0;
    int64_t dh = 0;
    for (int64_t j : top_genes) {
      if (j < 0 || j >= static_cast<int64_t>(m))
        throw ValueError("aggregate_metrics: top gene index out of range");
      if (!std::isnan(rep.gene_mean_pcc[j])) {
        sh += rep.gene_mean_pcc[j];
        ++dh;
      }
    }
    if (dh > 0) rep.pcc_h = sh / static_cast<double>(dh);
  }
  return rep;
}

GeneRanking rank_genes(const std::vector<std::vector<double>>& fold_gene_pcc,
                       const std::vector<std::string>& gene_names, int top_k) {
  if (fold_gene_pcc.empty()) throw ValueError("rank_genes: no folds");
  const size_t m = gene_names.size();
  for (const auto& f : fold_gene_pcc)
    if (f.size() != m)
      throw ValueError("rank_genes: fold gene count " + std::to_string(f.size()) +
                       " does not match " + std::to_string(m) + " names");

  GeneRanking out;
  out.average_rank.assign(m, 0.0);
  for (const auto& pcc : fold_gene_pcc) {
    std::vector<size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      const bool da = !std::isnan(pcc[a]), db = !std::isnan(pcc[b]);
      if (da != db) return da;  // defined genes rank ahead of undefined
      if (da && pcc[a] != pcc[b]) return pcc[a] > pcc[b];
      return gene_names[a] < gene_names[b];
    });
    std::vector<int> ranks(m);
    for (size_t pos = 0; pos < m; ++pos) ranks[order[pos]] = static_cast<int>(pos) + 1;
    for (size_t j = 0; j < m; ++j) out.average_rank[j] += ranks[j];
    out.fold_ranks.push_back(std::move(ranks));
  }
  for (size_t j = 0; j < m; ++j) out.average_rank[j] /= fold_gene_pcc.size();

  std::vector<int64_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (out.average_rank[a] != out.average_rank[b])
      return out.average_rank[a] < out.average_rank[b];
    return gene_names[a] < gene_names[b];
  });
  const size_t keep = std::min<size_t>(top_k, m);
  out.top_genes.assign(order.begin(), order.begin() + keep);
  return out;
}

namespace {
// patient id -> slide ids, sorted for determinism
std::map<std::string, std::vector<std::string>> by_patient(const std::vector<SlideInfo>& slides) {
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& s : slides) groups[s.patient_id].push_back(s.slide_id);
  for (auto& [p, v] : groups) std::sort(v.begin(), v.end());
  return groups;
}
}  // namespace

std::vector<FoldSpec> make_lopcv_folds(const std::vector<SlideInfo>& slides) {
  auto groups = by_patient(slides);
  if (groups.size() < 2)
    throw ValueError("lopcv: need at least 2 patients, got " + std::to_string(groups.size()));
  std::vector<FoldSpec> folds;
  int id = 0;
  for (const auto& [patient, test] : groups) {
    FoldSpec f;
    f.fold_id = id++;
    f.test_slides = test;
    f.test_patients = {patient};
    for (const auto& [other, train] : groups)
      if (other != patient) f.train_slides.insert(f.train_slides.end(), train.begin(), train.end());
    std::sort(f.train_slides.begin(), f.train_slides.end());
    folds.push_back(std::move(f));
  }
  return folds;
}

std::vector<FoldSpec> make_grouped_kfold(const std::vector<SlideInfo>& slides, int k) {
  auto groups = by_patient(slides);
  if (k < 1) throw ValueError("kfold: k must be >= 1");
  if (static_cast<size_t>(k) > groups.size())
    throw ValueError("kfold: k=" + std::to_string(k) + " exceeds " +
                     std::to_string(groups.size()) + " patients");

  std::vector<std::pair<std::string, std::vector<std::string>>> patients(groups.begin(),
                                                                         groups.end());
  std::stable_sort(patients.begin(), patients.end(), [](const auto& a, const auto& b) {
    if (a.second.size() != b.second.size()) return a.second.size() > b.second.size();
    return a.first < b.first;
  });

  std::vector<FoldSpec> folds(k);
  std::vector<size_t> load(k, 0);
  for (int i = 0; i < k; ++i) folds[i].fold_id = i;
  for (const auto& [patient, sl] : patients) {
    size_t best = 0;
    for (size_t i = 1; i < load.size(); ++i)
      if (load[i] < load[best]) best = i;
    folds[best].test_slides.insert(folds[best].test_slides.end(), sl.begin(), sl.end());
    folds[best].test_patients.push_back(patient);
    load[best] += sl.size();
  }
  for (auto& f : folds) {
    std::sort(f.test_slides.begin(), f.test_slides.end());
    std::sort(f.test_patients.begin(), f.test_patients.end());
    for (const auto& s : slides)
      if (std::find(f.test_slides.begin(), f.test_slides.end(), s.slide_id) ==
          f.test_slides.end())
        f.train_slides.push_back(s.slide_id);
    std::sort(f.train_slides.begin(), f.train_slides.end());
    f.train_slides.erase(std::unique(f.train_slides.begin(), f.train_slides.end()),
                         f.train_slides.end());
  }
  return folds;
}

}  // namespace triplex
