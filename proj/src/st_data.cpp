#include "triplex/st_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "triplex/extractor.hpp"

namespace triplex {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path, size_t min_cols) {
  std::ifstream in(path);
  if (!in) throw IoError("csv: cannot open " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    auto fields = split_line(line);
    if (fields.size() < min_cols)
      throw ParseError(path + " line " + std::to_string(lineno) + ": expected at least " +
                       std::to_string(min_cols) + " columns, got " + std::to_string(fields.size()));
    rows.push_back(std::move(fields));
  }
  if (rows.empty()) throw ParseError(path + ": empty file");
  return rows;
}

int64_t parse_int(const std::string& s, const std::string& where) {
  try {
    size_t pos = 0;
    int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(where + ": expected integer, got '" + s + "'");
  }
}

double parse_num(const std::string& s, const std::string& where) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(where + ": expected number, got '" + s + "'");
  }
}

struct SpotRow {
  std::string slide_id, patient_id, spot_id;
  int64_t grid_x, grid_y, pixel_x, pixel_y;
};

std::vector<SlideDataset> load_impl(const std::string& spots_csv, const std::string& counts_csv,
                                    bool require_nonneg) {
  auto spot_rows = read_csv(spots_csv, 7);
  const std::vector<std::string> expected = {"slide_id", "patient_id", "spot_id",
                                             "grid_x",   "grid_y",    "pixel_x", "pixel_y"};
  if (spot_rows[0] != expected)
    throw ParseError(spots_csv + ": bad header, expected slide_id,patient_id,spot_id,grid_x,"
                     "grid_y,pixel_x,pixel_y");

  std::vector<SpotRow> spots;
  for (size_t r = 1; r < spot_rows.size(); ++r) {
    const auto& f = spot_rows[r];
    const std::string where = spots_csv + " line " + std::to_string(r + 1);
    if (f.size() != 7)
      throw ParseError(where + ": expected 7 columns, got " + std::to_string(f.size()));
    SpotRow row;
    row.slide_id = f[0];
    row.patient_id = f[1];
    row.spot_id = f[2];
    row.grid_x = parse_int(f[3], where);
    row.grid_y = parse_int(f[4], where);
    row.pixel_x = parse_int(f[5], where);
    row.pixel_y = parse_int(f[6], where);
    spots.push_back(std::move(row));
  }

  auto count_rows = read_csv(counts_csv, 2);
  if (count_rows[0][0] != "spot_id")
    throw ParseError(counts_csv + ": first header column must be spot_id");
  std::vector<std::string> genes(count_rows[0].begin() + 1, count_rows[0].end());
  const size_t m = genes.size();

  std::map<std::string, std::vector<double>> counts;
  for (size_t r = 1; r < count_rows.size(); ++r) {
    const auto& f = count_rows[r];
    const std::string where = counts_csv + " line " + std::to_string(r + 1);
    if (f.size() != m + 1)
      throw ParseError(where + ": expected " + std::to_string(m + 1) + " columns, got " +
                       std::to_string(f.size()));
    std::vector<double> vals(m);
    for (size_t j = 0; j < m; ++j) {
      vals[j] = parse_num(f[j + 1], where);
      if (require_nonneg && vals[j] < 0)
        throw ParseError(where + ": negative count " + f[j + 1]);
    }
    if (!counts.emplace(f[0], std::move(vals)).second)
      throw ParseError(where + ": duplicate spot_id " + f[0]);
  }

  // Join; report missing ids from either side.
  std::set<std::string> spot_ids;
  std::vector<std::string> missing_counts;
  for (const auto& s : spots) {
    if (!spot_ids.insert(s.spot_id).second)
      throw ParseError(spots_csv + ": duplicate spot_id " + s.spot_id);
    if (!counts.count(s.spot_id)) missing_counts.push_back(s.spot_id);
  }
  std::vector<std::string> missing_spots;
  for (const auto& [id, v] : counts)
    if (!spot_ids.count(id)) missing_spots.push_back(id);
  if (!missing_counts.empty() || !missing_spots.empty()) {
    std::ostringstream os;
    os << "join: ";
    if (!missing_counts.empty()) {
      os << missing_counts.size() << " spot(s) without counts:";
      for (const auto& id : missing_counts) os << " " << id;
    }
    if (!missing_spots.empty()) {
      if (!missing_counts.empty()) os << "; ";
      os << missing_spots.size() << " count row(s) without spots:";
      for (const auto& id : missing_spots) os << " " << id;
    }
    throw ParseError(os.str());
  }

  // Group by slide in order of first appearance.
  std::vector<SlideDataset> out;
  std::map<std::string, size_t> slide_index;
  for (const auto& s : spots) {
    auto it = slide_index.find(s.slide_id);
    if (it == slide_index.end()) {
      slide_index[s.slide_id] = out.size();
      SlideDataset ds;
      ds.slide_id = s.slide_id;
      ds.patient_id = s.patient_id;
      ds.gene_names = genes;
      out.push_back(std::move(ds));
      it = slide_index.find(s.slide_id);
    }
    SlideDataset& ds = out[it->second];
    if (ds.patient_id != s.patient_id)
      throw ParseError("slide " + s.slide_id + ": conflicting patient ids " + ds.patient_id +
                       " and " + s.patient_id);
    SpotRecord rec;
    rec.spot_id = s.spot_id;
    rec.grid_x = s.grid_x;
    rec.grid_y = s.grid_y;
    rec.pixel_x = s.pixel_x;
    rec.pixel_y = s.pixel_y;
    rec.expression = counts.at(s.spot_id);
    ds.spots.push_back(std::move(rec));
  }

  for (auto& ds : out) {
    int64_t min_x = ds.spots[0].grid_x, min_y = ds.spots[0].grid_y;
    for (const auto& sp : ds.spots) {
      min_x = std::min(min_x, sp.grid_x);
      min_y = std::min(min_y, sp.grid_y);
    }
    std::set<std::pair<int64_t, int64_t>> cells;
    for (auto& sp : ds.spots) {
      sp.grid_x -= min_x;
      sp.grid_y -= min_y;
      if (!cells.emplace(sp.grid_x, sp.grid_y).second)
        throw ParseError("slide " + ds.slide_id + ": duplicate grid cell (" +
                         std::to_string(sp.grid_x) + "," + std::to_string(sp.grid_y) + ")");
    }
  }
  return out;
}

}  // namespace

std::vector<SlideDataset> load_dataset(const std::string& spots_csv,
                                       const std::string& counts_csv) {
  return load_impl(spots_csv, counts_csv, true);
}

std::vector<SlideDataset> load_prepared_dataset(const std::string& spots_csv,
                                                const std::string& labels_csv) {
  auto out = load_impl(spots_csv, labels_csv, false);
  for (auto& ds : out) ds.stage = ProcessingStage::normalized;
  return out;
}

std::vector<int64_t> select_genes(const std::vector<SlideDataset>& datasets, int64_t m_keep) {
  if (datasets.empty()) throw ValueError("select_genes: no datasets");
  if (m_keep <= 0) throw ValueError("select_genes: m_keep must be positive");
  const auto& genes = datasets.front().gene_names;
  const int64_t m = static_cast<int64_t>(genes.size());
  if (m_keep > m)
    throw ValueError("select_genes: m_keep " + std::to_string(m_keep) + " exceeds " +
                     std::to_string(m) + " genes");
  for (const auto& ds : datasets)
    if (ds.gene_names != genes)
      throw ValueError("select_genes: datasets disagree on gene names");

  std::vector<double> mean_log(m, 0.0);
  int64_t total_spots = 0;
  for (const auto& ds : datasets) {
    for (const auto& sp : ds.spots) {
      for (int64_t j = 0; j < m; ++j) mean_log[j] += std::log1p(sp.expression[j]);
      ++total_spots;
    }
  }
  if (total_spots == 0) throw ValueError("select_genes: datasets contain no spots");
  for (auto& v : mean_log) v /= static_cast<double>(total_spots);

  std::vector<int64_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (mean_log[a] != mean_log[b]) return mean_log[a] > mean_log[b];
    return genes[a] < genes[b];
  });
  order.resize(m_keep);
  return order;
}

SlideDataset apply_gene_selection(const SlideDataset& ds, const std::vector<int64_t>& keep) {
  SlideDataset out = ds;
  out.gene_names.clear();
  for (int64_t j : keep) {
    if (j < 0 || j >= ds.m()) throw ValueError("gene selection: index out of range");
    out.gene_names.push_back(ds.gene_names[j]);
  }
  for (size_t i = 0; i < out.spots.size(); ++i) {
    std::vector<double> vals(keep.size());
    for (size_t j = 0; j < keep.size(); ++j) vals[j] = ds.spots[i].expression[keep[j]];
    out.spots[i].expression = std::move(vals);
  }
  out.stage = ProcessingStage::selected;
  return out;
}

NormalizeResult normalize_expression(const SlideDataset& ds) {
  if (ds.stage == ProcessingStage::normalized || ds.stage == ProcessingStage::smoothed)
    throw ValueError("normalize: slide " + ds.slide_id + " already normalized");
  NormalizeResult out;
  out.dataset = ds;
  out.dataset.spots.clear();
  for (const auto& sp : ds.spots) {
    double total = 0;
    for (double v : sp.expression) total += v;
    if (total <= 0) {
      out.dropped_spots.push_back(sp.spot_id);
      continue;
    }
    SpotRecord rec = sp;
    for (auto& v : rec.expression) v = std::log1p(v / total);
    out.dataset.spots.push_back(std::move(rec));
  }
  out.dataset.stage = ProcessingStage::normalized;
  return out;
}

SlideDataset smooth_expression(const SlideDataset& ds, int neighborhood) {
  if (neighborhood != 4 && neighborhood != 8)
    throw ValueError("smooth: neighborhood must be 4 or 8");
  if (ds.stage != ProcessingStage::normalized)
    throw ValueError("smooth: slide " + ds.slide_id + " must be normalized exactly once first");
  SlideDataset out = ds;
  std::map<std::pair<int64_t, int64_t>, size_t> cell;
  for (size_t i = 0; i < ds.spots.size(); ++i)
    cell[{ds.spots[i].grid_x, ds.spots[i].grid_y}] = i;
  for (size_t i = 0; i < ds.spots.size(); ++i) {
    const auto& sp = ds.spots[i];
    std::vector<double> acc = sp.expression;
    int found = 1;
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy) {
        if (dx == 0 && dy == 0) continue;
        if (neighborhood == 4 && std::abs(dx) + std::abs(dy) != 1) continue;
        auto it = cell.find({sp.grid_x + dx, sp.grid_y + dy});
        if (it == cell.end()) continue;
        const auto& nb = ds.spots[it->second].expression;
        for (size_t j = 0; j < acc.size(); ++j) acc[j] += nb[j];
        ++found;
      }
    for (auto& v : acc) v /= found;
    out.spots[i].expression = std::move(acc);
  }
  out.stage = ProcessingStage::smoothed;
  return out;
}

namespace {
ImageU8 crop(const ImageU8& slide, int64_t top, int64_t left, int64_t h, int64_t w) {
  ImageU8 out(h, w);
  const int64_t y0 = std::max<int64_t>(0, top);
  const int64_t y1 = std::min(slide.h, top + h);
  const int64_t x0 = std::max<int64_t>(0, left);
  const int64_t x1 = std::min(slide.w, left + w);
  for (int64_t y = y0; y < y1; ++y)
    for (int64_t x = x0; x < x1; ++x)
      for (int c = 0; c < 3; ++c) out.at(y - top, x - left, c) = slide.at(y, x, c);
  return out;
}
}  // namespace

ImageU8 extract_target_patch(const ImageU8& slide, int64_t pixel_x, int64_t pixel_y,
                             int64_t patch) {
  return crop(slide, pixel_y - patch / 2, pixel_x - patch / 2, patch, patch);
}

std::vector<ImageU8> extract_neighbor_view(const ImageU8& slide, int64_t pixel_x, int64_t pixel_y,
                                           int64_t patch) {
  std::vector<ImageU8> tiles;
  tiles.reserve(25);
  const int64_t top0 = pixel_y - 5 * patch / 2;
  const int64_t left0 = pixel_x - 5 * patch / 2;
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c)
      tiles.push_back(crop(slide, top0 + r * patch, left0 + c * patch, patch, patch));
  return tiles;
}

void FeatureSet::validate(int64_t n) const {
  const auto want_t = std::vector<int64_t>{n, FeatureExtractor::kTokens, FeatureExtractor::kDim};
  const auto want_n = std::vector<int64_t>{n, 25, FeatureExtractor::kDim};
  const auto want_g = std::vector<int64_t>{n, FeatureExtractor::kDim};
  if (target.shape() != want_t)
    throw ShapeError("features: target shape " + shape_str(target.shape()) + " vs " +
                     shape_str(want_t));
  if (neighbor.shape() != want_n)
    throw ShapeError("features: neighbor shape " + shape_str(neighbor.shape()) + " vs " +
                     shape_str(want_n));
  if (global.shape() != want_g)
    throw ShapeError("features: global shape " + shape_str(global.shape()) + " vs " +
                     shape_str(want_g));
  if (!target.all_finite() || !neighbor.all_finite() || !global.all_finite())
    throw ValueError("features: non-finite values");
}

FeatureSet extract_features(const FeatureExtractor& extractor, const SlideDataset& ds,
                            const ImageU8& slide) {
  const int64_t n = ds.n();
  const int64_t dim = FeatureExtractor::kDim;
  FeatureSet fs;
  fs.target = Tensor<float>({n, FeatureExtractor::kTokens, dim});
  fs.neighbor = Tensor<float>({n, 25, dim});
  fs.global = Tensor<float>({n, dim});
  Tensor<float> tokens({FeatureExtractor::kTokens, dim});
  Tensor<float> pooled({dim});
  for (int64_t i = 0; i < n; ++i) {
    const auto& sp = ds.spots[i];
    ImageU8 patch = extract_target_patch(slide, sp.pixel_x, sp.pixel_y, ds.patch_h);
    extractor.extract(image_to_chw(patch), tokens, pooled);
    std::copy(tokens.data(), tokens.data() + tokens.numel(),
              fs.target.data() + i * tokens.numel());
    std::copy(pooled.data(), pooled.data() + dim, fs.global.data() + i * dim);
    auto tiles = extract_neighbor_view(slide, sp.pixel_x, sp.pixel_y, ds.patch_h);
    for (size_t t = 0; t < tiles.size(); ++t) {
      extractor.extract(image_to_chw(tiles[t]), tokens, pooled);
      std::copy(pooled.data(), pooled.data() + dim,
                fs.neighbor.data() + (i * 25 + static_cast<int64_t>(t)) * dim);
    }
  }
  fs.validate(n);
  return fs;
}

// ---------------------------------------------------------------------------
// Toy extractor
// ---------------------------------------------------------------------------

namespace {
class ToyFeatureExtractor : public FeatureExtractor {
 public:
  explicit ToyFeatureExtractor(uint64_t seed) {
    Rng rng(seed);
    trunk_ = ConvTrunk<float>::create(params_, "toy", rng);
  }

  void extract(const Tensor<float>& image, Tensor<float>& tokens,
               Tensor<float>& pooled) const override {
    NoGradGuard ng;
    Var<float> t = trunk_.forward_tokens(Var<float>::constant(image));
    const Tensor<float>& tv = t.value();
    if (!tv.all_finite()) throw ValueError("extractor: non-finite output");
    tokens = tv.clone();
    pooled = Tensor<float>({kDim});
    const float* p = tv.data();
    float* q = pooled.data();
    for (int64_t i = 0; i < kTokens; ++i)
      for (int64_t j = 0; j < kDim; ++j) q[j] += p[i * kDim + j];
    for (int64_t j = 0; j < kDim; ++j) q[j] /= static_cast<float>(kTokens);
  }

 private:
  ParamStore<float> params_;
  ConvTrunk<float> trunk_;
};
}  // namespace

std::unique_ptr<FeatureExtractor> make_toy_extractor(uint64_t seed) {
  return std::make_unique<ToyFeatureExtractor>(seed);
}

// ---------------------------------------------------------------------------
// Feature files
// ---------------------------------------------------------------------------

namespace {
constexpr char kFeatMagic[8] = {'T', 'P', 'L', 'X', 'F', 'E', 'A', 'T'};

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32(std::ifstream& in, const std::string& path) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) throw IoError("features: truncated header in " + path);
  return v;
}
}  // namespace

void write_feature_file(const std::string& path, const Tensor<float>& data) {
  if (data.rank() != 2 && data.rank() != 3)
    throw ShapeError("features: expected (n,dim) or (n,tokens,dim), got " +
                     shape_str(data.shape()));
  const uint32_t n = static_cast<uint32_t>(data.dim(0));
  const uint32_t tokens = data.rank() == 3 ? static_cast<uint32_t>(data.dim(1)) : 1;
  const uint32_t dim = static_cast<uint32_t>(data.dim(data.rank() - 1));
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("features: cannot write " + tmp);
    out.write(kFeatMagic, 8);
    write_u32(out, 1);
    write_u32(out, n);
    write_u32(out, tokens);
    write_u32(out, dim);
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(sizeof(float) * data.numel()));
    if (!out) throw IoError("features: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("features: cannot rename " + tmp + " to " + path);
}

Tensor<float> read_feature_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("features: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kFeatMagic, 8) != 0)
    throw IoError("features: " + path + " is not a TPLXFEAT file");
  const uint32_t version = read_u32(in, path);
  if (version != 1)
    throw IoError("features: unsupported version " + std::to_string(version) + " in " + path);
  const uint32_t n = read_u32(in, path);
  const uint32_t tokens = read_u32(in, path);
  const uint32_t dim = read_u32(in, path);
  Tensor<float> out = tokens == 1
                          ? Tensor<float>({static_cast<int64_t>(n), static_cast<int64_t>(dim)})
                          : Tensor<float>({static_cast<int64_t>(n), static_cast<int64_t>(tokens),
                                           static_cast<int64_t>(dim)});
  in.read(reinterpret_cast<char*>(out.data()),
          static_cast<std::streamsize>(sizeof(float) * out.numel()));
  if (!in) throw IoError("features: truncated payload in " + path);
  return out;
}

}  // namespace triplex
