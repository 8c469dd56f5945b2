#include "triplex/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "triplex/checkpoint.hpp"

namespace fs = std::filesystem;

namespace triplex {

// ---------------------------------------------------------------------------
// Small shared helpers
// ---------------------------------------------------------------------------

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::string(buf);
}

namespace {

void atomic_write_text(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("write: cannot open " + tmp);
    out << content;
    if (!out) throw IoError("write: failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("write: cannot rename " + tmp + " to " + path);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ParseError("config: boolean expected for " + key + ", got '" + v + "'");
}

int64_t parse_i64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ParseError("config: integer expected for " + key + ", got '" + v + "'");
  }
}

double parse_f64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(r)) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ParseError("config: number expected for " + key + ", got '" + v + "'");
  }
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

}  // namespace

void apply_config_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto is = [&](const char* name) { return key == name; };
  // [paths]
  if (is("paths.spots")) cfg.spots = value;
  else if (is("paths.counts")) cfg.counts = value;
  else if (is("paths.images_dir")) cfg.images_dir = value;
  else if (is("paths.features_dir")) cfg.features_dir = value;
  else if (is("paths.out_dir")) cfg.out_dir = value;
  else if (is("paths.image_format")) cfg.image_format = value;
  else if (is("paths.image_h")) cfg.image_h = parse_i64(value, key);
  else if (is("paths.image_w")) cfg.image_w = parse_i64(value, key);
  // [model]
  else if (is("model.d")) cfg.model.d = parse_i64(value, key);
  else if (is("model.in_dim")) cfg.model.in_dim = parse_i64(value, key);
  else if (is("model.depth1")) cfg.model.depth1 = static_cast<int>(parse_i64(value, key));
  else if (is("model.depth2")) cfg.model.depth2 = static_cast<int>(parse_i64(value, key));
  else if (is("model.depth3")) cfg.model.depth3 = static_cast<int>(parse_i64(value, key));
  else if (is("model.num_heads1")) cfg.model.heads1 = static_cast<int>(parse_i64(value, key));
  else if (is("model.num_heads2")) cfg.model.heads2 = static_cast<int>(parse_i64(value, key));
  else if (is("model.num_heads3")) cfg.model.heads3 = static_cast<int>(parse_i64(value, key));
  else if (is("model.mlp_ratio1")) cfg.model.mlp_ratio1 = static_cast<int>(parse_i64(value, key));
  else if (is("model.mlp_ratio2")) cfg.model.mlp_ratio2 = static_cast<int>(parse_i64(value, key));
  else if (is("model.mlp_ratio3")) cfg.model.mlp_ratio3 = static_cast<int>(parse_i64(value, key));
  else if (is("model.dropout1")) cfg.model.dropout1 = parse_f64(value, key);
  else if (is("model.dropout2")) cfg.model.dropout2 = parse_f64(value, key);
  else if (is("model.dropout3")) cfg.model.dropout3 = parse_f64(value, key);
  else if (is("model.apeg_kernel")) cfg.model.apeg_kernel = static_cast<int>(parse_i64(value, key));
  else if (is("model.per_head_rel_bias")) cfg.model.per_head_rel_bias = parse_bool(value, key);
  // [train]
  else if (is("train.lr0")) cfg.train.lr0 = parse_f64(value, key);
  else if (is("train.step_size")) cfg.train.step_size = static_cast<int>(parse_i64(value, key));
  else if (is("train.gamma")) cfg.train.gamma = parse_f64(value, key);
  else if (is("train.batch_size")) cfg.train.batch_size = static_cast<int>(parse_i64(value, key));
  else if (is("train.max_epochs")) cfg.train.max_epochs = static_cast<int>(parse_i64(value, key));
  else if (is("train.patience")) cfg.train.patience = static_cast<int>(parse_i64(value, key));
  else if (is("train.seed")) cfg.train.seed = static_cast<uint64_t>(parse_i64(value, key));
  else if (is("train.alpha")) cfg.train.alpha = parse_f64(value, key);
  else if (is("train.precision")) cfg.precision = value;
  else if (is("train.threads")) cfg.threads = static_cast<int>(parse_i64(value, key));
  // [data]
  else if (is("data.m_keep")) cfg.m_keep = parse_i64(value, key);
  else if (is("data.smoothing")) cfg.smoothing = parse_bool(value, key);
  else if (is("data.neighborhood")) cfg.neighborhood = static_cast<int>(parse_i64(value, key));
  else if (is("data.cv")) cfg.cv_mode = value;
  else if (is("data.val_fraction")) cfg.val_fraction = parse_f64(value, key);
  else if (is("data.extractor_seed")) cfg.extractor_seed = static_cast<uint64_t>(parse_i64(value, key));
  else throw ParseError("config: unknown key " + key);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  RunConfig cfg;
  std::string line, section;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ParseError(path + " line " + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (section.empty())
      throw ParseError(path + " line " + std::to_string(lineno) + ": key outside a [section]");
    apply_config_override(cfg, section + "." + key, value);
  }
  return cfg;
}

int RunConfig::kfold_k() const {
  if (cv_mode == "lopcv") return 0;
  if (cv_mode.rfind("kfold:", 0) == 0) {
    const int k = static_cast<int>(parse_i64(cv_mode.substr(6), "data.cv"));
    if (k < 2) throw ParseError("config: kfold needs k >= 2");
    return k;
  }
  throw ParseError("config: cv must be 'lopcv' or 'kfold:<k>', got '" + cv_mode + "'");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  kfold_k();
  if (precision != "f32" && precision != "f64")
    throw ParseError("config: precision must be f32 or f64");
  if (threads < 1) throw ParseError("config: threads must be >= 1");
  if (m_keep < 1) throw ParseError("config: m_keep must be >= 1");
  if (neighborhood != 4 && neighborhood != 8)
    throw ParseError("config: neighborhood must be 4 or 8");
  if (val_fraction < 0 || val_fraction >= 1)
    throw ParseError("config: val_fraction must be in [0,1)");
}

namespace {

void set_threads(int threads) { set_compute_threads(threads); }

std::string spots_csv_text(const std::vector<SlideDataset>& datasets) {
  std::ostringstream os;
  os << "slide_id,patient_id,spot_id,grid_x,grid_y,pixel_x,pixel_y\n";
  for (const auto& ds : datasets)
    for (const auto& sp : ds.spots)
      os << ds.slide_id << "," << ds.patient_id << "," << sp.spot_id << "," << sp.grid_x << ","
         << sp.grid_y << "," << sp.pixel_x << "," << sp.pixel_y << "\n";
  return os.str();
}

std::string labels_csv_text(const std::vector<SlideDataset>& datasets) {
  std::ostringstream os;
  os << "spot_id";
  for (const auto& g : datasets.front().gene_names) os << "," << g;
  os << "\n";
  for (const auto& ds : datasets)
    for (const auto& sp : ds.spots) {
      os << sp.spot_id;
      for (double v : sp.expression) os << "," << format_double(v);
      os << "\n";
    }
  return os.str();
}

ImageU8 load_slide_image(const RunConfig& cfg, const std::string& slide_id) {
  if (cfg.image_format == "ppm") {
    return read_ppm((fs::path(cfg.images_dir) / (slide_id + ".ppm")).string());
  }
  if (cfg.image_format == "raw") {
    if (cfg.image_h < 1 || cfg.image_w < 1)
      throw ParseError("config: raw images need paths.image_h and paths.image_w");
    return read_raw_planar((fs::path(cfg.images_dir) / (slide_id + ".raw")).string(), cfg.image_h,
                           cfg.image_w);
  }
  throw ParseError("config: image_format must be ppm or raw");
}

struct PreparedData {
  std::vector<SlideDataset> datasets;  // normalized labels
  std::vector<std::string> gene_names;
  std::string features_dir;
};

PreparedData load_prepared(const RunConfig& cfg) {
  const fs::path base(cfg.out_dir);
  const std::string spots = cfg.spots.empty() ? (base / "spots.csv").string() : cfg.spots;
  const std::string labels = cfg.counts.empty() ? (base / "labels.csv").string() : cfg.counts;
  PreparedData out;
  out.datasets = load_prepared_dataset(spots, labels);
  out.gene_names = out.datasets.front().gene_names;
  out.features_dir =
      cfg.features_dir.empty() ? (base / "features").string() : cfg.features_dir;
  return out;
}

GridCoordinates coords_of(const SlideDataset& ds) {
  std::vector<int64_t> xs, ys;
  xs.reserve(ds.spots.size());
  ys.reserve(ds.spots.size());
  for (const auto& sp : ds.spots) {
    xs.push_back(sp.grid_x);
    ys.push_back(sp.grid_y);
  }
  return GridCoordinates::from_points(xs, ys);
}

Tensor<double> labels_matrix(const SlideDataset& ds) {
  Tensor<double> out({ds.n(), ds.m()});
  for (int64_t i = 0; i < ds.n(); ++i)
    std::copy(ds.spots[i].expression.begin(), ds.spots[i].expression.end(),
              out.data() + i * ds.m());
  return out;
}

}  // namespace

std::vector<std::string> make_val_split(const std::vector<SlideInfo>& train_slides,
                                        double fraction) {
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& s : train_slides) groups[s.patient_id].push_back(s.slide_id);
  if (groups.size() < 2) return {};  // nothing to hold out without losing all training data
  std::vector<std::pair<std::string, std::vector<std::string>>> patients(groups.begin(),
                                                                         groups.end());
  // Smallest patients first so the held-out share stays close to the target.
  std::stable_sort(patients.begin(), patients.end(), [](const auto& a, const auto& b) {
    if (a.second.size() != b.second.size()) return a.second.size() < b.second.size();
    return a.first < b.first;
  });
  const size_t want = std::max<size_t>(
      1, static_cast<size_t>(std::ceil(fraction * static_cast<double>(train_slides.size()))));
  std::vector<std::string> val;
  for (size_t i = 0; i + 1 < patients.size() && val.size() < want; ++i)
    val.insert(val.end(), patients[i].second.begin(), patients[i].second.end());
  std::sort(val.begin(), val.end());
  return val;
}

template <typename T>
std::vector<SlideTensors<T>> load_slide_tensors(const std::string& spots_csv,
                                                const std::string& labels_csv,
                                                const std::string& features_dir,
                                                const std::vector<std::string>& ids) {
  auto datasets = load_prepared_dataset(spots_csv, labels_csv);
  std::vector<SlideTensors<T>> out;
  for (const auto& ds : datasets) {
    if (!ids.empty() && std::find(ids.begin(), ids.end(), ds.slide_id) == ids.end()) continue;
    SlideTensors<T> st;
    st.slide_id = ds.slide_id;
    st.patient_id = ds.patient_id;
    st.coords = coords_of(ds);
    const fs::path dir(features_dir);
    Tensor<float> target = read_feature_file((dir / (ds.slide_id + ".target.bin")).string());
    Tensor<float> neighbor = read_feature_file((dir / (ds.slide_id + ".neighbor.bin")).string());
    Tensor<float> global = read_feature_file((dir / (ds.slide_id + ".global.bin")).string());
    const int64_t n = ds.n();
    if (target.dim(0) != n || neighbor.dim(0) != n || global.dim(0) != n)
      throw ShapeError("features: slide " + ds.slide_id + " has " + std::to_string(n) +
                       " spots but feature files disagree");
    st.global_features = global.cast<T>();
    const int64_t tt = target.dim(1), td = target.dim(2);
    const int64_t nt = neighbor.dim(1), ndim = neighbor.dim(2);
    for (int64_t i = 0; i < n; ++i) {
      Tensor<T> ti({tt, td});
      for (int64_t j = 0; j < tt * td; ++j)
        ti.data()[j] = static_cast<T>(target.data()[i * tt * td + j]);
      st.target_feats.push_back(std::move(ti));
      Tensor<T> ni({nt, ndim});
      for (int64_t j = 0; j < nt * ndim; ++j)
        ni.data()[j] = static_cast<T>(neighbor.data()[i * nt * ndim + j]);
      st.neighbor_feats.push_back(std::move(ni));
    }
    st.labels = labels_matrix(ds).template cast<T>();
    for (const auto& sp : ds.spots) st.spot_ids.push_back(sp.spot_id);
    out.push_back(std::move(st));
  }
  if (out.empty()) throw ValueError("features: no slides matched the requested ids");
  return out;
}

template std::vector<SlideTensors<float>> load_slide_tensors<float>(
    const std::string&, const std::string&, const std::string&, const std::vector<std::string>&);
template std::vector<SlideTensors<double>> load_slide_tensors<double>(
    const std::string&, const std::string&, const std::string&, const std::vector<std::string>&);

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

PrepareResult run_prepare(const RunConfig& cfg) {
  cfg.validate();
  set_threads(cfg.threads);
  if (cfg.spots.empty() || cfg.counts.empty())
    throw ParseError("prepare: paths.spots and paths.counts are required");
  if (cfg.out_dir.empty()) throw ParseError("prepare: paths.out_dir is required");
  if (!fs::exists(cfg.spots)) throw IoError("prepare: missing spots file " + cfg.spots);
  if (!fs::exists(cfg.counts)) throw IoError("prepare: missing counts file " + cfg.counts);

  auto datasets = load_dataset(cfg.spots, cfg.counts);
  const int64_t m_keep = std::min<int64_t>(cfg.m_keep, datasets.front().m());
  auto keep = select_genes(datasets, m_keep);

  PrepareResult result;
  std::vector<SlideDataset> processed;
  for (const auto& ds : datasets) {
    auto selected = apply_gene_selection(ds, keep);
    auto norm = normalize_expression(selected);
    result.dropped_spots.insert(result.dropped_spots.end(), norm.dropped_spots.begin(),
                                norm.dropped_spots.end());
    if (norm.dataset.n() == 0)
      throw ValueError("prepare: slide " + ds.slide_id + " has no spots with positive counts");
    processed.push_back(std::move(norm.dataset));
  }

  fs::create_directories(cfg.out_dir);
  fs::create_directories(fs::path(cfg.out_dir) / "features");
  atomic_write_text((fs::path(cfg.out_dir) / "spots.csv").string(), spots_csv_text(processed));
  atomic_write_text((fs::path(cfg.out_dir) / "labels.csv").string(), labels_csv_text(processed));

  auto extractor = make_toy_extractor(cfg.extractor_seed);
  for (const auto& ds : processed) {
    const fs::path dir = fs::path(cfg.out_dir) / "features";
    if (!cfg.images_dir.empty()) {
      ImageU8 slide = load_slide_image(cfg, ds.slide_id);
      FeatureSet feats = extract_features(*extractor, ds, slide);
      write_feature_file((dir / (ds.slide_id + ".target.bin")).string(), feats.target);
      write_feature_file((dir / (ds.slide_id + ".neighbor.bin")).string(), feats.neighbor);
      write_feature_file((dir / (ds.slide_id + ".global.bin")).string(), feats.global);
    } else if (!cfg.features_dir.empty()) {
      for (const char* kind : {"target", "neighbor", "global"}) {
        const std::string name = ds.slide_id + "." + kind + ".bin";
        const fs::path src = fs::path(cfg.features_dir) / name;
        if (!fs::exists(src)) throw IoError("prepare: missing feature file " + src.string());
        Tensor<float> data = read_feature_file(src.string());
        if (data.dim(0) != ds.n())
          throw ShapeError("prepare: " + name + " has " + std::to_string(data.dim(0)) +
                           " rows for " + std::to_string(ds.n()) + " spots");
        write_feature_file((dir / name).string(), data);
      }
    } else {
      throw ParseError("prepare: either paths.images_dir or paths.features_dir is required");
    }
  }

  result.slides = static_cast<int64_t>(processed.size());
  for (const auto& ds : processed) result.spots += ds.n();
  result.genes = m_keep;
  return result;
}

// ---------------------------------------------------------------------------
// Training core shared by cv and train
// ---------------------------------------------------------------------------

namespace {

struct FitOutput {
  std::string log_csv;
  double best_val_pcc_m = std::numeric_limits<double>::quiet_NaN();
  int epochs = 0;
};

template <typename T>
double val_pcc_m(const TriplexModel<T>& model, std::vector<SlideTensors<T>>& val,
                 const std::vector<Tensor<double>>& val_truth, Rng& rng) {
  if (val.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<SlideMetrics> mets;
  for (size_t i = 0; i < val.size(); ++i) {
    Tensor<T> pred = predict_slide(model, val[i], rng);
    mets.push_back(slide_metrics(val[i].slide_id, pred.template cast<double>(), val_truth[i]));
  }
  return aggregate_metrics(mets).pcc_m;
}

template <typename T>
FitOutput fit_model(TriplexModel<T>& model, std::vector<SlideTensors<T>>& train,
                    std::vector<SlideTensors<T>>& val, const TrainConfig& cfg, uint64_t rng_seed) {
  Adam<T> opt(model.params());
  EarlyStop stopper(cfg.patience);
  Rng rng(rng_seed);
  std::vector<Tensor<double>> val_truth;
  for (auto& v : val) val_truth.push_back(v.labels.template cast<double>());

  std::ostringstream log;
  log << "epoch,lr,L_Ta,L_Ne,L_Gl,L_F,total,val_pcc_m\n";
  std::vector<Tensor<T>> best = model.params().snapshot();
  FitOutput out;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    EpochStats stats = train_epoch(model, train, opt, cfg, epoch, rng);
    const double pcc = val_pcc_m(model, val, val_truth, rng);
    log << epoch << "," << format_double(stats.lr) << "," << format_double(stats.mean_loss.l_ta)
        << "," << format_double(stats.mean_loss.l_ne) << ","
        << format_double(stats.mean_loss.l_gl) << "," << format_double(stats.mean_loss.l_f)
        << "," << format_double(stats.mean_loss.total) << ","
        << (std::isnan(pcc) ? "NA" : format_double(pcc)) << "\n";
    out.epochs = epoch + 1;
    if (!val.empty()) {
      const bool improved_best = pcc > stopper.best;
      const bool stop = stopper.update(pcc, epoch);
      if (improved_best) best = model.params().snapshot();
      if (stop) break;
    }
  }
  if (!val.empty()) {
    model.params().restore(best);
    out.best_val_pcc_m = stopper.best;
  }
  out.log_csv = log.str();
  return out;
}

std::string metrics_csv_text(const std::vector<SlideMetrics>& slides, const MetricsReport& rep) {
  std::ostringstream os;
  os << "slide_id,spots,mse,mae,pcc_mean\n";
  for (const auto& s : slides)
    os << s.slide_id << "," << s.spots << "," << format_double(s.mse) << ","
       << format_double(s.mae) << ","
       << (std::isnan(s.mean_pcc) ? "NA" : format_double(s.mean_pcc)) << "\n";
  os << "AGGREGATE," << 0 << "," << format_double(rep.mse) << "," << format_double(rep.mae)
     << "," << (std::isnan(rep.pcc_m) ? "NA" : format_double(rep.pcc_m)) << "\n";
  return os.str();
}

std::string summary_text(const MetricsReport& rep) {
  std::ostringstream os;
  os << "pcc_m=" << (std::isnan(rep.pcc_m) ? "NA" : format_double(rep.pcc_m)) << "\n";
  os << "pcc_h=" << (std::isnan(rep.pcc_h) ? "NA" : format_double(rep.pcc_h)) << "\n";
  os << "mse=" << format_double(rep.mse) << "\n";
  os << "mae=" << format_double(rep.mae) << "\n";
  return os.str();
}

template <typename T>
CvResult run_cv_impl(const RunConfig& cfg) {
  PreparedData prep = load_prepared(cfg);
  std::vector<SlideInfo> infos;
  for (const auto& ds : prep.datasets) infos.push_back({ds.slide_id, ds.patient_id});
  const int k = cfg.kfold_k();
  auto folds = k == 0 ? make_lopcv_folds(infos) : make_grouped_kfold(infos, k);

  const fs::path base(cfg.out_dir);
  fs::create_directories(base);

  const std::string spots_path = cfg.spots.empty() ? (base / "spots.csv").string() : cfg.spots;
  const std::string labels_path = cfg.counts.empty() ? (base / "labels.csv").string() : cfg.counts;
  auto all = load_slide_tensors<T>(spots_path, labels_path, prep.features_dir);

  // Training labels optionally smoothed; evaluation always against the
  // unsmoothed prepared labels.
  std::map<std::string, Tensor<T>> train_labels;
  for (size_t i = 0; i < prep.datasets.size(); ++i) {
    const auto& ds = prep.datasets[i];
    if (cfg.smoothing)
      train_labels[ds.slide_id] =
          labels_matrix(smooth_expression(ds, cfg.neighborhood)).template cast<T>();
    else
      train_labels[ds.slide_id] = all[i].labels;
  }

  auto slides_by_id = [&](const std::vector<std::string>& ids, bool smoothed) {
    std::vector<SlideTensors<T>> out;
    for (const auto& id : ids)
      for (const auto& st : all)
        if (st.slide_id == id) {
          out.push_back(st);
          if (smoothed) out.back().labels = train_labels.at(id);
        }
    return out;
  };

  std::vector<SlideMetrics> all_test_metrics;
  std::vector<std::vector<double>> fold_gene_pcc;
  CvResult result;
  for (const auto& fold : folds) {
    const fs::path fold_dir = base / ("fold_" + std::to_string(fold.fold_id));
    fs::create_directories(fold_dir);

    std::vector<SlideInfo> train_infos;
    for (const auto& s : infos)
      if (std::find(fold.train_slides.begin(), fold.train_slides.end(), s.slide_id) !=
          fold.train_slides.end())
        train_infos.push_back(s);
    auto val_ids = make_val_split(train_infos, cfg.val_fraction);
    std::vector<std::string> fit_ids;
    for (const auto& s : fold.train_slides)
      if (std::find(val_ids.begin(), val_ids.end(), s) == val_ids.end()) fit_ids.push_back(s);

    auto train = slides_by_id(fit_ids, true);
    auto val = slides_by_id(val_ids, false);
    auto test = slides_by_id(fold.test_slides, false);

    TriplexModel<T> model(cfg.model, static_cast<int64_t>(prep.gene_names.size()),
                          cfg.train.seed + static_cast<uint64_t>(fold.fold_id));
    FitOutput fit = fit_model(model, train, val, cfg.train,
                              cfg.train.seed + 77777ULL + static_cast<uint64_t>(fold.fold_id));
    atomic_write_text((fold_dir / "train_log.csv").string(), fit.log_csv);
    save_checkpoint(model.params(), (fold_dir / "model.ckpt").string());

    Rng eval_rng(0);
    std::vector<SlideMetrics> fold_metrics;
    for (auto& ts : test) {
      Tensor<T> pred = predict_slide(model, ts, eval_rng);
      fold_metrics.push_back(slide_metrics(ts.slide_id, pred.template cast<double>(),
                                           ts.labels.template cast<double>()));
    }
    MetricsReport fold_rep = aggregate_metrics(fold_metrics);
    atomic_write_text((fold_dir / "metrics.csv").string(),
                      metrics_csv_text(fold_metrics, fold_rep));
    fold_gene_pcc.push_back(fold_rep.gene_mean_pcc);
    all_test_metrics.insert(all_test_metrics.end(), fold_metrics.begin(), fold_metrics.end());
    result.fold_dirs.push_back(fold_dir.string());
  }

  GeneRanking ranking = rank_genes(fold_gene_pcc, prep.gene_names, 50);
  MetricsReport rep = aggregate_metrics(all_test_metrics, ranking.top_genes);

  std::ostringstream rank_csv;
  rank_csv << "gene,average_rank";
  for (size_t f = 0; f < fold_gene_pcc.size(); ++f) rank_csv << ",rank_fold" << f;
  rank_csv << "\n";
  for (size_t j = 0; j < prep.gene_names.size(); ++j) {
    rank_csv << prep.gene_names[j] << "," << format_double(ranking.average_rank[j]);
    for (const auto& fr : ranking.fold_ranks) rank_csv << "," << fr[j];
    rank_csv << "\n";
  }
  atomic_write_text((base / "gene_ranking.csv").string(), rank_csv.str());
  atomic_write_text((base / "metrics.csv").string(), metrics_csv_text(all_test_metrics, rep));
  atomic_write_text((base / "summary.txt").string(), summary_text(rep));

  result.pcc_m = rep.pcc_m;
  result.pcc_h = rep.pcc_h;
  result.mse = rep.mse;
  result.mae = rep.mae;
  result.folds = static_cast<int>(folds.size());
  return result;
}

template <typename T>
void run_train_impl(const RunConfig& cfg) {
  PreparedData prep = load_prepared(cfg);
  const fs::path base(cfg.out_dir);
  fs::create_directories(base);
  const std::string spots_path = cfg.spots.empty() ? (base / "spots.csv").string() : cfg.spots;
  const std::string labels_path = cfg.counts.empty() ? (base / "labels.csv").string() : cfg.counts;
  auto all = load_slide_tensors<T>(spots_path, labels_path, prep.features_dir);

  std::vector<SlideInfo> infos;
  for (const auto& ds : prep.datasets) infos.push_back({ds.slide_id, ds.patient_id});
  auto val_ids = make_val_split(infos, cfg.val_fraction);

  std::vector<SlideTensors<T>> train, val;
  for (size_t i = 0; i < all.size(); ++i) {
    if (std::find(val_ids.begin(), val_ids.end(), all[i].slide_id) != val_ids.end()) {
      val.push_back(all[i]);
    } else {
      train.push_back(all[i]);
      if (cfg.smoothing)
        train.back().labels =
            labels_matrix(smooth_expression(prep.datasets[i], cfg.neighborhood))
                .template cast<T>();
    }
  }

  TriplexModel<T> model(cfg.model, static_cast<int64_t>(prep.gene_names.size()), cfg.train.seed);
  FitOutput fit = fit_model(model, train, val, cfg.train, cfg.train.seed + 77777ULL);
  atomic_write_text((base / "train_log.csv").string(), fit.log_csv);
  save_checkpoint(model.params(), (base / "model.ckpt").string());
}

}  // namespace

CvResult run_cv(const RunConfig& cfg) {
  cfg.validate();
  set_threads(cfg.threads);
  if (cfg.out_dir.empty()) throw ParseError("cv: paths.out_dir is required");
  return cfg.precision == "f64" ? run_cv_impl<double>(cfg) : run_cv_impl<float>(cfg);
}

void run_train(const RunConfig& cfg) {
  cfg.validate();
  set_threads(cfg.threads);
  if (cfg.out_dir.empty()) throw ParseError("train: paths.out_dir is required");
  if (cfg.precision == "f64")
    run_train_impl<double>(cfg);
  else
    run_train_impl<float>(cfg);
}

// ---------------------------------------------------------------------------
// predict / eval / heatmap
// ---------------------------------------------------------------------------

namespace {

struct PredictionTable {
  std::vector<std::string> genes;
  std::map<std::string, std::vector<double>> by_spot;
};

PredictionTable read_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("predictions: cannot open " + path);
  PredictionTable out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
      if (c == ',') {
        fields.push_back(cur);
        cur.clear();
      } else if (c != '\r') {
        cur += c;
      }
    }
    fields.push_back(cur);
    if (lineno == 1) {
      if (fields.empty() || fields[0] != "spot_id")
        throw ParseError(path + ": first header column must be spot_id");
      out.genes.assign(fields.begin() + 1, fields.end());
      continue;
    }
    if (fields.size() != out.genes.size() + 1)
      throw ParseError(path + " line " + std::to_string(lineno) + ": expected " +
                       std::to_string(out.genes.size() + 1) + " columns");
    std::vector<double> vals(out.genes.size());
    for (size_t j = 0; j < vals.size(); ++j) {
      try {
        vals[j] = std::stod(fields[j + 1]);
      } catch (const std::exception&) {
        throw ParseError(path + " line " + std::to_string(lineno) + ": bad number '" +
                         fields[j + 1] + "'");
      }
    }
    out.by_spot[fields[0]] = std::move(vals);
  }
  if (out.by_spot.empty()) throw ParseError(path + ": no prediction rows");
  return out;
}

int64_t find_head_dim(const std::vector<CheckpointEntry>& entries, const std::string& name) {
  for (const auto& e : entries)
    if (e.name == name && e.shape.size() == 1) return e.shape[0];
  return -1;
}

}  // namespace

void run_predict(const RunConfig& cfg, const std::string& checkpoint,
                 const std::string& slide_id, const std::string& out_csv) {
  cfg.validate();
  set_threads(cfg.threads);
  PreparedData prep = load_prepared(cfg);

  auto entries = read_checkpoint(checkpoint);
  const int64_t ckpt_genes = find_head_dim(entries, "head.f.b");
  if (ckpt_genes > 0 && ckpt_genes != static_cast<int64_t>(prep.gene_names.size()))
    throw ValueError("predict: checkpoint was trained with " + std::to_string(ckpt_genes) +
                     " genes but the dataset has " + std::to_string(prep.gene_names.size()));

  const fs::path base(cfg.out_dir);
  const std::string spots_path = cfg.spots.empty() ? (base / "spots.csv").string() : cfg.spots;
  const std::string labels_path = cfg.counts.empty() ? (base / "labels.csv").string() : cfg.counts;
  auto slides = load_slide_tensors<float>(spots_path, labels_path, prep.features_dir, {slide_id});

  TriplexModel<float> model(cfg.model, static_cast<int64_t>(prep.gene_names.size()),
                            cfg.train.seed);
  load_checkpoint(model.params(), checkpoint);
  Rng rng(0);
  Tensor<float> pred = predict_slide(model, slides[0], rng);

  std::ostringstream os;
  os << "spot_id";
  for (const auto& g : prep.gene_names) os << "," << g;
  os << "\n";
  for (int64_t i = 0; i < pred.dim(0); ++i) {
    os << slides[0].spot_ids[i];
    for (int64_t j = 0; j < pred.dim(1); ++j)
      os << "," << format_double(static_cast<double>(pred.at2(i, j)));
    os << "\n";
  }
  atomic_write_text(out_csv, os.str());
}

MetricsReport run_eval(const RunConfig& cfg, const std::string& predictions_csv,
                       const std::string& out_dir) {
  cfg.validate();
  PreparedData prep = load_prepared(cfg);
  PredictionTable preds = read_predictions(predictions_csv);
  if (preds.genes != prep.gene_names)
    throw ValueError("eval: prediction genes do not match the prepared labels header");

  std::vector<SlideMetrics> mets;
  for (const auto& ds : prep.datasets) {
    std::vector<int64_t> covered;
    for (int64_t i = 0; i < ds.n(); ++i)
      if (preds.by_spot.count(ds.spots[i].spot_id)) covered.push_back(i);
    if (covered.empty()) continue;
    if (static_cast<int64_t>(covered.size()) != ds.n())
      throw ValueError("eval: slide " + ds.slide_id + " is only partially covered (" +
                       std::to_string(covered.size()) + "/" + std::to_string(ds.n()) +
                       " spots)");
    Tensor<double> pred({ds.n(), ds.m()});
    for (int64_t i = 0; i < ds.n(); ++i) {
      const auto& row = preds.by_spot.at(ds.spots[i].spot_id);
      std::copy(row.begin(), row.end(), pred.data() + i * ds.m());
    }
    mets.push_back(slide_metrics(ds.slide_id, pred, labels_matrix(ds)));
  }
  if (mets.empty()) throw ValueError("eval: predictions cover no prepared slide");
  MetricsReport rep = aggregate_metrics(mets);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    atomic_write_text((fs::path(out_dir) / "metrics.csv").string(), metrics_csv_text(mets, rep));
    atomic_write_text((fs::path(out_dir) / "summary.txt").string(), summary_text(rep));
  }
  return rep;
}

namespace {

size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string heatmap_csv(const GridCoordinates& coords, const std::vector<double>& values) {
  std::vector<std::vector<double>> grid(coords.h, std::vector<double>(coords.w));
  std::vector<std::vector<bool>> occupied(coords.h, std::vector<bool>(coords.w, false));
  for (int64_t i = 0; i < coords.count(); ++i) {
    grid[coords.grid_x[i]][coords.grid_y[i]] = values[i];
    occupied[coords.grid_x[i]][coords.grid_y[i]] = true;
  }
  std::ostringstream os;
  for (int64_t r = 0; r < coords.h; ++r) {
    for (int64_t c = 0; c < coords.w; ++c) {
      if (c) os << ",";
      os << (occupied[r][c] ? format_double(grid[r][c]) : "NA");
    }
    os << "\n";
  }
  return os.str();
}

void heatmap_pgm(const std::string& path, const GridCoordinates& coords,
                 const std::vector<double>& values) {
  double lo = values.empty() ? 0 : values[0], hi = lo;
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<std::vector<int>> pixel(coords.h, std::vector<int>(coords.w, 0));
  for (int64_t i = 0; i < coords.count(); ++i) {
    int v = 128;
    if (hi > lo) v = 1 + static_cast<int>(std::lround(254.0 * (values[i] - lo) / (hi - lo)));
    pixel[coords.grid_x[i]][coords.grid_y[i]] = v;
  }
  std::ostringstream os;
  os << "P5\n" << coords.w << " " << coords.h << "\n255\n";
  for (int64_t r = 0; r < coords.h; ++r)
    for (int64_t c = 0; c < coords.w; ++c) os << static_cast<char>(pixel[r][c]);
  atomic_write_text(path, os.str());
}

}  // namespace

void run_heatmap(const RunConfig& cfg, const std::string& predictions_csv,
                 const std::string& gene, const std::string& out_prefix) {
  cfg.validate();
  PreparedData prep = load_prepared(cfg);
  PredictionTable preds = read_predictions(predictions_csv);

  auto it = std::find(prep.gene_names.begin(), prep.gene_names.end(), gene);
  if (it == prep.gene_names.end()) {
    std::vector<std::string> sorted = prep.gene_names;
    std::sort(sorted.begin(), sorted.end(), [&](const std::string& a, const std::string& b) {
      return edit_distance(a, gene) < edit_distance(b, gene);
    });
    std::string msg = "heatmap: unknown gene '" + gene + "'; nearest:";
    for (size_t i = 0; i < std::min<size_t>(3, sorted.size()); ++i) msg += " " + sorted[i];
    throw ValueError(msg);
  }
  const int64_t gi = it - prep.gene_names.begin();

  bool wrote_any = false;
  for (const auto& ds : prep.datasets) {
    bool covered = true;
    for (const auto& sp : ds.spots)
      if (!preds.by_spot.count(sp.spot_id)) {
        covered = false;
        break;
      }
    if (!covered) continue;
    GridCoordinates coords = coords_of(ds);
    std::vector<double> pred_vals, truth_vals;
    for (const auto& sp : ds.spots) {
      pred_vals.push_back(preds.by_spot.at(sp.spot_id)[gi]);
      truth_vals.push_back(sp.expression[gi]);
    }
    const std::string stem = out_prefix + "." + ds.slide_id + "." + gene;
    atomic_write_text(stem + ".pred.csv", heatmap_csv(coords, pred_vals));
    atomic_write_text(stem + ".truth.csv", heatmap_csv(coords, truth_vals));
    heatmap_pgm(stem + ".pred.pgm", coords, pred_vals);
    heatmap_pgm(stem + ".truth.pgm", coords, truth_vals);
    wrote_any = true;
  }
  if (!wrote_any) throw ValueError("heatmap: predictions cover no prepared slide completely");
}

// ---------------------------------------------------------------------------
// Synthetic data generator
// ---------------------------------------------------------------------------

void run_synth(const SynthSpec& spec, const std::string& out_dir) {
  if (spec.patients < 1 || spec.slides_per_patient < 1 || spec.grid < 1 || spec.genes < 1)
    throw ValueError("synth: all sizes must be >= 1");
  fs::create_directories(out_dir);
  const fs::path base(out_dir);
  Rng rng(spec.seed);

  if (spec.images) {
    // Tiny raw dataset for `prepare`: counts plus slide images.
    std::ostringstream spots, counts;
    spots << "slide_id,patient_id,spot_id,grid_x,grid_y,pixel_x,pixel_y\n";
    counts << "spot_id";
    for (int64_t g = 0; g < spec.genes; ++g) counts << ",G" << g;
    counts << "\n";
    const int64_t side = 448;
    for (int p = 0; p < spec.patients; ++p)
      for (int s = 0; s < spec.slides_per_patient; ++s) {
        const std::string slide = "P" + std::to_string(p) + "S" + std::to_string(s);
        ImageU8 img(side, side);
        for (int64_t y = 0; y < side; ++y)
          for (int64_t x = 0; x < side; ++x) {
            img.at(y, x, 0) = static_cast<uint8_t>((x * 255) / side);
            img.at(y, x, 1) = static_cast<uint8_t>((y * 255) / side);
            img.at(y, x, 2) = static_cast<uint8_t>((x * 7 + y * 13 + p * 31 + s * 17) % 256);
          }
        write_ppm((base / (slide + ".ppm")).string(), img);
        for (int gx = 0; gx < spec.grid; ++gx)
          for (int gy = 0; gy < spec.grid; ++gy) {
            const std::string spot = slide + "_" + std::to_string(gx) + "_" + std::to_string(gy);
            const int64_t px = 112 + gy * 224;
            const int64_t py = 112 + gx * 224;
            spots << slide << ",P" << p << "," << spot << "," << gx << "," << gy << "," << px
                  << "," << py << "\n";
            counts << spot;
            for (int64_t g = 0; g < spec.genes; ++g)
              counts << "," << (g == 0 ? 1 : 0) + rng.uniform_int(0, 30);
            counts << "\n";
          }
      }
    atomic_write_text((base / "spots.csv").string(), spots.str());
    atomic_write_text((base / "counts.csv").string(), counts.str());

    std::ostringstream cfg;
    cfg << "[paths]\n"
        << "spots=" << (base / "spots.csv").string() << "\n"
        << "counts=" << (base / "counts.csv").string() << "\n"
        << "images_dir=" << base.string() << "\n"
        << "[data]\n"
        << "m_keep=" << spec.genes << "\n";
    atomic_write_text((base / "prepare.cfg").string(), cfg.str());
    return;
  }

  // Prepared-level dataset: expression is a fixed random linear map of the
  // pooled global feature plus Gaussian noise. The features live on a
  // latent_rank-dimensional subspace so the map is identifiable from a few
  // hundred training spots; expression = (V B^+) g exactly, with g = B u.
  const int64_t dim = FeatureExtractor::kDim;
  const int64_t rank = std::min(spec.latent_rank, dim);
  const int64_t n = static_cast<int64_t>(spec.grid) * spec.grid;
  const double lscale = 1.0 / std::sqrt(static_cast<double>(rank));
  std::vector<double> basis(static_cast<size_t>(dim * rank));    // B (dim x rank)
  std::vector<double> readout(static_cast<size_t>(spec.genes * rank));  // V (genes x rank)
  for (auto& v : basis) v = rng.normal(0.0, lscale);
  for (auto& v : readout) v = rng.normal(0.0, lscale);

  fs::create_directories(base / "features");
  std::ostringstream spots, labels;
  spots << "slide_id,patient_id,spot_id,grid_x,grid_y,pixel_x,pixel_y\n";
  labels << "spot_id";
  for (int64_t g = 0; g < spec.genes; ++g) labels << ",G" << g;
  labels << "\n";

  for (int p = 0; p < spec.patients; ++p)
    for (int s = 0; s < spec.slides_per_patient; ++s) {
      const std::string slide = "P" + std::to_string(p) + "S" + std::to_string(s);
      Tensor<float> target({n, FeatureExtractor::kTokens, dim});
      Tensor<float> neighbor({n, 25, dim});
      Tensor<float> global({n, dim});
      int64_t row = 0;
      for (int gx = 0; gx < spec.grid; ++gx)
        for (int gy = 0; gy < spec.grid; ++gy, ++row) {
          const std::string spot = slide + "_" + std::to_string(gx) + "_" + std::to_string(gy);
          const int64_t px = 112 + gy * 224;
          const int64_t py = 112 + gx * 224;
          spots << slide << ",P" << p << "," << spot << "," << gx << "," << gy << "," << px << ","
                << py << "\n";
          std::vector<double> u(rank);
          for (auto& v : u) v = rng.normal();
          std::vector<double> g(dim, 0.0);
          for (int64_t j = 0; j < dim; ++j)
            for (int64_t c = 0; c < rank; ++c) g[j] += basis[j * rank + c] * u[c];
          for (int64_t j = 0; j < dim; ++j)
            global.data()[row * dim + j] = static_cast<float>(g[j]);
          // Per-view tokens: the pooled vector plus token-level jitter.
          for (int64_t t = 0; t < FeatureExtractor::kTokens; ++t)
            for (int64_t j = 0; j < dim; ++j)
              target.data()[(row * FeatureExtractor::kTokens + t) * dim + j] =
                  static_cast<float>(g[j] + 0.5 * rng.normal());
          for (int64_t t = 0; t < 25; ++t)
            for (int64_t j = 0; j < dim; ++j)
              neighbor.data()[(row * 25 + t) * dim + j] =
                  static_cast<float>(g[j] + 0.5 * rng.normal());
          labels << spot;
          for (int64_t k = 0; k < spec.genes; ++k) {
            double y = spec.noise * rng.normal();
            for (int64_t c = 0; c < rank; ++c) y += readout[k * rank + c] * u[c];
            labels << "," << format_double(y);
          }
          labels << "\n";
        }
      write_feature_file((base / "features" / (slide + ".target.bin")).string(), target);
      write_feature_file((base / "features" / (slide + ".neighbor.bin")).string(), neighbor);
      write_feature_file((base / "features" / (slide + ".global.bin")).string(), global);
    }

  atomic_write_text((base / "spots.csv").string(), spots.str());
  atomic_write_text((base / "labels.csv").string(), labels.str());

  std::ostringstream cfg;
  cfg << "[paths]\n"
      << "spots=" << (base / "spots.csv").string() << "\n"
      << "counts=" << (base / "labels.csv").string() << "\n"
      << "features_dir=" << (base / "features").string() << "\n"
      << "out_dir=" << base.string() << "\n"
      << "[model]\n"
      << "d=32\n"
      << "num_heads1=4\nnum_heads2=4\nnum_heads3=4\n"
      << "dropout1=0\ndropout2=0\ndropout3=0\n"
      << "[train]\n"
      << "seed=" << spec.seed << "\n"
      << "lr0=0.002\n"
      << "max_epochs=60\n"
      << "threads=1\n"
      << "[data]\n"
      << "smoothing=off\n"
      << "cv=lopcv\n";
  atomic_write_text((base / "run.cfg").string(), cfg.str());
}

}  // namespace triplex
