#include <CLI11.hpp>
#include <iostream>

#include "triplex/pipeline.hpp"

using namespace triplex;

namespace {

struct CommonOpts {
  std::string config;
  std::string out;
  int64_t seed = -1;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
  auto* c = cmd->add_option("--config", opts.config, "run configuration file");
  if (config_required) c->required();
  cmd->add_option("--out", opts.out, "output directory (overrides paths.out_dir)");
  cmd->add_option("--seed", opts.seed, "training seed (overrides train.seed)");
  cmd->add_option("--set", opts.overrides, "extra section.key=value overrides")
      ->take_all();
}

RunConfig build_config(const CommonOpts& opts) {
  RunConfig cfg = opts.config.empty() ? RunConfig{} : load_run_config(opts.config);
  for (const auto& ov : opts.overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos) throw ParseError("--set expects section.key=value, got " + ov);
    apply_config_override(cfg, ov.substr(0, eq), ov.substr(eq + 1));
  }
  if (!opts.out.empty()) cfg.out_dir = opts.out;
  if (opts.seed >= 0) cfg.train.seed = static_cast<uint64_t>(opts.seed);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"triplex: multi-resolution spot expression prediction pipeline"};
  app.require_subcommand(1);

  CommonOpts prep_opts, train_opts, cv_opts, pred_opts, eval_opts, heat_opts;

  auto* prepare = app.add_subcommand("prepare", "preprocess counts and extract features");
  add_common(prepare, prep_opts);

  auto* train = app.add_subcommand("train", "train one model on all prepared slides");
  add_common(train, train_opts);

  auto* cv = app.add_subcommand("cv", "patient-grouped cross-validated training");
  add_common(cv, cv_opts);

  auto* predict = app.add_subcommand("predict", "predict all spots of one slide");
  add_common(predict, pred_opts);
  std::string checkpoint, slide_id, pred_out;
  predict->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  predict->add_option("--slide", slide_id, "slide id")->required();
  predict->add_option("--pred-out", pred_out, "output predictions CSV")->required();

  auto* eval = app.add_subcommand("eval", "score a predictions CSV against prepared labels");
  add_common(eval, eval_opts);
  std::string eval_pred;
  eval->add_option("--pred", eval_pred, "predictions CSV")->required();

  auto* heatmap = app.add_subcommand("heatmap", "export prediction/truth grids for one gene");
  add_common(heatmap, heat_opts);
  std::string heat_pred, heat_gene, heat_prefix;
  heatmap->add_option("--pred", heat_pred, "predictions CSV")->required();
  heatmap->add_option("--gene", heat_gene, "gene name")->required();
  heatmap->add_option("--prefix", heat_prefix, "output file prefix")->required();

  auto* synth = app.add_subcommand("synth", "generate the bundled synthetic dataset");
  SynthSpec spec;
  std::string synth_out;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--patients", spec.patients, "number of patients");
  synth->add_option("--slides", spec.slides_per_patient, "slides per patient");
  synth->add_option("--grid", spec.grid, "spots per grid side");
  synth->add_option("--genes", spec.genes, "gene count");
  synth->add_option("--noise", spec.noise, "label noise sigma");
  synth->add_option("--seed", spec.seed, "generator seed");
  synth->add_flag("--images", spec.images, "emit raw counts + slide images for prepare");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*prepare) {
      RunConfig cfg = build_config(prep_opts);
      PrepareResult res = run_prepare(cfg);
      std::cout << "prepared " << res.slides << " slide(s), " << res.spots << " spot(s), "
                << res.genes << " gene(s)\n";
      for (const auto& id : res.dropped_spots)
        std::cerr << "warning: dropped zero-count spot " << id << "\n";
    } else if (*train) {
      run_train(build_config(train_opts));
      std::cout << "trained model written\n";
    } else if (*cv) {
      CvResult res = run_cv(build_config(cv_opts));
      std::cout << "cv folds=" << res.folds << " pcc_m=" << format_double(res.pcc_m)
                << " pcc_h=" << format_double(res.pcc_h) << " mse=" << format_double(res.mse)
                << " mae=" << format_double(res.mae) << "\n";
    } else if (*predict) {
      run_predict(build_config(pred_opts), checkpoint, slide_id, pred_out);
      std::cout << "predictions written to " << pred_out << "\n";
    } else if (*eval) {
      RunConfig cfg = build_config(eval_opts);
      MetricsReport rep = run_eval(cfg, eval_pred, cfg.out_dir);
      std::cout << "pcc_m=" << format_double(rep.pcc_m) << " mse=" << format_double(rep.mse)
                << " mae=" << format_double(rep.mae) << "\n";
    } else if (*heatmap) {
      run_heatmap(build_config(heat_opts), heat_pred, heat_gene, heat_prefix);
      std::cout << "heatmaps written with prefix " << heat_prefix << "\n";
    } else if (*synth) {
      run_synth(spec, synth_out);
      std::cout << "synthetic dataset written to " << synth_out << "\n";
    }
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
