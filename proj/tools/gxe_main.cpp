#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include "gxe/config.hpp"
#include "gxe/eval.hpp"
#include "gxe/pipeline.hpp"
#include "gxe/rng.hpp"
#include "gxe/simgen.hpp"

namespace fs = std::filesystem;
using namespace gxe;

namespace {

int log_level() {
  const char* v = std::getenv("GXE_LOG");
  if (!v) return 1;
  return std::atoi(v);
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[gxe] " << msg << "\n";
}

struct CommonArgs {
  std::string config_path;
  std::optional<unsigned long long> seed;
  std::optional<std::string> profile;
  std::optional<std::string> out;
};

Ini load_config(const CommonArgs& args, const std::string& section) {
  Ini ini = args.config_path.empty() ? Ini() : Ini::parse_file(args.config_path);
  if (args.seed) ini.set(section, "seed", std::to_string(*args.seed));
  if (args.profile) ini.set(section, "profile", *args.profile);
  if (args.out) ini.set(section, "out", *args.out);
  return ini;
}

std::string out_dir(const Ini& ini, const std::string& section) {
  const std::string out = ini.get_or(section, "out", "");
  if (out.empty()) throw ValidationError("missing output directory: set [" + section +
                                         "] out or pass --out");
  fs::create_directories(out);
  return out;
}

void finish_run(const Ini& effective, const std::string& section, const std::string& out,
                Manifest& manifest) {
  effective.write_file(out + "/config_effective.ini");
  manifest.record_write(out + "/config_effective.ini");
  manifest.write(out + "/manifest.csv");
  log_info(section + " done, artifacts in " + out);
}

SimConfig sim_config_from(const Ini& ini) {
  const std::string s = "simulate";
  ini.require_known_keys(
      s, {"n_g", "n_e", "d_g", "d_e", "r_true", "mu", "sigma_g2", "lambda_scale", "psi_lo",
          "psi_hi", "resid_lo", "resid_hi", "replicates", "missing_cell_fraction",
          "n_causal_markers", "n_causal_env_features", "env_link_noise", "seed", "out"});
  SimConfig cfg;
  cfg.n_g = static_cast<int>(ini.get_long(s, "n_g", cfg.n_g));
  cfg.n_e = static_cast<int>(ini.get_long(s, "n_e", cfg.n_e));
  cfg.d_g = static_cast<int>(ini.get_long(s, "d_g", cfg.d_g));
  cfg.d_e = static_cast<int>(ini.get_long(s, "d_e", cfg.d_e));
  cfg.r_true = static_cast<int>(ini.get_long(s, "r_true", cfg.r_true));
  cfg.mu = ini.get_double(s, "mu", cfg.mu);
  cfg.sigma_g2 = ini.get_double(s, "sigma_g2", cfg.sigma_g2);
  cfg.lambda_scale = ini.get_double(s, "lambda_scale", cfg.lambda_scale);
  cfg.psi_range = {ini.get_double(s, "psi_lo", cfg.psi_range.first),
                   ini.get_double(s, "psi_hi", cfg.psi_range.second)};
  cfg.resid_range = {ini.get_double(s, "resid_lo", cfg.resid_range.first),
                     ini.get_double(s, "resid_hi", cfg.resid_range.second)};
  cfg.replicates = static_cast<int>(ini.get_long(s, "replicates", cfg.replicates));
  cfg.missing_cell_fraction =
      ini.get_double(s, "missing_cell_fraction", cfg.missing_cell_fraction);
  cfg.n_causal_markers =
      static_cast<int>(ini.get_long(s, "n_causal_markers", cfg.n_causal_markers));
  cfg.n_causal_env_features =
      static_cast<int>(ini.get_long(s, "n_causal_env_features", cfg.n_causal_env_features));
  cfg.env_link_noise = ini.get_double(s, "env_link_noise", cfg.env_link_noise);
  cfg.seed = ini.get_u64(s, "seed", 1);
  return cfg;
}

int cmd_simulate(const CommonArgs& args) {
  Ini ini = load_config(args, "simulate");
  const SimConfig cfg = sim_config_from(ini);
  const std::string out = out_dir(ini, "simulate");
  Manifest manifest;
  const Simulated sim = simulate(cfg);
  write_simulated(out, sim);
  for (const auto& name :
       {"trials.csv", "markers.csv", "weather.csv", "soil.csv", "management.csv",
        "truth_scalars.csv", "truth_genotype_effects.csv", "truth_env_effects.csv",
        "truth_ge_effects.csv", "truth_lambda.csv", "truth_variances.csv",
        "truth_marker_effects.csv", "truth_env_weights.csv"})
    manifest.record_write(out + "/" + std::string(name));
  finish_run(ini, "simulate", out, manifest);
  return 0;
}

int cmd_ingest(const CommonArgs& args) {
  Ini ini = load_config(args, "ingest");
  const std::string s = "ingest";
  ini.require_known_keys(s, {"raw_dir", "test_raw_dir", "out", "maf_min", "max_missing",
                             "target_markers", "seed"});
  const std::string raw_dir = ini.get(s, "raw_dir");
  const std::string out = out_dir(ini, s);
  IngestOptions opts;
  opts.maf_min = ini.get_double(s, "maf_min", opts.maf_min);
  opts.max_missing = ini.get_double(s, "max_missing", opts.max_missing);
  opts.target_markers = static_cast<int>(ini.get_long(s, "target_markers", opts.target_markers));
  opts.seed = ini.get_u64(s, "seed", 0);
  Manifest manifest;
  ProcessedData processed = run_ingest(raw_dir, out, opts, &manifest);
  const std::string test_dir = ini.get_or(s, "test_raw_dir", "");
  if (!test_dir.empty()) run_ingest_test(test_dir, processed, out, &manifest);
  finish_run(ini, s, out, manifest);
  return 0;
}

int cmd_decompose(const CommonArgs& args) {
  Ini ini = load_config(args, "decompose");
  const std::string s = "decompose";
  ini.require_known_keys(s, {"data_dir", "out", "r", "tol", "max_iter", "seed", "gradient"});
  const std::string data_dir = ini.get(s, "data_dir");
  const std::string out = out_dir(ini, s);
  Manifest manifest;
  const ProcessedData processed = load_processed(data_dir, &manifest);
  FaOptions opts;
  opts.r = static_cast<int>(ini.get_long(s, "r", opts.r));
  opts.tol = ini.get_double(s, "tol", opts.tol);
  opts.max_iter = static_cast<int>(ini.get_long(s, "max_iter", opts.max_iter));
  opts.seed = ini.get_u64(s, "seed", 0);
  const std::string grad = ini.get_or(s, "gradient", "analytic");
  if (grad != "analytic" && grad != "fd")
    throw ValidationError("gradient must be analytic or fd");
  opts.analytic_gradient = grad == "analytic";

  // the fit runs on the observed grid; feature-only rows serve prediction later
  const Dataset observed = processed.data.compacted();
  const FAFit fit = fit_fa(observed, opts);
  const LabelSets labels = generate_labels(fit, observed);
  write_fa_fit_csv(out + "/fa_fit.csv", fit);
  write_blups_csv(out + "/blups.csv", fit, observed);
  write_labels_csv(out + "/labels.csv", labels, observed);
  for (const auto& name : {"fa_fit.csv", "blups.csv", "labels.csv"})
    manifest.record_write(out + "/" + std::string(name));
  if (!fit.converged) log_info("warning: REML did not converge within max_iter");
  finish_run(ini, s, out, manifest);
  return 0;
}

StructuredConfig nn_config_from(const Ini& ini, const std::string& s, int d_g, int d_e) {
  const std::string profile = ini.get_or(s, "profile", "desk");
  const std::uint64_t seed = ini.get_u64(s, "seed", 0);
  StructuredConfig cfg = default_structured_config(d_g, d_e, profile, seed);
  if (ini.has(s, "fg_nodes"))
    cfg.genotype_spec = genotype_encoder_spec(d_g, static_cast<int>(ini.get_long(s, "fg_nodes", 256)));
  if (ini.has(s, "fe_nodes") || ini.has(s, "fe_layers"))
    cfg.env_spec = env_encoder_spec(d_e, static_cast<int>(ini.get_long(s, "fe_nodes", 48)),
                                    static_cast<int>(ini.get_long(s, "fe_layers", 3)));
  cfg.fg.learning_rate = ini.get_double(s, "fg_lr", cfg.fg.learning_rate);
  cfg.fg.weight_decay = ini.get_double(s, "fg_wd", cfg.fg.weight_decay);
  cfg.fg.epochs = static_cast<int>(ini.get_long(s, "fg_epochs", cfg.fg.epochs));
  cfg.fe.learning_rate = ini.get_double(s, "fe_lr", cfg.fe.learning_rate);
  cfg.fe.weight_decay = ini.get_double(s, "fe_wd", cfg.fe.weight_decay);
  cfg.fe.epochs = static_cast<int>(ini.get_long(s, "fe_epochs", cfg.fe.epochs));
  cfg.fge.learning_rate = ini.get_double(s, "fge_lr", cfg.fge.learning_rate);
  cfg.fge.weight_decay = ini.get_double(s, "fge_wd", cfg.fge.weight_decay);
  cfg.fge.epochs = static_cast<int>(ini.get_long(s, "fge_epochs", cfg.fge.epochs));
  cfg.embedding_len = static_cast<int>(ini.get_long(s, "embedding_len", cfg.embedding_len));
  return cfg;
}

int cmd_train(const CommonArgs& args) {
  Ini ini = load_config(args, "train");
  const std::string s = "train";
  ini.require_known_keys(
      s, {"data_dir", "labels", "out", "profile", "seed", "labels_kind", "fg_nodes",
          "fe_nodes", "fe_layers", "fg_lr", "fg_wd", "fg_epochs", "fe_lr", "fe_wd",
          "fe_epochs", "fge_lr", "fge_wd", "fge_epochs", "embedding_len"});
  const std::string data_dir = ini.get(s, "data_dir");
  const std::string out = out_dir(ini, s);
  Manifest manifest;
  const ProcessedData processed = load_processed(data_dir, &manifest);
  const Dataset observed = processed.data.compacted();

  LabelSets labels;
  const std::string labels_kind = ini.get_or(s, "labels_kind", "file");
  if (labels_kind == "anova") {
    labels = anova_labels(observed);
  } else {
    const std::string labels_path = ini.get(s, "labels");
    manifest.record_read(labels_path);
    labels = read_labels_csv(labels_path, observed);
  }

  StructuredConfig cfg = nn_config_from(ini, s, observed.genotypes.n_markers(),
                                        static_cast<int>(observed.environments.env_vector.cols()));
  std::vector<TraceRow> tg, te, tge;
  const MixinnModel model = structured_fit(observed, labels, cfg, &tg, &te, &tge);
  save_mixinn(out, model);
  write_trace_csv(out + "/trace_fg.csv", tg);
  write_trace_csv(out + "/trace_fe.csv", te);
  write_trace_csv(out + "/trace_fge.csv", tge);
  for (const auto& name : {"fg.bin", "fe.bin", "fge.bin", "mixinn_meta.csv", "trace_fg.csv",
                           "trace_fe.csv", "trace_fge.csv"})
    manifest.record_write(out + "/" + std::string(name));
  finish_run(ini, s, out, manifest);
  return 0;
}

int cmd_predict(const CommonArgs& args) {
  Ini ini = load_config(args, "predict");
  const std::string s = "predict";
  ini.require_known_keys(s, {"data_dir", "models_dir", "cells", "out", "test_features"});
  const std::string data_dir = ini.get(s, "data_dir");
  const std::string models_dir = ini.get(s, "models_dir");
  const std::string cells_path = ini.get(s, "cells");
  const std::string out = out_dir(ini, s);
  Manifest manifest;
  const ProcessedData processed = load_processed(data_dir, &manifest);
  const MixinnModel model = load_mixinn(models_dir);
  for (const auto& name : {"fg.bin", "fe.bin", "fge.bin", "mixinn_meta.csv"})
    manifest.record_read(models_dir + "/" + std::string(name));
  manifest.record_read(cells_path);

  // feature lookup covers the training environments plus, optionally, a
  // processed test-environment table
  EnvironmentTable envs = processed.data.environments;
  const std::string test_features = ini.get_or(s, "test_features", "");
  if (!test_features.empty()) {
    const Dataset test = load_processed_test(test_features, processed, &manifest);
    for (int j = 0; j < test.environments.n(); ++j) {
      envs.ids.push_back(test.environments.ids[j]);
      envs.weather.push_back(test.environments.weather[j]);
      envs.coords.push_back(test.environments.coords[j]);
    }
    const Eigen::Index d_e = envs.env_vector.cols();
    Eigen::MatrixXd merged(envs.ids.size(), d_e);
    merged.topRows(processed.data.environments.n()) = processed.data.environments.env_vector;
    merged.bottomRows(test.environments.n()) = test.environments.env_vector;
    envs.env_vector = std::move(merged);
    envs.rebuild_index();
  }

  const auto cells = cells_from_records(read_trials_csv(cells_path));
  PredictionSet preds;
  bool has_truth = true;
  for (const auto& c : cells) {
    const int gi = processed.data.genotypes.find(c.genotype_id);
    const int ej = envs.find(c.environment_id);
    if (gi < 0) throw ValidationError("no marker row for genotype " + c.genotype_id);
    if (ej < 0) throw ValidationError("no environment features for " + c.environment_id);
    const double pred = predict_yield(model, processed.data.genotypes.markers.row(gi).transpose(),
                                      envs.env_vector.row(ej).transpose());
    if (is_missing(c.y_true)) has_truth = false;
    preds.rows.push_back({c.genotype_id, c.environment_id, pred, c.y_true});
  }
  write_predictions_csv(out + "/predictions.csv", preds, has_truth);
  manifest.record_write(out + "/predictions.csv");
  finish_run(ini, s, out, manifest);
  return 0;
}

int cmd_evaluate(const CommonArgs& args) {
  Ini ini = load_config(args, "evaluate");
  const std::string s = "evaluate";
  ini.require_known_keys(s, {"predictions", "out", "min_genotypes", "scenario", "train_trials"});
  const std::string pred_path = ini.get(s, "predictions");
  const std::string out = out_dir(ini, s);
  Manifest manifest;
  manifest.record_read(pred_path);
  PredictionSet preds = read_predictions_csv(pred_path);
  preds.validate();

  const std::string scenario = ini.get_or(s, "scenario", "");
  if (!scenario.empty()) {
    if (scenario != "nE" && scenario != "nGE")
      throw ValidationError("scenario must be nE or nGE");
    const std::string train_trials = ini.get(s, "train_trials");
    manifest.record_read(train_trials);
    std::set<std::string> train_genotypes;
    for (const auto& r : read_trials_csv(train_trials)) train_genotypes.insert(r.genotype_id);
    PredictionSet filtered;
    for (const auto& r : preds.rows) {
      const bool known = train_genotypes.count(r.genotype_id) > 0;
      if ((scenario == "nE") == known) filtered.rows.push_back(r);
    }
    preds = std::move(filtered);
    if (preds.rows.empty()) throw ValidationError("scenario filter left no predictions");
  }

  const RegressionMetrics rm = regression_metrics(preds);
  const RankingMetrics km =
      ranking_metrics(preds, static_cast<int>(ini.get_long(s, "min_genotypes", 3)));
  write_metrics_csv(out + "/metrics.csv", rm, km);
  manifest.record_write(out + "/metrics.csv");
  finish_run(ini, s, out, manifest);
  return 0;
}

int cmd_select(const CommonArgs& args) {
  Ini ini = load_config(args, "select");
  const std::string s = "select";
  ini.require_known_keys(s, {"predictions", "out", "fraction", "fractions", "coverage_min"});
  const std::string pred_path = ini.get(s, "predictions");
  const std::string out = out_dir(ini, s);
  Manifest manifest;
  manifest.record_read(pred_path);
  PredictionSet preds = read_predictions_csv(pred_path);
  preds.validate();
  const double coverage_min = ini.get_double(s, "coverage_min", 0.90);
  const double fraction = ini.get_double(s, "fraction", 0.2);

  std::vector<SelectionReport> reports;
  reports.push_back(select_global(preds, fraction, coverage_min));
  reports.push_back(select_per_environment(preds, fraction));
  write_selection_csv(out + "/selection.csv", reports);
  manifest.record_write(out + "/selection.csv");

  const std::vector<double> fractions = ini.get_double_list(s, "fractions");
  if (!fractions.empty()) {
    const auto rows = gain_curve({preds}, fractions);
    write_gain_curve_csv(out + "/gain_curve.csv", rows);
    manifest.record_write(out + "/gain_curve.csv");
  }
  finish_run(ini, s, out, manifest);
  return 0;
}

int cmd_tune(const CommonArgs& args) {
  Ini ini = load_config(args, "tune");
  const std::string s = "tune";
  ini.require_known_keys(s, {"data_dir", "out", "target", "budget", "criterion",
                             "replicates_per_setting", "seed", "nodes", "layers",
                             "learning_rates", "weight_decays"});
  const std::string data_dir = ini.get(s, "data_dir");
  const std::string out = out_dir(ini, s);
  Manifest manifest;
  const ProcessedData processed = load_processed(data_dir, &manifest);

  TuneSpec spec = TuneSpec::defaults_for(ini.get_or(s, "target", "y_ge"));
  if (ini.has(s, "nodes")) {
    spec.nodes.clear();
    for (double v : ini.get_double_list(s, "nodes")) spec.nodes.push_back(static_cast<int>(v));
  }
  if (ini.has(s, "layers")) {
    spec.layers.clear();
    for (double v : ini.get_double_list(s, "layers")) spec.layers.push_back(static_cast<int>(v));
  }
  if (ini.has(s, "learning_rates")) spec.learning_rates = ini.get_double_list(s, "learning_rates");
  if (ini.has(s, "weight_decays")) spec.weight_decays = ini.get_double_list(s, "weight_decays");
  spec.budget = static_cast<int>(ini.get_long(s, "budget", spec.budget));
  spec.criterion = ini.get_or(s, "criterion", spec.criterion);
  spec.replicates_per_setting = static_cast<int>(
      ini.get_long(s, "replicates_per_setting", spec.replicates_per_setting));
  spec.seed = ini.get_u64(s, "seed", 0);

  run_tune(processed, spec, out, &manifest);
  finish_run(ini, s, out, manifest);
  return 0;
}

int cmd_experiment(const CommonArgs& args) {
  Ini ini = load_config(args, "experiment");
  const std::string s = "experiment";
  ini.require_known_keys(s, {"data_dir", "out", "models", "folds", "replicates", "seed",
                             "profile", "test_trials", "workers", "max_cells",
                             "center_kernels"});
  const std::string data_dir = ini.get(s, "data_dir");
  const std::string out = out_dir(ini, s);
  Manifest manifest;
  const ProcessedData processed = load_processed(data_dir, &manifest);

  ExperimentPlan plan;
  for (const auto& name : ini.get_list(s, "models"))
    plan.models.push_back(model_kind_from_string(name));
  if (plan.models.empty())
    throw ValidationError("experiment needs a models list, e.g. models = mixinn, gblup");
  plan.n_folds = static_cast<int>(ini.get_long(s, "folds", 8));
  plan.replicates = static_cast<int>(ini.get_long(s, "replicates", 1));
  plan.master_seed = ini.get_u64(s, "seed", 0);
  plan.hyper.nn_profile = ini.get_or(s, "profile", "desk");
  plan.hyper.kernels.max_cells =
      static_cast<int>(ini.get_long(s, "max_cells", plan.hyper.kernels.max_cells));
  plan.hyper.center_kernels = ini.get_bool(s, "center_kernels", true);
  const std::string test_trials = ini.get_or(s, "test_trials", "");
  if (!test_trials.empty()) plan.test_trials_path = test_trials;

  run_experiment(processed, plan, out, &manifest);
  finish_run(ini, s, out, manifest);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"genotype-by-environment prediction toolkit"};
  app.require_subcommand(1);

  CommonArgs args;
  const std::vector<std::pair<std::string, int (*)(const CommonArgs&)>> commands = {
      {"simulate", cmd_simulate}, {"ingest", cmd_ingest},   {"decompose", cmd_decompose},
      {"train", cmd_train},       {"predict", cmd_predict}, {"evaluate", cmd_evaluate},
      {"select", cmd_select},     {"tune", cmd_tune},       {"experiment", cmd_experiment}};

  std::map<std::string, int (*)(const CommonArgs&)> dispatch;
  for (const auto& [name, fn] : commands) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", args.config_path, "configuration file (INI)");
    sub->add_option("--seed", [&args](const CLI::results_t& r) {
      args.seed = std::stoull(r[0]);
      return true;
    }, "master seed override");
    sub->add_option("--profile", [&args](const CLI::results_t& r) {
      args.profile = r[0];
      return true;
    }, "hyperparameter profile: desk or paper");
    sub->add_option("--out", [&args](const CLI::results_t& r) {
      args.out = r[0];
      return true;
    }, "output directory");
    dispatch[name] = fn;
  }

  try {
    CLI11_PARSE(app, argc, argv);
    for (const auto& [name, fn] : dispatch)
      if (app.got_subcommand(name)) return fn(args);
    std::cerr << "no subcommand\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
