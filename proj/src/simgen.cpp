#include "gxe/simgen.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <filesystem>
#include <set>

#include "gxe/rng.hpp"

namespace gxe {

void SimConfig::validate() const {
  if (n_g < 2 || n_e < 2) throw ValidationError("simulate: need n_g >= 2 and n_e >= 2");
  if (d_g < 1 || d_e < 1) throw ValidationError("simulate: feature dimensions must be >= 1");
  if (r_true < 1 || r_true > n_e) throw ValidationError("simulate: need 1 <= r_true <= n_e");
  if (replicates < 1) throw ValidationError("simulate: replicates must be >= 1");
  if (missing_cell_fraction < 0.0 || missing_cell_fraction >= 1.0)
    throw ValidationError("simulate: missing_cell_fraction must be in [0, 1)");
  if (n_causal_markers < 1 || n_causal_markers * (1 + r_true) > d_g)
    throw ValidationError("simulate: need n_causal_markers * (1 + r_true) <= d_g");
  if (n_causal_env_features < 0 || n_causal_env_features > d_e - r_true)
    throw ValidationError("simulate: need n_causal_env_features <= d_e - r_true");
  if (psi_range.first < 0.0 || psi_range.second < psi_range.first)
    throw ValidationError("simulate: invalid psi_range");
  if (resid_range.first < 0.0 || resid_range.second < resid_range.first)
    throw ValidationError("simulate: invalid resid_range");
  const bool all_zero = sigma_g2 == 0.0 && lambda_scale == 0.0 && psi_range.second == 0.0 &&
                        resid_range.second == 0.0;
  if (all_zero && missing_cell_fraction > 0.0)
    throw ValidationError("simulate: all-zero variances with missing cells is degenerate");
}

namespace {

std::string genotype_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "G%04d", i + 1);
  return buf;
}

std::string environment_name(int j) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "E%03d", j + 1);
  return buf;
}

Eigen::VectorXd sparse_weights(int dim, int n_causal, const std::vector<std::size_t>& pos,
                               Rng& rng, double scale) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(dim);
  for (int k = 0; k < n_causal; ++k)
    w[static_cast<Eigen::Index>(pos[static_cast<std::size_t>(k)])] = rng.normal() * scale;
  return w;
}

}  // namespace

Simulated simulate(const SimConfig& cfg) {
  cfg.validate();
  Simulated sim;
  GroundTruth& gt = sim.truth;
  gt.mu = cfg.mu;

  // independent sub-streams so that changing one stage leaves the others intact
  Rng rng_markers(derive_seed(cfg.seed, "sim.markers"));
  Rng rng_geffects(derive_seed(cfg.seed, "sim.geffects"));
  Rng rng_env(derive_seed(cfg.seed, "sim.env"));
  Rng rng_eweights(derive_seed(cfg.seed, "sim.eweights"));
  Rng rng_lambda(derive_seed(cfg.seed, "sim.lambda"));
  Rng rng_scores(derive_seed(cfg.seed, "sim.scores"));
  Rng rng_psi(derive_seed(cfg.seed, "sim.psi"));
  Rng rng_resid(derive_seed(cfg.seed, "sim.resid"));
  Rng rng_cells(derive_seed(cfg.seed, "sim.cells"));

  // markers: i.i.d. uniform on {-1, 0, 1}
  Eigen::MatrixXd markers(cfg.n_g, cfg.d_g);
  for (int i = 0; i < cfg.n_g; ++i)
    for (int c = 0; c < cfg.d_g; ++c)
      markers(i, c) = static_cast<double>(rng_markers.uniform_int(3)) - 1.0;

  // causal marker positions: one disjoint set for the main effect and one per factor
  Rng rng_pos(derive_seed(cfg.seed, "sim.positions"));
  auto all_pos = rng_pos.sample_without_replacement(
      static_cast<std::size_t>(cfg.d_g),
      static_cast<std::size_t>(cfg.n_causal_markers) * (1 + cfg.r_true));
  rng_pos.shuffle(all_pos);
  std::vector<std::size_t> main_pos(all_pos.begin(), all_pos.begin() + cfg.n_causal_markers);

  // genotype main effect: sparse marker signal rescaled to sample variance sigma_g2
  Eigen::VectorXd beta = sparse_weights(cfg.d_g, cfg.n_causal_markers, main_pos, rng_geffects, 1.0);
  Eigen::VectorXd g_raw = markers * beta;
  g_raw.array() -= g_raw.mean();
  const double g_var = g_raw.squaredNorm() / static_cast<double>(cfg.n_g - 1);
  if (cfg.sigma_g2 > 0.0) {
    if (g_var <= 0.0)
      throw ValidationError("simulate: degenerate marker signal, cannot scale to sigma_g2");
    const double s = std::sqrt(cfg.sigma_g2 / g_var);
    gt.G = g_raw * s;
    gt.marker_effects = beta * s;
  } else {
    gt.G = Eigen::VectorXd::Zero(cfg.n_g);
    gt.marker_effects = Eigen::VectorXd::Zero(cfg.d_g);
  }

  // environment features and main effect
  Eigen::MatrixXd env_features(cfg.n_e, cfg.d_e);
  for (int j = 0; j < cfg.n_e; ++j)
    for (int c = 0; c < cfg.d_e; ++c) env_features(j, c) = rng_env.normal();

  std::vector<std::size_t> env_pos;
  if (cfg.n_causal_env_features > 0) {
    Rng rng_epos(derive_seed(cfg.seed, "sim.env_positions"));
    // the last r_true columns are reserved for the loading link
    env_pos = rng_epos.sample_without_replacement(
        static_cast<std::size_t>(cfg.d_e - cfg.r_true),
        static_cast<std::size_t>(cfg.n_causal_env_features));
  }
  gt.env_effect_weights =
      sparse_weights(cfg.d_e, cfg.n_causal_env_features, env_pos, rng_eweights,
                     cfg.n_causal_env_features > 0
                         ? 1.0 / std::sqrt(static_cast<double>(cfg.n_causal_env_features))
                         : 1.0);

  // factor loadings
  gt.Lambda.resize(cfg.n_e, cfg.r_true);
  for (int j = 0; j < cfg.n_e; ++j)
    for (int b = 0; b < cfg.r_true; ++b) gt.Lambda(j, b) = rng_lambda.normal(0.0, cfg.lambda_scale);

  // link: the last r_true feature columns observe the (standardized) loadings
  // plus configurable noise, making the interaction learnable from features
  for (int b = 0; b < cfg.r_true; ++b) {
    const int col = cfg.d_e - cfg.r_true + b;
    Eigen::VectorXd lam = gt.Lambda.col(b);
    const double m = lam.mean();
    const double sd = std::sqrt((lam.array() - m).square().sum() /
                                std::max(1.0, static_cast<double>(cfg.n_e - 1)));
    if (sd > 0.0) {
      const double noise = std::clamp(cfg.env_link_noise, 0.0, 1.0);
      for (int j = 0; j < cfg.n_e; ++j)
        env_features(j, col) = std::sqrt(1.0 - noise) * (lam[j] - m) / sd +
                               std::sqrt(noise) * env_features(j, col);
    }
  }

  Eigen::VectorXd e_raw = env_features * gt.env_effect_weights;
  gt.E = e_raw.array() - e_raw.mean();

  // factor scores from markers, empirically whitened so that the sample
  // covariance of the factor part is exactly Lambda Lambda^T
  Eigen::MatrixXd scores(cfg.n_g, cfg.r_true);
  {
    Eigen::MatrixXd z_raw(cfg.n_g, cfg.r_true);
    for (int b = 0; b < cfg.r_true; ++b) {
      std::vector<std::size_t> pos(all_pos.begin() + (b + 1) * cfg.n_causal_markers,
                                   all_pos.begin() + (b + 2) * cfg.n_causal_markers);
      Eigen::VectorXd w = sparse_weights(cfg.d_g, cfg.n_causal_markers, pos, rng_scores, 1.0);
      z_raw.col(b) = markers * w;
      z_raw.col(b).array() -= z_raw.col(b).mean();
    }
    Eigen::MatrixXd cov = z_raw.transpose() * z_raw / static_cast<double>(cfg.n_g - 1);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success)
      throw ValidationError("simulate: factor score covariance is singular; "
                            "increase n_causal_markers or n_g");
    scores = llt.matrixL().solve(z_raw.transpose()).transpose();
  }

  // environment-specific variances
  gt.Psi.resize(cfg.n_e);
  gt.resid_vars.resize(cfg.n_e);
  for (int j = 0; j < cfg.n_e; ++j) gt.Psi[j] = rng_psi.uniform(cfg.psi_range.first, cfg.psi_range.second);
  for (int j = 0; j < cfg.n_e; ++j)
    gt.resid_vars[j] = rng_resid.uniform(cfg.resid_range.first, cfg.resid_range.second);

  // GE: factor part plus environment-specific noise
  gt.GE = scores * gt.Lambda.transpose();
  for (int i = 0; i < cfg.n_g; ++i)
    for (int j = 0; j < cfg.n_e; ++j) gt.GE(i, j) += rng_psi.normal(0.0, std::sqrt(gt.Psi[j]));

  // cell deletion; never strands a genotype or an environment
  const int n_cells = cfg.n_g * cfg.n_e;
  const int n_delete = static_cast<int>(
      std::floor(cfg.missing_cell_fraction * static_cast<double>(n_cells) + 0.5));
  std::vector<bool> deleted(static_cast<std::size_t>(n_cells), false);
  if (n_delete > 0) {
    const int max_attempts = 1000;
    bool ok = false;
    for (int attempt = 0; attempt < max_attempts && !ok; ++attempt) {
      std::fill(deleted.begin(), deleted.end(), false);
      auto del = rng_cells.sample_without_replacement(static_cast<std::size_t>(n_cells),
                                                      static_cast<std::size_t>(n_delete));
      for (auto c : del) deleted[c] = true;
      std::vector<int> g_left(cfg.n_g, 0), e_left(cfg.n_e, 0);
      for (int i = 0; i < cfg.n_g; ++i)
        for (int j = 0; j < cfg.n_e; ++j)
          if (!deleted[static_cast<std::size_t>(i) * cfg.n_e + j]) {
            ++g_left[i];
            ++e_left[j];
          }
      ok = true;
      for (int i = 0; i < cfg.n_g; ++i) ok = ok && g_left[i] > 0;
      for (int j = 0; j < cfg.n_e; ++j) ok = ok && e_left[j] > 0;
    }
    if (!ok)
      throw ValidationError("simulate: could not delete cells without stranding a "
                            "genotype or environment");
  }

  // assemble the dataset
  Dataset& d = sim.dataset;
  d.genotypes.markers = markers;
  for (int i = 0; i < cfg.n_g; ++i) d.genotypes.ids.push_back(genotype_name(i));
  d.genotypes.rebuild_index();

  EnvironmentTable& env = d.environments;
  int n_w, n_s, n_m;
  if (cfg.d_e >= 23) {
    n_w = cfg.d_e - 22;
    n_s = 20;
    n_m = 2;
  } else if (cfg.d_e >= 3) {
    n_w = cfg.d_e - 2;
    n_s = 0;
    n_m = 2;
  } else {
    n_w = cfg.d_e;
    n_s = 0;
    n_m = 0;
  }
  env.n_weather_features = n_w;
  env.soil.resize(cfg.n_e, n_s);
  env.management.resize(cfg.n_e, n_m);
  for (int j = 0; j < cfg.n_e; ++j) {
    env.ids.push_back(environment_name(j));
    // constant single-day series; the seasonal mean then equals the feature value
    Eigen::VectorXd w(n_w);
    for (int f = 0; f < n_w; ++f) w[f] = env_features(j, f);
    env.weather.push_back({{0, std::move(w)}});
    for (int c = 0; c < n_s; ++c) env.soil(j, c) = env_features(j, n_w + c);
    for (int c = 0; c < n_m; ++c) env.management(j, c) = env_features(j, n_w + n_s + c);
    env.coords.push_back(LatLon{static_cast<double>(j), 0.0});
  }
  env.rebuild_index();

  for (int i = 0; i < cfg.n_g; ++i) {
    for (int j = 0; j < cfg.n_e; ++j) {
      if (deleted[static_cast<std::size_t>(i) * cfg.n_e + j]) continue;
      for (int k = 1; k <= cfg.replicates; ++k) {
        TrialRecord r;
        r.genotype_id = d.genotypes.ids[i];
        r.environment_id = env.ids[j];
        r.year = 2014 + (j % 8);
        r.replicate = k;
        const double eps = gt.resid_vars[j] > 0.0
                               ? rng_resid.normal(0.0, std::sqrt(gt.resid_vars[j]))
                               : 0.0;
        r.yield = gt.mu + gt.G[i] + gt.E[j] + gt.GE(i, j) + eps;
        if (r.yield < 0.0)
          throw ValidationError("simulate: negative yield produced; raise mu or reduce "
                                "effect variances");
        d.records.push_back(std::move(r));
      }
    }
  }
  return sim;
}

void write_simulated(const std::string& dir, const Simulated& sim) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const Dataset& d = sim.dataset;
  const GroundTruth& gt = sim.truth;

  write_trials_csv(dir + "/trials.csv", d.records);
  write_markers_csv(dir + "/markers.csv", d.genotypes);
  write_weather_csv(dir + "/weather.csv", d.environments);
  write_soil_csv(dir + "/soil.csv", d.environments);
  write_management_csv(dir + "/management.csv", d.environments);

  {
    CsvWriter w(dir + "/truth_scalars.csv");
    w.write_row({"name", "value"});
    w.write_row({"mu", format_double(gt.mu)});
  }
  {
    CsvWriter w(dir + "/truth_genotype_effects.csv");
    w.write_row({"genotype_id", "g"});
    for (int i = 0; i < d.genotypes.n(); ++i)
      w.write_row({d.genotypes.ids[i], format_double(gt.G[i])});
  }
  {
    CsvWriter w(dir + "/truth_env_effects.csv");
    w.write_row({"environment_id", "e"});
    for (int j = 0; j < d.environments.n(); ++j)
      w.write_row({d.environments.ids[j], format_double(gt.E[j])});
  }
  {
    CsvWriter w(dir + "/truth_ge_effects.csv");
    w.write_row({"genotype_id", "environment_id", "ge"});
    for (int i = 0; i < d.genotypes.n(); ++i)
      for (int j = 0; j < d.environments.n(); ++j)
        w.write_row({d.genotypes.ids[i], d.environments.ids[j], format_double(gt.GE(i, j))});
  }
  {
    CsvWriter w(dir + "/truth_lambda.csv");
    std::vector<std::string> header{"environment_id"};
    for (int b = 0; b < gt.Lambda.cols(); ++b) header.push_back("l" + std::to_string(b + 1));
    w.write_row(header);
    for (int j = 0; j < d.environments.n(); ++j) {
      std::vector<std::string> row{d.environments.ids[j]};
      for (int b = 0; b < gt.Lambda.cols(); ++b) row.push_back(format_double(gt.Lambda(j, b)));
      w.write_row(row);
    }
  }
  {
    CsvWriter w(dir + "/truth_variances.csv");
    w.write_row({"environment_id", "psi", "resid_var"});
    for (int j = 0; j < d.environments.n(); ++j)
      w.write_row({d.environments.ids[j], format_double(gt.Psi[j]),
                   format_double(gt.resid_vars[j])});
  }
  {
    CsvWriter w(dir + "/truth_marker_effects.csv");
    w.write_row({"marker", "effect"});
    for (Eigen::Index c = 0; c < gt.marker_effects.size(); ++c)
      if (gt.marker_effects[c] != 0.0)
        w.write_row({"m" + std::to_string(c + 1), format_double(gt.marker_effects[c])});
  }
  {
    CsvWriter w(dir + "/truth_env_weights.csv");
    w.write_row({"feature", "weight"});
    for (Eigen::Index c = 0; c < gt.env_effect_weights.size(); ++c)
      if (gt.env_effect_weights[c] != 0.0)
        w.write_row({"v" + std::to_string(c + 1), format_double(gt.env_effect_weights[c])});
  }
}

}  // namespace gxe
