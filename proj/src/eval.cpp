#include "gxe/eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "gxe/fa.hpp"
#include "gxe/stats.hpp"

namespace gxe {

void PredictionSet::validate() const {
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : rows) {
    if (!std::isfinite(r.y_pred) || !std::isfinite(r.y_true))
      throw ValidationError("non-finite prediction for " + r.genotype_id + "/" +
                            r.environment_id);
    if (!seen.emplace(r.genotype_id, r.environment_id).second)
      throw ValidationError("duplicate prediction for " + r.genotype_id + "/" +
                            r.environment_id);
  }
}

RegressionMetrics regression_metrics(const PredictionSet& p) {
  if (p.rows.size() < 2)
    throw ValidationError("regression metrics need at least 2 rows");
  RegressionMetrics m;
  std::vector<double> pred, truth;
  pred.reserve(p.rows.size());
  truth.reserve(p.rows.size());
  double se = 0.0, ae = 0.0;
  for (const auto& r : p.rows) {
    const double e = r.y_pred - r.y_true;
    se += e * e;
    ae += std::fabs(e);
    pred.push_back(r.y_pred);
    truth.push_back(r.y_true);
  }
  const double n = static_cast<double>(p.rows.size());
  m.rmse = std::sqrt(se / n);
  m.mae = ae / n;
  m.pearson_r = pearson(pred, truth);
  return m;
}

namespace {

std::map<std::string, std::vector<std::size_t>> rows_by_environment(const PredictionSet& p) {
  std::map<std::string, std::vector<std::size_t>> by_env;
  for (std::size_t i = 0; i < p.rows.size(); ++i)
    by_env[p.rows[i].environment_id].push_back(i);
  return by_env;
}

}  // namespace

RankingMetrics ranking_metrics(const PredictionSet& p, int min_genotypes) {
  RankingMetrics out;
  const auto by_env = rows_by_environment(p);
  double r_sum = 0.0, rho_sum = 0.0;
  int n_used = 0;
  for (const auto& [env, idx] : by_env) {
    RankingMetrics::PerEnv pe;
    pe.environment_id = env;
    pe.n_genotypes = static_cast<int>(idx.size());
    if (pe.n_genotypes < min_genotypes) {
      out.excluded_environments.push_back(env);
      out.per_environment.push_back(pe);
      continue;
    }
    std::vector<double> pred, truth;
    for (auto i : idx) {
      pred.push_back(p.rows[i].y_pred);
      truth.push_back(p.rows[i].y_true);
    }
    pe.r = pearson(pred, truth);
    pe.rho = spearman(pred, truth);
    if (pe.r && pe.rho) {
      r_sum += *pe.r;
      rho_sum += *pe.rho;
      ++n_used;
    } else {
      out.excluded_environments.push_back(env);  // degenerate: zero variance
    }
    out.per_environment.push_back(pe);
  }
  if (n_used == 0)
    throw ValidationError("no environment meets the ranking-metric minimum");
  out.r_j = r_sum / static_cast<double>(n_used);
  out.rho_j = rho_sum / static_cast<double>(n_used);
  return out;
}

namespace {

// round-half-up, at least one
long selection_size(double fraction, long eligible) {
  return std::max(1L, static_cast<long>(std::floor(fraction * static_cast<double>(eligible) + 0.5)));
}

double mean_yield(const PredictionSet& p) {
  double s = 0.0;
  for (const auto& r : p.rows) s += r.y_true;
  return s / static_cast<double>(p.rows.size());
}

}  // namespace

SelectionReport select_global(const PredictionSet& p, double fraction, double coverage_min) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw ValidationError("selection fraction must be in (0, 1]");
  if (p.rows.empty()) throw ValidationError("empty prediction set");

  std::set<std::string> envs;
  std::map<std::string, std::set<std::string>> geno_envs;
  for (const auto& r : p.rows) {
    envs.insert(r.environment_id);
    geno_envs[r.genotype_id].insert(r.environment_id);
  }
  // genotypes missing in more than (1 - coverage_min) of the test environments
  // are excluded from global selection
  std::set<std::string> eligible;
  for (const auto& [g, ge] : geno_envs) {
    const double coverage =
        static_cast<double>(ge.size()) / static_cast<double>(envs.size());
    if (coverage >= coverage_min) eligible.insert(g);
  }
  if (eligible.empty())
    throw ValidationError("no genotype meets the coverage requirement for global selection");

  std::vector<PredTriple> triples;
  for (const auto& r : p.rows)
    if (eligible.count(r.genotype_id))
      triples.push_back({r.genotype_id, r.environment_id, r.y_pred});
  const RankingFit rf = fit_ranking_model(triples);

  std::vector<std::pair<std::string, double>> ranked;
  for (std::size_t i = 0; i < rf.genotype_ids.size(); ++i)
    ranked.emplace_back(rf.genotype_ids[i], rf.genetic_effects[static_cast<Eigen::Index>(i)]);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;  // ties: ascending genotype_id
  });

  SelectionReport rep;
  rep.strategy = "global";
  rep.fraction = fraction;
  rep.eligible_count = static_cast<long>(eligible.size());
  const long k = selection_size(fraction, rep.eligible_count);
  std::set<std::string> selected;
  for (long i = 0; i < k; ++i) {
    rep.selected_ids.push_back(ranked[static_cast<std::size_t>(i)].first);
    selected.insert(ranked[static_cast<std::size_t>(i)].first);
  }

  double s = 0.0;
  long n = 0;
  for (const auto& r : p.rows) {
    if (selected.count(r.genotype_id)) {
      s += r.y_true;
      ++n;
    }
  }
  rep.mean_yield_selected = s / static_cast<double>(n);
  rep.mean_yield_all = mean_yield(p);
  rep.gain = rep.mean_yield_selected - rep.mean_yield_all;
  return rep;
}

SelectionReport select_per_environment(const PredictionSet& p, double fraction) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw ValidationError("selection fraction must be in (0, 1]");
  if (p.rows.empty()) throw ValidationError("empty prediction set");

  SelectionReport rep;
  rep.strategy = "per_environment";
  rep.fraction = fraction;
  double s = 0.0;
  long n = 0;
  for (const auto& [env, idx] : rows_by_environment(p)) {
    if (idx.empty()) continue;
    std::vector<std::size_t> order = idx;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (p.rows[a].y_pred != p.rows[b].y_pred) return p.rows[a].y_pred > p.rows[b].y_pred;
      return p.rows[a].genotype_id < p.rows[b].genotype_id;
    });
    const long k = selection_size(fraction, static_cast<long>(idx.size()));
    for (long i = 0; i < k; ++i) {
      const auto& r = p.rows[order[static_cast<std::size_t>(i)]];
      rep.selected_ids.push_back(r.genotype_id + "@" + r.environment_id);
      s += r.y_true;
      ++n;
    }
    rep.eligible_count += static_cast<long>(idx.size());
  }
  rep.mean_yield_selected = s / static_cast<double>(n);
  rep.mean_yield_all = mean_yield(p);
  rep.gain = rep.mean_yield_selected - rep.mean_yield_all;
  return rep;
}

std::vector<GainCurveRow> gain_curve(const std::vector<PredictionSet>& replicates,
                                     const std::vector<double>& fractions) {
  if (fractions.empty()) throw ValidationError("gain_curve needs at least one fraction");
  if (replicates.empty()) throw ValidationError("gain_curve needs at least one replicate");
  std::vector<GainCurveRow> rows;
  for (const std::string& strategy : {std::string("global"), std::string("per_environment")}) {
    for (double f : fractions) {
      std::vector<double> gains;
      for (const auto& p : replicates) {
        const SelectionReport rep =
            strategy == "global" ? select_global(p, f) : select_per_environment(p, f);
        gains.push_back(rep.gain);
      }
      GainCurveRow row;
      row.strategy = strategy;
      row.fraction = f;
      row.gain = mean(gains);
      if (gains.size() > 1) {
        const double sd = std::sqrt(sample_variance(gains));
        const double half = 1.959963984540054 * sd / std::sqrt(static_cast<double>(gains.size()));
        row.ci95_low = row.gain - half;
        row.ci95_high = row.gain + half;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

ModelComparison compare_models(
    const std::map<std::string, std::map<std::string, std::vector<double>>>& replicate_metrics,
    const std::map<std::string, bool>& higher_is_better,
    const std::map<std::string, std::map<std::string, double>>& literature_values) {
  ModelComparison cmp;
  for (const auto& [metric, models] : replicate_metrics) {
    std::string best_model;
    double best_mean = 0.0;
    const bool higher = higher_is_better.count(metric) ? higher_is_better.at(metric) : true;
    for (const auto& [model, values] : models) {
      if (values.size() < 2)
        throw ValidationError("compare_models needs >= 2 replicates per model");
      ModelComparison::Summary s;
      s.model = model;
      s.metric = metric;
      s.mean = mean(values);
      s.sd = std::sqrt(sample_variance(values));
      cmp.summaries.push_back(s);
      if (best_model.empty() || (higher ? s.mean > best_mean : s.mean < best_mean)) {
        best_model = model;
        best_mean = s.mean;
      }
    }
    for (auto& s : cmp.summaries)
      if (s.metric == metric && s.model == best_model) s.best = true;

    for (auto a = models.begin(); a != models.end(); ++a) {
      for (auto b = std::next(a); b != models.end(); ++b) {
        const TTestResult t = welch_t_test(a->second, b->second);
        cmp.pairwise.push_back({metric, a->first, b->first, t.t, t.df, t.p});
      }
    }
    const auto lit = literature_values.find(metric);
    if (lit != literature_values.end()) {
      for (const auto& [model, values] : models) {
        for (const auto& [lit_model, ref] : lit->second) {
          const TTestResult t = one_sample_t_test(values, ref);
          cmp.literature.push_back({metric, model + " vs " + lit_model, ref, t.t, t.df, t.p});
        }
      }
    }
  }
  return cmp;
}

// ---- I/O --------------------------------------------------------------------

void write_predictions_csv(const std::string& path, const PredictionSet& p, bool with_truth) {
  CsvWriter w(path);
  if (with_truth)
    w.write_row({"genotype_id", "environment_id", "y_pred", "y_true"});
  else
    w.write_row({"genotype_id", "environment_id", "y_pred"});
  for (const auto& r : p.rows) {
    std::vector<std::string> row{r.genotype_id, r.environment_id, format_double(r.y_pred)};
    if (with_truth) row.push_back(format_double(r.y_true));
    w.write_row(row);
  }
}

PredictionSet read_predictions_csv(const std::string& path) {
  CsvReader reader(path);
  std::vector<std::string> row;
  if (!reader.next_row(row)) reader.fail("empty predictions file");
  const bool with_truth = row.size() == 4;
  if (row[0] != "genotype_id" || row[1] != "environment_id" || row[2] != "y_pred" ||
      (with_truth && row[3] != "y_true") || row.size() > 4)
    reader.fail("malformed predictions header");
  PredictionSet p;
  while (reader.next_row(row)) {
    if (row.size() != (with_truth ? 4u : 3u)) reader.fail("wrong field count");
    PredRow r;
    r.genotype_id = row[0];
    r.environment_id = row[1];
    r.y_pred = reader.parse_double(row[2], "y_pred");
    r.y_true = with_truth ? reader.parse_double(row[3], "y_true") : missing_value();
    p.rows.push_back(std::move(r));
  }
  return p;
}

void write_metrics_csv(const std::string& path, const RegressionMetrics& rm,
                       const RankingMetrics& km) {
  CsvWriter w(path);
  w.write_row({"scope", "metric", "value"});
  w.write_row({"global", "rmse", format_double(rm.rmse)});
  w.write_row({"global", "mae", format_double(rm.mae)});
  w.write_row({"global", "pearson_r", rm.pearson_r ? format_double(*rm.pearson_r) : "undefined"});
  w.write_row({"global", "r_j", format_double(km.r_j)});
  w.write_row({"global", "rho_j", format_double(km.rho_j)});
  for (const auto& pe : km.per_environment) {
    w.write_row({pe.environment_id, "n_genotypes", std::to_string(pe.n_genotypes)});
    w.write_row({pe.environment_id, "r", pe.r ? format_double(*pe.r) : "undefined"});
    w.write_row({pe.environment_id, "rho", pe.rho ? format_double(*pe.rho) : "undefined"});
  }
  for (const auto& env : km.excluded_environments)
    w.write_row({env, "excluded", "1"});
}

void write_selection_csv(const std::string& path, const std::vector<SelectionReport>& reports) {
  CsvWriter w(path);
  w.write_row({"strategy", "fraction", "eligible_count", "mean_yield_selected",
               "mean_yield_all", "gain", "selected"});
  for (const auto& rep : reports) {
    std::string ids;
    for (std::size_t i = 0; i < rep.selected_ids.size(); ++i) {
      if (i) ids += ";";
      ids += rep.selected_ids[i];
    }
    w.write_row({rep.strategy, format_double(rep.fraction), std::to_string(rep.eligible_count),
                 format_double(rep.mean_yield_selected), format_double(rep.mean_yield_all),
                 format_double(rep.gain), ids});
  }
}

void write_gain_curve_csv(const std::string& path, const std::vector<GainCurveRow>& rows) {
  CsvWriter w(path);
  w.write_row({"strategy", "fraction", "gain", "ci95_low", "ci95_high"});
  for (const auto& r : rows)
    w.write_row({r.strategy, format_double(r.fraction), format_double(r.gain),
                 r.ci95_low ? format_double(*r.ci95_low) : "",
                 r.ci95_high ? format_double(*r.ci95_high) : ""});
}

}  // namespace gxe
