#include "gxe/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

#include "gxe/rng.hpp"

namespace gxe {

void GenotypeTable::rebuild_index() {
  index.clear();
  for (std::size_t i = 0; i < ids.size(); ++i) index[ids[i]] = static_cast<int>(i);
}

int GenotypeTable::find(const std::string& id) const {
  auto it = index.find(id);
  return it == index.end() ? -1 : it->second;
}

void EnvironmentTable::rebuild_index() {
  index.clear();
  for (std::size_t i = 0; i < ids.size(); ++i) index[ids[i]] = static_cast<int>(i);
}

int EnvironmentTable::find(const std::string& id) const {
  auto it = index.find(id);
  return it == index.end() ? -1 : it->second;
}

bool EnvironmentTable::has_soil(int e) const {
  if (soil.cols() == 0) return true;
  for (Eigen::Index c = 0; c < soil.cols(); ++c)
    if (!is_missing(soil(e, c))) return true;
  return false;
}

void Dataset::validate_resolved() const {
  for (const auto& r : records) {
    if (genotypes.find(r.genotype_id) < 0)
      throw ValidationError("record references unknown genotype: " + r.genotype_id);
    if (environments.find(r.environment_id) < 0)
      throw ValidationError("record references unknown environment: " + r.environment_id);
  }
}

namespace {

// header cell must be prefix + 1-based position, e.g. m1, m2, ...
void check_feature_header(const CsvReader& reader, const std::vector<std::string>& header,
                          std::size_t first, const std::string& prefix) {
  for (std::size_t i = first; i < header.size(); ++i) {
    const std::string expect = prefix + std::to_string(i - first + 1);
    if (header[i] != expect)
      reader.fail("malformed header: expected column \"" + expect + "\", got \"" +
                  header[i] + "\"");
  }
}

void check_fixed_header(const CsvReader& reader, const std::vector<std::string>& header,
                        const std::vector<std::string>& expect) {
  if (header.size() < expect.size())
    reader.fail("malformed header: expected at least " + std::to_string(expect.size()) +
                " columns");
  for (std::size_t i = 0; i < expect.size(); ++i)
    if (header[i] != expect[i])
      reader.fail("malformed header: expected column \"" + expect[i] + "\", got \"" +
                  header[i] + "\"");
}

int ensure_environment(EnvironmentTable& env, const std::string& id) {
  int e = env.find(id);
  if (e >= 0) return e;
  env.ids.push_back(id);
  env.weather.emplace_back();
  env.coords.emplace_back(std::nullopt);
  env.index[id] = static_cast<int>(env.ids.size()) - 1;
  return static_cast<int>(env.ids.size()) - 1;
}

}  // namespace

std::vector<TrialRecord> read_trials_csv(const std::string& path) {
  CsvReader reader(path);
  std::vector<std::string> row;
  if (!reader.next_row(row)) reader.fail("empty trials file");
  check_fixed_header(reader, row,
                     {"genotype_id", "environment_id", "year", "replicate", "yield_mg_ha"});
  if (row.size() != 5) reader.fail("malformed header: expected 5 columns");

  std::vector<TrialRecord> records;
  std::map<std::tuple<std::string, std::string, int>, long> seen;
  while (reader.next_row(row)) {
    if (row.size() != 5) reader.fail("expected 5 fields, got " + std::to_string(row.size()));
    TrialRecord r;
    r.genotype_id = row[0];
    r.environment_id = row[1];
    r.year = static_cast<int>(reader.parse_long(row[2], "year"));
    r.replicate = static_cast<int>(reader.parse_long(row[3], "replicate"));
    if (r.replicate < 1) reader.fail("replicate index must be >= 1");
    r.yield = reader.parse_double_or_missing(row[4], "yield");
    if (!is_missing(r.yield) && r.yield < 0.0) reader.fail("negative yield");
    auto key = std::make_tuple(r.genotype_id, r.environment_id, r.replicate);
    auto [it, inserted] = seen.emplace(key, reader.line());
    if (!inserted)
      reader.fail("duplicate (genotype, environment, replicate) key, first seen at line " +
                  std::to_string(it->second));
    records.push_back(std::move(r));
  }
  return records;
}

GenotypeTable load_markers_csv(const std::string& path) {
  GenotypeTable g;
  CsvReader reader(path);
  std::vector<std::string> row;
  if (!reader.next_row(row)) reader.fail("empty markers file");
  check_fixed_header(reader, row, {"genotype_id"});
  check_feature_header(reader, row, 1, "m");
  const std::size_t d_g = row.size() - 1;
  std::vector<std::string> ids;
  std::vector<Eigen::VectorXd> rows;
  while (reader.next_row(row)) {
    if (row.size() != d_g + 1)
      reader.fail("expected " + std::to_string(d_g + 1) + " fields");
    if (g.index.count(row[0])) reader.fail("duplicate genotype_id: " + row[0]);
    g.index[row[0]] = static_cast<int>(ids.size());
    ids.push_back(row[0]);
    Eigen::VectorXd m(d_g);
    for (std::size_t j = 0; j < d_g; ++j) {
      const double v = reader.parse_double_or_missing(row[j + 1], "marker");
      if (!is_missing(v) && v != -1.0 && v != 0.0 && v != 1.0)
        reader.fail("marker value must be -1, 0, 1 or empty");
      m[static_cast<Eigen::Index>(j)] = v;
    }
    rows.push_back(std::move(m));
  }
  g.ids = std::move(ids);
  g.markers.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d_g));
  for (std::size_t i = 0; i < rows.size(); ++i)
    g.markers.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return g;
}

EnvironmentTable load_environment_files(const EnvPaths& env_paths) {
  EnvironmentTable env;

  // weather
  {
    CsvReader reader(env_paths.weather);
    std::vector<std::string> row;
    if (!reader.next_row(row)) reader.fail("empty weather file");
    check_fixed_header(reader, row, {"environment_id", "day_index"});
    check_feature_header(reader, row, 2, "f");
    env.n_weather_features = static_cast<int>(row.size()) - 2;
    std::set<std::pair<std::string, int>> seen;
    while (reader.next_row(row)) {
      if (row.size() != static_cast<std::size_t>(env.n_weather_features) + 2)
        reader.fail("wrong field count in weather row");
      const int day = static_cast<int>(reader.parse_long(row[1], "day_index"));
      if (day < -7 || day > 132) reader.fail("day_index out of range [-7, 132]");
      if (!seen.emplace(row[0], day).second)
        reader.fail("duplicate (environment, day) weather row");
      const int e = ensure_environment(env, row[0]);
      Eigen::VectorXd f(env.n_weather_features);
      for (int j = 0; j < env.n_weather_features; ++j)
        f[j] = reader.parse_double_or_missing(row[j + 2], "weather feature");
      env.weather[e].emplace_back(day, std::move(f));
    }
    for (auto& series : env.weather)
      std::sort(series.begin(), series.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
  }

  // soil (also carries coordinates)
  std::vector<std::pair<int, Eigen::VectorXd>> soil_rows;
  int n_soil = 0;
  {
    CsvReader reader(env_paths.soil);
    std::vector<std::string> row;
    if (!reader.next_row(row)) reader.fail("empty soil file");
    check_fixed_header(reader, row, {"environment_id", "lat", "lon"});
    check_feature_header(reader, row, 3, "s");
    n_soil = static_cast<int>(row.size()) - 3;
    while (reader.next_row(row)) {
      if (row.size() != static_cast<std::size_t>(n_soil) + 3)
        reader.fail("wrong field count in soil row");
      const int e = ensure_environment(env, row[0]);
      const double lat = reader.parse_double_or_missing(row[1], "lat");
      const double lon = reader.parse_double_or_missing(row[2], "lon");
      if (!is_missing(lat) && !is_missing(lon)) env.coords[e] = LatLon{lat, lon};
      Eigen::VectorXd s(n_soil);
      for (int j = 0; j < n_soil; ++j)
        s[j] = reader.parse_double_or_missing(row[j + 3], "soil feature");
      soil_rows.emplace_back(e, std::move(s));
    }
  }

  // management
  std::vector<std::pair<int, Eigen::VectorXd>> mgmt_rows;
  int n_mgmt = 0;
  {
    CsvReader reader(env_paths.management);
    std::vector<std::string> row;
    if (!reader.next_row(row)) reader.fail("empty management file");
    check_fixed_header(reader, row, {"environment_id"});
    check_feature_header(reader, row, 1, "g");
    n_mgmt = static_cast<int>(row.size()) - 1;
    while (reader.next_row(row)) {
      if (row.size() != static_cast<std::size_t>(n_mgmt) + 1)
        reader.fail("wrong field count in management row");
      const int e = ensure_environment(env, row[0]);
      Eigen::VectorXd g(n_mgmt);
      for (int j = 0; j < n_mgmt; ++j)
        g[j] = reader.parse_double_or_missing(row[j + 1], "management feature");
      mgmt_rows.emplace_back(e, std::move(g));
    }
  }

  const int n_e = env.n();
  env.soil = Eigen::MatrixXd::Constant(n_e, n_soil, missing_value());
  for (auto& [e, s] : soil_rows) env.soil.row(e) = s.transpose();
  env.management = Eigen::MatrixXd::Constant(n_e, n_mgmt, missing_value());
  for (auto& [e, g] : mgmt_rows) env.management.row(e) = g.transpose();

  return env;
}

Dataset load_dataset(const std::string& trials_path, const std::string& markers_path,
                     const EnvPaths& env_paths) {
  Dataset d;
  d.records = read_trials_csv(trials_path);
  d.genotypes = load_markers_csv(markers_path);
  d.environments = load_environment_files(env_paths);
  return d;
}

FilterReport filter_dataset(const Dataset& d) {
  FilterReport rep;
  rep.dataset.genotypes = d.genotypes;

  // environments with no weather are removed from the table entirely
  const EnvironmentTable& env = d.environments;
  EnvironmentTable kept;
  kept.n_weather_features = env.n_weather_features;
  std::vector<int> keep_rows;
  for (int e = 0; e < env.n(); ++e)
    if (env.has_weather(e)) keep_rows.push_back(e);
  kept.soil.resize(static_cast<Eigen::Index>(keep_rows.size()), env.soil.cols());
  kept.management.resize(static_cast<Eigen::Index>(keep_rows.size()), env.management.cols());
  for (std::size_t i = 0; i < keep_rows.size(); ++i) {
    const int e = keep_rows[i];
    kept.ids.push_back(env.ids[e]);
    kept.weather.push_back(env.weather[e]);
    kept.coords.push_back(env.coords[e]);
    kept.soil.row(static_cast<Eigen::Index>(i)) = env.soil.row(e);
    kept.management.row(static_cast<Eigen::Index>(i)) = env.management.row(e);
  }
  kept.rebuild_index();
  rep.dataset.environments = std::move(kept);

  for (const auto& r : d.records) {
    if (is_missing(r.yield)) {
      ++rep.dropped_missing_yield;
      continue;
    }
    if (rep.dataset.genotypes.find(r.genotype_id) < 0) {
      ++rep.dropped_no_marker_row;
      continue;
    }
    if (rep.dataset.environments.find(r.environment_id) < 0) {
      ++rep.dropped_no_weather;
      continue;
    }
    rep.dataset.records.push_back(r);
  }
  if (rep.dataset.records.empty())
    throw ValidationError("no samples survive filtering");
  return rep;
}

GenotypeTable filter_markers(const GenotypeTable& g, double maf_min, double max_missing,
                             int target_count, std::uint64_t seed) {
  const Eigen::Index n = g.markers.rows(), m = g.markers.cols();
  std::vector<Eigen::Index> survivors;
  for (Eigen::Index c = 0; c < m; ++c) {
    Eigen::Index n_missing = 0;
    long alt_alleles = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = g.markers(i, c);
      if (is_missing(v)) {
        ++n_missing;
      } else {
        // {-1, 0, 1} = {hom ref, het, hom alt}: alt allele count per entry
        alt_alleles += static_cast<long>(v) + 1;
      }
    }
    const Eigen::Index n_obs = n - n_missing;
    if (n_obs == 0) continue;
    const double missing_frac = static_cast<double>(n_missing) / static_cast<double>(n);
    if (missing_frac > max_missing) continue;
    const double f = static_cast<double>(alt_alleles) / (2.0 * static_cast<double>(n_obs));
    const double maf = std::min(f, 1.0 - f);
    if (maf < maf_min) continue;
    survivors.push_back(c);
  }
  if (survivors.empty()) throw ValidationError("no markers survive filtering");

  if (static_cast<int>(survivors.size()) > target_count) {
    Rng rng(seed);
    auto pick = rng.sample_without_replacement(survivors.size(),
                                               static_cast<std::size_t>(target_count));
    std::vector<Eigen::Index> chosen;
    chosen.reserve(pick.size());
    for (auto k : pick) chosen.push_back(survivors[k]);
    survivors = std::move(chosen);
  }

  GenotypeTable out;
  out.ids = g.ids;
  out.markers.resize(n, static_cast<Eigen::Index>(survivors.size()));
  for (std::size_t j = 0; j < survivors.size(); ++j)
    out.markers.col(static_cast<Eigen::Index>(j)) = g.markers.col(survivors[j]);
  out.rebuild_index();
  return out;
}

GenotypeTable impute_markers(const GenotypeTable& g) {
  GenotypeTable out = g;
  const Eigen::Index n = out.markers.rows(), m = out.markers.cols();
  for (Eigen::Index c = 0; c < m; ++c) {
    long counts[3] = {0, 0, 0};  // -1, 0, 1
    bool any_missing = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = out.markers(i, c);
      if (is_missing(v)) any_missing = true;
      else ++counts[static_cast<int>(v) + 1];
    }
    if (!any_missing) continue;
    if (counts[0] + counts[1] + counts[2] == 0)
      throw ValidationError("all-missing marker column " + std::to_string(c + 1));
    // mode; ties broken toward the smaller value
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (counts[k] > counts[best]) best = k;
    const double fill = static_cast<double>(best - 1);
    for (Eigen::Index i = 0; i < n; ++i)
      if (is_missing(out.markers(i, c))) out.markers(i, c) = fill;
  }
  out.rebuild_index();
  return out;
}

namespace {

// linear interpolation on day_index for interior gaps, nearest value at the ends
void impute_weather_series(std::vector<std::pair<int, Eigen::VectorXd>>& series,
                           int n_features, const std::string& env_id) {
  const std::size_t n = series.size();
  for (int f = 0; f < n_features; ++f) {
    std::vector<std::size_t> obs;
    for (std::size_t t = 0; t < n; ++t)
      if (!is_missing(series[t].second[f])) obs.push_back(t);
    if (obs.empty())
      throw ValidationError("environment " + env_id + ": weather feature f" +
                            std::to_string(f + 1) + " has no observed values");
    for (std::size_t t = 0; t < n; ++t) {
      if (!is_missing(series[t].second[f])) continue;
      auto it = std::lower_bound(obs.begin(), obs.end(), t);
      if (it == obs.begin()) {
        series[t].second[f] = series[obs.front()].second[f];
      } else if (it == obs.end()) {
        series[t].second[f] = series[obs.back()].second[f];
      } else {
        const std::size_t hi = *it, lo = *(it - 1);
        const double x0 = series[lo].first, x1 = series[hi].first;
        const double y0 = series[lo].second[f], y1 = series[hi].second[f];
        const double x = series[t].first;
        series[t].second[f] = y0 + (y1 - y0) * (x - x0) / (x1 - x0);
      }
    }
  }
}

}  // namespace

EnvironmentTable impute_environment(const EnvironmentTable& e,
                                    const std::map<std::string, LatLon>& coords) {
  // environments with no weather at all are removed
  EnvironmentTable out;
  out.n_weather_features = e.n_weather_features;
  std::vector<int> keep;
  for (int i = 0; i < e.n(); ++i)
    if (e.has_weather(i)) keep.push_back(i);
  if (keep.empty()) throw ValidationError("no environments with weather data");
  out.soil.resize(static_cast<Eigen::Index>(keep.size()), e.soil.cols());
  out.management.resize(static_cast<Eigen::Index>(keep.size()), e.management.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const int src = keep[i];
    out.ids.push_back(e.ids[src]);
    out.weather.push_back(e.weather[src]);
    auto c = e.coords[src];
    auto it = coords.find(e.ids[src]);
    if (it != coords.end()) c = it->second;
    out.coords.push_back(c);
    out.soil.row(static_cast<Eigen::Index>(i)) = e.soil.row(src);
    out.management.row(static_cast<Eigen::Index>(i)) = e.management.row(src);
  }
  out.rebuild_index();

  for (int i = 0; i < out.n(); ++i)
    impute_weather_series(out.weather[i], out.n_weather_features, out.ids[i]);

  // soil: per-cell nearest spatial donor; ties to lexicographically smaller id
  for (Eigen::Index c = 0; c < out.soil.cols(); ++c) {
    for (int i = 0; i < out.n(); ++i) {
      if (!is_missing(out.soil(i, c))) continue;
      if (!out.coords[i])
        throw ValidationError("environment " + out.ids[i] +
                              ": soil imputation needs coordinates");
      int donor = -1;
      double best = 0.0;
      for (int j = 0; j < out.n(); ++j) {
        if (j == i || is_missing(out.soil(j, c)) || !out.coords[j]) continue;
        const double dx = out.coords[i]->lat - out.coords[j]->lat;
        const double dy = out.coords[i]->lon - out.coords[j]->lon;
        const double dist = std::sqrt(dx * dx + dy * dy);
        if (donor < 0 || dist < best ||
            (dist == best && out.ids[j] < out.ids[donor])) {
          donor = j;
          best = dist;
        }
      }
      if (donor < 0)
        throw ValidationError("environment " + out.ids[i] +
                              ": no donor environment for soil imputation");
      out.soil(i, c) = out.soil(donor, c);
    }
  }

  // management: column mode, ties toward the smaller value
  for (Eigen::Index c = 0; c < out.management.cols(); ++c) {
    std::map<double, int> counts;
    for (int i = 0; i < out.n(); ++i)
      if (!is_missing(out.management(i, c))) ++counts[out.management(i, c)];
    bool any_missing = false;
    for (int i = 0; i < out.n(); ++i)
      if (is_missing(out.management(i, c))) any_missing = true;
    if (!any_missing) continue;
    if (counts.empty())
      throw ValidationError("management feature g" + std::to_string(c + 1) +
                            " has no observed values");
    double fill = counts.begin()->first;
    int best = counts.begin()->second;
    for (const auto& [v, n] : counts)
      if (n > best) { best = n; fill = v; }  // map order makes ties pick the smaller
    for (int i = 0; i < out.n(); ++i)
      if (is_missing(out.management(i, c))) out.management(i, c) = fill;
  }

  return out;
}

StandardizeStats build_env_vectors(EnvironmentTable& e, const StandardizeStats* stats) {
  const int n_e = e.n();
  const int n_w = e.n_weather_features;
  const Eigen::Index n_s = e.soil.cols(), n_m = e.management.cols();
  const Eigen::Index d_e = n_w + n_s + n_m;

  Eigen::MatrixXd raw(n_e, d_e);
  for (int i = 0; i < n_e; ++i) {
    for (int f = 0; f < n_w; ++f) {
      double sum = 0.0;
      if (e.weather[i].empty())
        throw ValidationError("environment " + e.ids[i] + " has no weather data");
      for (const auto& [day, vals] : e.weather[i]) {
        if (is_missing(vals[f]))
          throw ValidationError("environment " + e.ids[i] +
                                ": weather not imputed before vectorization");
        sum += vals[f];
      }
      raw(i, f) = sum / static_cast<double>(e.weather[i].size());
    }
    for (Eigen::Index c = 0; c < n_s; ++c) {
      if (is_missing(e.soil(i, c)))
        throw ValidationError("environment " + e.ids[i] + ": soil not imputed");
      raw(i, n_w + c) = e.soil(i, c);
    }
    for (Eigen::Index c = 0; c < n_m; ++c) {
      if (is_missing(e.management(i, c)))
        throw ValidationError("environment " + e.ids[i] + ": management not imputed");
      raw(i, n_w + n_s + c) = e.management(i, c);
    }
  }

  StandardizeStats used;
  if (stats) {
    if (stats->means.size() != d_e)
      throw ValidationError("standardization statistics have wrong width");
    used = *stats;
  } else {
    used.means.resize(d_e);
    used.sds.resize(d_e);
    for (Eigen::Index c = 0; c < d_e; ++c) {
      used.means[c] = raw.col(c).mean();
      double ss = (raw.col(c).array() - used.means[c]).square().sum();
      double var = n_e > 1 ? ss / static_cast<double>(n_e - 1) : 0.0;
      used.sds[c] = var > 0.0 ? std::sqrt(var) : 0.0;
      if (used.sds[c] == 0.0) {
        std::string name = c < n_w ? "w" + std::to_string(c + 1)
                           : c < n_w + n_s
                               ? "s" + std::to_string(c - n_w + 1)
                               : "g" + std::to_string(c - n_w - n_s + 1);
        used.zero_variance_columns.push_back(name);
      }
    }
  }

  e.env_vector.resize(n_e, d_e);
  for (Eigen::Index c = 0; c < d_e; ++c) {
    if (used.sds[c] == 0.0)
      e.env_vector.col(c).setZero();
    else
      e.env_vector.col(c) = (raw.col(c).array() - used.means[c]) / used.sds[c];
  }
  return used;
}

FoldSpec make_cv_folds(const Dataset& d, std::uint64_t seed) {
  std::set<int> years;
  std::set<std::string> genotype_set;
  for (const auto& r : d.records) {
    years.insert(r.year);
    genotype_set.insert(r.genotype_id);
  }
  if (years.size() < 8)
    throw ValidationError("cross-validation needs 8 training years, found " +
                          std::to_string(years.size()));
  if (years.size() > 8)
    throw ValidationError("cross-validation expects exactly 8 training years, found " +
                          std::to_string(years.size()));

  std::vector<std::string> genotypes(genotype_set.begin(), genotype_set.end());
  Rng rng(seed);
  rng.shuffle(genotypes);

  FoldSpec spec;
  std::vector<int> year_list(years.begin(), years.end());
  spec.folds.resize(8);
  for (int f = 0; f < 8; ++f) spec.folds[f].holdout_year = year_list[f];
  // deal genotypes round-robin: sizes differ by at most 1
  for (std::size_t i = 0; i < genotypes.size(); ++i)
    spec.folds[i % 8].holdout_genotype_ids.insert(genotypes[i]);

  spec.tuning_fold_index = -1;
  for (int f = 0; f < 8; ++f)
    if (spec.folds[f].holdout_year == 2021) spec.tuning_fold_index = f;
  if (spec.tuning_fold_index < 0) spec.tuning_fold_index = 7;  // latest year
  return spec;
}

ScenarioPartition split_test_scenarios(const Dataset& train, const Dataset& test) {
  std::set<std::string> train_genotypes, train_envs;
  for (const auto& r : train.records) {
    train_genotypes.insert(r.genotype_id);
    train_envs.insert(r.environment_id);
  }
  ScenarioPartition part;
  for (std::size_t i = 0; i < test.records.size(); ++i) {
    const auto& r = test.records[i];
    if (train_envs.count(r.environment_id))
      throw ValidationError("test sample in training environment " + r.environment_id +
                            " violates the new-environment protocol");
    if (train_genotypes.count(r.genotype_id))
      part.nE.push_back(i);
    else
      part.nGE.push_back(i);
  }
  return part;
}

Dataset Dataset::compacted() const {
  std::set<std::string> used_g, used_e;
  for (const auto& r : records) {
    used_g.insert(r.genotype_id);
    used_e.insert(r.environment_id);
  }
  Dataset out;
  out.records = records;

  std::vector<int> grows;
  for (int i = 0; i < genotypes.n(); ++i)
    if (used_g.count(genotypes.ids[i])) grows.push_back(i);
  out.genotypes.markers.resize(static_cast<Eigen::Index>(grows.size()), genotypes.markers.cols());
  for (std::size_t i = 0; i < grows.size(); ++i) {
    out.genotypes.ids.push_back(genotypes.ids[grows[i]]);
    out.genotypes.markers.row(static_cast<Eigen::Index>(i)) = genotypes.markers.row(grows[i]);
  }
  out.genotypes.rebuild_index();

  const EnvironmentTable& env = environments;
  std::vector<int> erows;
  for (int i = 0; i < env.n(); ++i)
    if (used_e.count(env.ids[i])) erows.push_back(i);
  out.environments.n_weather_features = env.n_weather_features;
  out.environments.soil.resize(static_cast<Eigen::Index>(erows.size()), env.soil.cols());
  out.environments.management.resize(static_cast<Eigen::Index>(erows.size()),
                                     env.management.cols());
  if (env.env_vector.size() > 0)
    out.environments.env_vector.resize(static_cast<Eigen::Index>(erows.size()),
                                       env.env_vector.cols());
  for (std::size_t i = 0; i < erows.size(); ++i) {
    const int src = erows[i];
    out.environments.ids.push_back(env.ids[src]);
    out.environments.weather.push_back(env.weather[src]);
    out.environments.coords.push_back(env.coords[src]);
    out.environments.soil.row(static_cast<Eigen::Index>(i)) = env.soil.row(src);
    out.environments.management.row(static_cast<Eigen::Index>(i)) = env.management.row(src);
    if (env.env_vector.size() > 0)
      out.environments.env_vector.row(static_cast<Eigen::Index>(i)) = env.env_vector.row(src);
  }
  out.environments.rebuild_index();
  return out;
}

HoldoutSplit holdout_split(const Dataset& d, double new_genotype_fraction,
                           double new_environment_fraction, std::uint64_t seed) {
  std::set<std::string> gset, eset;
  for (const auto& r : d.records) {
    gset.insert(r.genotype_id);
    eset.insert(r.environment_id);
  }
  std::vector<std::string> genotypes(gset.begin(), gset.end());
  std::vector<std::string> envs(eset.begin(), eset.end());
  Rng rng(seed);
  rng.shuffle(genotypes);
  rng.shuffle(envs);
  const std::size_t n_new_g = static_cast<std::size_t>(
      std::floor(new_genotype_fraction * static_cast<double>(genotypes.size()) + 0.5));
  const std::size_t n_new_e = static_cast<std::size_t>(
      std::floor(new_environment_fraction * static_cast<double>(envs.size()) + 0.5));
  if (n_new_e == 0 || n_new_e >= envs.size())
    throw ValidationError("holdout_split: new-environment fraction leaves no usable split");
  std::set<std::string> test_g(genotypes.begin(), genotypes.begin() + n_new_g);
  std::set<std::string> test_e(envs.begin(), envs.begin() + n_new_e);

  HoldoutSplit split;
  split.train.genotypes = d.genotypes;
  split.train.environments = d.environments;
  split.test.genotypes = d.genotypes;
  split.test.environments = d.environments;
  for (const auto& r : d.records) {
    const bool env_is_test = test_e.count(r.environment_id) > 0;
    const bool geno_is_test = test_g.count(r.genotype_id) > 0;
    if (env_is_test)
      split.test.records.push_back(r);
    else if (!geno_is_test)
      split.train.records.push_back(r);
  }
  split.train = split.train.compacted();
  split.test = split.test.compacted();
  return split;
}

// ---- I/O --------------------------------------------------------------------

void write_trials_csv(const std::string& path, const std::vector<TrialRecord>& records) {
  CsvWriter w(path);
  w.write_row({"genotype_id", "environment_id", "year", "replicate", "yield_mg_ha"});
  for (const auto& r : records) {
    w.write_row({r.genotype_id, r.environment_id, std::to_string(r.year),
                 std::to_string(r.replicate),
                 is_missing(r.yield) ? std::string() : format_double(r.yield)});
  }
}

void write_markers_csv(const std::string& path, const GenotypeTable& g) {
  CsvWriter w(path);
  std::vector<std::string> header{"genotype_id"};
  for (Eigen::Index c = 0; c < g.markers.cols(); ++c)
    header.push_back("m" + std::to_string(c + 1));
  w.write_row(header);
  std::vector<double> row(static_cast<std::size_t>(g.markers.cols()));
  for (int i = 0; i < g.n(); ++i) {
    for (Eigen::Index c = 0; c < g.markers.cols(); ++c)
      row[static_cast<std::size_t>(c)] = g.markers(i, c);
    w.write_row_numeric(g.ids[i], row);
  }
}

void write_weather_csv(const std::string& path, const EnvironmentTable& e) {
  CsvWriter w(path);
  std::vector<std::string> header{"environment_id", "day_index"};
  for (int f = 0; f < e.n_weather_features; ++f) header.push_back("f" + std::to_string(f + 1));
  w.write_row(header);
  for (int i = 0; i < e.n(); ++i) {
    for (const auto& [day, vals] : e.weather[i]) {
      std::vector<std::string> row{e.ids[i], std::to_string(day)};
      for (int f = 0; f < e.n_weather_features; ++f)
        row.push_back(is_missing(vals[f]) ? std::string() : format_double(vals[f]));
      w.write_row(row);
    }
  }
}

void write_soil_csv(const std::string& path, const EnvironmentTable& e) {
  CsvWriter w(path);
  std::vector<std::string> header{"environment_id", "lat", "lon"};
  for (Eigen::Index c = 0; c < e.soil.cols(); ++c) header.push_back("s" + std::to_string(c + 1));
  w.write_row(header);
  for (int i = 0; i < e.n(); ++i) {
    std::vector<std::string> row{e.ids[i]};
    if (e.coords[i]) {
      row.push_back(format_double(e.coords[i]->lat));
      row.push_back(format_double(e.coords[i]->lon));
    } else {
      row.push_back("");
      row.push_back("");
    }
    for (Eigen::Index c = 0; c < e.soil.cols(); ++c)
      row.push_back(is_missing(e.soil(i, c)) ? std::string() : format_double(e.soil(i, c)));
    w.write_row(row);
  }
}

void write_management_csv(const std::string& path, const EnvironmentTable& e) {
  CsvWriter w(path);
  std::vector<std::string> header{"environment_id"};
  for (Eigen::Index c = 0; c < e.management.cols(); ++c)
    header.push_back("g" + std::to_string(c + 1));
  w.write_row(header);
  for (int i = 0; i < e.n(); ++i) {
    std::vector<std::string> row{e.ids[i]};
    for (Eigen::Index c = 0; c < e.management.cols(); ++c)
      row.push_back(is_missing(e.management(i, c)) ? std::string()
                                                   : format_double(e.management(i, c)));
    w.write_row(row);
  }
}

void write_env_vectors_csv(const std::string& path, const EnvironmentTable& e) {
  if (e.env_vector.size() == 0)
    throw ValidationError("environment vectors not built");
  CsvWriter w(path);
  std::vector<std::string> header{"environment_id"};
  for (Eigen::Index c = 0; c < e.env_vector.cols(); ++c)
    header.push_back("v" + std::to_string(c + 1));
  w.write_row(header);
  std::vector<double> row(static_cast<std::size_t>(e.env_vector.cols()));
  for (int i = 0; i < e.n(); ++i) {
    for (Eigen::Index c = 0; c < e.env_vector.cols(); ++c)
      row[static_cast<std::size_t>(c)] = e.env_vector(i, c);
    w.write_row_numeric(e.ids[i], row);
  }
}

void read_env_vectors_csv(const std::string& path, EnvironmentTable& e) {
  CsvReader reader(path);
  std::vector<std::string> row;
  if (!reader.next_row(row)) reader.fail("empty env vector file");
  check_fixed_header(reader, row, {"environment_id"});
  check_feature_header(reader, row, 1, "v");
  const Eigen::Index d_e = static_cast<Eigen::Index>(row.size()) - 1;
  std::vector<std::pair<int, Eigen::VectorXd>> rows;
  while (reader.next_row(row)) {
    if (row.size() != static_cast<std::size_t>(d_e) + 1)
      reader.fail("wrong field count in env vector row");
    const int idx = e.find(row[0]);
    if (idx < 0) reader.fail("unknown environment_id: " + row[0]);
    Eigen::VectorXd v(d_e);
    for (Eigen::Index c = 0; c < d_e; ++c)
      v[c] = reader.parse_double(row[static_cast<std::size_t>(c) + 1], "env vector value");
    rows.emplace_back(idx, std::move(v));
  }
  e.env_vector = Eigen::MatrixXd::Constant(e.n(), d_e, missing_value());
  for (auto& [idx, v] : rows) e.env_vector.row(idx) = v.transpose();
  for (int i = 0; i < e.n(); ++i)
    if (is_missing(e.env_vector(i, 0)))
      throw ValidationError("environment " + e.ids[i] + " missing from env vector file");
}

}  // namespace gxe
