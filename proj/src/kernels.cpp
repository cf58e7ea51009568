#include "gxe/kernels.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <map>
#include <queue>

#include "gxe/fa.hpp"
#include "gxe/optim.hpp"
#include "gxe/rng.hpp"
#include "gxe/stats.hpp"

namespace gxe {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

RelationshipMatrix normalize_cross_product(std::vector<std::string> ids, Eigen::MatrixXd x,
                                           bool center, const char* what) {
  if (center) {
    const Eigen::RowVectorXd means = x.colwise().mean();
    x.rowwise() -= means;
  }
  RelationshipMatrix rm;
  rm.ids = std::move(ids);
  rm.K.noalias() = x * x.transpose();
  const double tr = rm.K.trace();
  if (!(tr > 0.0))
    throw ValidationError(std::string(what) + ": zero matrix, cannot normalize");
  rm.K *= static_cast<double>(rm.K.rows()) / tr;
  rm.rebuild_index();
  return rm;
}

}  // namespace

void RelationshipMatrix::rebuild_index() {
  index.clear();
  for (std::size_t i = 0; i < ids.size(); ++i) index[ids[i]] = static_cast<int>(i);
}

int RelationshipMatrix::find(const std::string& id) const {
  auto it = index.find(id);
  return it == index.end() ? -1 : it->second;
}

RelationshipMatrix genomic_relationship(const GenotypeTable& g, bool center) {
  if (g.markers.size() == 0) throw ValidationError("empty marker matrix");
  for (Eigen::Index i = 0; i < g.markers.rows(); ++i)
    for (Eigen::Index c = 0; c < g.markers.cols(); ++c)
      if (is_missing(g.markers(i, c)))
        throw ValidationError("markers must be imputed before building the kernel");
  return normalize_cross_product(g.ids, g.markers, center, "genomic relationship");
}

RelationshipMatrix environmental_relationship(const EnvironmentTable& e, bool center) {
  if (e.env_vector.size() == 0)
    throw ValidationError("environment vectors must be built before the kernel");
  return normalize_cross_product(e.ids, e.env_vector, center, "environmental relationship");
}

// ---- GBLUP -------------------------------------------------------------------

namespace {

// observations collapsed by genotype: exchangeable under the GBLUP model
struct GenoGroup {
  int kernel_idx;
  double w = 0.0;
  double ybar = 0.0;
  double ss = 0.0;
};

std::vector<GenoGroup> collapse_by_genotype(const Dataset& d, const RelationshipMatrix& kg) {
  std::map<int, std::vector<double>> groups;
  for (const auto& r : d.records) {
    const int t = kg.find(r.genotype_id);
    if (t < 0)
      throw ValidationError("genotype " + r.genotype_id + " absent from the kernel");
    groups[t].push_back(r.yield);
  }
  std::vector<GenoGroup> out;
  for (auto& [t, ys] : groups) {
    GenoGroup g;
    g.kernel_idx = t;
    g.w = static_cast<double>(ys.size());
    g.ybar = mean(ys);
    for (double y : ys) g.ss += (y - g.ybar) * (y - g.ybar);
    out.push_back(g);
  }
  return out;
}

}  // namespace

double GblupFit::predict(const std::string& genotype_id) const {
  const int i = kernel.find(genotype_id);
  if (i < 0)
    throw ValidationError("genotype " + genotype_id + " absent from the kernel at predict time");
  return mu + g_blup[i];
}

GblupFit fit_gblup(const Dataset& d, const RelationshipMatrix& kg, const KernelOptions& opts) {
  const auto groups = collapse_by_genotype(d, kg);
  const int n_t = static_cast<int>(groups.size());
  if (n_t < 2) throw ValidationError("GBLUP needs at least 2 observed genotypes");
  long n = 0;
  std::vector<double> yields;
  for (const auto& g : groups) n += static_cast<long>(g.w);
  yields.reserve(d.records.size());
  for (const auto& r : d.records) yields.push_back(r.yield);
  const double v_p = sample_variance(yields);

  // scaled training kernel S Kg_t S with S = diag(sqrt(w)); one eigendecomposition
  // makes every REML evaluation O(n_t)
  Eigen::MatrixXd b(n_t, n_t);
  Eigen::VectorXd ytil(n_t), xtil(n_t), ss(n_t);
  for (int a = 0; a < n_t; ++a) {
    const double swa = std::sqrt(groups[a].w);
    ytil[a] = swa * groups[a].ybar;
    xtil[a] = swa;
    ss[a] = groups[a].ss;
    for (int c = 0; c <= a; ++c) {
      const double v = swa * std::sqrt(groups[c].w) * kg.K(groups[a].kernel_idx, groups[c].kernel_idx);
      b(a, c) = v;
      b(c, a) = v;
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(b);
  if (eig.info() != Eigen::Success) throw NumericError("GBLUP: eigendecomposition failed");
  const Eigen::VectorXd lam = eig.eigenvalues();
  const Eigen::VectorXd z = eig.eigenvectors().transpose() * ytil;
  const Eigen::VectorXd xq = eig.eigenvectors().transpose() * xtil;
  const double ss_within = ss.sum();
  const double n_within = static_cast<double>(n - n_t);

  auto loglik = [&](double sg2, double se2) -> double {
    double logdet = 0.0, h = 0.0, xy = 0.0, yy = 0.0;
    for (int k = 0; k < n_t; ++k) {
      const double dk = sg2 * std::max(lam[k], 0.0) + se2;
      if (!(dk > 0.0)) return -std::numeric_limits<double>::infinity();
      logdet += std::log(dk);
      h += xq[k] * xq[k] / dk;
      xy += xq[k] * z[k] / dk;
      yy += z[k] * z[k] / dk;
    }
    const double ypy = yy - xy * xy / h;
    double ll = -0.5 * (static_cast<double>(n_t - 1) * kLog2Pi + logdet + std::log(h) + ypy);
    ll -= 0.5 * (n_within * (kLog2Pi + std::log(se2)) + ss_within / se2);
    return ll;
  };

  GblupFit fit;
  if (opts.fixed_variances) {
    if (opts.fixed_variances->size() != 2)
      throw ValidationError("GBLUP expects 2 fixed variance components");
    fit.sigma_g2 = (*opts.fixed_variances)[0];
    fit.sigma_eps2 = (*opts.fixed_variances)[1];
  } else {
    if (!(v_p > 0.0)) throw NumericError("GBLUP: zero phenotypic variance");
    const double floor = 1e-10 * v_p;
    ObjectiveFn obj = [&](const Eigen::VectorXd& th) {
      return -loglik(floor + std::exp(th[0]), floor + std::exp(th[1]));
    };
    Eigen::VectorXd th0(2);
    th0[0] = std::log(0.5 * v_p);
    th0[1] = std::log(0.5 * v_p);
    OptimOptions oo;
    oo.tol = 1e-10;
    const OptimResult res = bfgs_minimize(obj, nullptr, th0, oo);
    fit.sigma_g2 = floor + std::exp(res.x[0]);
    fit.sigma_eps2 = floor + std::exp(res.x[1]);
  }
  fit.reml_loglik = loglik(fit.sigma_g2, fit.sigma_eps2);

  // GLS intercept and BLUPs for every kernel entity
  Eigen::VectorXd dinv(n_t);
  for (int k = 0; k < n_t; ++k)
    dinv[k] = 1.0 / (fit.sigma_g2 * std::max(lam[k], 0.0) + fit.sigma_eps2);
  const double h = (xq.array().square() * dinv.array()).sum();
  const double xy = (xq.array() * z.array() * dinv.array()).sum();
  fit.mu = xy / h;
  const Eigen::VectorXd rq = z - xq * fit.mu;
  const Eigen::VectorXd vinv_r = eig.eigenvectors() * (rq.array() * dinv.array()).matrix();
  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(kg.n());
  for (int a = 0; a < n_t; ++a)
    alpha[groups[a].kernel_idx] = std::sqrt(groups[a].w) * vinv_r[a];
  fit.kernel = kg;
  fit.g_blup = fit.sigma_g2 * (kg.K * alpha);
  return fit;
}

// ---- G x EBLUP -----------------------------------------------------------------

double GxeblupFit::predict(const std::string& genotype_id,
                           const std::string& environment_id) const {
  const int gi = kg.find(genotype_id);
  const int ej = ke.find(environment_id);
  if (gi < 0)
    throw ValidationError("genotype " + genotype_id + " absent from the kernel at predict time");
  if (ej < 0)
    throw ValidationError("environment " + environment_id +
                          " absent from the kernel at predict time");
  double acc_g = 0.0, acc_e = 0.0, acc_ge = 0.0;
  for (Eigen::Index c = 0; c < alpha.size(); ++c) {
    const double kgv = kg.K(gi, cell_genotype[static_cast<std::size_t>(c)]);
    const double kev = ke.K(ej, cell_env[static_cast<std::size_t>(c)]);
    acc_g += kgv * alpha[c];
    acc_e += kev * alpha[c];
    acc_ge += kgv * kev * alpha[c];
  }
  return mu + sigma_g2 * acc_g + sigma_e2 * acc_e + sigma_ge2 * acc_ge;
}

GxeblupFit fit_gxeblup(const Dataset& d, const RelationshipMatrix& kg,
                       const RelationshipMatrix& ke, const KernelOptions& opts) {
  const CollapsedCells cc = CollapsedCells::build(d);
  const int n_c = static_cast<int>(cc.cells.size());
  if (n_c < 3) throw ValidationError("GxEBLUP needs at least 3 observed cells");
  if (n_c > opts.max_cells)
    throw ValidationError("GxEBLUP: " + std::to_string(n_c) +
                          " observed cells exceed the memory budget of " +
                          std::to_string(opts.max_cells) +
                          "; reduce the data with subsample_for_budget");

  std::vector<int> gi(n_c), ej(n_c);
  Eigen::VectorXd sw(n_c), ytil(n_c);
  double ss_within = 0.0;
  long n = 0;
  for (int c = 0; c < n_c; ++c) {
    const auto& cell = cc.cells[c];
    const int tg = kg.find(d.genotypes.ids[cell.g]);
    const int te = ke.find(d.environments.ids[cell.e]);
    if (tg < 0)
      throw ValidationError("genotype " + d.genotypes.ids[cell.g] + " absent from the kernel");
    if (te < 0)
      throw ValidationError("environment " + d.environments.ids[cell.e] +
                            " absent from the kernel");
    gi[c] = tg;
    ej[c] = te;
    sw[c] = std::sqrt(cell.w);
    ytil[c] = sw[c] * cell.ybar;
    ss_within += cell.ss;
    n += static_cast<long>(cell.w);
  }
  const double n_within = static_cast<double>(n - n_c);

  // cell-level kernels; the Kronecker-structured interaction enters as an
  // element-wise product of the genotype and environment kernels
  Eigen::MatrixXd bg(n_c, n_c), be(n_c, n_c), bge(n_c, n_c);
  for (int a = 0; a < n_c; ++a) {
    for (int c = 0; c <= a; ++c) {
      const double wgt = sw[a] * sw[c];
      const double kgv = kg.K(gi[a], gi[c]);
      const double kev = ke.K(ej[a], ej[c]);
      bg(a, c) = bg(c, a) = wgt * kgv;
      be(a, c) = be(c, a) = wgt * kev;
      bge(a, c) = bge(c, a) = wgt * kgv * kev;
    }
  }

  struct Eval {
    double loglik;
    double mu;
    double h;
    Eigen::VectorXd vinv_r;
  };
  auto evaluate = [&](double sg2, double se2, double sge2, double seps2,
                      bool want_blups) -> Eval {
    Eigen::MatrixXd v = sg2 * bg + se2 * be + sge2 * bge;
    v.diagonal().array() += seps2;
    Eigen::LLT<Eigen::MatrixXd> llt(v);
    Eval ev{-std::numeric_limits<double>::infinity(), 0.0, 0.0, {}};
    if (llt.info() != Eigen::Success) return ev;
    double logdet = 0.0;
    for (int a = 0; a < n_c; ++a) {
      const double la = llt.matrixLLT()(a, a);
      if (!(la > 0.0)) return ev;
      logdet += 2.0 * std::log(la);
    }
    const Eigen::VectorXd vinv_y = llt.solve(ytil);
    const Eigen::VectorXd vinv_x = llt.solve(sw);
    const double h = sw.dot(vinv_x);
    const double xy = sw.dot(vinv_y);
    const double yy = ytil.dot(vinv_y);
    ev.mu = xy / h;
    ev.h = h;
    const double ypy = yy - xy * xy / h;
    ev.loglik = -0.5 * (static_cast<double>(n_c - 1) * kLog2Pi + logdet + std::log(h) + ypy) -
                0.5 * (n_within * (kLog2Pi + std::log(seps2)) + ss_within / seps2);
    if (want_blups) ev.vinv_r = llt.solve((ytil - sw * ev.mu).eval());
    return ev;
  };

  GxeblupFit fit;
  std::vector<double> yields;
  yields.reserve(d.records.size());
  for (const auto& r : d.records) yields.push_back(r.yield);
  const double v_p = sample_variance(yields);

  if (opts.fixed_variances) {
    if (opts.fixed_variances->size() != 4)
      throw ValidationError("GxEBLUP expects 4 fixed variance components");
    fit.sigma_g2 = (*opts.fixed_variances)[0];
    fit.sigma_e2 = (*opts.fixed_variances)[1];
    fit.sigma_ge2 = (*opts.fixed_variances)[2];
    fit.sigma_eps2 = (*opts.fixed_variances)[3];
  } else {
    if (!(v_p > 0.0)) throw NumericError("GxEBLUP: zero phenotypic variance");
    const double floor = 1e-10 * v_p;
    auto var_of = [floor](double th) { return floor + std::exp(std::min(th, 50.0)); };
    ObjectiveFn obj = [&](const Eigen::VectorXd& th) {
      return -evaluate(var_of(th[0]), var_of(th[1]), var_of(th[2]), var_of(th[3]), false)
                  .loglik;
    };
    // the four-component surface confounds main and interaction terms; a few
    // fixed starts avoid the worst local optima
    const double w[3][4] = {{0.25, 0.25, 0.25, 0.25},
                            {0.45, 0.15, 0.05, 0.35},
                            {0.05, 0.15, 0.55, 0.25}};
    OptimOptions oo;
    oo.tol = 1e-9;
    OptimResult res;
    bool have = false;
    for (const auto& start : w) {
      Eigen::VectorXd th0(4);
      for (int k = 0; k < 4; ++k) th0[k] = std::log(start[k] * v_p);
      const OptimResult run = bfgs_minimize(obj, nullptr, th0, oo);
      if (!have || run.f < res.f) {
        res = run;
        have = true;
      }
    }
    fit.sigma_g2 = var_of(res.x[0]);
    fit.sigma_e2 = var_of(res.x[1]);
    fit.sigma_ge2 = var_of(res.x[2]);
    fit.sigma_eps2 = var_of(res.x[3]);
  }

  const Eval ev = evaluate(fit.sigma_g2, fit.sigma_e2, fit.sigma_ge2, fit.sigma_eps2, true);
  if (!std::isfinite(ev.loglik))
    throw NumericError("GxEBLUP: covariance not positive definite at the solution");
  fit.reml_loglik = ev.loglik;
  fit.mu = ev.mu;
  fit.kg = kg;
  fit.ke = ke;
  fit.cell_genotype = gi;
  fit.cell_env = ej;
  fit.alpha = sw.array() * ev.vinv_r.array();
  return fit;
}

// ---- budget subsampling ---------------------------------------------------------

Dataset subsample_for_budget(const Dataset& d, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw ValidationError("fraction must be in (0, 1]");
  if (fraction == 1.0) return d;

  const long target = std::lround(fraction * static_cast<double>(d.n_s()));
  if (target < 1) throw ValidationError("fraction leaves no samples");

  // collapse replicates: keep the smallest replicate index per cell
  std::map<std::pair<std::string, std::string>, std::size_t> keep;
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    const auto& r = d.records[i];
    auto key = std::make_pair(r.genotype_id, r.environment_id);
    auto it = keep.find(key);
    if (it == keep.end() || r.replicate < d.records[it->second].replicate) keep[key] = i;
  }
  std::vector<bool> kept(d.records.size(), false);
  for (const auto& [key, idx] : keep) kept[idx] = true;

  std::map<std::string, long> geno_count;
  std::map<std::string, long> env_count;
  std::map<std::string, std::vector<std::size_t>> geno_records;
  long count = 0;
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    if (!kept[i]) continue;
    ++geno_count[d.records[i].genotype_id];
    ++env_count[d.records[i].environment_id];
    geno_records[d.records[i].genotype_id].push_back(i);
    ++count;
  }

  Rng rng(seed);
  while (count > target) {
    // most frequently observed genotypes lose samples first
    std::vector<std::pair<long, std::string>> order;
    for (const auto& [g, c] : geno_count) order.emplace_back(-c, g);
    std::sort(order.begin(), order.end());
    bool removed = false;
    for (const auto& [negc, g] : order) {
      if (-negc < 2) break;  // removing would strand the genotype
      std::vector<std::size_t> eligible;
      for (std::size_t i : geno_records[g]) {
        if (!kept[i]) continue;
        if (env_count[d.records[i].environment_id] < 2) continue;
        eligible.push_back(i);
      }
      if (eligible.empty()) continue;
      const std::size_t pick = eligible[rng.uniform_int(eligible.size())];
      kept[pick] = false;
      --geno_count[g];
      --env_count[d.records[pick].environment_id];
      --count;
      removed = true;
      break;
    }
    if (!removed)
      throw ValidationError("subsample_for_budget: fraction so small that a genotype or "
                            "environment would vanish");
  }

  Dataset out;
  out.genotypes = d.genotypes;
  out.environments = d.environments;
  for (std::size_t i = 0; i < d.records.size(); ++i)
    if (kept[i]) out.records.push_back(d.records[i]);
  return out;
}

void write_kernel_fit_csv(const std::string& path, const std::string& model,
                          const std::vector<std::pair<std::string, double>>& params) {
  CsvWriter w(path);
  w.write_row({"model", "param", "value"});
  for (const auto& [name, value] : params)
    w.write_row({model, name, format_double(value)});
}

}  // namespace gxe
