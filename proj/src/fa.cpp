#include "gxe/fa.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "gxe/optim.hpp"
#include "gxe/rng.hpp"
#include "gxe/stats.hpp"

namespace gxe {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;
}

CollapsedCells CollapsedCells::build(const Dataset& d) {
  CollapsedCells cc;
  cc.n_g = d.genotypes.n();
  cc.n_e = d.environments.n();

  struct Obs {
    int g;
    int e;
    double y;
  };
  std::vector<Obs> obs;
  obs.reserve(d.records.size());
  for (const auto& r : d.records) {
    const int g = d.genotypes.find(r.genotype_id);
    const int e = d.environments.find(r.environment_id);
    if (g < 0) throw ValidationError("unresolved genotype in records: " + r.genotype_id);
    if (e < 0) throw ValidationError("unresolved environment in records: " + r.environment_id);
    if (is_missing(r.yield))
      throw ValidationError("missing yield reached the model stage; filter first");
    obs.push_back({g, e, r.yield});
    cc.y_sum += r.yield;
  }
  cc.n_obs = static_cast<long>(obs.size());
  std::sort(obs.begin(), obs.end(), [](const Obs& a, const Obs& b) {
    return std::tie(a.g, a.e) < std::tie(b.g, b.e);
  });

  std::size_t i = 0;
  while (i < obs.size()) {
    std::size_t j = i;
    double sum = 0.0;
    while (j < obs.size() && obs[j].g == obs[i].g && obs[j].e == obs[i].e) {
      sum += obs[j].y;
      ++j;
    }
    Cell cell;
    cell.g = obs[i].g;
    cell.e = obs[i].e;
    cell.w = static_cast<double>(j - i);
    cell.ybar = sum / cell.w;
    for (std::size_t k = i; k < j; ++k)
      cell.ss += (obs[k].y - cell.ybar) * (obs[k].y - cell.ybar);
    cc.cells.push_back(cell);
    i = j;
  }

  cc.by_genotype.assign(cc.n_g, {0, 0});
  std::size_t c = 0;
  for (int g = 0; g < cc.n_g; ++g) {
    const int begin = static_cast<int>(c);
    while (c < cc.cells.size() && cc.cells[c].g == g) ++c;
    cc.by_genotype[g] = {begin, static_cast<int>(c)};
  }
  return cc;
}

namespace {

// Per-genotype-block REML evaluation of the FA model on collapsed cells.
// Fixed effects: intercept plus sum-to-zero environment contrasts with the
// last environment as reference; p = n_e columns.
struct FaEval {
  double loglik = 0.0;
  Eigen::VectorXd beta;
  Eigen::MatrixXd hinv;
  // gradient of the log-likelihood w.r.t. raw parameters
  double d_sigma_g2 = 0.0;
  Eigen::MatrixXd d_lambda;
  Eigen::VectorXd d_psi;
  Eigen::VectorXd d_resid;
  // BLUPs
  Eigen::VectorXd blup_g;
  Eigen::MatrixXd blup_ge;
};

Eigen::RowVectorXd design_row(int env, int n_e, double sw) {
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(n_e);
  row[0] = sw;
  if (env < n_e - 1)
    row[1 + env] = sw;
  else
    for (int k = 1; k < n_e; ++k) row[k] = -sw;
  return row;
}

[[noreturn]] void throw_not_pd(double sigma_g2, const Eigen::VectorXd& psi,
                               const Eigen::VectorXd& resid) {
  std::ostringstream os;
  os << "covariance not positive definite (sigma_g2=" << sigma_g2
     << ", min psi=" << psi.minCoeff() << ", min resid=" << resid.minCoeff() << ")";
  throw NumericError(os.str());
}

// soft_fail: optimizer line searches step into overflow territory; report
// -inf instead of throwing so the step is rejected
FaEval fa_evaluate(const CollapsedCells& cc, double sigma_g2, const Eigen::MatrixXd& lambda,
                   const Eigen::VectorXd& psi, const Eigen::VectorXd& resid, bool want_grad,
                   bool want_blups, bool soft_fail = false) {
  const int n_e = cc.n_e;
  const int p = n_e;
  const long n = cc.n_obs;
  const long n_cells = static_cast<long>(cc.cells.size());

  std::vector<long> env_cells(n_e, 0);
  for (const auto& cell : cc.cells) ++env_cells[cell.e];
  for (int j = 0; j < n_e; ++j)
    if (env_cells[j] == 0)
      throw ValidationError("environment " + std::to_string(j) +
                            " has no data: singular fixed-effect design");
  if (n <= p) throw ValidationError("not enough observations for REML");

  const Eigen::MatrixXd sigma_e =
      lambda * lambda.transpose() + Eigen::MatrixXd(psi.asDiagonal());

  double logdet_v = 0.0;
  Eigen::MatrixXd xtvx = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd xtvy = Eigen::VectorXd::Zero(p);
  double ytvy = 0.0;

  struct Block {
    int begin, end;
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    Eigen::LLT<Eigen::MatrixXd> llt;
  };
  std::vector<Block> blocks;
  blocks.reserve(cc.by_genotype.size());

  for (const auto& [begin, end] : cc.by_genotype) {
    const int m = end - begin;
    if (m == 0) continue;
    Block blk;
    blk.begin = begin;
    blk.end = end;
    Eigen::MatrixXd v(m, m);
    blk.x.resize(m, p);
    blk.y.resize(m);
    for (int a = 0; a < m; ++a) {
      const auto& ca = cc.cells[begin + a];
      const double swa = std::sqrt(ca.w);
      blk.y[a] = swa * ca.ybar;
      blk.x.row(a) = design_row(ca.e, n_e, swa);
      for (int b = 0; b <= a; ++b) {
        const auto& cb = cc.cells[begin + b];
        double cov = swa * std::sqrt(cb.w) * (sigma_g2 + sigma_e(ca.e, cb.e));
        if (a == b) cov += resid[ca.e];
        v(a, b) = cov;
        v(b, a) = cov;
      }
    }
    blk.llt.compute(v);
    if (blk.llt.info() != Eigen::Success) {
      if (soft_fail) {
        FaEval bad;
        bad.loglik = -std::numeric_limits<double>::infinity();
        return bad;
      }
      throw_not_pd(sigma_g2, psi, resid);
    }
    const Eigen::MatrixXd& l = blk.llt.matrixLLT();
    for (int a = 0; a < m; ++a) {
      if (!(l(a, a) > 0.0)) {
        if (soft_fail) {
          FaEval bad;
          bad.loglik = -std::numeric_limits<double>::infinity();
          return bad;
        }
        throw_not_pd(sigma_g2, psi, resid);
      }
      logdet_v += 2.0 * std::log(l(a, a));
    }
    const Eigen::MatrixXd vinv_x = blk.llt.solve(blk.x);
    const Eigen::VectorXd vinv_y = blk.llt.solve(blk.y);
    xtvx.noalias() += blk.x.transpose() * vinv_x;
    xtvy.noalias() += blk.x.transpose() * vinv_y;
    ytvy += blk.y.dot(vinv_y);
    blocks.push_back(std::move(blk));
  }

  Eigen::LLT<Eigen::MatrixXd> hllt(xtvx);
  if (hllt.info() != Eigen::Success || !xtvx.allFinite()) {
    if (soft_fail) {
      FaEval bad;
      bad.loglik = -std::numeric_limits<double>::infinity();
      return bad;
    }
    throw ValidationError("singular fixed-effect design");
  }
  double logdet_h = 0.0;
  for (int a = 0; a < p; ++a) logdet_h += 2.0 * std::log(hllt.matrixLLT()(a, a));

  FaEval ev;
  ev.beta = hllt.solve(xtvy);
  const double ypy = ytvy - xtvy.dot(ev.beta);

  // within-cell replicate contrasts: pure residual error contrasts
  double contrast_ll = 0.0;
  for (const auto& cell : cc.cells) {
    if (cell.w > 1.0)
      contrast_ll -= 0.5 * ((cell.w - 1.0) * (kLog2Pi + std::log(resid[cell.e])) +
                            cell.ss / resid[cell.e]);
  }

  ev.loglik = -0.5 * (static_cast<double>(n_cells - p) * kLog2Pi + logdet_v + logdet_h + ypy) +
              contrast_ll;

  if (!want_grad && !want_blups) return ev;

  ev.hinv = hllt.solve(Eigen::MatrixXd::Identity(p, p));
  if (want_grad) {
    ev.d_lambda = Eigen::MatrixXd::Zero(n_e, lambda.cols());
    ev.d_psi = Eigen::VectorXd::Zero(n_e);
    ev.d_resid = Eigen::VectorXd::Zero(n_e);
  }
  if (want_blups) {
    ev.blup_g = Eigen::VectorXd::Zero(cc.n_g);
    ev.blup_ge = Eigen::MatrixXd::Zero(cc.n_g, n_e);
  }

  Eigen::MatrixXd t_mat = Eigen::MatrixXd::Zero(n_e, n_e);
  Eigen::VectorXd eps_acc = Eigen::VectorXd::Zero(n_e);

  for (const auto& blk : blocks) {
    const int m = blk.end - blk.begin;
    const Eigen::VectorXd resid_vec = blk.y - blk.x * ev.beta;
    const Eigen::VectorXd vinv_r = blk.llt.solve(resid_vec);

    if (want_blups) {
      const int gi = cc.cells[blk.begin].g;
      Eigen::VectorXd a_vinv_r = Eigen::VectorXd::Zero(n_e);
      for (int a = 0; a < m; ++a) {
        const auto& cell = cc.cells[blk.begin + a];
        a_vinv_r[cell.e] += std::sqrt(cell.w) * vinv_r[a];
      }
      ev.blup_g[gi] = sigma_g2 * a_vinv_r.sum();
      ev.blup_ge.row(gi) = (sigma_e * a_vinv_r).transpose();
    }

    if (!want_grad) continue;

    const Eigen::MatrixXd vinv = blk.llt.solve(Eigen::MatrixXd::Identity(m, m));
    const Eigen::MatrixXd vinv_x = blk.llt.solve(blk.x);

    Eigen::MatrixXd m_mat = Eigen::MatrixXd::Zero(n_e, n_e);
    Eigen::MatrixXd f_mat = Eigen::MatrixXd::Zero(p, n_e);
    Eigen::VectorXd g_vec = Eigen::VectorXd::Zero(n_e);
    for (int a = 0; a < m; ++a) {
      const auto& ca = cc.cells[blk.begin + a];
      const double swa = std::sqrt(ca.w);
      g_vec[ca.e] += swa * vinv_r[a];
      f_mat.col(ca.e) += swa * vinv_x.row(a).transpose();
      for (int b = 0; b < m; ++b) {
        const auto& cb = cc.cells[blk.begin + b];
        m_mat(ca.e, cb.e) += swa * std::sqrt(cb.w) * vinv(a, b);
      }
    }
    t_mat.noalias() += m_mat - f_mat.transpose() * ev.hinv * f_mat - g_vec * g_vec.transpose();

    for (int a = 0; a < m; ++a) {
      const auto& ca = cc.cells[blk.begin + a];
      const Eigen::VectorXd va = vinv_x.row(a).transpose();
      eps_acc[ca.e] += vinv(a, a) - va.dot(ev.hinv * va) - vinv_r[a] * vinv_r[a];
    }
  }

  if (want_grad) {
    ev.d_sigma_g2 = -0.5 * t_mat.sum();
    ev.d_lambda = -(t_mat * lambda);
    for (int j = 0; j < n_e; ++j) ev.d_psi[j] = -0.5 * t_mat(j, j);
    ev.d_resid = -0.5 * eps_acc;
    for (const auto& cell : cc.cells) {
      if (cell.w > 1.0)
        ev.d_resid[cell.e] -= 0.5 * ((cell.w - 1.0) / resid[cell.e] -
                                     cell.ss / (resid[cell.e] * resid[cell.e]));
    }
  }
  return ev;
}

// unconstrained parameterization: log-variances plus free loadings
struct FaPacking {
  int n_e;
  int r;
  double floor;

  int lambda_free() const { return n_e * r - r * (r - 1) / 2; }
  int size() const { return 1 + lambda_free() + 2 * n_e; }

  // exp argument clamped so wild line-search steps stay finite
  static double var_of(double theta, double floor) {
    return floor + std::exp(std::min(theta, 50.0));
  }

  void unpack(const Eigen::VectorXd& theta, double& sigma_g2, Eigen::MatrixXd& lambda,
              Eigen::VectorXd& psi, Eigen::VectorXd& resid) const {
    sigma_g2 = var_of(theta[0], floor);
    lambda = Eigen::MatrixXd::Zero(n_e, r);
    int k = 1;
    for (int b = 0; b < r; ++b)
      for (int i = b; i < n_e; ++i) lambda(i, b) = theta[k++];
    psi.resize(n_e);
    resid.resize(n_e);
    for (int j = 0; j < n_e; ++j) psi[j] = var_of(theta[k + j], floor);
    for (int j = 0; j < n_e; ++j) resid[j] = var_of(theta[k + n_e + j], floor);
  }

  // chain rule: d/dtheta = d/dvar * exp(theta) for log-variance coordinates
  Eigen::VectorXd pack_gradient(const Eigen::VectorXd& theta, double d_sigma_g2,
                                const Eigen::MatrixXd& d_lambda, const Eigen::VectorXd& d_psi,
                                const Eigen::VectorXd& d_resid) const {
    auto dvar = [](double th) { return th < 50.0 ? std::exp(th) : 0.0; };
    Eigen::VectorXd g(size());
    g[0] = d_sigma_g2 * dvar(theta[0]);
    int k = 1;
    for (int b = 0; b < r; ++b)
      for (int i = b; i < n_e; ++i) g[k++] = d_lambda(i, b);
    for (int j = 0; j < n_e; ++j) g[k + j] = d_psi[j] * dvar(theta[k + j]);
    for (int j = 0; j < n_e; ++j)
      g[k + n_e + j] = d_resid[j] * dvar(theta[k + n_e + j]);
    return g;
  }
};

void check_params(const CollapsedCells& cc, const FAParams& p) {
  if (p.n_e() != cc.n_e || p.Lambda.rows() != cc.n_e || p.resid_vars.size() != cc.n_e)
    throw ValidationError("FAParams dimensions do not match the dataset");
  if (p.sigma_g2 < 0.0 || p.Psi.minCoeff() < 0.0)
    throw ValidationError("variances must be non-negative");
  if (p.resid_vars.minCoeff() <= 0.0)
    throw ValidationError("residual variances must be positive");
}

}  // namespace

double restricted_log_likelihood(const Dataset& d, const FAParams& p) {
  const CollapsedCells cc = CollapsedCells::build(d);
  check_params(cc, p);
  return fa_evaluate(cc, p.sigma_g2, p.Lambda, p.Psi, p.resid_vars, false, false).loglik;
}

Eigen::VectorXd reml_parameter_gradient(const Dataset& d, const FAParams& p) {
  const CollapsedCells cc = CollapsedCells::build(d);
  check_params(cc, p);
  const FaEval ev = fa_evaluate(cc, p.sigma_g2, p.Lambda, p.Psi, p.resid_vars, true, false);
  const int n_e = p.n_e(), r = p.r();
  Eigen::VectorXd g(1 + (n_e * r - r * (r - 1) / 2) + 2 * n_e);
  g[0] = ev.d_sigma_g2;
  int k = 1;
  for (int b = 0; b < r; ++b)
    for (int i = b; i < n_e; ++i) g[k++] = ev.d_lambda(i, b);
  for (int j = 0; j < n_e; ++j) g[k + j] = ev.d_psi[j];
  for (int j = 0; j < n_e; ++j) g[k + n_e + j] = ev.d_resid[j];
  return g;
}

MmeSolution solve_mme(const Dataset& d, const FAParams& p) {
  const CollapsedCells cc = CollapsedCells::build(d);
  check_params(cc, p);
  const FaEval ev = fa_evaluate(cc, p.sigma_g2, p.Lambda, p.Psi, p.resid_vars, false, true);
  MmeSolution sol;
  sol.blup_G = ev.blup_g;
  sol.blup_GE = ev.blup_ge;
  sol.mu = ev.beta[0];
  sol.env_fixed.resize(cc.n_e);
  double tail = 0.0;
  for (int j = 0; j + 1 < cc.n_e; ++j) {
    sol.env_fixed[j] = ev.beta[1 + j];
    tail -= ev.beta[1 + j];
  }
  sol.env_fixed[cc.n_e - 1] = tail;
  return sol;
}

FAFit fit_fa(const Dataset& d, const FaOptions& opts) {
  const CollapsedCells cc = CollapsedCells::build(d);
  const int n_e = cc.n_e;
  if (n_e < opts.r + 1)
    throw ValidationError("fit_fa needs n_e >= r + 1");
  for (int g = 0; g < cc.n_g; ++g)
    if (cc.by_genotype[g].first == cc.by_genotype[g].second)
      throw ValidationError("genotype " + d.genotypes.ids[g] + " has no observations");

  std::vector<double> yields;
  yields.reserve(d.records.size());
  for (const auto& r : d.records) yields.push_back(r.yield);
  const double v_p = sample_variance(yields);
  if (!(v_p > 0.0)) throw NumericError("zero phenotypic variance; nothing to fit");
  const double floor = 1e-10 * v_p;

  FaPacking pk{n_e, opts.r, floor};
  Eigen::VectorXd theta0(pk.size());
  theta0[0] = std::log(0.25 * v_p);
  const int k = 1 + pk.lambda_free();

  // per-environment sample variances of the raw yields
  std::vector<std::vector<double>> env_y(n_e);
  for (const auto& r : d.records)
    env_y[d.environments.find(r.environment_id)].push_back(r.yield);
  for (int j = 0; j < n_e; ++j) {
    const double vj = env_y[j].size() >= 2 ? sample_variance(env_y[j]) : v_p;
    theta0[k + j] = std::log(0.25 * v_p);
    theta0[k + n_e + j] = std::log(std::max(vj, 1e-4 * v_p));
  }

  ObjectiveFn obj = [&](const Eigen::VectorXd& theta) -> double {
    double sg;
    Eigen::MatrixXd lam;
    Eigen::VectorXd psi, resid;
    pk.unpack(theta, sg, lam, psi, resid);
    return -fa_evaluate(cc, sg, lam, psi, resid, false, false, true).loglik;
  };
  ObjectiveGradFn obj_grad;
  if (opts.analytic_gradient) {
    obj_grad = [&](const Eigen::VectorXd& theta, Eigen::VectorXd& grad) -> double {
      double sg;
      Eigen::MatrixXd lam;
      Eigen::VectorXd psi, resid;
      pk.unpack(theta, sg, lam, psi, resid);
      const FaEval ev = fa_evaluate(cc, sg, lam, psi, resid, true, false, true);
      if (!std::isfinite(ev.loglik)) {
        grad = Eigen::VectorXd::Zero(theta.size());
        return std::numeric_limits<double>::infinity();
      }
      grad = -pk.pack_gradient(theta, ev.d_sigma_g2, ev.d_lambda, ev.d_psi, ev.d_resid);
      return -ev.loglik;
    };
  }

  OptimOptions oo;
  oo.tol = opts.tol;
  oo.max_iter = opts.max_iter;

  // REML surfaces for factor models can hold poor local optima; a few seeded
  // loading initializations and the best final likelihood are kept
  Rng rng(derive_seed(opts.seed, "fa.lambda_init"));
  OptimResult res;
  bool have_result = false;
  const double lambda_sd = std::sqrt(0.01 * v_p);
  for (int start = 0; start < 3; ++start) {
    Eigen::VectorXd theta = theta0;
    const double scale = start == 1 ? 0.05 : 1.0;
    int kk = 1;
    for (int b = 0; b < opts.r; ++b)
      for (int i = b; i < n_e; ++i) theta[kk++] = rng.normal(0.0, lambda_sd * scale);
    const OptimResult run = bfgs_minimize(obj, obj_grad, theta, oo);
    if (!have_result || run.f < res.f) {
      res = run;
      have_result = true;
    }
  }

  FAFit fit;
  double sg;
  Eigen::MatrixXd lam;
  Eigen::VectorXd psi, resid;
  pk.unpack(res.x, sg, lam, psi, resid);
  fit.params.sigma_g2 = sg;
  fit.params.Lambda = lam;
  fit.params.Psi = psi;
  fit.params.resid_vars = resid;
  fit.converged = res.converged;
  fit.iterations = res.iterations;
  fit.reml_loglik = -res.f;
  fit.loglik_trace.reserve(res.trace.size());
  for (double f : res.trace) fit.loglik_trace.push_back(-f);

  const FaEval ev = fa_evaluate(cc, sg, lam, psi, resid, false, true);
  fit.params.mu = ev.beta[0];
  fit.params.env_fixed.resize(n_e);
  double tail = 0.0;
  for (int j = 0; j + 1 < n_e; ++j) {
    fit.params.env_fixed[j] = ev.beta[1 + j];
    tail -= ev.beta[1 + j];
  }
  fit.params.env_fixed[n_e - 1] = tail;
  fit.blup_G = ev.blup_g;
  fit.blup_GE = ev.blup_ge;

  fit.cell_pred.resize(cc.n_g, n_e);
  for (int i = 0; i < cc.n_g; ++i)
    for (int j = 0; j < n_e; ++j)
      fit.cell_pred(i, j) =
          fit.params.mu + fit.blup_G[i] + fit.params.env_fixed[j] + fit.blup_GE(i, j);
  return fit;
}

LabelSets generate_labels(const FAFit& fit, const Dataset& d) {
  const int n_g = static_cast<int>(fit.cell_pred.rows());
  const int n_e = static_cast<int>(fit.cell_pred.cols());
  if (d.n_s() == 0) throw ValidationError("empty dataset");

  LabelSets ls;
  double sum = 0.0;
  for (const auto& r : d.records) sum += r.yield;
  ls.mu_hat = sum / static_cast<double>(d.n_s());

  ls.y_g = fit.cell_pred.rowwise().mean().array() - ls.mu_hat;
  ls.y_e = fit.cell_pred.colwise().mean().transpose().array() - ls.mu_hat;
  ls.y_ge.resize(n_g, n_e);
  for (int i = 0; i < n_g; ++i)
    for (int j = 0; j < n_e; ++j)
      ls.y_ge(i, j) = fit.cell_pred(i, j) - ls.mu_hat - ls.y_g[i] - ls.y_e[j];
  return ls;
}

RankingFit fit_ranking_model(const std::vector<PredTriple>& preds,
                             const std::pair<double, double>* fixed_vars) {
  RankingFit rf;
  std::map<std::string, int> gidx, eidx;
  for (const auto& t : preds) {
    if (gidx.emplace(t.genotype_id, 0).second) rf.genotype_ids.push_back(t.genotype_id);
    if (eidx.emplace(t.environment_id, 0).second) rf.environment_ids.push_back(t.environment_id);
  }
  std::sort(rf.genotype_ids.begin(), rf.genotype_ids.end());
  std::sort(rf.environment_ids.begin(), rf.environment_ids.end());
  for (std::size_t i = 0; i < rf.genotype_ids.size(); ++i) gidx[rf.genotype_ids[i]] = static_cast<int>(i);
  for (std::size_t i = 0; i < rf.environment_ids.size(); ++i)
    eidx[rf.environment_ids[i]] = static_cast<int>(i);

  const int n_g = static_cast<int>(rf.genotype_ids.size());
  const int n_env = static_cast<int>(rf.environment_ids.size());
  if (n_g < 2)
    throw ValidationError("ranking model needs at least 2 genotypes");
  if (n_env < 1) throw ValidationError("ranking model needs at least 1 environment");

  // observations grouped by genotype
  std::vector<std::vector<std::pair<int, double>>> by_g(n_g);
  std::vector<double> values;
  for (const auto& t : preds) {
    by_g[gidx[t.genotype_id]].emplace_back(eidx[t.environment_id], t.value);
    values.push_back(t.value);
  }
  const long n = static_cast<long>(values.size());
  const double v_p = sample_variance(values);
  const double scale = std::max(1.0, mean(values) * mean(values));

  // degenerate: identical predictions everywhere (up to accumulation noise)
  if (!(v_p > 1e-14 * scale)) {
    rf.genetic_effects = Eigen::VectorXd::Zero(n_g);
    rf.env_means.resize(n_env);
    std::vector<double> esum(n_env, 0.0);
    std::vector<long> ecnt(n_env, 0);
    for (const auto& t : preds) {
      esum[eidx[t.environment_id]] += t.value;
      ++ecnt[eidx[t.environment_id]];
    }
    for (int j = 0; j < n_env; ++j) rf.env_means[j] = esum[j] / static_cast<double>(ecnt[j]);
    rf.sigma_g2 = 0.0;
    rf.resid_var = 0.0;
    return rf;
  }

  const double floor = 1e-10 * v_p;
  const int p = n_env;
  if (n <= p)
    throw ValidationError("ranking model needs more observations than environments");

  // REML of y = mu_j + G_i + eps; per-genotype blocks have
  // V = resid I + sigma_g2 11^T (Sherman-Morrison closed forms).
  auto evaluate = [&](double sg2, double se2, Eigen::VectorXd* beta_out,
                      Eigen::VectorXd* blup_out) -> double {
    double logdet_v = 0.0, ytvy = 0.0;
    Eigen::MatrixXd xtvx = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd xtvy = Eigen::VectorXd::Zero(p);
    for (int i = 0; i < n_g; ++i) {
      const int m = static_cast<int>(by_g[i].size());
      const double denom = se2 + m * sg2;
      const double kappa = sg2 / denom;
      logdet_v += (m - 1) * std::log(se2) + std::log(denom);
      Eigen::VectorXd t = Eigen::VectorXd::Zero(p);
      double ysum = 0.0, yy = 0.0;
      Eigen::VectorXd xty = Eigen::VectorXd::Zero(p);
      Eigen::VectorXd diag = Eigen::VectorXd::Zero(p);
      for (const auto& [e, y] : by_g[i]) {
        t[e] += 1.0;
        ysum += y;
        yy += y * y;
        xty[e] += y;
        diag[e] += 1.0;
      }
      xtvx += (Eigen::MatrixXd(diag.asDiagonal()) - kappa * t * t.transpose()) / se2;
      xtvy += (xty - kappa * ysum * t) / se2;
      ytvy += (yy - kappa * ysum * ysum) / se2;
    }
    Eigen::LLT<Eigen::MatrixXd> hllt(xtvx);
    if (hllt.info() != Eigen::Success || !xtvx.allFinite()) {
      if (!beta_out && !blup_out) return -std::numeric_limits<double>::infinity();
      throw NumericError("ranking model: singular design");
    }
    double logdet_h = 0.0;
    for (int a = 0; a < p; ++a) logdet_h += 2.0 * std::log(hllt.matrixLLT()(a, a));
    const Eigen::VectorXd beta = hllt.solve(xtvy);
    const double ypy = ytvy - xtvy.dot(beta);
    if (beta_out) *beta_out = beta;
    if (blup_out) {
      blup_out->resize(n_g);
      for (int i = 0; i < n_g; ++i) {
        const int m = static_cast<int>(by_g[i].size());
        double rsum = 0.0;
        for (const auto& [e, y] : by_g[i]) rsum += y - beta[e];
        (*blup_out)[i] = sg2 * rsum / (se2 + m * sg2);
      }
    }
    return -0.5 * (static_cast<double>(n - p) * kLog2Pi + logdet_v + logdet_h + ypy);
  };

  double sg2, se2;
  if (fixed_vars) {
    sg2 = fixed_vars->first;
    se2 = fixed_vars->second;
  } else {
    auto var_of = [floor](double th) { return floor + std::exp(std::min(th, 50.0)); };
    ObjectiveFn obj = [&](const Eigen::VectorXd& th) -> double {
      return -evaluate(var_of(th[0]), var_of(th[1]), nullptr, nullptr);
    };
    Eigen::VectorXd th0(2);
    th0[0] = std::log(0.5 * v_p);
    th0[1] = std::log(0.5 * v_p);
    OptimOptions oo;
    oo.tol = 1e-10;
    const OptimResult res = bfgs_minimize(obj, nullptr, th0, oo);
    sg2 = var_of(res.x[0]);
    se2 = var_of(res.x[1]);
  }

  Eigen::VectorXd beta, blup;
  evaluate(sg2, se2, &beta, &blup);
  rf.env_means = beta;
  rf.genetic_effects = blup;
  rf.sigma_g2 = sg2;
  rf.resid_var = se2;
  return rf;
}

// ---- I/O ---------------------------------------------------------------------

void write_fa_fit_csv(const std::string& path, const FAFit& fit) {
  CsvWriter w(path);
  w.write_row({"param", "index1", "index2", "value"});
  w.write_row({"mu", "", "", format_double(fit.params.mu)});
  w.write_row({"sigma_g2", "", "", format_double(fit.params.sigma_g2)});
  for (int j = 0; j < fit.params.n_e(); ++j)
    w.write_row({"env_fixed", std::to_string(j), "", format_double(fit.params.env_fixed[j])});
  for (int j = 0; j < fit.params.n_e(); ++j)
    for (int b = 0; b < fit.params.r(); ++b)
      w.write_row({"lambda", std::to_string(j), std::to_string(b),
                   format_double(fit.params.Lambda(j, b))});
  for (int j = 0; j < fit.params.n_e(); ++j)
    w.write_row({"psi", std::to_string(j), "", format_double(fit.params.Psi[j])});
  for (int j = 0; j < fit.params.n_e(); ++j)
    w.write_row({"resid_var", std::to_string(j), "", format_double(fit.params.resid_vars[j])});
  w.write_row({"reml_loglik", "", "", format_double(fit.reml_loglik)});
  w.write_row({"converged", "", "", fit.converged ? "1" : "0"});
  w.write_row({"iterations", "", "", std::to_string(fit.iterations)});
}

void write_blups_csv(const std::string& path, const FAFit& fit, const Dataset& d) {
  CsvWriter w(path);
  w.write_row({"genotype_id", "environment_id", "blup_g", "blup_ge", "cell_pred"});
  for (int i = 0; i < d.genotypes.n(); ++i)
    for (int j = 0; j < d.environments.n(); ++j)
      w.write_row({d.genotypes.ids[i], d.environments.ids[j], format_double(fit.blup_G[i]),
                   format_double(fit.blup_GE(i, j)), format_double(fit.cell_pred(i, j))});
}

void write_labels_csv(const std::string& path, const LabelSets& labels, const Dataset& d) {
  CsvWriter w(path);
  w.write_row({"genotype_id", "environment_id", "y_g", "y_e", "y_ge", "mu_hat"});
  for (int i = 0; i < d.genotypes.n(); ++i)
    for (int j = 0; j < d.environments.n(); ++j)
      w.write_row({d.genotypes.ids[i], d.environments.ids[j], format_double(labels.y_g[i]),
                   format_double(labels.y_e[j]), format_double(labels.y_ge(i, j)),
                   format_double(labels.mu_hat)});
}

LabelSets read_labels_csv(const std::string& path, const Dataset& d) {
  CsvReader reader(path);
  std::vector<std::string> row;
  if (!reader.next_row(row)) reader.fail("empty labels file");
  if (row != std::vector<std::string>{"genotype_id", "environment_id", "y_g", "y_e", "y_ge",
                                      "mu_hat"})
    reader.fail("malformed labels header");
  LabelSets ls;
  const int n_g = d.genotypes.n(), n_e = d.environments.n();
  ls.y_g = Eigen::VectorXd::Constant(n_g, missing_value());
  ls.y_e = Eigen::VectorXd::Constant(n_e, missing_value());
  ls.y_ge = Eigen::MatrixXd::Constant(n_g, n_e, missing_value());
  while (reader.next_row(row)) {
    if (row.size() != 6) reader.fail("expected 6 fields");
    const int i = d.genotypes.find(row[0]);
    const int j = d.environments.find(row[1]);
    if (i < 0 || j < 0) reader.fail("unknown id in labels file");
    ls.y_g[i] = reader.parse_double(row[2], "y_g");
    ls.y_e[j] = reader.parse_double(row[3], "y_e");
    ls.y_ge(i, j) = reader.parse_double(row[4], "y_ge");
    ls.mu_hat = reader.parse_double(row[5], "mu_hat");
  }
  for (int i = 0; i < n_g; ++i)
    for (int j = 0; j < n_e; ++j)
      if (is_missing(ls.y_ge(i, j)))
        throw ValidationError("labels file does not cover the full grid");
  return ls;
}

}  // namespace gxe
