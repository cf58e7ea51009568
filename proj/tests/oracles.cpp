#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace gxe::oracle {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

struct Resolved {
  std::vector<int> g, e;
  Eigen::VectorXd y;
  int n_g = 0, n_e = 0;
};

Resolved resolve(const Dataset& d) {
  Resolved r;
  r.n_g = d.genotypes.n();
  r.n_e = d.environments.n();
  r.y.resize(static_cast<Eigen::Index>(d.records.size()));
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    r.g.push_back(d.genotypes.find(d.records[i].genotype_id));
    r.e.push_back(d.environments.find(d.records[i].environment_id));
    r.y[static_cast<Eigen::Index>(i)] = d.records[i].yield;
  }
  return r;
}

// fixed-effect design: intercept + sum-to-zero contrasts, last env reference
Eigen::MatrixXd design(const Resolved& r) {
  const int n = static_cast<int>(r.g.size());
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, r.n_e);
  for (int s = 0; s < n; ++s) {
    x(s, 0) = 1.0;
    if (r.e[s] < r.n_e - 1)
      x(s, 1 + r.e[s]) = 1.0;
    else
      for (int k = 1; k < r.n_e; ++k) x(s, k) = -1.0;
  }
  return x;
}

Eigen::MatrixXd dense_v(const Resolved& r, const FAParams& p) {
  const int n = static_cast<int>(r.g.size());
  const Eigen::MatrixXd sigma_e = p.sigma_e();
  Eigen::MatrixXd v(n, n);
  for (int s = 0; s < n; ++s)
    for (int t = 0; t < n; ++t) {
      double cov = 0.0;
      if (r.g[s] == r.g[t]) cov += p.sigma_g2 + sigma_e(r.e[s], r.e[t]);
      if (s == t) cov += p.resid_vars[r.e[s]];
      v(s, t) = cov;
    }
  return v;
}

}  // namespace

double dense_reml_loglik(const Dataset& d, const FAParams& p) {
  const Resolved r = resolve(d);
  const int n = static_cast<int>(r.g.size());
  const int q = r.n_e;  // fixed-effect count
  const Eigen::MatrixXd v = dense_v(r, p);
  const Eigen::MatrixXd x = design(r);

  const Eigen::LLT<Eigen::MatrixXd> llt(v);
  double logdet_v = 0.0;
  for (int i = 0; i < n; ++i) logdet_v += 2.0 * std::log(llt.matrixLLT()(i, i));
  const Eigen::MatrixXd vinv_x = llt.solve(x);
  const Eigen::VectorXd vinv_y = llt.solve(r.y);
  const Eigen::MatrixXd xtvx = x.transpose() * vinv_x;
  const Eigen::VectorXd xtvy = x.transpose() * vinv_y;
  const Eigen::LLT<Eigen::MatrixXd> hllt(xtvx);
  double logdet_h = 0.0;
  for (int i = 0; i < q; ++i) logdet_h += 2.0 * std::log(hllt.matrixLLT()(i, i));
  const Eigen::VectorXd beta = hllt.solve(xtvy);
  const double ypy = r.y.dot(vinv_y) - xtvy.dot(beta);
  return -0.5 * (static_cast<double>(n - q) * kLog2Pi + logdet_v + logdet_h + ypy);
}

DenseMme dense_mme_solve(const Dataset& d, const FAParams& p) {
  const Resolved r = resolve(d);
  const int n = static_cast<int>(r.g.size());
  const int q = r.n_e;
  const int n_u = r.n_g + r.n_g * r.n_e;  // genotype effects + interaction effects

  const Eigen::MatrixXd x = design(r);
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(n, n_u);
  for (int s = 0; s < n; ++s) {
    z(s, r.g[s]) = 1.0;
    z(s, r.n_g + r.g[s] * r.n_e + r.e[s]) = 1.0;
  }
  Eigen::VectorXd rinv(n);
  for (int s = 0; s < n; ++s) rinv[s] = 1.0 / p.resid_vars[r.e[s]];

  // G^-1: block-diagonal inverse of the joint random-effect covariance
  const Eigen::MatrixXd sigma_e_inv = p.sigma_e().inverse();
  Eigen::MatrixXd ginv = Eigen::MatrixXd::Zero(n_u, n_u);
  for (int i = 0; i < r.n_g; ++i) ginv(i, i) = 1.0 / p.sigma_g2;
  for (int i = 0; i < r.n_g; ++i)
    ginv.block(r.n_g + i * r.n_e, r.n_g + i * r.n_e, r.n_e, r.n_e) = sigma_e_inv;

  Eigen::MatrixXd lhs(q + n_u, q + n_u);
  lhs.topLeftCorner(q, q) = x.transpose() * rinv.asDiagonal() * x;
  lhs.topRightCorner(q, n_u) = x.transpose() * rinv.asDiagonal() * z;
  lhs.bottomLeftCorner(n_u, q) = lhs.topRightCorner(q, n_u).transpose();
  lhs.bottomRightCorner(n_u, n_u) = z.transpose() * rinv.asDiagonal() * z + ginv;
  Eigen::VectorXd rhs(q + n_u);
  rhs.head(q) = x.transpose() * (rinv.asDiagonal() * r.y);
  rhs.tail(n_u) = z.transpose() * (rinv.asDiagonal() * r.y);

  const Eigen::VectorXd sol = lhs.ldlt().solve(rhs);
  DenseMme out;
  out.mu = sol[0];
  out.env_fixed.resize(r.n_e);
  double tail = 0.0;
  for (int j = 0; j + 1 < r.n_e; ++j) {
    out.env_fixed[j] = sol[1 + j];
    tail -= sol[1 + j];
  }
  out.env_fixed[r.n_e - 1] = tail;
  out.blup_g = sol.segment(q, r.n_g);
  out.blup_ge.resize(r.n_g, r.n_e);
  for (int i = 0; i < r.n_g; ++i)
    out.blup_ge.row(i) = sol.segment(q + r.n_g + i * r.n_e, r.n_e).transpose();
  return out;
}

Eigen::VectorXd dense_gblup_predict(const Dataset& d, const Eigen::MatrixXd& kg,
                                    const std::vector<std::string>& kernel_ids,
                                    double sigma_g2, double sigma_eps2,
                                    const std::vector<std::string>& predict_genotypes) {
  std::map<std::string, int> kidx;
  for (std::size_t i = 0; i < kernel_ids.size(); ++i) kidx[kernel_ids[i]] = static_cast<int>(i);
  const int n = static_cast<int>(d.records.size());
  std::vector<int> gi(n);
  Eigen::VectorXd y(n);
  for (int s = 0; s < n; ++s) {
    gi[s] = kidx.at(d.records[static_cast<std::size_t>(s)].genotype_id);
    y[s] = d.records[static_cast<std::size_t>(s)].yield;
  }
  Eigen::MatrixXd v(n, n);
  for (int s = 0; s < n; ++s)
    for (int t = 0; t < n; ++t)
      v(s, t) = sigma_g2 * kg(gi[s], gi[t]) + (s == t ? sigma_eps2 : 0.0);
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
  const Eigen::LLT<Eigen::MatrixXd> llt(v);
  const Eigen::VectorXd vinv_y = llt.solve(y);
  const Eigen::VectorXd vinv_1 = llt.solve(ones);
  const double mu = ones.dot(vinv_y) / ones.dot(vinv_1);
  const Eigen::VectorXd alpha = llt.solve((y.array() - mu).matrix());
  Eigen::VectorXd out(static_cast<Eigen::Index>(predict_genotypes.size()));
  for (std::size_t k = 0; k < predict_genotypes.size(); ++k) {
    const int a = kidx.at(predict_genotypes[k]);
    double acc = 0.0;
    for (int s = 0; s < n; ++s) acc += sigma_g2 * kg(a, gi[s]) * alpha[s];
    out[static_cast<Eigen::Index>(k)] = mu + acc;
  }
  return out;
}

Eigen::VectorXd dense_gxeblup_predict(
    const Dataset& d, const Eigen::MatrixXd& kg, const std::vector<std::string>& kg_ids,
    const Eigen::MatrixXd& ke, const std::vector<std::string>& ke_ids, double sigma_g2,
    double sigma_e2, double sigma_ge2, double sigma_eps2,
    const std::vector<std::pair<std::string, std::string>>& predict_cells) {
  std::map<std::string, int> gidx, eidx;
  for (std::size_t i = 0; i < kg_ids.size(); ++i) gidx[kg_ids[i]] = static_cast<int>(i);
  for (std::size_t i = 0; i < ke_ids.size(); ++i) eidx[ke_ids[i]] = static_cast<int>(i);
  const int n_g = static_cast<int>(kg_ids.size());
  const int n_e = static_cast<int>(ke_ids.size());

  // materialized Kronecker covariance of the interaction term (test scale only)
  Eigen::MatrixXd kron(n_g * n_e, n_g * n_e);
  for (int a = 0; a < n_g; ++a)
    for (int b = 0; b < n_e; ++b)
      for (int c = 0; c < n_g; ++c)
        for (int f = 0; f < n_e; ++f)
          kron(a * n_e + b, c * n_e + f) = kg(a, c) * ke(b, f);

  const int n = static_cast<int>(d.records.size());
  std::vector<int> gi(n), ei(n);
  Eigen::VectorXd y(n);
  for (int s = 0; s < n; ++s) {
    gi[s] = gidx.at(d.records[static_cast<std::size_t>(s)].genotype_id);
    ei[s] = eidx.at(d.records[static_cast<std::size_t>(s)].environment_id);
    y[s] = d.records[static_cast<std::size_t>(s)].yield;
  }
  Eigen::MatrixXd v(n, n);
  for (int s = 0; s < n; ++s)
    for (int t = 0; t < n; ++t)
      v(s, t) = sigma_g2 * kg(gi[s], gi[t]) + sigma_e2 * ke(ei[s], ei[t]) +
                sigma_ge2 * kron(gi[s] * n_e + ei[s], gi[t] * n_e + ei[t]) +
                (s == t ? sigma_eps2 : 0.0);
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
  const Eigen::LLT<Eigen::MatrixXd> llt(v);
  const double mu = ones.dot(llt.solve(y)) / ones.dot(llt.solve(ones));
  const Eigen::VectorXd alpha = llt.solve((y.array() - mu).matrix());

  Eigen::VectorXd out(static_cast<Eigen::Index>(predict_cells.size()));
  for (std::size_t k = 0; k < predict_cells.size(); ++k) {
    const int a = gidx.at(predict_cells[k].first);
    const int b = eidx.at(predict_cells[k].second);
    double acc = 0.0;
    for (int s = 0; s < n; ++s)
      acc += (sigma_g2 * kg(a, gi[s]) + sigma_e2 * ke(b, ei[s]) +
              sigma_ge2 * kron(a * n_e + b, gi[s] * n_e + ei[s])) *
             alpha[s];
    out[static_cast<Eigen::Index>(k)] = mu + acc;
  }
  return out;
}

double brute_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

double brute_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      double less = 0.0, equal = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (v[j] < v[i]) ++less;
        if (v[j] == v[i]) ++equal;
      }
      // average rank: count-based definition, no sorting involved
      out[i] = less + 0.5 * (equal + 1.0);
    }
    return out;
  };
  return brute_pearson(ranks(x), ranks(y));
}

}  // namespace gxe::oracle
