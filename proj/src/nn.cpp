#include "gxe/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace gxe {

namespace {
constexpr double kLnEps = 1e-5;

double sigmoid(double h) { return 1.0 / (1.0 + std::exp(-h)); }
}  // namespace

MLPSpec genotype_encoder_spec(int d_g, int first_width) {
  MLPSpec spec;
  spec.input_dim = d_g;
  spec.hidden = {{first_width, Act::Relu}, {std::max(1, first_width / 2), Act::Sigmoid}};
  spec.layer_norm = true;
  spec.dropout_rate = 0.5;
  return spec;
}

MLPSpec env_encoder_spec(int d_e, int width, int n_layers) {
  MLPSpec spec;
  spec.input_dim = d_e;
  for (int l = 0; l + 1 < n_layers; ++l) spec.hidden.push_back({width, Act::Relu});
  spec.hidden.push_back({std::max(1, width / 2), Act::Sigmoid});
  spec.layer_norm = true;
  spec.dropout_rate = 0.5;
  return spec;
}

Mlp Mlp::build(const MLPSpec& spec, std::uint64_t init_seed) {
  if (spec.input_dim < 1) throw ValidationError("MLP input dimension must be >= 1");
  if (spec.dropout_rate < 0.0 || spec.dropout_rate >= 1.0)
    throw ValidationError("dropout rate must be in [0, 1)");
  for (const auto& l : spec.hidden)
    if (l.width < 1) throw ValidationError("layer widths must be >= 1");

  Mlp m;
  m.spec = spec;
  int off = 0;
  int in = spec.input_dim;
  for (const auto& l : spec.hidden) {
    LayerOffsets lo;
    lo.in = in;
    lo.out = l.width;
    lo.w = off;
    off += l.width * in;
    lo.b = off;
    off += l.width;
    if (spec.layer_norm) {
      lo.gamma = off;
      off += l.width;
      lo.beta = off;
      off += l.width;
    }
    m.offsets.push_back(lo);
    in = l.width;
  }
  if (spec.scalar_output) {
    m.head_w = off;
    off += in;
    m.head_b = off;
    off += 1;
  }
  m.theta.resize(off);

  Rng rng(init_seed);
  for (std::size_t l = 0; l < m.offsets.size(); ++l) {
    const auto& lo = m.offsets[l];
    const double k = 1.0 / std::sqrt(static_cast<double>(lo.in));
    for (int i = 0; i < lo.out * lo.in; ++i) m.theta[lo.w + i] = rng.uniform(-k, k);
    for (int i = 0; i < lo.out; ++i) m.theta[lo.b + i] = rng.uniform(-k, k);
    if (lo.gamma >= 0) {
      for (int i = 0; i < lo.out; ++i) m.theta[lo.gamma + i] = 1.0;
      for (int i = 0; i < lo.out; ++i) m.theta[lo.beta + i] = 0.0;
    }
  }
  if (m.head_w >= 0) {
    const double k = 1.0 / std::sqrt(static_cast<double>(in));
    for (int i = 0; i < in; ++i) m.theta[m.head_w + i] = rng.uniform(-k, k);
    m.theta[m.head_b] = rng.uniform(-k, k);
  }
  return m;
}

Eigen::VectorXd Mlp::run(const Eigen::VectorXd& x, bool training, Rng* rng, Cache* cache,
                         bool want_scalar, double* scalar_out) const {
  if (x.size() != spec.input_dim)
    throw ValidationError("feature length mismatch: expected " +
                          std::to_string(spec.input_dim) + ", got " +
                          std::to_string(x.size()));
  const std::size_t n_layers = offsets.size();
  if (cache) {
    cache->a.resize(n_layers);
    cache->z.resize(n_layers);
    cache->xhat.resize(n_layers);
    cache->inv_sd.resize(n_layers);
    cache->h.resize(n_layers);
    cache->mask.resize(n_layers);
  }
  Eigen::VectorXd a = x;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& lo = offsets[l];
    const Eigen::Map<const Eigen::MatrixXd> w(theta.data() + lo.w, lo.out, lo.in);
    const Eigen::Map<const Eigen::VectorXd> b(theta.data() + lo.b, lo.out);
    Eigen::VectorXd z = w * a + b;
    Eigen::VectorXd h;
    if (spec.layer_norm) {
      const Eigen::Map<const Eigen::VectorXd> gamma(theta.data() + lo.gamma, lo.out);
      const Eigen::Map<const Eigen::VectorXd> beta(theta.data() + lo.beta, lo.out);
      const double m = z.mean();
      const double var = (z.array() - m).square().mean();
      const double inv_sd = 1.0 / std::sqrt(var + kLnEps);
      Eigen::VectorXd xhat = (z.array() - m).matrix() * inv_sd;
      h = (gamma.array() * xhat.array() + beta.array()).matrix();
      if (cache) {
        cache->z[l] = z;
        cache->xhat[l] = xhat;
        cache->inv_sd[l] = inv_sd;
      }
    } else {
      h = z;
      if (cache) {
        cache->z[l] = z;
        cache->inv_sd[l] = 0.0;
      }
    }
    Eigen::VectorXd act(lo.out);
    if (spec.hidden[l].act == Act::Relu)
      act = h.cwiseMax(0.0);
    else
      for (int i = 0; i < lo.out; ++i) act[i] = sigmoid(h[i]);
    if (cache) cache->h[l] = h;

    if (training && spec.dropout_rate > 0.0) {
      if (!rng) throw ValidationError("training forward pass needs an RNG for dropout");
      const double keep = 1.0 - spec.dropout_rate;
      Eigen::VectorXd mask(lo.out);
      for (int i = 0; i < lo.out; ++i)
        mask[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
      act.array() *= mask.array();
      if (cache) cache->mask[l] = mask;
    } else if (cache) {
      cache->mask[l].resize(0);
    }
    if (cache) cache->a[l] = act;
    a = std::move(act);
  }
  if (want_scalar) {
    if (head_w < 0) throw ValidationError("model has no scalar output head");
    const Eigen::Map<const Eigen::VectorXd> w(theta.data() + head_w, a.size());
    *scalar_out = w.dot(a) + theta[head_b];
  }
  return a;
}

double Mlp::forward_scalar(const Eigen::VectorXd& x, bool training, Rng* rng,
                           Cache* cache) const {
  double out = 0.0;
  run(x, training, rng, cache, true, &out);
  return out;
}

Eigen::VectorXd Mlp::forward_embed(const Eigen::VectorXd& x, bool training, Rng* rng,
                                   Cache* cache) const {
  return run(x, training, rng, cache, false, nullptr);
}

namespace {

// shared hidden-stack backward; d_a is the gradient w.r.t. the last activation
void backward_layers(const Mlp& m, const Eigen::VectorXd& x, const Mlp::Cache& cache,
                     Eigen::VectorXd d_a, Eigen::VectorXd& grad) {
  for (int l = static_cast<int>(m.offsets.size()) - 1; l >= 0; --l) {
    const auto& lo = m.offsets[l];
    if (cache.mask[l].size() > 0) d_a.array() *= cache.mask[l].array();

    Eigen::VectorXd dh(lo.out);
    if (m.spec.hidden[l].act == Act::Relu) {
      for (int i = 0; i < lo.out; ++i) dh[i] = cache.h[l][i] > 0.0 ? d_a[i] : 0.0;
    } else {
      for (int i = 0; i < lo.out; ++i) {
        const double s = sigmoid(cache.h[l][i]);
        dh[i] = d_a[i] * s * (1.0 - s);
      }
    }

    Eigen::VectorXd dz;
    if (m.spec.layer_norm) {
      const Eigen::Map<const Eigen::VectorXd> gamma(m.theta.data() + lo.gamma, lo.out);
      Eigen::Map<Eigen::VectorXd> dgamma(grad.data() + lo.gamma, lo.out);
      Eigen::Map<Eigen::VectorXd> dbeta(grad.data() + lo.beta, lo.out);
      dgamma.array() += dh.array() * cache.xhat[l].array();
      dbeta += dh;
      const Eigen::VectorXd dxhat = (dh.array() * gamma.array()).matrix();
      const double n = static_cast<double>(lo.out);
      const double sum_dxhat = dxhat.sum();
      const double sum_dxhat_xhat = dxhat.dot(cache.xhat[l]);
      dz = (cache.inv_sd[l] / n) *
           (n * dxhat.array() - sum_dxhat - cache.xhat[l].array() * sum_dxhat_xhat).matrix();
    } else {
      dz = dh;
    }

    const Eigen::VectorXd& a_prev = l == 0 ? x : cache.a[l - 1];
    Eigen::Map<Eigen::MatrixXd> dw(grad.data() + lo.w, lo.out, lo.in);
    Eigen::Map<Eigen::VectorXd> db(grad.data() + lo.b, lo.out);
    dw.noalias() += dz * a_prev.transpose();
    db += dz;
    const Eigen::Map<const Eigen::MatrixXd> w(m.theta.data() + lo.w, lo.out, lo.in);
    d_a.noalias() = w.transpose() * dz;
  }
}

}  // namespace

void Mlp::backward_scalar(const Eigen::VectorXd& x, const Cache& cache, double d_out,
                          Eigen::VectorXd& grad) const {
  const Eigen::VectorXd& a_last = offsets.empty() ? x : cache.a.back();
  Eigen::Map<Eigen::VectorXd> dw(grad.data() + head_w, a_last.size());
  dw += d_out * a_last;
  grad[head_b] += d_out;
  const Eigen::Map<const Eigen::VectorXd> w(theta.data() + head_w, a_last.size());
  backward_layers(*this, x, cache, w * d_out, grad);
}

void Mlp::backward_embed(const Eigen::VectorXd& x, const Cache& cache,
                         const Eigen::VectorXd& d_emb, Eigen::VectorXd& grad) const {
  backward_layers(*this, x, cache, d_emb, grad);
}

// ---- two-tower -----------------------------------------------------------------

TwoTower TwoTower::build(const Mlp& trained_fg, const Mlp& trained_fe, int embedding_len,
                         std::uint64_t init_seed) {
  TwoTower tt;
  tt.tower_g = trained_fg;
  tt.tower_e = trained_fe;
  tt.embedding_len = embedding_len;
  const int eg = trained_fg.embedding_dim();
  const int ee = trained_fe.embedding_dim();
  tt.proj_theta.resize(embedding_len * eg + embedding_len + embedding_len * ee + embedding_len);
  Rng rng(init_seed);
  int k = 0;
  const double kg = 1.0 / std::sqrt(static_cast<double>(eg));
  for (int i = 0; i < embedding_len * eg; ++i) tt.proj_theta[k++] = rng.uniform(-kg, kg);
  for (int i = 0; i < embedding_len; ++i) tt.proj_theta[k++] = rng.uniform(-kg, kg);
  const double ke = 1.0 / std::sqrt(static_cast<double>(ee));
  for (int i = 0; i < embedding_len * ee; ++i) tt.proj_theta[k++] = rng.uniform(-ke, ke);
  for (int i = 0; i < embedding_len; ++i) tt.proj_theta[k++] = rng.uniform(-ke, ke);
  return tt;
}

double TwoTower::forward(const Eigen::VectorXd& xg, const Eigen::VectorXd& xe, bool training,
                         Rng* rng, Mlp::Cache* cg, Mlp::Cache* ce, Eigen::VectorXd* emb_g_out,
                         Eigen::VectorXd* emb_e_out) const {
  const Eigen::VectorXd eg = tower_g.forward_embed(xg, training, rng, cg);
  const Eigen::VectorXd ee = tower_e.forward_embed(xe, training, rng, ce);
  const int m = embedding_len;
  const int dg = static_cast<int>(eg.size()), de = static_cast<int>(ee.size());
  const Eigen::Map<const Eigen::MatrixXd> wg(proj_theta.data(), m, dg);
  const Eigen::Map<const Eigen::VectorXd> bg(proj_theta.data() + m * dg, m);
  const Eigen::Map<const Eigen::MatrixXd> we(proj_theta.data() + m * dg + m, m, de);
  const Eigen::Map<const Eigen::VectorXd> be(proj_theta.data() + m * dg + m + m * de, m);
  const Eigen::VectorXd pg = wg * eg + bg;
  const Eigen::VectorXd pe = we * ee + be;
  if (emb_g_out) *emb_g_out = eg;
  if (emb_e_out) *emb_e_out = ee;
  return pg.dot(pe);
}

void TwoTower::backward(const Eigen::VectorXd& xg, const Eigen::VectorXd& xe,
                        const Mlp::Cache& cg, const Mlp::Cache& ce,
                        const Eigen::VectorXd& emb_g, const Eigen::VectorXd& emb_e,
                        double d_out, Eigen::VectorXd& grad_g, Eigen::VectorXd& grad_e,
                        Eigen::VectorXd& grad_proj) const {
  const int m = embedding_len;
  const int dg = static_cast<int>(emb_g.size()), de = static_cast<int>(emb_e.size());
  const Eigen::Map<const Eigen::MatrixXd> wg(proj_theta.data(), m, dg);
  const Eigen::Map<const Eigen::VectorXd> bg(proj_theta.data() + m * dg, m);
  const Eigen::Map<const Eigen::MatrixXd> we(proj_theta.data() + m * dg + m, m, de);
  const Eigen::Map<const Eigen::VectorXd> be(proj_theta.data() + m * dg + m + m * de, m);
  const Eigen::VectorXd pg = wg * emb_g + bg;
  const Eigen::VectorXd pe = we * emb_e + be;

  const Eigen::VectorXd dpg = d_out * pe;
  const Eigen::VectorXd dpe = d_out * pg;

  Eigen::Map<Eigen::MatrixXd> dwg(grad_proj.data(), m, dg);
  Eigen::Map<Eigen::VectorXd> dbg(grad_proj.data() + m * dg, m);
  Eigen::Map<Eigen::MatrixXd> dwe(grad_proj.data() + m * dg + m, m, de);
  Eigen::Map<Eigen::VectorXd> dbe(grad_proj.data() + m * dg + m + m * de, m);
  dwg.noalias() += dpg * emb_g.transpose();
  dbg += dpg;
  dwe.noalias() += dpe * emb_e.transpose();
  dbe += dpe;

  tower_g.backward_embed(xg, cg, wg.transpose() * dpg, grad_g);
  tower_e.backward_embed(xe, ce, we.transpose() * dpe, grad_e);
}

// ---- training -------------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 0 || batch_size < 1) throw ValidationError("invalid epochs/batch size");
  if (!(learning_rate > 0.0) && epochs > 0)
    throw ValidationError("learning rate must be positive");
  if (weight_decay < 0.0) throw ValidationError("weight decay must be non-negative");
}

namespace {

struct AdamState {
  Eigen::VectorXd m, v;
  long t = 0;
};

void optimizer_step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, AdamState& st,
                    const TrainConfig& cfg) {
  if (cfg.optimizer == Optimizer::Gd) {
    theta -= cfg.learning_rate * grad + cfg.learning_rate * cfg.weight_decay * theta;
    return;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (st.m.size() != theta.size()) {
    st.m = Eigen::VectorXd::Zero(theta.size());
    st.v = Eigen::VectorXd::Zero(theta.size());
    st.t = 0;
  }
  ++st.t;
  st.m = b1 * st.m + (1.0 - b1) * grad;
  st.v = b2 * st.v.array().matrix() + (1.0 - b2) * grad.array().square().matrix();
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  // decoupled weight decay
  theta.array() -= cfg.learning_rate * (st.m.array() / c1) /
                   ((st.v.array() / c2).sqrt() + eps);
  theta -= cfg.learning_rate * cfg.weight_decay * theta;
}

[[noreturn]] void throw_nan_loss(int epoch, const TrainConfig& cfg) {
  throw NumericError("NaN training loss at epoch " + std::to_string(epoch) +
                     " (learning rate " + std::to_string(cfg.learning_rate) +
                     " likely too high)");
}

}  // namespace

std::vector<TraceRow> train_component(Mlp& m, const Eigen::MatrixXd& x,
                                      const Eigen::VectorXd& y, const TrainConfig& cfg,
                                      const Eigen::MatrixXd* x_val,
                                      const Eigen::VectorXd* y_val) {
  cfg.validate();
  const int n = static_cast<int>(x.rows());
  if (n == 0 || y.size() != n) throw ValidationError("training data shape mismatch");

  Rng rng(cfg.seed);
  AdamState st;
  Eigen::VectorXd grad(m.theta.size());
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  std::vector<TraceRow> trace;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - start);
      grad.setZero();
      double batch_loss = 0.0;
      for (int k = 0; k < bsz; ++k) {
        const int i = order[start + k];
        Mlp::Cache cache;
        const Eigen::VectorXd xi = x.row(i).transpose();
        const double out = m.forward_scalar(xi, true, &rng, &cache);
        const double err = out - y[i];
        batch_loss += err * err;
        m.backward_scalar(xi, cache, 2.0 * err / static_cast<double>(bsz), grad);
      }
      if (!std::isfinite(batch_loss)) throw_nan_loss(epoch, cfg);
      loss_sum += batch_loss;
      optimizer_step(m.theta, grad, st, cfg);
    }
    TraceRow row;
    row.epoch = epoch;
    row.train_mse = loss_sum / static_cast<double>(n);
    row.val_mse = missing_value();
    if (x_val && y_val && x_val->rows() > 0) {
      double v = 0.0;
      for (Eigen::Index i = 0; i < x_val->rows(); ++i) {
        const double out = m.forward_scalar(x_val->row(i).transpose(), false, nullptr);
        v += (out - (*y_val)[i]) * (out - (*y_val)[i]);
      }
      row.val_mse = v / static_cast<double>(x_val->rows());
    }
    trace.push_back(row);
  }
  return trace;
}

std::vector<TraceRow> train_two_tower(TwoTower& tt, const PairData& data,
                                      const TrainConfig& cfg, const PairData* val) {
  cfg.validate();
  const int n = static_cast<int>(data.pairs.size());
  if (n == 0 || data.targets.size() != n || !data.xg || !data.xe)
    throw ValidationError("two-tower training data shape mismatch");

  Rng rng(cfg.seed);
  AdamState st_g, st_e, st_p;
  Eigen::VectorXd grad_g(tt.tower_g.theta.size());
  Eigen::VectorXd grad_e(tt.tower_e.theta.size());
  Eigen::VectorXd grad_p(tt.proj_theta.size());
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  std::vector<TraceRow> trace;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - start);
      grad_g.setZero();
      grad_e.setZero();
      grad_p.setZero();
      double batch_loss = 0.0;
      for (int k = 0; k < bsz; ++k) {
        const int i = order[start + k];
        const auto& [gi, ei] = data.pairs[static_cast<std::size_t>(i)];
        const Eigen::VectorXd xg = data.xg->row(gi).transpose();
        const Eigen::VectorXd xe = data.xe->row(ei).transpose();
        Mlp::Cache cg, ce;
        Eigen::VectorXd eg, ee;
        const double out = tt.forward(xg, xe, true, &rng, &cg, &ce, &eg, &ee);
        const double err = out - data.targets[i];
        batch_loss += err * err;
        tt.backward(xg, xe, cg, ce, eg, ee, 2.0 * err / static_cast<double>(bsz), grad_g,
                    grad_e, grad_p);
      }
      if (!std::isfinite(batch_loss)) throw_nan_loss(epoch, cfg);
      loss_sum += batch_loss;
      optimizer_step(tt.tower_g.theta, grad_g, st_g, cfg);
      optimizer_step(tt.tower_e.theta, grad_e, st_e, cfg);
      optimizer_step(tt.proj_theta, grad_p, st_p, cfg);
    }
    TraceRow row;
    row.epoch = epoch;
    row.train_mse = loss_sum / static_cast<double>(n);
    row.val_mse = missing_value();
    if (val && !val->pairs.empty()) {
      double v = 0.0;
      for (std::size_t i = 0; i < val->pairs.size(); ++i) {
        const auto& [gi, ei] = val->pairs[i];
        const double out = tt.forward(val->xg->row(gi).transpose(),
                                      val->xe->row(ei).transpose(), false, nullptr);
        v += (out - val->targets[static_cast<Eigen::Index>(i)]) *
             (out - val->targets[static_cast<Eigen::Index>(i)]);
      }
      row.val_mse = v / static_cast<double>(val->pairs.size());
    }
    trace.push_back(row);
  }
  return trace;
}

StructuredConfig default_structured_config(int d_g, int d_e, const std::string& profile,
                                           std::uint64_t seed) {
  StructuredConfig cfg;
  cfg.seed = seed;
  const bool desk = profile == "desk";
  if (!desk && profile != "paper")
    throw ValidationError("unknown profile: " + profile + " (expected desk or paper)");
  cfg.genotype_spec = genotype_encoder_spec(d_g, desk ? 64 : 256);
  cfg.env_spec = env_encoder_spec(d_e, desk ? 12 : 48, 3);
  cfg.fg = TrainConfig{desk ? 125 : 250, 256, 1e-3, 3e-4, Optimizer::AdamW,
                       derive_seed(seed, "nn.fg")};
  cfg.fe = TrainConfig{desk ? 250 : 500, 32, 1e-3, 1e-5, Optimizer::AdamW,
                       derive_seed(seed, "nn.fe")};
  cfg.fge = TrainConfig{desk ? 125 : 250, 256, 1e-2, 3e-4, Optimizer::AdamW,
                        derive_seed(seed, "nn.fge")};
  cfg.embedding_len = 8;
  return cfg;
}

MixinnModel structured_fit(const Dataset& d, const LabelSets& labels,
                           const StructuredConfig& cfg, std::vector<TraceRow>* trace_fg,
                           std::vector<TraceRow>* trace_fe,
                           std::vector<TraceRow>* trace_fge) {
  if (d.environments.env_vector.size() == 0)
    throw ValidationError("environment vectors must be built before training");
  if (labels.y_g.size() != d.genotypes.n() || labels.y_e.size() != d.environments.n())
    throw ValidationError("label sets do not match the dataset");

  MixinnModel model;
  model.mu_hat = labels.mu_hat;

  // stage 1: component encoders on one sample per genotype / environment
  model.f_g = Mlp::build(cfg.genotype_spec, derive_seed(cfg.seed, "nn.init.fg"));
  auto tg = train_component(model.f_g, d.genotypes.markers, labels.y_g, cfg.fg);
  if (trace_fg) *trace_fg = std::move(tg);

  model.f_e = Mlp::build(cfg.env_spec, derive_seed(cfg.seed, "nn.init.fe"));
  auto te = train_component(model.f_e, d.environments.env_vector, labels.y_e, cfg.fe);
  if (trace_fe) *trace_fe = std::move(te);

  // stage 2: two-tower interaction network over observed cells
  model.f_ge =
      TwoTower::build(model.f_g, model.f_e, cfg.embedding_len, derive_seed(cfg.seed, "nn.init.fge"));
  PairData pd;
  pd.xg = &d.genotypes.markers;
  pd.xe = &d.environments.env_vector;
  std::set<std::pair<int, int>> seen;
  for (const auto& r : d.records) {
    const int gi = d.genotypes.find(r.genotype_id);
    const int ej = d.environments.find(r.environment_id);
    if (seen.emplace(gi, ej).second) pd.pairs.emplace_back(gi, ej);
  }
  pd.targets.resize(static_cast<Eigen::Index>(pd.pairs.size()));
  for (std::size_t i = 0; i < pd.pairs.size(); ++i)
    pd.targets[static_cast<Eigen::Index>(i)] = labels.y_ge(pd.pairs[i].first, pd.pairs[i].second);
  auto tge = train_two_tower(model.f_ge, pd, cfg.fge);
  if (trace_fge) *trace_fge = std::move(tge);
  return model;
}

double predict_yield(const MixinnModel& m, const Eigen::VectorXd& xg,
                     const Eigen::VectorXd& xe) {
  const double fg = m.f_g.forward_scalar(xg, false, nullptr);
  const double fe = m.f_e.forward_scalar(xe, false, nullptr);
  const double fge = m.f_ge.forward(xg, xe, false, nullptr);
  return m.mu_hat + fg + fe + fge;
}

// ---- gradient checking -----------------------------------------------------------

namespace {

// pre-activations too close to a ReLU kink make finite differences unreliable
bool away_from_kinks(const Mlp& m, const Mlp::Cache& cache, double margin) {
  for (std::size_t l = 0; l < m.offsets.size(); ++l)
    if (m.spec.hidden[l].act == Act::Relu)
      for (int i = 0; i < cache.h[l].size(); ++i)
        if (std::fabs(cache.h[l][i]) < margin) return false;
  return true;
}

double relative_error(double ga, double gf) {
  const double denom = std::max(std::fabs(ga), std::fabs(gf));
  if (denom < 1e-6) return std::fabs(ga - gf) > 1e-8 ? std::fabs(ga - gf) / 1e-6 : 0.0;
  return std::fabs(ga - gf) / denom;
}

std::vector<int> param_subset(int n, int max_params, Rng& rng) {
  std::vector<int> idx;
  if (max_params <= 0 || n <= max_params) {
    idx.resize(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
  } else {
    auto pick = rng.sample_without_replacement(static_cast<std::size_t>(n),
                                               static_cast<std::size_t>(max_params));
    for (auto k : pick) idx.push_back(static_cast<int>(k));
  }
  return idx;
}

}  // namespace

double gradient_check_encoder(const Mlp& model, std::uint64_t seed, int points, double epsilon,
                              int max_params) {
  Rng rng(seed);
  Mlp m = model;  // finite differences perturb a private copy
  double max_err = 0.0;
  for (int pt = 0; pt < points; ++pt) {
    Eigen::VectorXd x(m.spec.input_dim);
    Mlp::Cache cache;
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      for (int i = 0; i < x.size(); ++i) x[i] = rng.normal();
      m.forward_scalar(x, false, nullptr, &cache);
      ok = away_from_kinks(m, cache, 1e-3);
    }
    if (!ok) throw NumericError("gradient check: could not sample away from ReLU kinks");
    const double target = rng.normal();

    Eigen::VectorXd grad = Eigen::VectorXd::Zero(m.theta.size());
    const double out = m.forward_scalar(x, false, nullptr, &cache);
    m.backward_scalar(x, cache, 2.0 * (out - target), grad);

    auto loss = [&](void) {
      const double o = m.forward_scalar(x, false, nullptr);
      return (o - target) * (o - target);
    };
    for (int i : param_subset(m.n_params(), max_params, rng)) {
      const double save = m.theta[i];
      const double h = epsilon * std::max(1.0, std::fabs(save));
      m.theta[i] = save + h;
      const double fp = loss();
      m.theta[i] = save - h;
      const double fm = loss();
      m.theta[i] = save;
      max_err = std::max(max_err, relative_error(grad[i], (fp - fm) / (2.0 * h)));
    }
  }
  return max_err;
}

double gradient_check_two_tower(const TwoTower& model, std::uint64_t seed, int points,
                                double epsilon, int max_params) {
  Rng rng(seed);
  TwoTower tt = model;
  double max_err = 0.0;
  for (int pt = 0; pt < points; ++pt) {
    Eigen::VectorXd xg(tt.tower_g.spec.input_dim), xe(tt.tower_e.spec.input_dim);
    Mlp::Cache cg, ce;
    Eigen::VectorXd eg, ee;
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      for (int i = 0; i < xg.size(); ++i) xg[i] = rng.normal();
      for (int i = 0; i < xe.size(); ++i) xe[i] = rng.normal();
      tt.forward(xg, xe, false, nullptr, &cg, &ce, &eg, &ee);
      ok = away_from_kinks(tt.tower_g, cg, 1e-3) && away_from_kinks(tt.tower_e, ce, 1e-3);
    }
    if (!ok) throw NumericError("gradient check: could not sample away from ReLU kinks");
    const double target = rng.normal();

    Eigen::VectorXd grad_g = Eigen::VectorXd::Zero(tt.tower_g.theta.size());
    Eigen::VectorXd grad_e = Eigen::VectorXd::Zero(tt.tower_e.theta.size());
    Eigen::VectorXd grad_p = Eigen::VectorXd::Zero(tt.proj_theta.size());
    const double out = tt.forward(xg, xe, false, nullptr, &cg, &ce, &eg, &ee);
    tt.backward(xg, xe, cg, ce, eg, ee, 2.0 * (out - target), grad_g, grad_e, grad_p);

    auto loss = [&](void) {
      const double o = tt.forward(xg, xe, false, nullptr);
      return (o - target) * (o - target);
    };
    struct Part {
      Eigen::VectorXd* theta;
      const Eigen::VectorXd* grad;
    };
    const Part parts[3] = {{&tt.tower_g.theta, &grad_g},
                           {&tt.tower_e.theta, &grad_e},
                           {&tt.proj_theta, &grad_p}};
    for (const auto& part : parts) {
      for (int i :
           param_subset(static_cast<int>(part.theta->size()), max_params, rng)) {
        const double save = (*part.theta)[i];
        const double h = epsilon * std::max(1.0, std::fabs(save));
        (*part.theta)[i] = save + h;
        const double fp = loss();
        (*part.theta)[i] = save - h;
        const double fm = loss();
        (*part.theta)[i] = save;
        max_err = std::max(max_err, relative_error((*part.grad)[i], (fp - fm) / (2.0 * h)));
      }
    }
  }
  return max_err;
}

// ---- serialization ---------------------------------------------------------------

namespace {

using nlohmann::json;

json mlp_header(const Mlp& m) {
  json h;
  h["type"] = "mlp";
  h["input_dim"] = m.spec.input_dim;
  json hidden = json::array();
  for (const auto& l : m.spec.hidden)
    hidden.push_back({{"width", l.width}, {"act", l.act == Act::Relu ? "relu" : "sigmoid"}});
  h["hidden"] = hidden;
  h["layer_norm"] = m.spec.layer_norm;
  h["dropout_rate"] = m.spec.dropout_rate;
  h["scalar_output"] = m.spec.scalar_output;
  h["n_params"] = m.n_params();
  return h;
}

MLPSpec spec_from_header(const json& h) {
  MLPSpec spec;
  spec.input_dim = h.at("input_dim").get<int>();
  for (const auto& l : h.at("hidden")) {
    LayerSpec ls;
    ls.width = l.at("width").get<int>();
    ls.act = l.at("act").get<std::string>() == "relu" ? Act::Relu : Act::Sigmoid;
    spec.hidden.push_back(ls);
  }
  spec.layer_norm = h.at("layer_norm").get<bool>();
  spec.dropout_rate = h.at("dropout_rate").get<double>();
  spec.scalar_output = h.at("scalar_output").get<bool>();
  return spec;
}

void write_blob(std::ofstream& out, const json& header,
                const std::vector<const Eigen::VectorXd*>& tensors) {
  const std::string hs = header.dump();
  const char magic[4] = {'G', 'X', 'N', 'N'};
  const std::uint32_t version = 1;
  const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
  out.write(magic, 4);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto* t : tensors)
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
}

json read_header(std::ifstream& in, const std::string& path) {
  char magic[4];
  std::uint32_t version = 0, hlen = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&hlen), 4);
  if (!in || std::memcmp(magic, "GXNN", 4) != 0)
    throw ValidationError("not a model checkpoint: " + path);
  if (version != 1)
    throw ValidationError("unsupported checkpoint version in " + path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw ValidationError("truncated checkpoint header: " + path);
  return json::parse(hs);
}

void read_tensor(std::ifstream& in, Eigen::VectorXd& t, const std::string& path) {
  in.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!in) throw ValidationError("truncated checkpoint payload: " + path);
}

}  // namespace

void save_mlp(const std::string& path, const Mlp& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open " + path);
  write_blob(out, mlp_header(m), {&m.theta});
}

Mlp load_mlp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  const json h = read_header(in, path);
  if (h.at("type") != "mlp") throw ValidationError("expected an mlp checkpoint: " + path);
  Mlp m = Mlp::build(spec_from_header(h), 0);
  if (m.n_params() != h.at("n_params").get<int>())
    throw ValidationError("checkpoint parameter count mismatch: " + path);
  read_tensor(in, m.theta, path);
  return m;
}

void save_two_tower(const std::string& path, const TwoTower& tt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open " + path);
  json h;
  h["type"] = "two_tower";
  h["embedding_len"] = tt.embedding_len;
  h["tower_g"] = mlp_header(tt.tower_g);
  h["tower_e"] = mlp_header(tt.tower_e);
  h["proj_params"] = static_cast<int>(tt.proj_theta.size());
  write_blob(out, h, {&tt.tower_g.theta, &tt.tower_e.theta, &tt.proj_theta});
}

TwoTower load_two_tower(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  const json h = read_header(in, path);
  if (h.at("type") != "two_tower")
    throw ValidationError("expected a two_tower checkpoint: " + path);
  TwoTower tt;
  tt.embedding_len = h.at("embedding_len").get<int>();
  tt.tower_g = Mlp::build(spec_from_header(h.at("tower_g")), 0);
  tt.tower_e = Mlp::build(spec_from_header(h.at("tower_e")), 0);
  tt.proj_theta.resize(h.at("proj_params").get<int>());
  read_tensor(in, tt.tower_g.theta, path);
  read_tensor(in, tt.tower_e.theta, path);
  read_tensor(in, tt.proj_theta, path);
  return tt;
}

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace) {
  CsvWriter w(path);
  w.write_row({"epoch", "train_mse", "val_mse"});
  for (const auto& row : trace)
    w.write_row({std::to_string(row.epoch), format_double(row.train_mse),
                 is_missing(row.val_mse) ? std::string() : format_double(row.val_mse)});
}

}  // namespace gxe
