#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gxe/nn.hpp"
#include "gxe/pipeline.hpp"
#include "gxe/simgen.hpp"
#include "gxe/stats.hpp"

using namespace gxe;
namespace fs = std::filesystem;

TEST_CASE("encoder specs follow the width and activation rules") {
  const MLPSpec gs = genotype_encoder_spec(500);
  REQUIRE(gs.hidden.size() == 2);
  CHECK(gs.hidden[0].width == 256);
  CHECK(gs.hidden[0].act == Act::Relu);
  CHECK(gs.hidden[1].width == 128);
  CHECK(gs.hidden[1].act == Act::Sigmoid);
  CHECK(gs.dropout_rate == 0.5);

  const MLPSpec es = env_encoder_spec(33);
  REQUIRE(es.hidden.size() == 3);
  CHECK(es.hidden[0].width == 48);
  CHECK(es.hidden[1].width == 48);
  CHECK(es.hidden[2].width == 24);
  CHECK(es.hidden[2].act == Act::Sigmoid);
}

TEST_CASE("inference is deterministic and batch invariant") {
  const Mlp m = Mlp::build(genotype_encoder_spec(40, 16), 3);
  Rng rng(5);
  Eigen::VectorXd x(40);
  for (int i = 0; i < 40; ++i) x[i] = rng.normal();
  const double a = m.forward_scalar(x, false, nullptr);
  const double b = m.forward_scalar(x, false, nullptr);
  CHECK(a == b);  // dropout disabled at inference

  // forward of a batch is per-sample: evaluating alone or among others is equal
  Eigen::MatrixXd batch(32, 40);
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 40; ++c) batch(r, c) = rng.normal();
  batch.row(7) = x.transpose();
  std::vector<double> outs;
  for (int r = 0; r < 32; ++r) outs.push_back(m.forward_scalar(batch.row(r).transpose(), false, nullptr));
  CHECK(outs[7] == a);
  CHECK(outs.size() == 32);
}

TEST_CASE("all-zero weights produce the output bias") {
  Mlp m = Mlp::build(genotype_encoder_spec(10, 8), 1);
  m.theta.setZero();
  m.theta[m.head_b] = 3.25;
  Rng rng(2);
  for (int t = 0; t < 5; ++t) {
    Eigen::VectorXd x(10);
    for (int i = 0; i < 10; ++i) x[i] = rng.normal();
    CHECK(m.forward_scalar(x, false, nullptr) == doctest::Approx(3.25).epsilon(1e-12));
  }
}

TEST_CASE("gradient check: encoders and the two-tower network") {
  const Mlp fg = Mlp::build(genotype_encoder_spec(20, 12), 11);
  CHECK(gradient_check_encoder(fg, 101, 10, 1e-5) < 1e-4);

  const Mlp fe = Mlp::build(env_encoder_spec(9, 8, 3), 13);
  CHECK(gradient_check_encoder(fe, 103, 10, 1e-5) < 1e-4);

  const TwoTower tt = TwoTower::build(fg, fe, 8, 17);
  CHECK(gradient_check_two_tower(tt, 107, 10, 1e-5) < 1e-4);
}

TEST_CASE("gradient at a zero-loss point vanishes on the output bias") {
  const Mlp m = Mlp::build(genotype_encoder_spec(12, 8), 19);
  Rng rng(7);
  Eigen::VectorXd x(12);
  for (int i = 0; i < 12; ++i) x[i] = rng.normal();
  Mlp::Cache cache;
  const double out = m.forward_scalar(x, false, nullptr, &cache);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(m.n_params());
  m.backward_scalar(x, cache, 2.0 * (out - out), grad);  // target = output
  CHECK(std::fabs(grad[m.head_b]) < 1e-10);
  CHECK(grad.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("zero learning rate leaves weights untouched") {
  Mlp m = Mlp::build(genotype_encoder_spec(15, 8), 23);
  const Eigen::VectorXd before = m.theta;
  Eigen::MatrixXd x(10, 15);
  Eigen::VectorXd y(10);
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    y[i] = rng.normal();
    for (int c = 0; c < 15; ++c) x(i, c) = rng.normal();
  }
  TrainConfig cfg;
  cfg.epochs = 0;  // the optimizer never steps
  cfg.seed = 1;
  const auto trace = train_component(m, x, y, cfg);
  CHECK(trace.empty());
  CHECK(m.theta == before);
}

TEST_CASE("same seed gives identical loss traces") {
  Eigen::MatrixXd x(24, 12);
  Eigen::VectorXd y(24);
  Rng rng(9);
  for (int i = 0; i < 24; ++i) {
    y[i] = rng.normal();
    for (int c = 0; c < 12; ++c) x(i, c) = rng.normal();
  }
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  cfg.seed = 42;

  Mlp m1 = Mlp::build(genotype_encoder_spec(12, 8), 5);
  Mlp m2 = Mlp::build(genotype_encoder_spec(12, 8), 5);
  const auto t1 = train_component(m1, x, y, cfg);
  const auto t2 = train_component(m2, x, y, cfg);
  REQUIRE(t1.size() == t2.size());
  for (std::size_t i = 0; i < t1.size(); ++i) CHECK(t1[i].train_mse == t2[i].train_mse);
  CHECK(m1.theta == m2.theta);
}

TEST_CASE("linearly realizable targets reach a small training loss") {
  Rng rng(11);
  const int n = 60, d = 25;
  Eigen::MatrixXd x(n, d);
  Eigen::VectorXd w(d), y(n);
  for (int c = 0; c < d; ++c) w[c] = rng.normal();
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < d; ++c) x(i, c) = rng.normal();
    y[i] = x.row(i).dot(w) / std::sqrt(static_cast<double>(d));
  }
  MLPSpec spec = genotype_encoder_spec(d, 32);
  spec.dropout_rate = 0.0;  // noiseless regression target
  Mlp m = Mlp::build(spec, 29);
  TrainConfig cfg;
  cfg.epochs = 250;
  cfg.batch_size = 256;
  cfg.learning_rate = 1e-2;
  cfg.weight_decay = 0.0;
  cfg.seed = 2;
  const auto trace = train_component(m, x, y, cfg);
  CHECK(trace.back().train_mse < 1e-3);
}

TEST_CASE("full-batch gradient descent is monotone at a small learning rate") {
  Rng rng(13);
  const int n = 16, d = 10;
  Eigen::MatrixXd x(n, d);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    y[i] = rng.normal();
    for (int c = 0; c < d; ++c) x(i, c) = rng.normal();
  }
  MLPSpec spec = genotype_encoder_spec(d, 8);
  spec.dropout_rate = 0.0;  // debug mode: deterministic loss sequence
  Mlp m = Mlp::build(spec, 31);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = n;
  cfg.learning_rate = 1e-5;
  cfg.weight_decay = 0.0;
  cfg.optimizer = Optimizer::Gd;
  cfg.seed = 3;
  const auto trace = train_component(m, x, y, cfg);
  for (std::size_t t = 1; t < trace.size(); ++t)
    CHECK(trace[t].train_mse <= trace[t - 1].train_mse + 1e-12);
}

TEST_CASE("NaN loss aborts with a diagnostic") {
  Rng rng(15);
  Eigen::MatrixXd x(8, 6);
  Eigen::VectorXd y(8);
  for (int i = 0; i < 8; ++i) {
    y[i] = 1e3 * rng.normal();
    for (int c = 0; c < 6; ++c) x(i, c) = 1e3 * rng.normal();
  }
  MLPSpec spec = genotype_encoder_spec(6, 8);
  spec.layer_norm = false;
  spec.dropout_rate = 0.0;
  Mlp m = Mlp::build(spec, 37);
  TrainConfig cfg;
  cfg.epochs = 500;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e12;  // guaranteed overflow
  cfg.seed = 4;
  CHECK_THROWS_AS(train_component(m, x, y, cfg), NumericError);
}

namespace {

Simulated desk_sim(std::uint64_t seed) {
  SimConfig cfg;
  cfg.n_g = 40;
  cfg.n_e = 8;
  cfg.d_g = 120;
  cfg.n_causal_markers = 12;
  cfg.seed = seed;
  return simulate(cfg);
}

StructuredConfig tiny_nn_config(const Dataset& d, std::uint64_t seed) {
  StructuredConfig cfg = default_structured_config(
      d.genotypes.n_markers(), static_cast<int>(d.environments.env_vector.cols()), "desk", seed);
  cfg.fg.epochs = 60;
  cfg.fe.epochs = 80;
  cfg.fge.epochs = 60;
  return cfg;
}

}  // namespace

TEST_CASE("structured fit: embedding length, dot-product symmetry, recomposition") {
  Simulated sim = desk_sim(51);
  build_env_vectors(sim.dataset.environments);
  const FAFit fit = fit_fa(sim.dataset, {.r = 2, .seed = 1});
  const LabelSets labels = generate_labels(fit, sim.dataset);
  const MixinnModel model = structured_fit(sim.dataset, labels, tiny_nn_config(sim.dataset, 9));

  CHECK(model.f_ge.embedding_len == 8);

  Rng rng(17);
  Eigen::VectorXd xg(120), xe(sim.dataset.environments.env_vector.cols());
  for (int i = 0; i < xg.size(); ++i) xg[i] = rng.normal();
  for (int i = 0; i < xe.size(); ++i) xe[i] = rng.normal();

  // recomposition: zeroing the projections reduces to mu + f_g + f_e
  MixinnModel additive = model;
  additive.f_ge.proj_theta.setZero();
  const double fg = model.f_g.forward_scalar(xg, false, nullptr);
  const double fe = model.f_e.forward_scalar(xe, false, nullptr);
  CHECK(predict_yield(additive, xg, xe) ==
        doctest::Approx(model.mu_hat + fg + fe).epsilon(1e-12));

  // dot-product fusion symmetry: swapping the projected embeddings is a no-op
  Eigen::VectorXd eg, ee;
  Mlp::Cache cg, ce;
  const double out = model.f_ge.forward(xg, xe, false, nullptr, &cg, &ce, &eg, &ee);
  const int m = model.f_ge.embedding_len;
  const int dg = static_cast<int>(eg.size()), de = static_cast<int>(ee.size());
  const Eigen::Map<const Eigen::MatrixXd> wg(model.f_ge.proj_theta.data(), m, dg);
  const Eigen::Map<const Eigen::VectorXd> bg(model.f_ge.proj_theta.data() + m * dg, m);
  const Eigen::Map<const Eigen::MatrixXd> we(model.f_ge.proj_theta.data() + m * dg + m, m, de);
  const Eigen::Map<const Eigen::VectorXd> be(model.f_ge.proj_theta.data() + m * dg + m + m * de, m);
  const Eigen::VectorXd pg = wg * eg + bg, pe = we * ee + be;
  CHECK(pg.dot(pe) == doctest::Approx(pe.dot(pg)).epsilon(1e-15));
  CHECK(out == doctest::Approx(pg.dot(pe)).epsilon(1e-12));
}

TEST_CASE("zero interaction labels collapse the interaction output") {
  Simulated sim = desk_sim(53);
  build_env_vectors(sim.dataset.environments);
  const FAFit fit = fit_fa(sim.dataset, {.r = 2, .seed = 1});
  LabelSets labels = generate_labels(fit, sim.dataset);
  labels.y_ge.setZero();
  const MixinnModel model = structured_fit(sim.dataset, labels, tiny_nn_config(sim.dataset, 7));

  std::vector<double> yields;
  for (const auto& r : sim.dataset.records) yields.push_back(r.yield);
  const double sd = std::sqrt(sample_variance(yields));

  Rng rng(19);
  double acc = 0.0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    Eigen::VectorXd xg = sim.dataset.genotypes.markers.row(
        static_cast<Eigen::Index>(rng.uniform_int(40))).transpose();
    Eigen::VectorXd xe = sim.dataset.environments.env_vector.row(
        static_cast<Eigen::Index>(rng.uniform_int(8))).transpose();
    acc += std::fabs(model.f_ge.forward(xg, xe, false, nullptr));
  }
  CHECK(acc / trials < 0.05 * sd);
}

TEST_CASE("permuting a batch permutes predictions identically") {
  Simulated sim = desk_sim(55);
  build_env_vectors(sim.dataset.environments);
  const Mlp m = Mlp::build(genotype_encoder_spec(120, 16), 3);
  std::vector<double> out;
  for (int i = 0; i < 10; ++i)
    out.push_back(m.forward_scalar(sim.dataset.genotypes.markers.row(i).transpose(), false, nullptr));
  const std::vector<int> perm{9, 3, 0, 7, 1, 4, 8, 2, 6, 5};
  for (int k = 0; k < 10; ++k) {
    const double v = m.forward_scalar(
        sim.dataset.genotypes.markers.row(perm[static_cast<std::size_t>(k)]).transpose(), false,
        nullptr);
    CHECK(v == out[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])]);
  }
}

TEST_CASE("label shift moves the trained component by about the same constant") {
  Rng rng(23);
  const int n = 50, d = 20;
  Eigen::MatrixXd x(n, d);
  Eigen::VectorXd w(d), y(n);
  for (int c = 0; c < d; ++c) w[c] = rng.normal();
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < d; ++c) x(i, c) = rng.normal();
    y[i] = x.row(i).dot(w) / std::sqrt(static_cast<double>(d));
  }
  MLPSpec spec = genotype_encoder_spec(d, 16);
  spec.dropout_rate = 0.0;
  TrainConfig cfg;
  cfg.epochs = 250;
  cfg.batch_size = 256;
  cfg.learning_rate = 3e-3;
  cfg.weight_decay = 0.0;
  cfg.seed = 6;

  Mlp base = Mlp::build(spec, 41);
  train_component(base, x, y, cfg);
  Mlp shifted = Mlp::build(spec, 41);
  const double c = 2.0;
  const Eigen::VectorXd y2 = y.array() + c;
  train_component(shifted, x, y2, cfg);

  double mean_shift = 0.0;
  for (int i = 0; i < n; ++i)
    mean_shift += shifted.forward_scalar(x.row(i).transpose(), false, nullptr) -
                  base.forward_scalar(x.row(i).transpose(), false, nullptr);
  mean_shift /= n;
  CHECK(std::fabs(mean_shift - c) < 0.1 * c);
}

TEST_CASE("feature length mismatch is rejected") {
  Simulated sim = desk_sim(57);
  build_env_vectors(sim.dataset.environments);
  const FAFit fit = fit_fa(sim.dataset, {.r = 2, .seed = 1});
  const LabelSets labels = generate_labels(fit, sim.dataset);
  StructuredConfig cfg = tiny_nn_config(sim.dataset, 5);
  cfg.fg.epochs = 2;
  cfg.fe.epochs = 2;
  cfg.fge.epochs = 2;
  const MixinnModel model = structured_fit(sim.dataset, labels, cfg);
  Eigen::VectorXd bad(3);
  bad.setZero();
  CHECK_THROWS_AS(predict_yield(model, bad, sim.dataset.environments.env_vector.row(0).transpose()),
                  ValidationError);
}

TEST_CASE("checkpoints round-trip through the binary format") {
  const std::string dir = (fs::temp_directory_path() / "gxe_nn_ckpt").string();
  fs::remove_all(dir);
  fs::create_directories(dir);

  const Mlp m = Mlp::build(env_encoder_spec(12, 16, 3), 43);
  save_mlp(dir + "/m.bin", m);
  const Mlp back = load_mlp(dir + "/m.bin");
  CHECK(back.theta == m.theta);
  CHECK(back.spec.hidden.size() == m.spec.hidden.size());

  const Mlp g = Mlp::build(genotype_encoder_spec(30, 8), 47);
  const TwoTower tt = TwoTower::build(g, m, 8, 53);
  save_two_tower(dir + "/tt.bin", tt);
  const TwoTower tback = load_two_tower(dir + "/tt.bin");
  CHECK(tback.proj_theta == tt.proj_theta);
  CHECK(tback.tower_g.theta == tt.tower_g.theta);
  CHECK(tback.tower_e.theta == tt.tower_e.theta);

  Rng rng(3);
  Eigen::VectorXd xg(30), xe(12);
  for (int i = 0; i < 30; ++i) xg[i] = rng.normal();
  for (int i = 0; i < 12; ++i) xe[i] = rng.normal();
  CHECK(tback.forward(xg, xe, false, nullptr) == tt.forward(xg, xe, false, nullptr));
}
