#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gxe/simgen.hpp"
#include "gxe/stats.hpp"

using namespace gxe;
namespace fs = std::filesystem;

namespace {

SimConfig desk_config(std::uint64_t seed) {
  SimConfig cfg;
  cfg.seed = seed;
  return cfg;  // the defaults are the desk profile
}

}  // namespace

TEST_CASE("noise-free additive case reproduces mu + G + E exactly") {
  SimConfig cfg = desk_config(1);
  cfg.lambda_scale = 0.0;
  cfg.psi_range = {0.0, 0.0};
  cfg.resid_range = {0.0, 0.0};
  cfg.missing_cell_fraction = 0.0;
  const Simulated sim = simulate(cfg);
  for (const auto& r : sim.dataset.records) {
    const int i = sim.dataset.genotypes.find(r.genotype_id);
    const int j = sim.dataset.environments.find(r.environment_id);
    CHECK(r.yield ==
          doctest::Approx(sim.truth.mu + sim.truth.G[i] + sim.truth.E[j]).epsilon(1e-12));
  }
}

TEST_CASE("same seed gives bit-identical output") {
  const Simulated a = simulate(desk_config(7));
  const Simulated b = simulate(desk_config(7));
  REQUIRE(a.dataset.n_s() == b.dataset.n_s());
  for (std::size_t i = 0; i < a.dataset.records.size(); ++i) {
    CHECK(a.dataset.records[i].yield == b.dataset.records[i].yield);
    CHECK(a.dataset.records[i].genotype_id == b.dataset.records[i].genotype_id);
  }
  CHECK(a.truth.GE == b.truth.GE);
  CHECK(a.truth.Lambda == b.truth.Lambda);
  CHECK(a.dataset.genotypes.markers == b.dataset.genotypes.markers);
}

TEST_CASE("empirical GE covariance matches Lambda Lambda^T + Psi") {
  SimConfig cfg = desk_config(3);
  cfg.n_g = 5000;
  cfg.n_e = 8;
  cfg.d_g = 400;
  cfg.replicates = 1;
  cfg.missing_cell_fraction = 0.0;
  const Simulated sim = simulate(cfg);

  Eigen::MatrixXd centered = sim.truth.GE;
  centered.rowwise() -= centered.colwise().mean();
  const Eigen::MatrixXd emp =
      centered.transpose() * centered / static_cast<double>(cfg.n_g - 1);
  const Eigen::MatrixXd truth = sim.truth.Lambda * sim.truth.Lambda.transpose() +
                                Eigen::MatrixXd(sim.truth.Psi.asDiagonal());
  const double rel = (emp - truth).norm() / truth.norm();
  CHECK(rel < 0.1);
}

TEST_CASE("genotype effect variance is exactly sigma_g2") {
  const Simulated sim = simulate(desk_config(5));
  std::vector<double> g(sim.truth.G.data(), sim.truth.G.data() + sim.truth.G.size());
  CHECK(sample_variance(g) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(std::fabs(mean(g)) < 1e-12);
}

TEST_CASE("cell deletion never strands a genotype or environment") {
  SimConfig cfg = desk_config(11);
  cfg.n_g = 20;
  cfg.n_e = 6;
  cfg.d_g = 200;
  cfg.missing_cell_fraction = 0.6;
  const Simulated sim = simulate(cfg);
  std::set<std::string> genos, envs;
  for (const auto& r : sim.dataset.records) {
    genos.insert(r.genotype_id);
    envs.insert(r.environment_id);
  }
  CHECK(static_cast<int>(genos.size()) == cfg.n_g);
  CHECK(static_cast<int>(envs.size()) == cfg.n_e);
}

TEST_CASE("degenerate configurations are rejected") {
  SimConfig cfg = desk_config(1);
  cfg.n_e = 1;
  CHECK_THROWS_AS(simulate(cfg), ValidationError);

  SimConfig zeros = desk_config(1);
  zeros.sigma_g2 = 0.0;
  zeros.lambda_scale = 0.0;
  zeros.psi_range = {0.0, 0.0};
  zeros.resid_range = {0.0, 0.0};
  zeros.missing_cell_fraction = 0.2;
  CHECK_THROWS_AS(simulate(zeros), ValidationError);
}

TEST_CASE("emitted dataset round-trips through the data-core formats") {
  SimConfig cfg = desk_config(13);
  cfg.n_g = 15;
  cfg.n_e = 6;
  cfg.d_g = 60;
  cfg.n_causal_markers = 10;
  const Simulated sim = simulate(cfg);
  const std::string dir = (fs::temp_directory_path() / "gxe_simgen_rt").string();
  fs::remove_all(dir);
  write_simulated(dir, sim);

  const Dataset loaded =
      load_dataset(dir + "/trials.csv", dir + "/markers.csv",
                   {dir + "/weather.csv", dir + "/soil.csv", dir + "/management.csv"});
  REQUIRE(loaded.n_s() == sim.dataset.n_s());
  for (std::size_t i = 0; i < loaded.records.size(); ++i) {
    CHECK(loaded.records[i].genotype_id == sim.dataset.records[i].genotype_id);
    CHECK(loaded.records[i].environment_id == sim.dataset.records[i].environment_id);
    CHECK(loaded.records[i].year == sim.dataset.records[i].year);
    CHECK(loaded.records[i].replicate == sim.dataset.records[i].replicate);
    CHECK(loaded.records[i].yield == sim.dataset.records[i].yield);
  }
  CHECK(loaded.genotypes.markers == sim.dataset.genotypes.markers);
  CHECK(loaded.environments.soil == sim.dataset.environments.soil);
  CHECK(loaded.environments.management == sim.dataset.environments.management);
  for (int j = 0; j < loaded.environments.n(); ++j)
    CHECK(loaded.environments.weather[j][0].second ==
          sim.dataset.environments.weather[j][0].second);
}

TEST_CASE("years span the eight-fold protocol when n_e >= 8") {
  const Simulated sim = simulate(desk_config(17));
  std::set<int> years;
  for (const auto& r : sim.dataset.records) years.insert(r.year);
  CHECK(years.size() == 8);
  CHECK(*years.begin() == 2014);
  CHECK(*years.rbegin() == 2021);
}
