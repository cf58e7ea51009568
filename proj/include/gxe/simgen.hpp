#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>

#include "gxe/data.hpp"

namespace gxe {

struct SimConfig {
  int n_g = 100;
  int n_e = 12;
  int d_g = 500;
  int d_e = 33;
  int r_true = 2;
  double mu = 12.0;
  double sigma_g2 = 1.0;
  double lambda_scale = 1.0;
  std::pair<double, double> psi_range{0.05, 0.2};
  std::pair<double, double> resid_range{0.15, 0.35};
  int replicates = 2;
  double missing_cell_fraction = 0.1;
  int n_causal_markers = 25;
  int n_causal_env_features = 8;
  // fraction of loading-column variance that is noise (not explained by the
  // environment features); 0 = loadings perfectly recoverable from features
  double env_link_noise = 0.1;
  std::uint64_t seed = 1;

  void validate() const;
};

struct GroundTruth {
  double mu = 0.0;
  Eigen::VectorXd G;                // n_g
  Eigen::VectorXd E;                // n_e
  Eigen::MatrixXd GE;               // n_g x n_e
  Eigen::MatrixXd Lambda;           // n_e x r_true
  Eigen::VectorXd Psi;              // n_e
  Eigen::VectorXd resid_vars;       // n_e
  Eigen::VectorXd marker_effects;   // d_g
  Eigen::VectorXd env_effect_weights;  // d_e
};

struct Simulated {
  Dataset dataset;
  GroundTruth truth;
};

Simulated simulate(const SimConfig& cfg);

// data-core CSV formats plus one truth file per ground-truth component
void write_simulated(const std::string& dir, const Simulated& sim);

}  // namespace gxe
