#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "gxe/data.hpp"

namespace gxe {

// Replicated observations collapsed to weighted cell means plus within-cell
// sums of squares; an exact sufficient-statistic reduction for all models here
// (random effects and fixed effects are constant within a cell).
struct CollapsedCells {
  struct Cell {
    int g = 0;
    int e = 0;
    double w = 0.0;     // replicate count
    double ybar = 0.0;  // cell mean
    double ss = 0.0;    // within-cell sum of squares
  };
  std::vector<Cell> cells;                       // sorted by (g, e)
  std::vector<std::pair<int, int>> by_genotype;  // [begin, end) ranges into cells
  long n_obs = 0;
  int n_g = 0;
  int n_e = 0;
  double y_sum = 0.0;  // raw sum over all observations

  static CollapsedCells build(const Dataset& d);
};

struct FAParams {
  double mu = 0.0;
  Eigen::VectorXd env_fixed;   // n_e, sum-to-zero constrained
  double sigma_g2 = 0.0;
  Eigen::MatrixXd Lambda;      // n_e x r, zeros above the diagonal of the top r x r block
  Eigen::VectorXd Psi;         // n_e, >= 0
  Eigen::VectorXd resid_vars;  // n_e, > 0

  int n_e() const { return static_cast<int>(Psi.size()); }
  int r() const { return static_cast<int>(Lambda.cols()); }
  Eigen::MatrixXd sigma_e() const {
    return Lambda * Lambda.transpose() + Psi.asDiagonal().toDenseMatrix();
  }
};

struct FAFit {
  FAParams params;
  Eigen::VectorXd blup_G;     // n_g
  Eigen::MatrixXd blup_GE;    // n_g x n_e
  Eigen::MatrixXd cell_pred;  // n_g x n_e, mu + G_i + E_j + GE_ij for every cell
  double reml_loglik = 0.0;
  bool converged = false;
  int iterations = 0;
  std::vector<double> loglik_trace;
};

struct LabelSets {
  double mu_hat = 0.0;
  Eigen::VectorXd y_g;   // n_g
  Eigen::VectorXd y_e;   // n_e
  Eigen::MatrixXd y_ge;  // n_g x n_e
};

struct FaOptions {
  int r = 2;
  double tol = 1e-8;
  int max_iter = 500;
  std::uint64_t seed = 0;
  // Analytic gradients are the default; central finite differences remain
  // available as a cross-check and fallback.
  bool analytic_gradient = true;
};

// REML log-likelihood of the observed yields under the factor-analytic mixed
// model, fixed effects profiled out. Exploits the per-genotype block structure
// of the marginal covariance.
double restricted_log_likelihood(const Dataset& d, const FAParams& p);

// Analytic gradient of the REML log-likelihood w.r.t. the raw parameters, in
// the order [sigma_g2, free Lambda entries (column-major, lower part), Psi,
// resid_vars]. Diagnostic hook; the optimizer consumes the same quantities.
Eigen::VectorXd reml_parameter_gradient(const Dataset& d, const FAParams& p);

FAFit fit_fa(const Dataset& d, const FaOptions& opts = {});

struct MmeSolution {
  Eigen::VectorXd blup_G;
  Eigen::MatrixXd blup_GE;
  Eigen::VectorXd env_fixed;
  double mu = 0.0;
};

// Exact GLS / BLUP solution at fixed variance components.
MmeSolution solve_mme(const Dataset& d, const FAParams& p);

LabelSets generate_labels(const FAFit& fit, const Dataset& d);

struct PredTriple {
  std::string genotype_id;
  std::string environment_id;
  double value = 0.0;
};

struct RankingFit {
  std::vector<std::string> genotype_ids;
  Eigen::VectorXd genetic_effects;  // shrunken, mean ~ 0
  std::vector<std::string> environment_ids;
  Eigen::VectorXd env_means;
  double sigma_g2 = 0.0;
  double resid_var = 0.0;
};

// y_ij = mu_j + G_i + eps with G ~ N(0, sigma_g2); two-parameter REML.
// When fixed_vars is given the variances are not estimated (used by oracles).
RankingFit fit_ranking_model(const std::vector<PredTriple>& preds,
                             const std::pair<double, double>* fixed_vars = nullptr);

// ---- I/O --------------------------------------------------------------------

void write_fa_fit_csv(const std::string& path, const FAFit& fit);
void write_blups_csv(const std::string& path, const FAFit& fit, const Dataset& d);
void write_labels_csv(const std::string& path, const LabelSets& labels, const Dataset& d);
LabelSets read_labels_csv(const std::string& path, const Dataset& d);

}  // namespace gxe
