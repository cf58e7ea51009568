#pragma once

// Independent brute-force oracles. Everything here is computed by literal
// dense formulas, never through the library's structured code paths.

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "gxe/data.hpp"
#include "gxe/fa.hpp"

namespace gxe::oracle {

// literal dense REML evaluation: explicit n x n covariance, fixed effects
// mu + sum-to-zero environment contrasts (last environment as reference)
double dense_reml_loglik(const Dataset& d, const FAParams& p);

struct DenseMme {
  double mu = 0.0;
  Eigen::VectorXd env_fixed;  // sum-to-zero
  Eigen::VectorXd blup_g;     // n_g
  Eigen::MatrixXd blup_ge;    // n_g x n_e
};

// Henderson's mixed-model equations assembled densely over all random levels
DenseMme dense_mme_solve(const Dataset& d, const FAParams& p);

// dense GLS/BLUP for the kernel models: y = mu + g (+ e + ge) + eps with
// explicit covariance including the materialized Kronecker interaction
Eigen::VectorXd dense_gblup_predict(const Dataset& d, const Eigen::MatrixXd& kg,
                                    const std::vector<std::string>& kernel_ids,
                                    double sigma_g2, double sigma_eps2,
                                    const std::vector<std::string>& predict_genotypes);

Eigen::VectorXd dense_gxeblup_predict(
    const Dataset& d, const Eigen::MatrixXd& kg, const std::vector<std::string>& kg_ids,
    const Eigen::MatrixXd& ke, const std::vector<std::string>& ke_ids, double sigma_g2,
    double sigma_e2, double sigma_ge2, double sigma_eps2,
    const std::vector<std::pair<std::string, std::string>>& predict_cells);

// rank-based metrics recomputed from first principles
double brute_pearson(const std::vector<double>& x, const std::vector<double>& y);
double brute_spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace gxe::oracle
