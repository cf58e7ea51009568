#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "gxe/data.hpp"

namespace gxe {

struct RelationshipMatrix {
  std::vector<std::string> ids;
  Eigen::MatrixXd K;  // symmetric PSD, trace = number of rows
  std::unordered_map<std::string, int> index;

  void rebuild_index();
  int find(const std::string& id) const;
  int n() const { return static_cast<int>(ids.size()); }
};

// Sigma_g = X X^T / (tr(X X^T) / n_g). Columns are centered by default; the
// literal uncentered formula is available behind the flag.
RelationshipMatrix genomic_relationship(const GenotypeTable& g, bool center = true);
RelationshipMatrix environmental_relationship(const EnvironmentTable& e, bool center = true);

struct KernelOptions {
  // non-null fixes the variance components instead of REML estimation
  const std::vector<double>* fixed_variances = nullptr;
  // G x EBLUP memory budget: number of observed cells in the dense system
  int max_cells = 6000;
};

struct GblupFit {
  double mu = 0.0;
  double sigma_g2 = 0.0;
  double sigma_eps2 = 0.0;
  double reml_loglik = 0.0;
  RelationshipMatrix kernel;
  Eigen::VectorXd g_blup;  // one entry per kernel id, tested or not

  double predict(const std::string& genotype_id) const;
};

GblupFit fit_gblup(const Dataset& d, const RelationshipMatrix& kg,
                   const KernelOptions& opts = {});

struct GxeblupFit {
  double mu = 0.0;
  double sigma_g2 = 0.0;
  double sigma_e2 = 0.0;
  double sigma_ge2 = 0.0;
  double sigma_eps2 = 0.0;
  double reml_loglik = 0.0;
  RelationshipMatrix kg;
  RelationshipMatrix ke;
  // weighted BLUP coefficients over training cells; predictions contract the
  // kernel rows against these, so the Kronecker product is never materialized
  std::vector<int> cell_genotype;  // kernel indices per training cell
  std::vector<int> cell_env;
  Eigen::VectorXd alpha;  // sqrt(w) * V^-1 residual

  double predict(const std::string& genotype_id, const std::string& environment_id) const;
};

GxeblupFit fit_gxeblup(const Dataset& d, const RelationshipMatrix& kg,
                       const RelationshipMatrix& ke, const KernelOptions& opts = {});

Dataset subsample_for_budget(const Dataset& d, double fraction, std::uint64_t seed);

void write_kernel_fit_csv(const std::string& path, const std::string& model,
                          const std::vector<std::pair<std::string, double>>& params);

}  // namespace gxe
