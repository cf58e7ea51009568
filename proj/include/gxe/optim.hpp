#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

namespace gxe {

struct OptimOptions {
  double tol = 1e-8;       // relative objective improvement
  int max_iter = 500;
  double fd_step = 1e-5;   // central-difference step when no gradient callback
};

struct OptimResult {
  Eigen::VectorXd x;
  double f = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> trace;  // objective after each accepted step
};

using ObjectiveFn = std::function<double(const Eigen::VectorXd&)>;
// value + gradient in one call
using ObjectiveGradFn = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

// central finite differences of f at x
Eigen::VectorXd fd_gradient(const ObjectiveFn& f, const Eigen::VectorXd& x, double step);

// Dense BFGS minimizer with Armijo backtracking. `grad` may be null, in which
// case central finite differences are used. Convergence is declared when the
// relative objective improvement of an accepted step falls below tol.
OptimResult bfgs_minimize(const ObjectiveFn& f, const ObjectiveGradFn& grad,
                          const Eigen::VectorXd& x0, const OptimOptions& opts);

}  // namespace gxe
