#include "gxe/optim.hpp"

#include <cmath>

#include "gxe/error.hpp"

namespace gxe {

Eigen::VectorXd fd_gradient(const ObjectiveFn& f, const Eigen::VectorXd& x, double step) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = step * std::max(1.0, std::fabs(x[i]));
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

OptimResult bfgs_minimize(const ObjectiveFn& f, const ObjectiveGradFn& grad,
                          const Eigen::VectorXd& x0, const OptimOptions& opts) {
  const Eigen::Index n = x0.size();
  OptimResult res;
  res.x = x0;

  auto eval_with_grad = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) -> double {
    if (grad) return grad(x, g);
    const double fx = f(x);
    g = fd_gradient(f, x, opts.fd_step);
    return fx;
  };

  Eigen::VectorXd g(n);
  double fx = eval_with_grad(res.x, g);
  if (!std::isfinite(fx)) throw NumericError("optimizer: objective not finite at start");
  res.trace.push_back(fx);

  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);  // inverse Hessian approximation
  const double c1 = 1e-4;
  bool fresh_h = true;  // a convergence signal with stale curvature triggers one
                        // steepest-descent probe before stopping

  for (int iter = 0; iter < opts.max_iter; ++iter) {
    Eigen::VectorXd dir = -(H * g);
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {  // lost descent property; reset
      H.setIdentity();
      fresh_h = true;
      dir = -g;
      slope = g.dot(dir);
      if (!(slope < 0.0)) {
        res.converged = true;  // gradient numerically zero
        break;
      }
    }

    // backtracking line search (Armijo)
    double alpha = 1.0;
    double f_new = fx;
    Eigen::VectorXd x_new = res.x;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = res.x + alpha * dir;
      f_new = f(x_new);
      if (std::isfinite(f_new) && f_new <= fx + c1 * alpha * slope) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      if (!fresh_h) {
        H.setIdentity();
        fresh_h = true;
        continue;
      }
      res.converged = true;  // no further progress possible
      break;
    }

    Eigen::VectorXd g_new(n);
    const double f_check = eval_with_grad(x_new, g_new);
    (void)f_check;
    if (!g_new.allFinite()) {
      res.x = x_new;
      fx = f_new;
      res.trace.push_back(fx);
      res.iterations = iter + 1;
      res.converged = true;  // cannot continue without a usable gradient
      break;
    }

    const Eigen::VectorXd s = x_new - res.x;
    const Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      H = (I - rho * s * y.transpose()) * H * (I - rho * y * s.transpose()) +
          rho * s * s.transpose();
      fresh_h = false;
    }

    const double improvement = (fx - f_new) / (1.0 + std::fabs(fx));
    res.x = x_new;
    fx = f_new;
    g = g_new;
    res.trace.push_back(fx);
    res.iterations = iter + 1;
    if (improvement < opts.tol) {
      if (!fresh_h) {
        H.setIdentity();
        fresh_h = true;
        continue;
      }
      res.converged = true;
      break;
    }
  }
  res.f = fx;
  return res;
}

}  // namespace gxe
