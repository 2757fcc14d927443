#pragma once

#include "fsr/common.hpp"

#include <functional>

namespace fsr::test {

inline MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = uniform(rng, -scale, scale);
  return m;
}

// Central finite difference of f with respect to one entry.
inline double fd_slot(const std::function<double()>& f, double& slot, double h = 1e-6) {
  const double orig = slot;
  slot = orig + h;
  const double fp = f();
  slot = orig - h;
  const double fm = f();
  slot = orig;
  return (fp - fm) / (2.0 * h);
}

// Max relative error between analytic and finite-difference gradients over
// every entry of every listed matrix.
inline double max_grad_rel_error(const std::function<double()>& f,
                                 const std::vector<std::pair<MatrixXd*, const MatrixXd*>>& params,
                                 double h = 1e-6) {
  double worst = 0.0;
  for (auto& [param, grad] : params) {
    for (Eigen::Index i = 0; i < param->rows(); ++i)
      for (Eigen::Index j = 0; j < param->cols(); ++j) {
        double fd = fd_slot(f, (*param)(i, j), h);
        double an = (*grad)(i, j);
        double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
        worst = std::max(worst, std::abs(fd - an) / denom);
      }
  }
  return worst;
}

}  // namespace fsr::test
