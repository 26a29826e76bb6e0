#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/Core>

#include "patchtraj/error.hpp"

namespace patchtraj {

struct eigen_decomposition {
  Eigen::VectorXd values;  // descending
  Eigen::MatrixXd vectors; // column k pairs with values[k]
  int sweeps{0};
  bool converged{false};
};

// Cyclic Jacobi eigensolver for symmetric matrices. Iterates until the
// off-diagonal Frobenius norm drops below tol * max(1, ||A||_F). Eigenvalues
// are returned in descending order (ties keep the diagonal index order) and
// every eigenvector is signed so that its largest-magnitude entry is positive.
inline eigen_decomposition jacobi_eigen(const Eigen::MatrixXd& input, double tol = 1e-10, int max_sweeps = 100) {
  const auto n = input.rows();
  detail::require(input.cols() == n, "jacobi_eigen: matrix must be square");
  Eigen::MatrixXd a = 0.5 * (input + input.transpose());
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  const double scale = std::max(1.0, a.norm());

  auto off_norm = [&] {
    double s = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  eigen_decomposition out;
  for (out.sweeps = 0; out.sweeps < max_sweeps; ++out.sweeps) {
    if (off_norm() <= tol * scale) {
      out.converged = true;
      break;
    }
    for (Eigen::Index p = 0; p < n - 1; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
  }
  if (!out.converged && off_norm() <= tol * scale) out.converged = true;

  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return a(i, i) > a(j, j); });
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    Eigen::VectorXd col = v.col(order[k]);
    Eigen::Index big = 0;
    col.cwiseAbs().maxCoeff(&big);
    if (col[big] < 0.0) col = -col;
    out.vectors.col(k) = col;
  }
  return out;
}

} // namespace patchtraj
