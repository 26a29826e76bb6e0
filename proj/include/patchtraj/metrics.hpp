#pragma once

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "patchtraj/error.hpp"

namespace patchtraj {

// Mean element-wise absolute difference.
inline double mae(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  detail::require(p.size() == q.size(), "mae: length mismatch");
  detail::require(p.size() > 0, "mae: empty input");
  return (p - q).cwiseAbs().mean();
}

struct correlation {
  double value{0.0};
  bool degenerate{false}; // one side had zero variance; value is then 0
};

inline correlation pearson(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  detail::require(p.size() == q.size(), "pearson: length mismatch");
  detail::require(p.size() >= 2, "pearson: need at least two samples");
  if (p.minCoeff() == p.maxCoeff() || q.minCoeff() == q.maxCoeff()) return {0.0, true};
  const Eigen::ArrayXd a = p.array() - p.mean();
  const Eigen::ArrayXd b = q.array() - q.mean();
  const double saa = (a * a).sum(), sbb = (b * b).sum();
  if (saa <= 0.0 || sbb <= 0.0) return {0.0, true};
  const double r = (a * b).sum() / std::sqrt(saa * sbb);
  return {std::clamp(r, -1.0, 1.0), false};
}

} // namespace patchtraj
