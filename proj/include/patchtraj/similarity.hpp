#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "patchtraj/error.hpp"

namespace patchtraj {

using vec = Eigen::VectorXd;
using mat = Eigen::MatrixXd;

struct disparity_pair {
  vec d_plus;
  vec d_minus;
};

struct quotient_options {
  double cap{10.0};
  double floor{1e-3};
};

struct kernel_bank {
  std::vector<mat> kernels;
  std::vector<double> sigmas;
  int knn_k{0};

  int size() const { return static_cast<int>(kernels.size()); }
  Eigen::Index n() const { return kernels.empty() ? 0 : kernels.front().rows(); }
};

inline vec abs_disparity(const vec& p, const vec& q) {
  detail::require(p.size() == q.size(), "abs_disparity: length mismatch");
  return (p - q).cwiseAbs();
}

// d_plus = max(0, target - source), d_minus = max(0, source - target).
inline disparity_pair directional_disparities(const vec& source, const vec& target) {
  detail::require(source.size() == target.size(), "directional_disparities: length mismatch");
  const vec diff = target - source;
  return {diff.cwiseMax(0.0), (-diff).cwiseMax(0.0)};
}

// Element-wise target / source, mapping source onto target. Division by zero
// yields `cap`; everything is clamped to [floor, cap].
inline vec quotient_map(const vec& target, const vec& source, quotient_options opt = {}) {
  detail::require(target.size() == source.size(), "quotient_map: length mismatch");
  detail::require(opt.cap > 0.0 && opt.floor > 0.0 && opt.floor <= opt.cap, "quotient_map: bad cap/floor");
  vec a(target.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double s = source[i];
    const double r = s == 0.0 ? opt.cap : target[i] / s;
    a[i] = std::clamp(r, opt.floor, opt.cap);
  }
  return a;
}

inline mat pairwise_distances(std::span<const vec> patches) {
  const auto n = static_cast<Eigen::Index>(patches.size());
  mat d = mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      detail::require(patches[i].size() == patches[j].size(), "patch length mismatch");
      d(i, j) = d(j, i) = (patches[i] - patches[j]).norm();
    }
  return d;
}

inline int default_knn_k(std::size_t n) {
  const int k = std::max(2, static_cast<int>(std::ceil((static_cast<double>(n) - 1.0) / 10.0)));
  return std::min(k, std::max(1, static_cast<int>(n) - 1));
}

// Mean distance from each patch to its k nearest other patches. Ties go to the
// lower index.
inline vec knn_bandwidth_from_distances(const mat& dist, int k) {
  const auto n = dist.rows();
  detail::require(k >= 1 && k < n, "knn_bandwidth: need 1 <= k < n");
  vec mu(n);
  std::vector<Eigen::Index> order;
  for (Eigen::Index s = 0; s < n; ++s) {
    order.clear();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != s) order.push_back(j);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](auto a, auto b) {
      return dist(s, a) != dist(s, b) ? dist(s, a) < dist(s, b) : a < b;
    });
    double acc = 0.0;
    for (int t = 0; t < k; ++t) acc += dist(s, order[t]);
    mu[s] = acc / k;
  }
  return mu;
}

inline vec knn_bandwidth(std::span<const vec> patches, int k) {
  detail::require(k >= 1 && static_cast<std::size_t>(k) < patches.size(), "knn_bandwidth: need 1 <= k < n");
  return knn_bandwidth_from_distances(pairwise_distances(patches), k);
}

inline std::vector<double> sigma_grid(int m, double lo = 1.0, double hi = 2.0) {
  detail::require(m >= 1, "sigma_grid: m must be >= 1");
  std::vector<double> s(m);
  for (int l = 0; l < m; ++l) s[l] = m == 1 ? lo : lo + (hi - lo) * l / (m - 1);
  return s;
}

struct kernel_bank_options {
  int knn_k{0}; // 0 selects default_knn_k(n)
  bool normalize{true};
};

// Gaussian kernels K_l(s,t) = exp(-|p_s - p_t|^2 / (2 eps^2)) / (eps sqrt(2 pi))
// with eps = sigma_l (mu_s + mu_t) / 2. Each kernel is symmetrized and, unless
// raw mode is requested, scaled to a maximum entry of 1.
inline kernel_bank build_kernel_bank(std::span<const vec> patches, std::span<const double> sigmas,
                                     kernel_bank_options opt = {}) {
  detail::require(!sigmas.empty(), "build_kernel_bank: no sigmas");
  for (double s : sigmas) detail::require(s > 0.0, "build_kernel_bank: sigma must be > 0");
  detail::require(patches.size() >= 2, "build_kernel_bank: need at least two patches");
  const int k = opt.knn_k > 0 ? opt.knn_k : default_knn_k(patches.size());

  const mat dist = pairwise_distances(patches);
  const vec mu = knn_bandwidth_from_distances(dist, k);
  const auto n = dist.rows();

  double nz_sum = 0.0;
  std::size_t nz = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      if (dist(i, j) > 0.0) {
        nz_sum += dist(i, j);
        ++nz;
      }
  const double eps_floor = 1e-6 * (nz > 0 ? nz_sum / static_cast<double>(nz) : 1.0);

  kernel_bank bank;
  bank.sigmas.assign(sigmas.begin(), sigmas.end());
  bank.knn_k = k;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (double sigma : sigmas) {
    mat K(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        const double eps = std::max(sigma * (mu[i] + mu[j]) / 2.0, eps_floor);
        if (!(eps > 0.0)) throw numerical_error("build_kernel_bank: zero bandwidth");
        const double d = dist(i, j);
        K(i, j) = inv_sqrt_2pi / eps * std::exp(-d * d / (2.0 * eps * eps));
      }
    K = (0.5 * (K + K.transpose())).eval();
    if (opt.normalize) K /= K.maxCoeff();
    bank.kernels.push_back(std::move(K));
  }
  return bank;
}

} // namespace patchtraj
