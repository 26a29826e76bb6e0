#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Cholesky>

#include "patchtraj/error.hpp"
#include "patchtraj/seed.hpp"

// Dual solvers for linear soft-margin classification and epsilon-insensitive
// regression.

namespace patchtraj {

using row_mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct solver_options {
  double tol{1e-6};
  int max_epochs{20000};
};

struct solver_stats {
  double objective{0.0};     // dual objective, minimization form
  double kkt_violation{0.0}; // max projected-gradient magnitude at exit
  int epochs{0};
  bool converged{false};
};

struct linear_model {
  Eigen::VectorXd w;
  double bias{0.0};

  double decision(const Eigen::Ref<const Eigen::VectorXd>& x) const { return w.dot(x) + bias; }
};

// ---------------------------------------------------------------------------
// Classification. Dual:  min 1/2 a'Qa - 1'a,  y'a = 0,  0 <= a_i <= C,
// Q_ij = y_i y_j K_ij with K the linear kernel. The bias is not regularized.
// Solved by sequential minimal optimization: each step moves the maximal
// violating pair (second-order choice of the partner) along the equality
// constraint. Works on the kernel matrix so repeated fits on subsets
// (cross-validation) never touch the raw features.
// ---------------------------------------------------------------------------

struct svc_dual_result {
  Eigen::VectorXd alpha;
  double bias{0.0};
  solver_stats stats;
};

// `kernel` holds x_i.x_j for the training rows.
inline svc_dual_result solve_svc_dual(const Eigen::MatrixXd& kernel, std::span<const int> labels, double C,
                                      solver_options opt = {}) {
  const auto n = kernel.rows();
  detail::require(kernel.cols() == n && static_cast<Eigen::Index>(labels.size()) == n, "svc: shape mismatch");
  detail::require(C > 0.0, "svc: C must be > 0");
  bool pos = false, neg = false;
  for (int l : labels) (l > 0 ? pos : neg) = true;
  detail::require(pos && neg, "svc: need samples of both classes");

  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = labels[i] > 0 ? 1.0 : -1.0;

  svc_dual_result r;
  r.alpha = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd grad = Eigen::VectorXd::Constant(n, -1.0); // Qa - 1

  auto in_up = [&](Eigen::Index t) { return y[t] > 0 ? r.alpha[t] < C : r.alpha[t] > 0.0; };
  auto in_low = [&](Eigen::Index t) { return y[t] > 0 ? r.alpha[t] > 0.0 : r.alpha[t] < C; };

  // Returns m - M, the maximal pair violation, and the working pair.
  auto select = [&](Eigen::Index& i, Eigen::Index& j) {
    double m = -std::numeric_limits<double>::infinity(), M = std::numeric_limits<double>::infinity();
    i = j = -1;
    for (Eigen::Index t = 0; t < n; ++t) {
      const double v = -y[t] * grad[t];
      if (in_up(t) && v > m) {
        m = v;
        i = t;
      }
      if (in_low(t)) M = std::min(M, v);
    }
    if (i < 0 || !std::isfinite(M)) return 0.0;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index t = 0; t < n; ++t) {
      if (!in_low(t)) continue;
      const double b = m + y[t] * grad[t];
      if (b <= 0.0) continue;
      double a = kernel(i, i) + kernel(t, t) - 2.0 * kernel(i, t);
      if (a <= 0.0) a = 1e-12;
      if (-b * b / a < best) {
        best = -b * b / a;
        j = t;
      }
    }
    return m - M;
  };

  auto& st = r.stats;
  const long max_steps = static_cast<long>(opt.max_epochs) * std::max<Eigen::Index>(n, 1);
  long step = 0;
  Eigen::Index i = -1, j = -1;
  double gap = select(i, j);
  while (gap > opt.tol && j >= 0 && step < max_steps) {
    // Move a_i by y_i*lam and a_j by -y_j*lam; lam >= 0 decreases the objective.
    const double b = -y[i] * grad[i] + y[j] * grad[j];
    double a = kernel(i, i) + kernel(j, j) - 2.0 * kernel(i, j);
    if (a <= 0.0) a = 1e-12;
    const double cap_i = y[i] > 0 ? C - r.alpha[i] : r.alpha[i];
    const double cap_j = y[j] > 0 ? r.alpha[j] : C - r.alpha[j];
    double lam = b / a;
    bool hit_i = false, hit_j = false;
    if (lam >= cap_i) {
      lam = cap_i;
      hit_i = true;
    }
    if (lam >= cap_j) {
      lam = cap_j;
      hit_j = true;
      hit_i = hit_i && cap_i == cap_j;
    }
    r.alpha[i] = hit_i ? (y[i] > 0 ? C : 0.0) : r.alpha[i] + y[i] * lam;
    r.alpha[j] = hit_j ? (y[j] > 0 ? 0.0 : C) : r.alpha[j] - y[j] * lam;
    grad.noalias() += lam * y.cwiseProduct(kernel.col(i) - kernel.col(j));
    ++step;
    if (step % (4 * n + 1) == 0) // drop accumulated drift
      grad = y.cwiseProduct(kernel * r.alpha.cwiseProduct(y)) - Eigen::VectorXd::Ones(n);
    gap = select(i, j);
  }
  grad = y.cwiseProduct(kernel * r.alpha.cwiseProduct(y)) - Eigen::VectorXd::Ones(n);
  Eigen::Index ii, jj;
  st.kkt_violation = std::max(0.0, select(ii, jj));
  st.converged = st.kkt_violation <= opt.tol;
  st.epochs = static_cast<int>(step / std::max<Eigen::Index>(n, 1));

  // Bias from the free multipliers, or the middle of the feasible interval.
  double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity(), sum = 0.0;
  int nfree = 0;
  for (Eigen::Index t = 0; t < n; ++t) {
    const double v = -y[t] * grad[t];
    if (r.alpha[t] > 0.0 && r.alpha[t] < C) {
      sum += v;
      ++nfree;
    } else {
      if (in_up(t)) lo = std::max(lo, v);
      if (in_low(t)) hi = std::min(hi, v);
    }
  }
  if (nfree > 0)
    r.bias = sum / nfree;
  else if (std::isfinite(lo) && std::isfinite(hi))
    r.bias = 0.5 * (lo + hi);
  else
    r.bias = std::isfinite(lo) ? lo : hi;

  const Eigen::VectorXd ay = r.alpha.cwiseProduct(y);
  st.objective = 0.5 * ay.dot(kernel * ay) - r.alpha.sum();
  if (!std::isfinite(st.objective) || !std::isfinite(r.bias)) throw numerical_error("svc: non-finite solution");
  return r;
}

inline Eigen::MatrixXd linear_kernel(const Eigen::Ref<const row_mat>& x) { return x * x.transpose(); }

inline linear_model svc_primal(const Eigen::Ref<const row_mat>& x, std::span<const int> labels,
                               const svc_dual_result& dual) {
  linear_model m;
  m.w = Eigen::VectorXd::Zero(x.cols());
  m.bias = dual.bias;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double c = dual.alpha[i] * (labels[i] > 0 ? 1.0 : -1.0);
    if (c != 0.0) m.w.noalias() += c * x.row(i).transpose();
  }
  return m;
}

// ---------------------------------------------------------------------------
// Regression. Dual:  min 1/2 b'Qb - y'b + eps |b|_1,  -C <= b_i <= C,
// Q_ij = x_i.x_j + 1. The primal weights w = sum b_i x_i are maintained
// incrementally, so the cost per epoch is O(rows * dim).
// ---------------------------------------------------------------------------

struct svr_dual_result {
  Eigen::VectorXd beta;
  linear_model model;
  solver_stats stats;
};

inline double svr_violation(double b, double gp, double gn, double C) {
  if (b == 0.0) return std::max({0.0, -gp, gn});
  if (b >= C) return std::max(0.0, gp);
  if (b <= -C) return std::max(0.0, -gn);
  return b > 0.0 ? std::abs(gp) : std::abs(gn);
}

inline svr_dual_result solve_svr_dual(const Eigen::Ref<const row_mat>& x, const Eigen::Ref<const Eigen::VectorXd>& y,
                                      double C, double eps, solver_options opt = {},
                                      const Eigen::VectorXd& initial_beta = Eigen::VectorXd()) {
  const auto n = x.rows();
  detail::require(n > 0 && y.size() == n, "svr: shape mismatch");
  detail::require(C > 0.0 && eps >= 0.0, "svr: need C > 0 and eps >= 0");
  detail::require(initial_beta.size() == 0 || initial_beta.size() == n, "svr: warm start has the wrong length");

  svr_dual_result r;
  if (initial_beta.size() == n) {
    r.beta = initial_beta.cwiseMax(-C).cwiseMin(C);
    r.model.w = x.transpose() * r.beta;
    r.model.bias = r.beta.sum();
  } else {
    r.beta = Eigen::VectorXd::Zero(n);
    r.model.w = Eigen::VectorXd::Zero(x.cols());
    r.model.bias = 0.0;
  }
  const Eigen::VectorXd qdiag = x.rowwise().squaredNorm().array() + 1.0;

  auto exact_violation = [&] {
    const Eigen::VectorXd f = x * r.model.w;
    double v = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double g = f[i] + r.model.bias - y[i];
      v = std::max(v, svr_violation(r.beta[i], g + eps, g - eps, C));
    }
    return v;
  };

  // Visiting order is reshuffled every epoch from a fixed stream; cyclic
  // order stalls badly on nearly collinear rows.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(0x5eed);

  auto objective = [&] {
    return 0.5 * (r.model.w.squaredNorm() + r.model.bias * r.model.bias) - y.dot(r.beta) + eps * r.beta.lpNorm<1>();
  };

  // Newton step on the free multipliers with the rest held fixed. Inside the
  // current sign pattern the dual is a plain quadratic whose minimizer solves
  // Q_FF b_F = y_F - eps s_F - Q_FB b_B. Only attempted when the free set is
  // small enough for Q_FF to be nonsingular; the step is cut at the face
  // boundary and kept only if the objective drops.
  auto newton_on_free_set = [&] {
    std::vector<Eigen::Index> free;
    for (Eigen::Index i = 0; i < n; ++i)
      if (r.beta[i] != 0.0 && std::abs(r.beta[i]) < C) free.push_back(i);
    const auto f = static_cast<Eigen::Index>(free.size());
    if (f == 0 || f > x.cols() + 1) return;
    Eigen::MatrixXd xf(f, x.cols() + 1);
    Eigen::VectorXd bf(f), rhs(f);
    for (Eigen::Index k = 0; k < f; ++k) {
      const auto i = free[static_cast<std::size_t>(k)];
      xf.row(k).head(x.cols()) = x.row(i);
      xf(k, x.cols()) = 1.0;
      bf[k] = r.beta[i];
    }
    Eigen::VectorXd wa(x.cols() + 1);
    wa << r.model.w, r.model.bias;
    const Eigen::VectorXd w_fixed = wa - xf.transpose() * bf;
    for (Eigen::Index k = 0; k < f; ++k)
      rhs[k] = y[free[static_cast<std::size_t>(k)]] - (bf[k] > 0.0 ? eps : -eps) - xf.row(k).dot(w_fixed);
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(xf * xf.transpose());
    if (ldlt.info() != Eigen::Success) return;
    const Eigen::VectorXd dir = ldlt.solve(rhs) - bf;
    if (!dir.allFinite()) return;
    double tau = 1.0;
    for (Eigen::Index k = 0; k < f; ++k) {
      const double lo = bf[k] > 0.0 ? 0.0 : -C, hi = bf[k] > 0.0 ? C : 0.0;
      if (dir[k] > 0.0) tau = std::min(tau, (hi - bf[k]) / dir[k]);
      if (dir[k] < 0.0) tau = std::min(tau, (lo - bf[k]) / dir[k]);
    }
    if (!(tau > 0.0)) return;
    Eigen::VectorXd nb = bf + tau * dir;
    for (Eigen::Index k = 0; k < f; ++k) {
      const double lo = bf[k] > 0.0 ? 0.0 : -C, hi = bf[k] > 0.0 ? C : 0.0;
      nb[k] = std::clamp(nb[k], lo, hi);
    }
    const Eigen::VectorXd wn = w_fixed + xf.transpose() * nb;
    const double before = objective();
    const Eigen::VectorXd old_w = r.model.w;
    const double old_b = r.model.bias;
    for (Eigen::Index k = 0; k < f; ++k) r.beta[free[static_cast<std::size_t>(k)]] = nb[k];
    r.model.w = wn.head(x.cols());
    r.model.bias = wn[x.cols()];
    if (!(objective() < before)) {
      for (Eigen::Index k = 0; k < f; ++k) r.beta[free[static_cast<std::size_t>(k)]] = bf[k];
      r.model.w = old_w;
      r.model.bias = old_b;
    }
  };
  constexpr int newton_interval = 5;

  // Shrinking: a multiplier resting at 0 or +-C whose gradient points well
  // outside the box (beyond last pass's worst violation) leaves the active
  // set. Once the active set meets the tolerance every variable is restored
  // and checked again, so the stopping rule always covers all rows.
  auto& st = r.stats;
  std::size_t active = order.size();
  double last_worst = std::numeric_limits<double>::infinity();
  for (st.epochs = 0; st.epochs < opt.max_epochs; ++st.epochs) {
    for (std::size_t k = active; k > 1; --k) std::swap(order[k - 1], order[bounded(rng, k)]);
    double worst = 0.0;
    for (std::size_t k = 0; k < active;) {
      const Eigen::Index i = order[k];
      const double g = x.row(i).dot(r.model.w) + r.model.bias - y[i];
      const double gp = g + eps, gn = g - eps;
      const double b = r.beta[i], h = qdiag[i];
      const bool shrink = (b == 0.0 && gp > last_worst && gn < -last_worst) || (b >= C && gp < -last_worst) ||
                          (b <= -C && gn > last_worst);
      if (shrink) {
        std::swap(order[k], order[--active]);
        continue;
      }
      worst = std::max(worst, svr_violation(b, gp, gn, C));
      double z;
      if (gp < h * b)
        z = -gp / h;
      else if (gn > h * b)
        z = -gn / h;
      else
        z = -b;
      const double next = std::clamp(b + z, -C, C);
      const double delta = next - b;
      if (delta != 0.0) {
        r.beta[i] = next;
        r.model.w.noalias() += delta * x.row(i).transpose();
        r.model.bias += delta;
      }
      ++k;
    }
    last_worst = worst > 0.0 ? worst : std::numeric_limits<double>::infinity();
    if (worst > opt.tol && st.epochs % newton_interval == newton_interval - 1) newton_on_free_set();
    if (worst <= opt.tol) {
      if (active == order.size() && exact_violation() <= opt.tol) break;
      active = order.size();
      last_worst = std::numeric_limits<double>::infinity();
    }
  }

  st.kkt_violation = exact_violation();
  st.converged = st.kkt_violation <= opt.tol;
  st.objective = objective();
  if (!std::isfinite(st.objective)) throw numerical_error("svr: non-finite dual objective");
  return r;
}

} // namespace patchtraj
