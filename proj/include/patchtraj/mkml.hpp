#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "patchtraj/error.hpp"
#include "patchtraj/jacobi.hpp"
#include "patchtraj/ranking.hpp"
#include "patchtraj/similarity.hpp"

// Unsupervised atlas selection by multi-kernel manifold learning. Jointly
// learns a row-stochastic similarity S, an orthonormal latent embedding L and
// simplex kernel weights w by block-coordinate descent on
//
//   -sum_ij (sum_l w_l K_l)(i,j) S(i,j) + beta ||S||_F^2
//     + gamma tr(L'(I - S)L) + rho sum_l w_l log w_l.
//
// Every block update is an exact minimizer, so the objective never increases.

namespace patchtraj {

struct mkml_params {
  int c{3};
  double beta{1.0};
  double gamma{1.0};
  double rho{0.1};
  int max_iters{30};
  double tol{1e-5};
};

struct similarity_model {
  mat S;
  mat L;
  vec w;
  std::vector<double> objective_trace; // initial value, then one per outer iteration
  int iterations{0};
  bool converged{false};
  bool eigengap_degenerate{false};
};

namespace detail {

inline void check_params(const mkml_params& p, Eigen::Index n) {
  require(p.c >= 1 && p.c < n, "mkml: need 1 <= c < n");
  require(p.beta > 0.0 && p.gamma > 0.0 && p.rho > 0.0, "mkml: beta, gamma, rho must be > 0");
  require(p.tol > 0.0 && p.max_iters >= 0, "mkml: bad stopping parameters");
}

inline void check_bank(const kernel_bank& bank) {
  require(bank.size() >= 1, "mkml: empty kernel bank");
  for (const auto& k : bank.kernels) require(k.rows() == bank.n() && k.cols() == bank.n(), "mkml: kernel shape mismatch");
}

} // namespace detail

inline mat combined_kernel(const kernel_bank& bank, const vec& w) {
  detail::require(w.size() == bank.size(), "mkml: weight/kernel count mismatch");
  mat m = mat::Zero(bank.n(), bank.n());
  for (int l = 0; l < bank.size(); ++l) m += w[l] * bank.kernels[l];
  return m;
}

inline double mkml_objective(const mat& S, const mat& L, const vec& w, const kernel_bank& bank, const mkml_params& p) {
  detail::check_bank(bank);
  const auto n = bank.n();
  detail::require(S.rows() == n && S.cols() == n, "mkml_objective: S shape mismatch");
  detail::require(L.rows() == n, "mkml_objective: L shape mismatch");
  detail::require(w.size() == bank.size(), "mkml_objective: w length mismatch");
  const mat M = combined_kernel(bank, w);
  double entropy = 0.0;
  for (double wl : w)
    if (wl > 0.0) entropy += wl * std::log(wl);
  const double trace = (L.transpose() * L).trace() - (L.transpose() * S * L).trace();
  return -(M.cwiseProduct(S)).sum() + p.beta * S.squaredNorm() + p.gamma * trace + p.rho * entropy;
}

// Euclidean projection onto {x : x >= 0, sum x = 1} by sort-and-threshold.
inline vec project_row_simplex(const vec& v) {
  detail::require(v.size() > 0, "project_row_simplex: empty input");
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0, theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumsum += u[j];
    const double t = (cumsum - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  return (v.array() - theta).cwiseMax(0.0).matrix();
}

// Closed-form entropic weights: w_l proportional to exp(<K_l, S> / rho).
inline vec update_w(const mat& S, const kernel_bank& bank, double rho) {
  detail::check_bank(bank);
  detail::require(rho > 0.0, "update_w: rho must be > 0");
  vec a(bank.size());
  for (int l = 0; l < bank.size(); ++l) a[l] = bank.kernels[l].cwiseProduct(S).sum() / rho;
  const vec e = (a.array() - a.maxCoeff()).exp().matrix();
  return e / e.sum();
}

struct latent_update {
  mat L;
  mat G; // projector used by the S-step; L L' unless the eigengap is degenerate
  bool eigengap_degenerate{false};
};

// Top-c eigenvectors of (S + S')/2, i.e. the minimizer of tr(L'(I - S)L)
// subject to L'L = I. When the c-th eigenvalue is repeated, L keeps the
// lowest-index vectors of the tied cluster, while G spreads the remaining
// weight evenly over the whole cluster. G is then a convex combination of
// optimal projectors, so it attains the same trace value and does not depend
// on the arbitrary basis of the tied eigenspace.
inline latent_update update_L(const mat& S, int c) {
  detail::require(S.rows() == S.cols(), "update_L: S must be square");
  detail::require(c >= 1 && c <= S.rows(), "update_L: bad cluster count");
  const auto eig = jacobi_eigen(0.5 * (S + S.transpose()));
  const auto n = S.rows();
  latent_update out;
  out.L = eig.vectors.leftCols(c);
  out.G = out.L * out.L.transpose();
  if (c == n) return out;
  const double ref = eig.values[c - 1];
  const double tie = 1e-9 * std::max(1.0, std::abs(ref));
  if (eig.values[c - 1] - eig.values[c] > tie) return out;
  out.eigengap_degenerate = true;
  Eigen::Index lo = c - 1, hi = c; // tied cluster is [lo, hi)
  while (lo > 0 && eig.values[lo - 1] - ref <= tie) --lo;
  while (hi < n && ref - eig.values[hi] <= tie) ++hi;
  const mat strict = eig.vectors.leftCols(lo);
  const mat cluster = eig.vectors.middleCols(lo, hi - lo);
  const double share = static_cast<double>(c - lo) / static_cast<double>(hi - lo);
  out.G = strict * strict.transpose() + share * (cluster * cluster.transpose());
  return out;
}

// Row i minimizes sum_j [-(M(i,j) + gamma G(i,j)) S(i,j) + beta S(i,j)^2]
// over the simplex, which is the projection of (M_i + gamma G_i) / (2 beta).
inline mat update_S_from_projector(const mat& G, const kernel_bank& bank, const vec& w, double beta, double gamma) {
  detail::check_bank(bank);
  detail::require(G.rows() == bank.n() && G.cols() == bank.n(), "update_S: projector shape mismatch");
  detail::require(beta > 0.0, "update_S: beta must be > 0");
  const mat target = (combined_kernel(bank, w) + gamma * G) / (2.0 * beta);
  mat S(bank.n(), bank.n());
  for (Eigen::Index i = 0; i < S.rows(); ++i) S.row(i) = project_row_simplex(target.row(i).transpose()).transpose();
  return S;
}

// G = L L'.
inline mat update_S(const mat& L, const kernel_bank& bank, const vec& w, double beta, double gamma) {
  detail::require(L.rows() == bank.n(), "update_S: L shape mismatch");
  return update_S_from_projector(L * L.transpose(), bank, w, beta, gamma);
}

inline similarity_model optimize_similarity(const kernel_bank& bank, const mkml_params& p) {
  detail::check_bank(bank);
  const auto n = bank.n();
  detail::check_params(p, n);
  const int m = bank.size();

  similarity_model model;
  model.w = vec::Constant(m, 1.0 / m);
  mat avg = combined_kernel(bank, model.w);
  for (Eigen::Index i = 0; i < n; ++i) avg.row(i) /= avg.row(i).sum();
  model.S = avg;
  auto lu = update_L(model.S, p.c);
  model.L = lu.L;
  model.eigengap_degenerate = lu.eigengap_degenerate;

  double prev = mkml_objective(model.S, model.L, model.w, bank, p);
  if (!std::isfinite(prev)) throw numerical_error("mkml: non-finite objective at initialization");
  model.objective_trace.push_back(prev);

  for (int it = 1; it <= p.max_iters; ++it) {
    model.S = update_S_from_projector(lu.G, bank, model.w, p.beta, p.gamma);
    lu = update_L(model.S, p.c);
    model.L = lu.L;
    model.eigengap_degenerate = lu.eigengap_degenerate;
    model.w = update_w(model.S, bank, p.rho);
    const double obj = mkml_objective(model.S, model.L, model.w, bank, p);
    if (!std::isfinite(obj)) throw numerical_error("mkml: non-finite objective at iteration " + std::to_string(it));
    model.objective_trace.push_back(obj);
    model.iterations = it;
    if (std::abs(prev - obj) < p.tol * std::max(std::abs(prev), 1e-12)) {
      model.converged = true;
      break;
    }
    prev = obj;
  }
  return model;
}

// Ranks every bank row except `test_index` by the symmetrized learned
// similarity to the test row, most similar first.
inline atlas_ranking rank_atlases_mkml(const similarity_model& model, int test_index,
                                       std::span<const int> subject_ids = {}) {
  const auto n = model.S.rows();
  detail::require(test_index >= 0 && test_index < n, "rank_atlases_mkml: test_index out of range");
  detail::require(subject_ids.empty() || static_cast<Eigen::Index>(subject_ids.size()) == n,
                  "rank_atlases_mkml: id list mismatch");
  atlas_ranking r;
  r.strategy = selection_strategy::mkml;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j == test_index) continue;
    // Snapped to a 1e-12 grid so rounding noise between mathematically equal
    // similarities cannot override the subject-id tie-break.
    const double s = std::round(0.5 * (model.S(test_index, j) + model.S(j, test_index)) * 1e12) / 1e12;
    r.entries.push_back({static_cast<int>(j), subject_ids.empty() ? static_cast<int>(j) : subject_ids[j], s});
  }
  sort_ranking(r);
  return r;
}

// Writes `<stem>.S.txt` (whitespace-separated matrix) and `<stem>.json`
// (weights, objective trace, convergence info).
inline void dump_similarity_model(const similarity_model& model, const std::filesystem::path& stem, int landmark_id) {
  auto mpath = stem;
  mpath += ".S.txt";
  std::ofstream ms(mpath);
  if (!ms) throw data_error("cannot write " + mpath.string());
  ms << std::setprecision(17);
  for (Eigen::Index i = 0; i < model.S.rows(); ++i) {
    for (Eigen::Index j = 0; j < model.S.cols(); ++j) ms << (j ? " " : "") << model.S(i, j);
    ms << '\n';
  }
  nlohmann::ordered_json h;
  h["format_version"] = 1;
  h["landmark_id"] = landmark_id;
  h["n"] = model.S.rows();
  h["w"] = std::vector<double>(model.w.data(), model.w.data() + model.w.size());
  h["objective_trace"] = model.objective_trace;
  h["iterations"] = model.iterations;
  h["converged"] = model.converged;
  h["matrix_file"] = mpath.filename().string();
  auto jpath = stem;
  jpath += ".json";
  std::ofstream js(jpath);
  if (!js) throw data_error("cannot write " + jpath.string());
  js << h.dump(2) << '\n';
}

} // namespace patchtraj
