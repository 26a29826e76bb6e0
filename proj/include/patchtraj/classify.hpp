#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "patchtraj/error.hpp"
#include "patchtraj/linear_svm.hpp"
#include "patchtraj/seed.hpp"

// Per-landmark linear SVM ensemble: cost tuning by stratified k-fold CV,
// sigmoid calibration of decision values, and posterior-weighted voting.
// Class labels: -1 = normal control, +1 = disease.

namespace patchtraj {

inline constexpr int label_nc = -1;
inline constexpr int label_disease = +1;

namespace detail {

inline void require_two_classes(std::span<const int> labels) {
  bool pos = false, neg = false;
  for (int y : labels) (y > 0 ? pos : neg) = true;
  require(pos && neg, "need samples of both classes");
}

inline std::vector<int> all_indices(std::size_t n) {
  std::vector<int> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<int>(i);
  return v;
}

} // namespace detail

struct svm_fit {
  linear_model model;
  solver_stats stats;
};

inline svm_fit train_linear_svm(const Eigen::Ref<const row_mat>& features, std::span<const int> labels, double C,
                                solver_options opt = {}) {
  detail::require(features.rows() == static_cast<Eigen::Index>(labels.size()), "train_linear_svm: row/label mismatch");
  detail::require(C > 0.0, "train_linear_svm: C must be > 0");
  detail::require_two_classes(labels);
  const auto dual = solve_svc_dual(linear_kernel(features), labels, C, opt);
  return {svc_primal(features, labels, dual), dual.stats};
}

// Powers of two 2^lo .. 2^hi inclusive.
inline std::vector<double> c_grid(int lo_exp = -6, int hi_exp = 15) {
  detail::require(lo_exp <= hi_exp, "c_grid: empty range");
  std::vector<double> g;
  for (int e = lo_exp; e <= hi_exp; ++e) g.push_back(std::ldexp(1.0, e));
  return g;
}

// Fold id per sample. Each class is shuffled with `seed` and dealt round-robin.
inline std::vector<int> stratified_folds(std::span<const int> labels, int folds, std::uint64_t seed) {
  detail::require(folds >= 2, "stratified_folds: need >= 2 folds");
  std::vector<int> fold(labels.size(), 0);
  for (int cls : {label_nc, label_disease}) {
    std::vector<int> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if ((labels[i] > 0 ? label_disease : label_nc) == cls) members.push_back(static_cast<int>(i));
    seeded_shuffle(members, derive_seed(seed, "stratify", {cls}));
    for (std::size_t k = 0; k < members.size(); ++k) fold[members[k]] = static_cast<int>(k % folds);
  }
  return fold;
}

namespace detail {

// Fits on `train` rows of a kernel matrix and returns decision values on
// `eval` rows.
inline std::vector<double> gram_fit_decide(const Eigen::MatrixXd& gram, std::span<const int> labels,
                                           const std::vector<int>& train, const std::vector<int>& eval, double C,
                                           solver_options opt) {
  std::vector<int> ytr(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) ytr[i] = labels[train[i]];
  const Eigen::MatrixXd sub = gram(train, train);
  const auto dual = solve_svc_dual(sub, ytr, C, opt);
  std::vector<double> out(eval.size(), dual.bias);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const double c = dual.alpha[static_cast<Eigen::Index>(i)] * (ytr[i] > 0 ? 1.0 : -1.0);
    if (c == 0.0) continue;
    for (std::size_t e = 0; e < eval.size(); ++e) out[e] += c * gram(train[i], eval[e]);
  }
  return out;
}

inline int min_class_count(std::span<const int> labels) {
  int pos = 0, neg = 0;
  for (int y : labels) ++(y > 0 ? pos : neg);
  return std::min(pos, neg);
}

} // namespace detail

struct c_tuning {
  double C{1.0};
  std::vector<double> accuracy; // mean CV accuracy per grid value
  int folds_used{0};
  bool folds_reduced{false};
};

inline c_tuning tune_C_from_gram(const Eigen::MatrixXd& gram, std::span<const int> labels, std::span<const double> grid,
                                 int folds, std::uint64_t seed, solver_options opt = {}) {
  detail::require(!grid.empty(), "tune_C: empty grid");
  detail::require(folds >= 2, "tune_C: need >= 2 folds");
  detail::require_two_classes(labels);
  c_tuning out;
  const int per_class = detail::min_class_count(labels);
  if (per_class < folds) {
    out.folds_reduced = true;
    folds = per_class;
  }
  out.folds_used = folds;
  if (grid.size() == 1 || folds < 2) {
    out.C = grid.front();
    out.accuracy.assign(grid.size(), 0.0);
    return out;
  }

  const auto fold = stratified_folds(labels, folds, seed);
  std::vector<std::vector<int>> train(folds), test(folds);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (int f = 0; f < folds; ++f) (fold[i] == f ? test[f] : train[f]).push_back(static_cast<int>(i));

  int best_correct = -1;
  for (double C : grid) {
    int correct = 0;
    for (int f = 0; f < folds; ++f) {
      const auto dec = detail::gram_fit_decide(gram, labels, train[f], test[f], C, opt);
      for (std::size_t e = 0; e < test[f].size(); ++e) {
        const int pred = dec[e] > 0.0 ? label_disease : label_nc;
        correct += pred == (labels[test[f][e]] > 0 ? label_disease : label_nc);
      }
    }
    out.accuracy.push_back(static_cast<double>(correct) / static_cast<double>(labels.size()));
    if (correct > best_correct) {
      best_correct = correct;
      out.C = C;
    }
  }
  return out;
}

inline c_tuning tune_C_nested_cv(const Eigen::Ref<const row_mat>& features, std::span<const int> labels,
                                 std::span<const double> grid, int folds, std::uint64_t seed, solver_options opt = {}) {
  detail::require(features.rows() == static_cast<Eigen::Index>(labels.size()), "tune_C: row/label mismatch");
  return tune_C_from_gram(linear_kernel(features), labels, grid, folds, seed, opt);
}

// ---------------------------------------------------------------------------
// Sigmoid calibration: P(+1 | f) = 1 / (1 + exp(A f + B)), fitted by
// regularized maximum likelihood with Newton steps and backtracking.
// ---------------------------------------------------------------------------

struct platt_fit {
  double A{-1.0};
  double B{0.0};
  int iterations{0};
  bool converged{false};
};

inline double platt_probability(double f, double A, double B) {
  const double t = A * f + B;
  return t >= 0.0 ? std::exp(-t) / (1.0 + std::exp(-t)) : 1.0 / (1.0 + std::exp(t));
}

// Negative log-likelihood against the smoothed targets.
inline double platt_nll(std::span<const double> f, std::span<const double> target, double A, double B) {
  double v = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double t = A * f[i] + B;
    v += t >= 0.0 ? target[i] * t + std::log1p(std::exp(-t)) : (target[i] - 1.0) * t + std::log1p(std::exp(t));
  }
  return v;
}

inline std::vector<double> platt_targets(std::span<const int> labels) {
  double np = 0, nn = 0;
  for (int y : labels) (y > 0 ? np : nn) += 1.0;
  const double hi = (np + 1.0) / (np + 2.0), lo = 1.0 / (nn + 2.0);
  std::vector<double> t(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) t[i] = labels[i] > 0 ? hi : lo;
  return t;
}

inline platt_fit platt_calibrate(std::span<const double> decision, std::span<const int> labels, int max_iter = 100,
                                 double tol = 1e-10) {
  detail::require(decision.size() == labels.size(), "platt_calibrate: size mismatch");
  detail::require_two_classes(labels);
  const auto target = platt_targets(labels);
  double np = 0, nn = 0;
  for (int y : labels) (y > 0 ? np : nn) += 1.0;

  platt_fit fit;
  double A = 0.0, B = std::log((nn + 1.0) / (np + 1.0));
  double fval = platt_nll(decision, target, A, B);
  constexpr double sigma = 1e-12; // keeps the Hessian positive definite
  bool ok = false;
  double gnorm = 0.0;
  for (fit.iterations = 0; fit.iterations < max_iter; ++fit.iterations) {
    double h11 = sigma, h22 = sigma, h21 = 0.0, g1 = 0.0, g2 = 0.0;
    for (std::size_t i = 0; i < decision.size(); ++i) {
      const double p = platt_probability(decision[i], A, B);
      const double q = 1.0 - p;
      const double d2 = p * q;
      h11 += decision[i] * decision[i] * d2;
      h22 += d2;
      h21 += decision[i] * d2;
      const double d1 = target[i] - p;
      g1 += decision[i] * d1;
      g2 += d1;
    }
    gnorm = std::max(std::abs(g1), std::abs(g2));
    if (gnorm < tol) {
      ok = true;
      break;
    }
    const double det = h11 * h22 - h21 * h21;
    const double dA = -(h22 * g1 - h21 * g2) / det;
    const double dB = -(-h21 * g1 + h11 * g2) / det;
    const double gd = g1 * dA + g2 * dB;
    double step = 1.0;
    bool moved = false;
    while (step >= 1e-10) {
      const double nA = A + step * dA, nB = B + step * dB;
      const double nf = platt_nll(decision, target, nA, nB);
      if (nf < fval + 1e-4 * step * gd) {
        A = nA;
        B = nB;
        fval = nf;
        moved = true;
        break;
      }
      step /= 2.0;
    }
    if (!moved) {
      // Line search stalls only at numerical precision; accept if nearly stationary.
      ok = gnorm < 1e-5;
      break;
    }
  }
  if (ok && std::isfinite(A) && std::isfinite(B)) {
    fit.A = A;
    fit.B = B;
    fit.converged = true;
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Landmark classifier
// ---------------------------------------------------------------------------

struct classifier_options {
  std::vector<double> grid = c_grid();
  int folds{5};
  int platt_folds{3};
  bool standardize{true};
  double std_floor{1e-8};
  std::optional<double> fixed_C; // skip tuning
  solver_options solver{1e-6, 5000};
};

// Per-column mean and population standard deviation (floored).
struct standardization {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;
};

inline standardization fit_standardization(const Eigen::Ref<const row_mat>& features, double floor) {
  detail::require(features.rows() >= 1, "standardization: no rows");
  standardization st;
  st.mean = features.colwise().mean().transpose();
  st.scale.resize(features.cols());
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    const double sd = std::sqrt((features.col(j).array() - st.mean[j]).square().mean());
    st.scale[j] = std::max(sd, floor);
  }
  return st;
}

inline row_mat apply_standardization(const Eigen::Ref<const row_mat>& features, const standardization& st) {
  row_mat z(features.rows(), features.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    z.row(i) = (features.row(i) - st.mean.transpose()).cwiseQuotient(st.scale.transpose());
  return z;
}

struct landmark_classifier {
  int landmark_id{0};
  linear_model model;
  double C{1.0};
  double A{-1.0};
  double B{0.0};
  Eigen::VectorXd mean; // empty when features are not standardized
  Eigen::VectorXd scale;
  bool platt_converged{false};
  bool folds_reduced{false};

  Eigen::VectorXd transform(const Eigen::VectorXd& x) const {
    if (mean.size() == 0) return x;
    return (x - mean).cwiseQuotient(scale);
  }
  double decision(const Eigen::VectorXd& x) const { return model.decision(transform(x)); }
  double probability(const Eigen::VectorXd& x) const { return platt_probability(decision(x), A, B); }
};

inline landmark_classifier train_landmark_classifier(const Eigen::Ref<const row_mat>& features,
                                                     std::span<const int> labels, const classifier_options& opt,
                                                     std::uint64_t seed, int landmark_id = 0) {
  detail::require(features.rows() == static_cast<Eigen::Index>(labels.size()), "classifier: row/label mismatch");
  detail::require_two_classes(labels);
  landmark_classifier lc;
  lc.landmark_id = landmark_id;

  row_mat z = features;
  if (opt.standardize) {
    const auto st = fit_standardization(features, opt.std_floor);
    lc.mean = st.mean;
    lc.scale = st.scale;
    z = apply_standardization(features, st);
  }
  const Eigen::MatrixXd gram = linear_kernel(z);

  if (opt.fixed_C) {
    lc.C = *opt.fixed_C;
  } else {
    const auto tuned = tune_C_from_gram(gram, labels, opt.grid, opt.folds, derive_seed(seed, "cv-folds"), opt.solver);
    lc.C = tuned.C;
    lc.folds_reduced = tuned.folds_reduced;
  }

  const auto dual = solve_svc_dual(gram, labels, lc.C, opt.solver);
  lc.model = svc_primal(z, labels, dual);

  // Out-of-fold decision values for calibration.
  const auto n = labels.size();
  std::vector<double> dec(n, 0.0);
  const int pf = std::min(opt.platt_folds, detail::min_class_count(labels));
  bool oof = pf >= 2;
  if (oof) {
    const auto fold = stratified_folds(labels, pf, derive_seed(seed, "platt-folds"));
    for (int f = 0; f < pf; ++f) {
      std::vector<int> tr, te;
      for (std::size_t i = 0; i < n; ++i) (fold[i] == f ? te : tr).push_back(static_cast<int>(i));
      std::vector<int> ytr;
      for (int i : tr) ytr.push_back(labels[i]);
      if (detail::min_class_count(ytr) == 0) {
        oof = false;
        break;
      }
      const auto d = detail::gram_fit_decide(gram, labels, tr, te, lc.C, opt.solver);
      for (std::size_t e = 0; e < te.size(); ++e) dec[te[e]] = d[e];
    }
  }
  if (!oof)
    for (std::size_t i = 0; i < n; ++i) dec[i] = lc.model.decision(z.row(static_cast<Eigen::Index>(i)).transpose());
  const auto platt = platt_calibrate(dec, labels);
  lc.A = platt.A;
  lc.B = platt.B;
  lc.platt_converged = platt.converged;
  return lc;
}

// ---------------------------------------------------------------------------
// Voting
// ---------------------------------------------------------------------------

struct vote {
  int label{label_nc};
  double posterior{0.0}; // probability of `label`
};

struct vote_result {
  std::vector<std::optional<vote>> votes; // nullopt = abstained
  double score_nc{0.0};
  double score_disease{0.0};
  int label{label_nc};
  int abstentions{0};
};

// Sum of posteriors per class; ties go to NC.
inline vote_result weighted_vote(std::span<const std::optional<vote>> votes) {
  vote_result r;
  r.votes.assign(votes.begin(), votes.end());
  for (const auto& v : votes) {
    if (!v) {
      ++r.abstentions;
      continue;
    }
    detail::require(v->posterior >= 0.0 && v->posterior <= 1.0, "weighted_vote: posterior outside [0,1]");
    (v->label > 0 ? r.score_disease : r.score_nc) += v->posterior;
  }
  r.label = r.score_disease > r.score_nc ? label_disease : label_nc;
  return r;
}

inline vote_result weighted_vote(std::span<const vote> votes) {
  std::vector<std::optional<vote>> v(votes.begin(), votes.end());
  return weighted_vote(std::span<const std::optional<vote>>(v));
}

inline vote landmark_vote(const landmark_classifier& c, const Eigen::VectorXd& x) {
  const double p = c.probability(x);
  return p > 0.5 ? vote{label_disease, p} : vote{label_nc, 1.0 - p};
}

// A landmark without a feature vector abstains.
inline vote_result classify_subject(std::span<const landmark_classifier> classifiers,
                                    std::span<const std::optional<Eigen::VectorXd>> features) {
  detail::require(classifiers.size() == features.size(), "classify_subject: one feature slot per classifier");
  std::vector<std::optional<vote>> votes(classifiers.size());
  for (std::size_t i = 0; i < classifiers.size(); ++i)
    if (features[i]) votes[i] = landmark_vote(classifiers[i], *features[i]);
  return weighted_vote(std::span<const std::optional<vote>>(votes));
}

} // namespace patchtraj
