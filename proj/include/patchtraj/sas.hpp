#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "patchtraj/error.hpp"
#include "patchtraj/linear_svm.hpp"
#include "patchtraj/metrics.hpp"
#include "patchtraj/ranking.hpp"
#include "patchtraj/similarity.hpp"

// Supervised atlas selection: learn to predict, from the directional
// intensity disparities between two baseline patches, how badly one subject's
// follow-up patch predicts the other's.

namespace patchtraj {

inline double prediction_error(const vec& truth_t2, const vec& predicted_t2) { return mae(truth_t2, predicted_t2); }

// One row per ordered pair (source -> target), source != target.
struct pair_error_dataset {
  int landmark_id{0};
  std::vector<int> source;
  std::vector<int> target;
  row_mat d_plus;
  row_mat d_minus;
  vec error;

  Eigen::Index rows() const { return error.size(); }
};

inline pair_error_dataset build_pair_error_dataset(std::span<const vec> t1, std::span<const vec> t2,
                                                   quotient_options q = {}, int landmark_id = 0) {
  detail::require(t1.size() == t2.size(), "build_pair_error_dataset: t1/t2 lists are not aligned");
  detail::require(t1.size() >= 3, "build_pair_error_dataset: need at least 3 subjects");
  const auto n = static_cast<Eigen::Index>(t1.size());
  const auto dim = t1.front().size();
  for (Eigen::Index s = 0; s < n; ++s)
    detail::require(t1[s].size() == dim && t2[s].size() == dim, "build_pair_error_dataset: patch length mismatch");

  pair_error_dataset ds;
  ds.landmark_id = landmark_id;
  const auto rows = n * (n - 1);
  ds.d_plus.resize(rows, dim);
  ds.d_minus.resize(rows, dim);
  ds.error.resize(rows);
  ds.source.reserve(rows);
  ds.target.reserve(rows);
  Eigen::Index r = 0;
  for (Eigen::Index s = 0; s < n; ++s)
    for (Eigen::Index t = 0; t < n; ++t) {
      if (s == t) continue;
      const vec alpha = quotient_map(t1[t], t1[s], q);
      const vec predicted = alpha.cwiseProduct(t2[s]);
      ds.error[r] = prediction_error(t2[t], predicted);
      const vec diff = t1[t] - t1[s];
      ds.d_plus.row(r) = diff.cwiseMax(0.0).transpose();
      ds.d_minus.row(r) = (-diff).cwiseMax(0.0).transpose();
      ds.source.push_back(static_cast<int>(s));
      ds.target.push_back(static_cast<int>(t));
      ++r;
    }
  return ds;
}

struct error_regressor_pair {
  int landmark_id{0};
  linear_model f_plus;
  linear_model f_minus;
  double C{1.0};
  double eps{0.001};
  solver_stats plus_stats;
  solver_stats minus_stats;
  bool degenerate{false}; // identical inputs mapped to differing targets

  double predict(const vec& d_plus, const vec& d_minus) const {
    return 0.5 * (f_plus.decision(d_plus) + f_minus.decision(d_minus));
  }
};

namespace detail {

inline bool has_conflicting_duplicates(const row_mat& x, const vec& y) {
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = i + 1; j < x.rows(); ++j)
      if (y[i] != y[j] && x.row(i) == x.row(j)) return true;
  return false;
}

} // namespace detail

// Both regressors fit the same target: the error of predicting the row's
// target subject from its source subject.
inline error_regressor_pair train_error_regressors(const pair_error_dataset& ds, double C = 1.0, double eps = 0.001,
                                                   solver_options opt = {}) {
  detail::require(ds.rows() > 0, "train_error_regressors: empty dataset");
  detail::require(C > 0.0 && eps >= 0.0, "train_error_regressors: need C > 0 and eps >= 0");
  error_regressor_pair pair;
  pair.landmark_id = ds.landmark_id;
  pair.C = C;
  pair.eps = eps;
  auto plus = solve_svr_dual(ds.d_plus, ds.error, C, eps, opt);
  // d-(s,t) is d+(t,s), so the reversed f+ multipliers give f- the same
  // starting weights; the targets differ only by the error asymmetry.
  vec warm;
  if (static_cast<Eigen::Index>(ds.source.size()) == ds.rows() && static_cast<Eigen::Index>(ds.target.size()) == ds.rows()) {
    std::map<std::pair<int, int>, Eigen::Index> row_of;
    for (Eigen::Index r = 0; r < ds.rows(); ++r) row_of[{ds.source[r], ds.target[r]}] = r;
    warm = vec::Zero(ds.rows());
    for (Eigen::Index r = 0; r < ds.rows(); ++r)
      if (auto it = row_of.find({ds.target[r], ds.source[r]}); it != row_of.end()) warm[r] = plus.beta[it->second];
  }
  auto minus = solve_svr_dual(ds.d_minus, ds.error, C, eps, opt, warm);
  pair.f_plus = std::move(plus.model);
  pair.f_minus = std::move(minus.model);
  pair.plus_stats = plus.stats;
  pair.minus_stats = minus.stats;
  // Quadratic scan; only worth it on small sets.
  if (ds.rows() <= 400)
    pair.degenerate = detail::has_conflicting_duplicates(ds.d_plus, ds.error) ||
                      detail::has_conflicting_duplicates(ds.d_minus, ds.error);
  return pair;
}

// Scores each atlas by the mean of f+ and f- on its disparities to the test
// patch (the test patch plays the target role). Lowest predicted error first.
inline atlas_ranking rank_atlases_sas(const error_regressor_pair& pair, std::span<const vec> atlases_t1,
                                      const vec& test_t1, std::span<const int> subject_ids = {}) {
  detail::require(subject_ids.empty() || subject_ids.size() == atlases_t1.size(), "rank_atlases_sas: id list mismatch");
  atlas_ranking r;
  r.strategy = selection_strategy::sas;
  r.entries.reserve(atlases_t1.size());
  for (std::size_t s = 0; s < atlases_t1.size(); ++s) {
    detail::require(atlases_t1[s].size() == test_t1.size(), "rank_atlases_sas: dimension mismatch");
    detail::require(pair.f_plus.w.size() == test_t1.size(), "rank_atlases_sas: regressor dimension mismatch");
    const auto d = directional_disparities(atlases_t1[s], test_t1);
    const int id = subject_ids.empty() ? static_cast<int>(s) : subject_ids[s];
    r.entries.push_back({static_cast<int>(s), id, pair.predict(d.d_plus, d.d_minus)});
  }
  sort_ranking(r);
  return r;
}

// ---------------------------------------------------------------------------
// Persistence: `<stem>.json` header and `<stem>.raw` holding little-endian f64
// [w_plus..., b_plus, w_minus..., b_minus].
// ---------------------------------------------------------------------------

inline void save_error_regressors(const error_regressor_pair& p, const std::filesystem::path& header) {
  nlohmann::ordered_json h;
  h["format_version"] = 1;
  h["landmark_id"] = p.landmark_id;
  h["strategy"] = "sas";
  h["dims"] = p.f_plus.w.size();
  h["hyperparams"] = {{"C_svr", p.C}, {"eps_svr", p.eps}};
  h["dtype"] = "f64";
  std::ofstream hs(header);
  if (!hs) throw data_error("cannot write " + header.string());
  hs << h.dump(2) << '\n';

  auto raw = header;
  raw.replace_extension(".raw");
  std::ofstream rs(raw, std::ios::binary);
  if (!rs) throw data_error("cannot write " + raw.string());
  auto put = [&](double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    rs.write(reinterpret_cast<const char*>(&bits), 8);
  };
  for (double v : p.f_plus.w) put(v);
  put(p.f_plus.bias);
  for (double v : p.f_minus.w) put(v);
  put(p.f_minus.bias);
  if (!rs) throw data_error("write failed: " + raw.string());
}

inline error_regressor_pair load_error_regressors(const std::filesystem::path& header) {
  std::ifstream hs(header);
  if (!hs) throw data_error("cannot open " + header.string());
  error_regressor_pair p;
  Eigen::Index dims = 0;
  try {
    const auto h = nlohmann::json::parse(hs);
    if (h.at("strategy").get<std::string>() != "sas") throw data_error("not a sas model: " + header.string());
    p.landmark_id = h.at("landmark_id").get<int>();
    dims = h.at("dims").get<Eigen::Index>();
    p.C = h.at("hyperparams").at("C_svr").get<double>();
    p.eps = h.at("hyperparams").at("eps_svr").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad model header " + header.string() + ": " + e.what());
  }
  auto raw = header;
  raw.replace_extension(".raw");
  std::ifstream rs(raw, std::ios::binary);
  if (!rs) throw data_error("cannot open " + raw.string());
  auto get = [&] {
    std::uint64_t bits = 0;
    rs.read(reinterpret_cast<char*>(&bits), 8);
    if (rs.gcount() != 8) throw data_error("truncated model data: " + raw.string());
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    return std::bit_cast<double>(bits);
  };
  p.f_plus.w.resize(dims);
  for (auto& v : p.f_plus.w) v = get();
  p.f_plus.bias = get();
  p.f_minus.w.resize(dims);
  for (auto& v : p.f_minus.w) v = get();
  p.f_minus.bias = get();
  return p;
}

} // namespace patchtraj
