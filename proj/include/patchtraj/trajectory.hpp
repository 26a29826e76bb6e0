#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "patchtraj/error.hpp"
#include "patchtraj/metrics.hpp"
#include "patchtraj/ranking.hpp"
#include "patchtraj/similarity.hpp"

namespace patchtraj {

enum class transfer_mode { plain_average, quotient_mapped };
enum class weighting_mode { uniform, similarity };

struct prediction_config {
  selection_strategy strategy{selection_strategy::sas};
  int K{1};
  transfer_mode transfer{transfer_mode::quotient_mapped};
  weighting_mode weighting{weighting_mode::uniform};
  quotient_options quotient{};
  double intensity_max{1.0};
};

inline prediction_config default_prediction_config(selection_strategy s, int K) {
  prediction_config cfg;
  cfg.strategy = s;
  cfg.K = K;
  if (s == selection_strategy::mkml) {
    cfg.transfer = transfer_mode::plain_average;
    cfg.weighting = weighting_mode::similarity;
  }
  return cfg;
}

// Follow-up prediction from the top-K ranked atlases. Each atlas contributes
// its follow-up patch, optionally mapped through the baseline quotient
// test/atlas. Contributions are averaged (uniformly or by ranking score) and
// clamped to [0, intensity_max].
inline vec predict_followup(const atlas_ranking& ranking, std::span<const vec> atlases_t1,
                            std::span<const vec> atlases_t2, const vec& test_t1, const prediction_config& cfg) {
  detail::require(cfg.K >= 1, "predict_followup: K must be >= 1");
  detail::require(ranking.size() > 0, "predict_followup: empty ranking");
  detail::require(static_cast<std::size_t>(cfg.K) <= ranking.size(), "predict_followup: K exceeds available atlases");
  detail::require(atlases_t1.size() == atlases_t2.size(), "predict_followup: atlas lists not aligned");

  std::vector<double> weights(cfg.K, 1.0);
  if (cfg.weighting == weighting_mode::similarity) {
    double total = 0.0;
    for (int k = 0; k < cfg.K; ++k) total += (weights[k] = std::max(ranking[k].score, 0.0));
    if (!(total > 0.0)) std::fill(weights.begin(), weights.end(), 1.0);
  }
  double total = 0.0;
  for (double w : weights) total += w;

  vec out = vec::Zero(test_t1.size());
  for (int k = 0; k < cfg.K; ++k) {
    const auto idx = static_cast<std::size_t>(ranking[k].index);
    detail::require(idx < atlases_t2.size(), "predict_followup: ranking index out of range");
    const vec& t2 = atlases_t2[idx];
    detail::require(t2.size() == test_t1.size(), "predict_followup: dimension mismatch");
    if (cfg.transfer == transfer_mode::quotient_mapped)
      out += weights[k] * quotient_map(test_t1, atlases_t1[idx], cfg.quotient).cwiseProduct(t2);
    else
      out += weights[k] * t2;
  }
  out /= total;
  return out.cwiseMax(0.0).cwiseMin(cfg.intensity_max);
}

} // namespace patchtraj
