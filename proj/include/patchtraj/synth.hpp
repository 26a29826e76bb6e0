#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>

#include <nlohmann/json.hpp>

#include "patchtraj/dataset.hpp"
#include "patchtraj/error.hpp"
#include "patchtraj/seed.hpp"
#include "patchtraj/volume.hpp"

// Synthetic longitudinal cohort: one ellipsoidal ROI per subject whose
// semi-axes shrink between baseline and follow-up at a class-dependent rate.

namespace patchtraj {

struct ellipsoid {
  std::array<double, 3> center{15.5, 15.5, 15.5}; // x, y, z in voxels
  std::array<double, 3> semi_axes{9.0, 7.0, 6.0};
};

struct rate_distribution {
  double mean{0.0};
  double std{0.0};
};

struct cohort_spec {
  int n_per_class{30};
  dims3 dims{32, 32, 32};
  ellipsoid roi{};
  rate_distribution nc{0.01, 0.005};
  rate_distribution disease{0.10, 0.02};
  double background{0.1};
  double roi_intensity{0.8};
  double noise_std{0.02};
  double boundary_width{1.0};
  // Per-subject anatomical variation: each semi-axis is scaled by
  // 1 + anatomy_std * N(0, 1) before any change is applied.
  double anatomy_std{0.05};
  // Fraction of the subject's own rate already expressed at baseline: the
  // baseline semi-axes are scaled by 1 - baseline_lead * rate.
  double baseline_lead{0.5};
  std::uint64_t seed{1};
};

inline void to_json(nlohmann::ordered_json& j, const cohort_spec& s) {
  j = nlohmann::ordered_json{{"n_per_class", s.n_per_class},
                             {"dims", {s.dims.nx, s.dims.ny, s.dims.nz}},
                             {"roi", {{"center", s.roi.center}, {"semi_axes", s.roi.semi_axes}}},
                             {"rate_nc", {{"mean", s.nc.mean}, {"std", s.nc.std}}},
                             {"rate_disease", {{"mean", s.disease.mean}, {"std", s.disease.std}}},
                             {"background", s.background},
                             {"roi_intensity", s.roi_intensity},
                             {"noise_std", s.noise_std},
                             {"boundary_width", s.boundary_width},
                             {"anatomy_std", s.anatomy_std},
                             {"baseline_lead", s.baseline_lead},
                             {"seed", s.seed}};
}

// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, cohort_spec& s) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("n_per_class", s.n_per_class);
  if (j.contains("dims")) {
    const auto d = j.at("dims").get<std::array<int, 3>>();
    s.dims = {d[0], d[1], d[2]};
  }
  if (j.contains("roi")) {
    const auto& r = j.at("roi");
    if (r.contains("center")) r.at("center").get_to(s.roi.center);
    if (r.contains("semi_axes")) r.at("semi_axes").get_to(s.roi.semi_axes);
  }
  for (auto [key, dist] : {std::pair{"rate_nc", &s.nc}, std::pair{"rate_disease", &s.disease}})
    if (j.contains(key)) {
      const auto& r = j.at(key);
      if (r.contains("mean")) r.at("mean").get_to(dist->mean);
      if (r.contains("std")) r.at("std").get_to(dist->std);
    }
  get("background", s.background);
  get("roi_intensity", s.roi_intensity);
  get("noise_std", s.noise_std);
  get("boundary_width", s.boundary_width);
  get("anatomy_std", s.anatomy_std);
  get("baseline_lead", s.baseline_lead);
  get("seed", s.seed);
}

inline void validate(const cohort_spec& s) {
  detail::require(s.n_per_class >= 1, "cohort: n_per_class must be >= 1");
  detail::require(s.dims.nx >= 3 && s.dims.ny >= 3 && s.dims.nz >= 3, "cohort: volume too small");
  detail::require(s.noise_std >= 0.0, "cohort: noise_std must be >= 0");
  detail::require(s.boundary_width > 0.0, "cohort: boundary_width must be > 0");
  detail::require(s.anatomy_std >= 0.0 && s.baseline_lead >= 0.0, "cohort: negative variation parameter");
  detail::require(s.nc.std >= 0.0 && s.disease.std >= 0.0, "cohort: negative rate std");
  const std::array<int, 3> extent{s.dims.nx, s.dims.ny, s.dims.nz};
  for (int k = 0; k < 3; ++k) {
    detail::require(s.roi.semi_axes[k] >= 2.0, "cohort: semi-axes must be >= 2 voxels");
    detail::require(s.roi.center[k] >= 0.0 && s.roi.center[k] <= extent[k] - 1,
                    "cohort: ROI center outside the volume");
  }
  for (const auto& r : {s.nc, s.disease})
    for (int k = 0; k < 3; ++k)
      detail::require(s.roi.semi_axes[k] * (1.0 - r.mean) >= 2.0, "cohort: mean rate collapses the ROI below 2 voxels");
}

// Noise-free intensity of an ellipsoid with a sigmoid boundary. The signed
// distance to the surface uses the first-order estimate (rho - 1) / |grad rho|.
inline volume render_ellipsoid(dims3 d, const std::array<double, 3>& center, const std::array<double, 3>& semi,
                               double background, double roi, double width) {
  volume v(d, volume_kind::intensity, background);
  const double inner = *std::min_element(semi.begin(), semi.end());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const std::array<double, 3> p{x - center[0], y - center[1], z - center[2]};
        double rho2 = 0.0, g2 = 0.0;
        for (int k = 0; k < 3; ++k) {
          const double u = p[k] / semi[k];
          rho2 += u * u;
          g2 += (u / semi[k]) * (u / semi[k]);
        }
        const double rho = std::sqrt(rho2);
        const double dist = rho > 1e-12 ? (rho - 1.0) * rho / std::sqrt(g2) : -inner;
        v(x, y, z) = background + (roi - background) / (1.0 + std::exp(dist / width));
      }
  return v;
}

inline volume ellipsoid_mask(dims3 d, const std::array<double, 3>& center, const std::array<double, 3>& semi) {
  volume v(d, volume_kind::label, 0.0);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        double rho2 = 0.0;
        const std::array<double, 3> p{x - center[0], y - center[1], z - center[2]};
        for (int k = 0; k < 3; ++k) rho2 += (p[k] / semi[k]) * (p[k] / semi[k]);
        if (rho2 <= 1.0) v(x, y, z) = 1.0;
      }
  return v;
}

struct synthetic_subject_params {
  double rate{0.0};
  std::array<double, 3> t1_semi{};
  std::array<double, 3> t2_semi{};
};

struct synthetic_cohort {
  cohort_data data;
  std::vector<synthetic_subject_params> params; // aligned with data.subjects
};

// Subjects 0 .. n-1 are controls, n .. 2n-1 disease. Every subject draws from
// its own stream, so the output does not depend on generation order.
inline synthetic_cohort generate_cohort(const cohort_spec& spec) {
  validate(spec);
  synthetic_cohort out;
  to_json(out.data.spec, spec);
  const int total = 2 * spec.n_per_class;
  for (int id = 0; id < total; ++id) {
    const bool disease = id >= spec.n_per_class;
    const auto& dist = disease ? spec.disease : spec.nc;
    std::mt19937_64 rng(derive_seed(spec.seed, "synth", {id}));
    std::normal_distribution<double> unit(0.0, 1.0);

    synthetic_subject_params p;
    std::array<double, 3> anatomy{};
    for (int k = 0; k < 3; ++k) anatomy[k] = spec.roi.semi_axes[k] * (1.0 + spec.anatomy_std * unit(rng));
    p.rate = dist.mean + dist.std * unit(rng);
    for (int k = 0; k < 3; ++k) {
      p.t1_semi[k] = anatomy[k] * (1.0 - spec.baseline_lead * p.rate);
      p.t2_semi[k] = p.t1_semi[k] * (1.0 - p.rate);
      if (p.t2_semi[k] < 2.0 || p.t1_semi[k] < 2.0)
        throw invalid_input("cohort: subject " + std::to_string(id) + " has a semi-axis below 2 voxels");
    }

    subject_record s;
    s.id = id;
    s.label = disease ? 1 : -1;
    s.t1 = render_ellipsoid(spec.dims, spec.roi.center, p.t1_semi, spec.background, spec.roi_intensity,
                            spec.boundary_width);
    s.t2 = render_ellipsoid(spec.dims, spec.roi.center, p.t2_semi, spec.background, spec.roi_intensity,
                            spec.boundary_width);
    // Rounded to the on-disk precision so file-based and in-memory runs agree.
    for (volume* v : {&s.t1, &s.t2})
      for (double& x : v->data()) {
        if (spec.noise_std > 0.0) x += spec.noise_std * unit(rng);
        x = static_cast<double>(static_cast<float>(x));
      }
    s.labels = ellipsoid_mask(spec.dims, spec.roi.center, p.t1_semi);
    out.data.subjects.push_back(std::move(s));
    out.params.push_back(p);
  }
  return out;
}

} // namespace patchtraj
