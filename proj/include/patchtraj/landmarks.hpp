#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "patchtraj/error.hpp"
#include "patchtraj/volume.hpp"

namespace patchtraj {

enum class sobel_mode { volumetric, slicewise };

enum class timepoint { t1, t2 };

struct landmark {
  int index{0};
  voxel coord{};
  int roi{0};
  double density{0.0};

  bool operator==(const landmark&) const = default;
};

// Fixed-size cubic intensity block, flattened z-outer / x-inner.
struct patch {
  int landmark_id{0};
  int subject_id{0};
  timepoint time{timepoint::t1};
  Eigen::VectorXd values;
};

namespace detail {

inline bool in_roi(double v, std::optional<int> roi_label) {
  return roi_label ? v == static_cast<double>(*roi_label) : v != 0.0;
}

} // namespace detail

// Binary edge map of a label volume. The target ROI is binarized first
// (`roi_label` selects one label id; nullopt means any nonzero label), then the
// Sobel gradient magnitude is taken and thresholded at > 0. Voxels whose
// stencil leaves the grid are 0.
inline volume sobel_edge_map(const volume& label, std::optional<int> roi_label = std::nullopt,
                             sobel_mode mode = sobel_mode::volumetric) {
  detail::require(label.kind() == volume_kind::label, "sobel_edge_map expects a label volume");
  const auto d = label.dims();
  detail::require(d.nx >= 3 && d.ny >= 3 && d.nz >= 3, "sobel_edge_map needs >= 3 voxels per axis");

  std::vector<double> mask(d.voxels());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = detail::in_roi(label.data()[i], roi_label) ? 1.0 : 0.0;
  auto m = [&](int x, int y, int z) { return mask[label.index(x, y, z)]; };

  static constexpr double smooth[3] = {1.0, 2.0, 1.0};
  static constexpr double deriv[3] = {-1.0, 0.0, 1.0};

  volume out(d, volume_kind::edge, 0.0, label.spacing());
  if (mode == sobel_mode::volumetric) {
    for (int z = 1; z < d.nz - 1; ++z)
      for (int y = 1; y < d.ny - 1; ++y)
        for (int x = 1; x < d.nx - 1; ++x) {
          double gx = 0, gy = 0, gz = 0;
          for (int k = 0; k < 3; ++k)
            for (int j = 0; j < 3; ++j)
              for (int i = 0; i < 3; ++i) {
                const double v = m(x + i - 1, y + j - 1, z + k - 1);
                if (v == 0.0) continue;
                gx += deriv[i] * smooth[j] * smooth[k] * v;
                gy += smooth[i] * deriv[j] * smooth[k] * v;
                gz += smooth[i] * smooth[j] * deriv[k] * v;
              }
          out(x, y, z) = std::sqrt(gx * gx + gy * gy + gz * gz) > 0.0 ? 1.0 : 0.0;
        }
  } else {
    for (int z = 0; z < d.nz; ++z)
      for (int y = 1; y < d.ny - 1; ++y)
        for (int x = 1; x < d.nx - 1; ++x) {
          double gx = 0, gy = 0;
          for (int j = 0; j < 3; ++j)
            for (int i = 0; i < 3; ++i) {
              const double v = m(x + i - 1, y + j - 1, z);
              gx += deriv[i] * smooth[j] * v;
              gy += smooth[i] * deriv[j] * v;
            }
          out(x, y, z) = std::sqrt(gx * gx + gy * gy) > 0.0 ? 1.0 : 0.0;
        }
  }
  return out;
}

// Voxel-wise mean of binary edge maps.
inline volume edge_density_map(std::span<const volume> edges) {
  detail::require(!edges.empty(), "edge_density_map needs at least one edge volume");
  const auto d = edges.front().dims();
  std::vector<double> acc(d.voxels(), 0.0);
  for (const auto& e : edges) {
    detail::require(e.dims() == d, "edge_density_map: mismatched dims");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += e.data()[i];
  }
  const double n = static_cast<double>(edges.size());
  for (auto& a : acc) a /= n;
  return volume(d, volume_kind::density, std::move(acc), edges.front().spacing());
}

// Mean minus population standard deviation of the nonzero density voxels.
// When those are all equal (identical label maps) the threshold is nudged just
// below the common value; otherwise the strict comparison would select nothing.
inline double auto_threshold(const volume& density) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (double v : density.data())
    if (v != 0.0) {
      sum += v;
      ++n;
    }
  if (n == 0) return 0.0;
  const double mean = sum / static_cast<double>(n);
  for (double v : density.data())
    if (v != 0.0) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(n));
  if (sd == 0.0) return std::nextafter(mean, 0.0);
  return mean - sd;
}

// All voxels with density strictly above `threshold` whose cube of half-width
// `margin` fits in the grid, in (z, y, x) lexicographic order. A missing
// threshold is replaced by auto_threshold().
inline std::vector<landmark> select_landmarks(const volume& density, std::optional<double> threshold, int margin,
                                              int roi = 0) {
  detail::require(margin >= 0, "select_landmarks: negative margin");
  const double thr = threshold ? *threshold : auto_threshold(density);
  if (threshold) detail::require(thr >= 0.0 && thr <= 1.0, "select_landmarks: threshold must be in [0,1]");
  const auto d = density.dims();
  std::vector<landmark> out;
  for (int z = margin; z < d.nz - margin; ++z)
    for (int y = margin; y < d.ny - margin; ++y)
      for (int x = margin; x < d.nx - margin; ++x) {
        const double v = density(x, y, z);
        if (v > thr) out.push_back({static_cast<int>(out.size()), {x, y, z}, roi, v});
      }
  return out;
}

inline Eigen::VectorXd extract_patch_values(const volume& vol, voxel c, int patch_side) {
  detail::require(patch_side >= 1 && patch_side % 2 == 1, "patch_side must be odd and positive");
  const int h = patch_side / 2;
  detail::require(vol.contains(c.x - h, c.y - h, c.z - h) && vol.contains(c.x + h, c.y + h, c.z + h),
                  "patch leaves volume bounds");
  Eigen::VectorXd v(patch_side * patch_side * patch_side);
  Eigen::Index k = 0;
  for (int z = c.z - h; z <= c.z + h; ++z)
    for (int y = c.y - h; y <= c.y + h; ++y)
      for (int x = c.x - h; x <= c.x + h; ++x) v[k++] = vol(x, y, z);
  return v;
}

inline patch extract_patch(const volume& vol, const landmark& lm, int patch_side, int subject_id = 0,
                           timepoint t = timepoint::t1) {
  return {lm.index, subject_id, t, extract_patch_values(vol, lm.coord, patch_side)};
}

} // namespace patchtraj
