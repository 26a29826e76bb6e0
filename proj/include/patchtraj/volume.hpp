#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchtraj/error.hpp"

namespace patchtraj {

enum class volume_kind { intensity, label, edge, density };

inline const char* to_string(volume_kind k) {
  switch (k) {
  case volume_kind::intensity: return "intensity";
  case volume_kind::label: return "label";
  case volume_kind::edge: return "edge";
  case volume_kind::density: return "density";
  }
  return "intensity";
}

inline volume_kind volume_kind_from_string(const std::string& s) {
  if (s == "intensity") return volume_kind::intensity;
  if (s == "label") return volume_kind::label;
  if (s == "edge") return volume_kind::edge;
  if (s == "density") return volume_kind::density;
  throw invalid_input("unknown volume kind: " + s);
}

struct dims3 {
  int nx{0}, ny{0}, nz{0};

  std::size_t voxels() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  bool operator==(const dims3&) const = default;
};

struct voxel {
  int x{0}, y{0}, z{0};
  bool operator==(const voxel&) const = default;
};

// Dense scalar grid. Storage is row-major with z outermost and x innermost.
class volume {
public:
  volume() = default;

  volume(dims3 d, volume_kind kind, double fill = 0.0, std::array<double, 3> spacing = {1.0, 1.0, 1.0})
      : dims_(d), spacing_(spacing), kind_(kind), data_(d.voxels(), fill) {
    detail::require(d.nx > 0 && d.ny > 0 && d.nz > 0, "volume dims must be positive");
  }

  volume(dims3 d, volume_kind kind, std::vector<double> data, std::array<double, 3> spacing = {1.0, 1.0, 1.0})
      : dims_(d), spacing_(spacing), kind_(kind), data_(std::move(data)) {
    detail::require(d.nx > 0 && d.ny > 0 && d.nz > 0, "volume dims must be positive");
    detail::require(data_.size() == d.voxels(), "volume data length does not match dims");
  }

  const dims3& dims() const { return dims_; }
  const std::array<double, 3>& spacing() const { return spacing_; }
  volume_kind kind() const { return kind_; }
  void set_kind(volume_kind k) { kind_ = k; }

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims_.ny + static_cast<std::size_t>(y)) * dims_.nx +
           static_cast<std::size_t>(x);
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims_.nx && y < dims_.ny && z < dims_.nz;
  }

  double operator()(int x, int y, int z) const { return data_[index(x, y, z)]; }
  double& operator()(int x, int y, int z) { return data_[index(x, y, z)]; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  bool operator==(const volume&) const = default;

private:
  dims3 dims_{};
  std::array<double, 3> spacing_{1.0, 1.0, 1.0};
  volume_kind kind_{volume_kind::intensity};
  std::vector<double> data_;
};

// Checks that every voxel of a label volume is one of `allowed`.
inline bool labels_within(const volume& v, std::span<const int> allowed) {
  for (double d : v.data()) {
    bool ok = false;
    for (int a : allowed) ok = ok || d == static_cast<double>(a);
    if (!ok) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// On-disk container: `<stem>.json` header plus `<stem>.raw` little-endian f32.
// ---------------------------------------------------------------------------

inline std::filesystem::path raw_path_for(const std::filesystem::path& header) {
  auto p = header;
  p.replace_extension(".raw");
  return p;
}

inline void write_volume(const volume& v, const std::filesystem::path& header) {
  nlohmann::ordered_json h;
  h["dims"] = {v.dims().nx, v.dims().ny, v.dims().nz};
  h["spacing"] = {v.spacing()[0], v.spacing()[1], v.spacing()[2]};
  h["dtype"] = "f32";
  h["order"] = "row-major-zyx";
  h["kind"] = to_string(v.kind());

  std::ofstream hs(header, std::ios::binary);
  if (!hs) throw data_error("cannot open for writing: " + header.string());
  hs << h.dump(2) << '\n';
  if (!hs) throw data_error("write failed: " + header.string());

  const auto raw = raw_path_for(header);
  std::ofstream rs(raw, std::ios::binary);
  if (!rs) throw data_error("cannot open for writing: " + raw.string());
  std::vector<char> buf(v.data().size() * 4);
  for (std::size_t i = 0; i < v.data().size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v.data()[i]));
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(buf.data() + 4 * i, &bits, 4);
  }
  rs.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!rs) throw data_error("write failed: " + raw.string());
}

inline volume read_volume(const std::filesystem::path& header) {
  std::ifstream hs(header);
  if (!hs) throw data_error("cannot open volume header: " + header.string());
  nlohmann::json h;
  try {
    hs >> h;
  } catch (const nlohmann::json::exception& e) {
    throw data_error("malformed volume header " + header.string() + ": " + e.what());
  }
  try {
    if (h.at("dtype").get<std::string>() != "f32")
      throw data_error("unsupported dtype in " + header.string());
    if (h.at("order").get<std::string>() != "row-major-zyx")
      throw data_error("unsupported order in " + header.string());
    const auto d = h.at("dims").get<std::array<int, 3>>();
    const auto sp = h.at("spacing").get<std::array<double, 3>>();
    const auto kind = volume_kind_from_string(h.at("kind").get<std::string>());
    const dims3 dd{d[0], d[1], d[2]};
    if (dd.nx <= 0 || dd.ny <= 0 || dd.nz <= 0) throw data_error("non-positive dims in " + header.string());

    const auto raw = raw_path_for(header);
    std::ifstream rs(raw, std::ios::binary);
    if (!rs) throw data_error("cannot open volume data: " + raw.string());
    std::vector<char> buf(dd.voxels() * 4);
    rs.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (rs.gcount() != static_cast<std::streamsize>(buf.size()))
      throw data_error("truncated volume data: " + raw.string());

    std::vector<double> data(dd.voxels());
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, buf.data() + 4 * i, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      const float f = std::bit_cast<float>(bits);
      if (!std::isfinite(f)) throw data_error("non-finite voxel in " + raw.string());
      data[i] = f;
    }
    return volume(dd, kind, std::move(data), sp);
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad volume header " + header.string() + ": " + e.what());
  } catch (const invalid_input& e) {
    throw data_error("bad volume header " + header.string() + ": " + e.what());
  }
}

} // namespace patchtraj
