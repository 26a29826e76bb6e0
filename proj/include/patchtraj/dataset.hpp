#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchtraj/error.hpp"
#include "patchtraj/volume.hpp"

// Longitudinal cohort in memory and its manifest on disk. The manifest lists
// one entry per subject with paths relative to the manifest's directory.

namespace patchtraj {

struct subject_record {
  int id{0};
  int label{-1}; // -1 normal control, +1 disease
  volume t1;
  volume t2;
  volume labels; // ROI label map at baseline
};

struct cohort_data {
  std::vector<subject_record> subjects;
  nlohmann::ordered_json spec; // generator parameters, echoed for provenance

  std::size_t size() const { return subjects.size(); }
};

inline constexpr int manifest_format_version = 1;

inline const char* class_name(int label) { return label > 0 ? "disease" : "nc"; }

inline int class_from_name(const std::string& s) {
  if (s == "disease") return 1;
  if (s == "nc") return -1;
  throw data_error("unknown class name: " + s);
}

// Writes sub-<id>_{t1,t2,labels}.{json,raw} and manifest.json into `dir`.
inline std::filesystem::path write_cohort(const cohort_data& c, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw data_error("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::ordered_json m;
  m["format_version"] = manifest_format_version;
  m["spec"] = c.spec;
  m["subjects"] = nlohmann::ordered_json::array();
  for (const auto& s : c.subjects) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "sub-%03d", s.id);
    const std::string base(stem);
    write_volume(s.t1, dir / (base + "_t1.json"));
    write_volume(s.t2, dir / (base + "_t2.json"));
    write_volume(s.labels, dir / (base + "_labels.json"));
    m["subjects"].push_back({{"id", s.id},
                             {"class", class_name(s.label)},
                             {"t1_path", base + "_t1.json"},
                             {"t2_path", base + "_t2.json"},
                             {"label_path", base + "_labels.json"}});
  }
  const auto path = dir / "manifest.json";
  std::ofstream os(path, std::ios::binary);
  if (!os) throw data_error("cannot write " + path.string());
  os << m.dump(2) << '\n';
  if (!os) throw data_error("write failed: " + path.string());
  return path;
}

inline cohort_data read_cohort(const std::filesystem::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw data_error("cannot open manifest " + manifest.string());
  nlohmann::ordered_json m;
  try {
    is >> m;
  } catch (const nlohmann::json::exception& e) {
    throw data_error("malformed manifest " + manifest.string() + ": " + e.what());
  }
  const auto dir = manifest.parent_path();
  cohort_data c;
  try {
    if (m.at("format_version").get<int>() != manifest_format_version)
      throw data_error("unsupported manifest version in " + manifest.string());
    if (m.contains("spec")) c.spec = m["spec"];
    for (const auto& e : m.at("subjects")) {
      subject_record s;
      s.id = e.at("id").get<int>();
      s.label = class_from_name(e.at("class").get<std::string>());
      s.t1 = read_volume(dir / e.at("t1_path").get<std::string>());
      s.t2 = read_volume(dir / e.at("t2_path").get<std::string>());
      s.labels = read_volume(dir / e.at("label_path").get<std::string>());
      if (!(s.t1.dims() == s.t2.dims()) || !(s.t1.dims() == s.labels.dims()))
        throw data_error("volume dims differ for subject " + std::to_string(s.id));
      c.subjects.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad manifest " + manifest.string() + ": " + e.what());
  }
  for (std::size_t i = 0; i < c.subjects.size(); ++i)
    for (std::size_t j = i + 1; j < c.subjects.size(); ++j)
      if (c.subjects[i].id == c.subjects[j].id)
        throw data_error("duplicate subject id " + std::to_string(c.subjects[i].id));
  return c;
}

} // namespace patchtraj
