// patchtraj command line: synthetic cohorts, landmarks, single-subject
// prediction, LOOCV evaluation and report re-emission.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "patchtraj/dataset.hpp"
#include "patchtraj/error.hpp"
#include "patchtraj/landmarks.hpp"
#include "patchtraj/pipeline.hpp"
#include "patchtraj/synth.hpp"

namespace fs = std::filesystem;
using namespace patchtraj;

namespace {

enum exit_code { ok = 0, failure = 1, bad_config = 2, bad_data = 3, numerical = 4 };

struct common_flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> out;
  std::optional<std::string> strategy;
};

void add_run_flags(CLI::App* cmd, common_flags& f, bool with_strategy) {
  cmd->add_option("--config", f.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "root seed override");
  cmd->add_option("--threads", f.threads, "worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  cmd->add_option("--out", f.out, "output directory override");
  if (with_strategy)
    cmd->add_option("--strategy", f.strategy, "arms to run")->check(CLI::IsMember({"sas", "mkml", "baseline", "all"}));
}

// Applies flag overrides. Relative paths inside the config are taken from the
// config's directory, --out from the working directory.
pipeline_config resolve_config(const common_flags& f) {
  auto cfg = load_config(f.config);
  const fs::path base = fs::path(f.config).parent_path();
  if (fs::path(cfg.output_dir).is_relative()) cfg.output_dir = (base / cfg.output_dir).lexically_normal().string();
  if (f.seed) cfg.seed = *f.seed;
  if (f.threads) cfg.threads = *f.threads;
  if (f.out) cfg.output_dir = *f.out;
  if (f.strategy)
    for (auto& roi : cfg.rois) roi.arms = arms_from_string(*f.strategy);
  if (cfg.manifest.empty()) throw config_error("config: no manifest given");
  fs::path m(cfg.manifest);
  if (m.is_relative()) m = base / m;
  if (!fs::exists(m)) throw config_error("config: manifest not found: " + m.string());
  cfg.manifest = m.lexically_normal().string();
  validate(cfg);
  return cfg;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw data_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw data_error("write failed: " + path.string());
}

int cmd_synth(const std::string& spec_path, const std::string& out, std::optional<std::uint64_t> seed) {
  std::ifstream is(spec_path);
  if (!is) throw config_error("cannot open cohort spec " + spec_path);
  cohort_spec spec;
  try {
    from_json(nlohmann::json::parse(is), spec);
  } catch (const nlohmann::json::exception& e) {
    throw config_error("bad cohort spec " + spec_path + ": " + e.what());
  }
  if (seed) spec.seed = *seed;
  synthetic_cohort c;
  try {
    c = generate_cohort(spec);
  } catch (const invalid_input& e) {
    throw config_error(e.what());
  }
  const auto manifest = write_cohort(c.data, out);
  std::printf("wrote %zu subjects to %s\n", c.data.size(), manifest.string().c_str());
  return ok;
}

int cmd_landmarks(const common_flags& f) {
  const auto cfg = resolve_config(f);
  const auto data = read_cohort(cfg.manifest);
  nlohmann::ordered_json out;
  out["manifest"] = cfg.manifest;
  out["rois"] = nlohmann::ordered_json::array();
  for (const auto& roi : cfg.rois) {
    std::vector<volume> edges;
    for (const auto& s : data.subjects) edges.push_back(sobel_edge_map(s.labels, roi.label, roi.sobel));
    const auto density = edge_density_map(edges);
    const double thr = roi.edge_threshold ? *roi.edge_threshold : auto_threshold(density);
    auto all = select_landmarks(density, thr, roi.patch_side / 2);
    const auto candidates = all.size();
    const auto kept = detail::cap_landmarks(std::move(all), roi.max_landmarks);
    nlohmann::ordered_json r{{"name", roi.name}, {"threshold", thr}, {"candidates", candidates}};
    r["landmarks"] = nlohmann::ordered_json::array();
    for (const auto& lm : kept)
      r["landmarks"].push_back({{"index", lm.index}, {"coord", {lm.coord.x, lm.coord.y, lm.coord.z}}, {"density", lm.density}});
    std::printf("%s: %zu landmarks (%zu candidates, threshold %.6g)\n", roi.name.c_str(), kept.size(), candidates, thr);
    out["rois"].push_back(std::move(r));
  }
  write_json(fs::path(cfg.output_dir) / "landmarks.json", out);
  return ok;
}

int cmd_predict(const common_flags& f, int subject_id) {
  const auto cfg = resolve_config(f);
  const auto data = read_cohort(cfg.manifest);
  std::optional<std::size_t> index;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.subjects[i].id == subject_id) index = i;
  if (!index) throw data_error("subject " + std::to_string(subject_id) + " is not in the manifest");

  loocv_engine engine(cfg, data);
  engine.compute_edge_maps(resolve_threads(cfg.threads));
  const auto fold = engine.run_fold(*index);

  nlohmann::ordered_json out{{"subject_id", subject_id}, {"truth", data.subjects[*index].label}};
  out["rois"] = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < cfg.rois.size(); ++r) {
    const auto& roi = cfg.rois[r];
    nlohmann::ordered_json jr{{"name", roi.name}, {"landmarks", fold.rois[r].landmarks.size()}};
    jr["strategies"] = nlohmann::ordered_json::array();
    for (arm a : roi.arms) {
      const auto& p = fold.rois[r].arms[static_cast<int>(a)];
      std::printf("%s %-8s label %+d", roi.name.c_str(), to_string(a), p.predicted);
      if (p.mae) std::printf("  mae %.6f  pearson %.6f", *p.mae, p.pearson.value_or(0.0));
      std::printf("\n");
      nlohmann::ordered_json js{{"strategy", to_string(a)}, {"predicted", p.predicted}};
      js["mae"] = detail::opt_json(p.mae);
      js["pearson"] = detail::opt_json(p.pearson);
      jr["strategies"].push_back(std::move(js));
    }
    for (const auto& s : fold.rois[r].skipped) std::fprintf(stderr, "skipped landmark %d: %s\n", s.index, s.reason.c_str());
    out["rois"].push_back(std::move(jr));
  }
  write_json(fs::path(cfg.output_dir) / "prediction.json", out);
  return ok;
}

int cmd_loocv(const common_flags& f) {
  const auto cfg = resolve_config(f);
  const auto data = read_cohort(cfg.manifest);
  loocv_timings timings;
  const auto rep = run_loocv(cfg, data, &timings);
  for (const auto& roi : rep.rois) {
    for (const auto& fold : roi.folds)
      for (const auto& s : fold.skipped)
        std::fprintf(stderr, "fold %d: skipped landmark %d: %s\n", fold.subject_id, s.index, s.reason.c_str());
    for (const auto& s : roi.strategies) {
      std::printf("%s %-8s acc %.4f sens %.4f spec %.4f", roi.name.c_str(), to_string(s.strategy), s.accuracy,
                  s.sensitivity, s.specificity);
      if (s.mae) std::printf("  mae %.6f  pearson %.6f", *s.mae, s.pearson.value_or(0.0));
      std::printf("\n");
    }
  }
  emit_report(rep, cfg.output_dir);
  emit_timings(timings, cfg.output_dir);
  std::printf("report written to %s (%.1f s)\n", cfg.output_dir.c_str(), timings.edge_maps_s + timings.folds_s);
  return ok;
}

int cmd_report(const std::string& report_path, const std::string& out) {
  const auto rep = load_report(report_path);
  emit_report(rep, out);
  std::printf("re-emitted %s into %s\n", report_path.c_str(), out.c_str());
  return ok;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"patch trajectory prediction and classification"};
  app.require_subcommand(1);

  std::string spec_path, synth_out;
  std::optional<std::uint64_t> synth_seed;
  auto* synth = app.add_subcommand("synth", "generate a synthetic longitudinal cohort");
  synth->add_option("--config", spec_path, "cohort spec (JSON)")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "dataset directory")->required();
  synth->add_option("--seed", synth_seed, "seed override");

  common_flags lm_flags, pred_flags, loocv_flags;
  auto* lms = app.add_subcommand("landmarks", "write the landmark list for every ROI");
  add_run_flags(lms, lm_flags, false);

  int subject_id = 0;
  auto* pred = app.add_subcommand("predict", "predict one subject's follow-up from the others");
  add_run_flags(pred, pred_flags, true);
  pred->add_option("--subject", subject_id, "subject id to hold out")->required();

  auto* loocv = app.add_subcommand("loocv", "leave-one-out evaluation of all configured arms");
  add_run_flags(loocv, loocv_flags, true);

  std::string report_path, report_out;
  auto* report = app.add_subcommand("report", "re-emit CSV and plot tables from a saved report");
  report->add_option("--report", report_path, "report.json")->required()->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth) return cmd_synth(spec_path, synth_out, synth_seed);
    if (*lms) return cmd_landmarks(lm_flags);
    if (*pred) return cmd_predict(pred_flags, subject_id);
    if (*loocv) return cmd_loocv(loocv_flags);
    if (*report) return cmd_report(report_path, report_out);
  } catch (const config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return bad_config;
  } catch (const invalid_input& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return bad_config;
  } catch (const data_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return bad_data;
  } catch (const numerical_error& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return numerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return failure;
  }
  return failure;
}
