#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchtraj/classify.hpp"
#include "patchtraj/dataset.hpp"
#include "patchtraj/landmarks.hpp"
#include "patchtraj/metrics.hpp"
#include "patchtraj/mkml.hpp"
#include "patchtraj/parallel.hpp"
#include "patchtraj/sas.hpp"
#include "patchtraj/seed.hpp"
#include "patchtraj/trajectory.hpp"

// Leave-one-out evaluation: per held-out subject, landmarks from the training
// label maps, per-landmark atlas selection and follow-up prediction, one SVM
// per landmark and arm, weighted vote. Three arms: baseline (t1 only), sas
// and mkml (t1 followed by predicted t2).

namespace patchtraj {

enum class arm { baseline = 0, sas = 1, mkml = 2 };
inline constexpr std::array<arm, 3> all_arms{arm::baseline, arm::sas, arm::mkml};

enum class c_tuning_mode { per_landmark, shared_roi };
enum class followup_source { predicted, ground_truth };

inline const char* to_string(arm a) {
  switch (a) {
  case arm::baseline: return "baseline";
  case arm::sas: return "sas";
  case arm::mkml: return "mkml";
  }
  return "?";
}
inline const char* to_string(c_tuning_mode m) { return m == c_tuning_mode::per_landmark ? "per_landmark" : "shared_roi"; }
inline const char* to_string(followup_source f) { return f == followup_source::predicted ? "predicted" : "ground_truth"; }
inline const char* to_string(transfer_mode t) { return t == transfer_mode::plain_average ? "plain_average" : "quotient_mapped"; }
inline const char* to_string(weighting_mode w) { return w == weighting_mode::uniform ? "uniform" : "similarity"; }
inline const char* to_string(sobel_mode s) { return s == sobel_mode::volumetric ? "volumetric" : "slicewise"; }

namespace detail {

template <class E> E enum_from(const std::string& s, std::initializer_list<E> options, const char* what) {
  for (E e : options)
    if (s == to_string(e)) return e;
  throw config_error(std::string("unknown ") + what + ": " + s);
}

} // namespace detail

inline arm arm_from_string(const std::string& s) {
  return detail::enum_from(s, {arm::baseline, arm::sas, arm::mkml}, "strategy");
}

// "all" or a single arm name.
inline std::vector<arm> arms_from_string(const std::string& s) {
  if (s == "all") return {all_arms.begin(), all_arms.end()};
  return {arm_from_string(s)};
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct roi_config {
  std::string name{"roi"};
  std::optional<int> label;             // nullopt: any nonzero label
  std::optional<double> edge_threshold; // nullopt: automatic
  int patch_side{11};
  int max_landmarks{0}; // 0 keeps every candidate; otherwise an even stride
  sobel_mode sobel{sobel_mode::volumetric};
  std::vector<arm> arms{all_arms.begin(), all_arms.end()};
  int K_sas{2};
  int K_mkml{1};
  transfer_mode transfer_sas{transfer_mode::quotient_mapped};
  transfer_mode transfer_mkml{transfer_mode::plain_average};
  int c{3};
  int m{3};

  bool operator==(const roi_config&) const = default;
};

struct svr_config {
  double C{1.0};
  double eps{0.001};
  double tol{1e-4};
  int max_epochs{2000};
  bool operator==(const svr_config&) const = default;
};

struct svm_config {
  int c_lo_exp{-6};
  int c_hi_exp{15};
  int folds{5};
  int platt_folds{3};
  bool standardize{true};
  double std_floor{1e-8};
  c_tuning_mode tuning{c_tuning_mode::per_landmark};
  double tol{1e-6};
  int max_epochs{5000};
  bool operator==(const svm_config&) const = default;
};

struct mkml_config {
  double beta{1.0};
  double gamma{1.0};
  double rho{0.1};
  int max_iters{30};
  double tol{1e-5};
  double sigma_lo{1.0};
  double sigma_hi{2.0};
  int knn_k{0};
  bool normalize_kernels{true};
  bool operator==(const mkml_config&) const = default;
};

struct prediction_settings {
  double quotient_cap{10.0};
  double quotient_floor{1e-3};
  double intensity_max{1.0};
  weighting_mode mkml_weighting{weighting_mode::similarity};
  followup_source training_followup{followup_source::predicted};
  bool operator==(const prediction_settings&) const = default;
};

struct pipeline_config {
  std::string manifest;
  std::vector<roi_config> rois{roi_config{}};
  svr_config svr;
  svm_config svm;
  mkml_config mkml;
  prediction_settings prediction;
  std::uint64_t seed{1};
  std::string output_dir{"out"};
  int threads{1};

  bool operator==(const pipeline_config&) const = default;
};

inline void validate(const pipeline_config& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw config_error("config: " + what);
  };
  need(!c.rois.empty(), "at least one roi is required");
  for (const auto& r : c.rois) {
    const std::string p = "roi '" + r.name + "': ";
    need(r.patch_side >= 1 && r.patch_side % 2 == 1, p + "patch_side must be odd and positive");
    need(!r.edge_threshold || (*r.edge_threshold >= 0.0 && *r.edge_threshold <= 1.0), p + "edge_threshold must be in [0,1]");
    need(r.max_landmarks >= 0, p + "max_landmarks must be >= 0");
    need(!r.arms.empty(), p + "no strategies selected");
    need(r.K_sas >= 1 && r.K_mkml >= 1, p + "K must be >= 1");
    need(r.c >= 1 && r.m >= 1, p + "c and m must be >= 1");
  }
  need(c.svr.C > 0.0 && c.svr.eps >= 0.0 && c.svr.tol > 0.0 && c.svr.max_epochs >= 1, "bad svr settings");
  need(c.svm.c_lo_exp <= c.svm.c_hi_exp, "empty C grid");
  need(c.svm.folds >= 2 && c.svm.platt_folds >= 2, "folds must be >= 2");
  need(c.svm.std_floor > 0.0 && c.svm.tol > 0.0 && c.svm.max_epochs >= 1, "bad svm settings");
  need(c.mkml.beta > 0.0 && c.mkml.gamma > 0.0 && c.mkml.rho > 0.0, "mkml beta, gamma, rho must be > 0");
  need(c.mkml.max_iters >= 0 && c.mkml.tol > 0.0, "bad mkml stopping rule");
  need(c.mkml.sigma_lo > 0.0 && c.mkml.sigma_hi >= c.mkml.sigma_lo, "bad sigma range");
  need(c.mkml.knn_k >= 0, "knn_k must be >= 0");
  need(c.prediction.quotient_cap > 0.0 && c.prediction.quotient_floor > 0.0, "bad quotient bounds");
  need(c.prediction.intensity_max > 0.0, "intensity_max must be > 0");
  need(c.threads >= 0, "threads must be >= 0");
}

namespace detail {

using ojson = nlohmann::ordered_json;

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw config_error("config: " + where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok |= key == a;
    if (!ok) throw config_error("config: unknown key '" + key + "' in " + where);
  }
}

template <class T> void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

} // namespace detail

inline void to_json(nlohmann::ordered_json& j, const roi_config& r) {
  std::vector<std::string> arms;
  for (arm a : r.arms) arms.emplace_back(to_string(a));
  j = nlohmann::ordered_json{{"name", r.name},
                             {"label", r.label ? nlohmann::ordered_json(*r.label) : nlohmann::ordered_json()},
                             {"edge_threshold", r.edge_threshold ? nlohmann::ordered_json(*r.edge_threshold)
                                                                 : nlohmann::ordered_json("auto")},
                             {"patch_side", r.patch_side},
                             {"max_landmarks", r.max_landmarks},
                             {"sobel", to_string(r.sobel)},
                             {"strategies", arms},
                             {"K_sas", r.K_sas},
                             {"K_mkml", r.K_mkml},
                             {"transfer_sas", to_string(r.transfer_sas)},
                             {"transfer_mkml", to_string(r.transfer_mkml)},
                             {"c", r.c},
                             {"m", r.m}};
}

inline void from_json(const nlohmann::json& j, roi_config& r) {
  detail::check_keys(j, {"name", "label", "edge_threshold", "patch_side", "max_landmarks", "sobel", "strategies", "K_sas",
                         "K_mkml", "transfer_sas", "transfer_mkml", "c", "m"},
                     "roi");
  detail::read_opt(j, "name", r.name);
  if (j.contains("label")) {
    if (j["label"].is_null()) r.label.reset();
    else r.label = j["label"].get<int>();
  }
  if (j.contains("edge_threshold")) {
    const auto& t = j["edge_threshold"];
    if (t.is_string()) {
      if (t.get<std::string>() != "auto") throw config_error("config: edge_threshold must be a number or \"auto\"");
      r.edge_threshold.reset();
    } else {
      r.edge_threshold = t.get<double>();
    }
  }
  detail::read_opt(j, "patch_side", r.patch_side);
  detail::read_opt(j, "max_landmarks", r.max_landmarks);
  if (j.contains("sobel"))
    r.sobel = detail::enum_from(j["sobel"].get<std::string>(), {sobel_mode::volumetric, sobel_mode::slicewise}, "sobel mode");
  if (j.contains("strategies")) {
    r.arms.clear();
    for (const auto& s : j["strategies"]) {
      const auto more = arms_from_string(s.get<std::string>());
      r.arms.insert(r.arms.end(), more.begin(), more.end());
    }
  }
  detail::read_opt(j, "K_sas", r.K_sas);
  detail::read_opt(j, "K_mkml", r.K_mkml);
  const std::initializer_list<transfer_mode> tm{transfer_mode::plain_average, transfer_mode::quotient_mapped};
  if (j.contains("transfer_sas")) r.transfer_sas = detail::enum_from(j["transfer_sas"].get<std::string>(), tm, "transfer mode");
  if (j.contains("transfer_mkml")) r.transfer_mkml = detail::enum_from(j["transfer_mkml"].get<std::string>(), tm, "transfer mode");
  detail::read_opt(j, "c", r.c);
  detail::read_opt(j, "m", r.m);
}

inline nlohmann::ordered_json config_to_json(const pipeline_config& c) {
  nlohmann::ordered_json j;
  j["manifest"] = c.manifest;
  j["rois"] = nlohmann::ordered_json::array();
  for (const auto& r : c.rois) j["rois"].push_back(r);
  j["svr"] = {{"C", c.svr.C}, {"eps", c.svr.eps}, {"tol", c.svr.tol}, {"max_epochs", c.svr.max_epochs}};
  j["svm"] = {{"c_lo_exp", c.svm.c_lo_exp},     {"c_hi_exp", c.svm.c_hi_exp},
              {"folds", c.svm.folds},           {"platt_folds", c.svm.platt_folds},
              {"standardize", c.svm.standardize}, {"std_floor", c.svm.std_floor},
              {"tuning", to_string(c.svm.tuning)}, {"tol", c.svm.tol},
              {"max_epochs", c.svm.max_epochs}};
  j["mkml"] = {{"beta", c.mkml.beta},         {"gamma", c.mkml.gamma},       {"rho", c.mkml.rho},
               {"max_iters", c.mkml.max_iters}, {"tol", c.mkml.tol},           {"sigma_lo", c.mkml.sigma_lo},
               {"sigma_hi", c.mkml.sigma_hi}, {"knn_k", c.mkml.knn_k},       {"normalize_kernels", c.mkml.normalize_kernels}};
  j["prediction"] = {{"quotient_cap", c.prediction.quotient_cap},
                     {"quotient_floor", c.prediction.quotient_floor},
                     {"intensity_max", c.prediction.intensity_max},
                     {"mkml_weighting", to_string(c.prediction.mkml_weighting)},
                     {"training_followup", to_string(c.prediction.training_followup)}};
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  return j;
}

// Missing keys keep their defaults; unknown keys are rejected.
inline pipeline_config config_from_json(const nlohmann::json& j) {
  pipeline_config c;
  try {
    detail::check_keys(j, {"manifest", "rois", "svr", "svm", "mkml", "prediction", "seed", "output_dir", "threads"},
                       "config");
    detail::read_opt(j, "manifest", c.manifest);
    if (j.contains("rois")) {
      c.rois.clear();
      for (const auto& r : j["rois"]) c.rois.push_back(r.get<roi_config>());
    }
    if (j.contains("svr")) {
      const auto& s = j["svr"];
      detail::check_keys(s, {"C", "eps", "tol", "max_epochs"}, "svr");
      detail::read_opt(s, "C", c.svr.C);
      detail::read_opt(s, "eps", c.svr.eps);
      detail::read_opt(s, "tol", c.svr.tol);
      detail::read_opt(s, "max_epochs", c.svr.max_epochs);
    }
    if (j.contains("svm")) {
      const auto& s = j["svm"];
      detail::check_keys(s, {"c_lo_exp", "c_hi_exp", "folds", "platt_folds", "standardize", "std_floor", "tuning", "tol",
                             "max_epochs"},
                         "svm");
      detail::read_opt(s, "c_lo_exp", c.svm.c_lo_exp);
      detail::read_opt(s, "c_hi_exp", c.svm.c_hi_exp);
      detail::read_opt(s, "folds", c.svm.folds);
      detail::read_opt(s, "platt_folds", c.svm.platt_folds);
      detail::read_opt(s, "standardize", c.svm.standardize);
      detail::read_opt(s, "std_floor", c.svm.std_floor);
      if (s.contains("tuning"))
        c.svm.tuning = detail::enum_from(s["tuning"].get<std::string>(),
                                         {c_tuning_mode::per_landmark, c_tuning_mode::shared_roi}, "tuning mode");
      detail::read_opt(s, "tol", c.svm.tol);
      detail::read_opt(s, "max_epochs", c.svm.max_epochs);
    }
    if (j.contains("mkml")) {
      const auto& s = j["mkml"];
      detail::check_keys(s, {"beta", "gamma", "rho", "max_iters", "tol", "sigma_lo", "sigma_hi", "knn_k", "normalize_kernels"},
                         "mkml");
      detail::read_opt(s, "beta", c.mkml.beta);
      detail::read_opt(s, "gamma", c.mkml.gamma);
      detail::read_opt(s, "rho", c.mkml.rho);
      detail::read_opt(s, "max_iters", c.mkml.max_iters);
      detail::read_opt(s, "tol", c.mkml.tol);
      detail::read_opt(s, "sigma_lo", c.mkml.sigma_lo);
      detail::read_opt(s, "sigma_hi", c.mkml.sigma_hi);
      detail::read_opt(s, "knn_k", c.mkml.knn_k);
      detail::read_opt(s, "normalize_kernels", c.mkml.normalize_kernels);
    }
    if (j.contains("prediction")) {
      const auto& s = j["prediction"];
      detail::check_keys(s, {"quotient_cap", "quotient_floor", "intensity_max", "mkml_weighting", "training_followup"},
                         "prediction");
      detail::read_opt(s, "quotient_cap", c.prediction.quotient_cap);
      detail::read_opt(s, "quotient_floor", c.prediction.quotient_floor);
      detail::read_opt(s, "intensity_max", c.prediction.intensity_max);
      if (s.contains("mkml_weighting"))
        c.prediction.mkml_weighting = detail::enum_from(s["mkml_weighting"].get<std::string>(),
                                                        {weighting_mode::uniform, weighting_mode::similarity}, "weighting");
      if (s.contains("training_followup"))
        c.prediction.training_followup = detail::enum_from(
            s["training_followup"].get<std::string>(), {followup_source::predicted, followup_source::ground_truth},
            "training_followup");
    }
    detail::read_opt(j, "seed", c.seed);
    detail::read_opt(j, "output_dir", c.output_dir);
    detail::read_opt(j, "threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

inline pipeline_config load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw config_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("malformed config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

inline constexpr int report_format_version = 1;

struct landmark_diagnostic {
  int index{0}; // position in the fold's candidate list
  voxel coord{};
  bool abstained{false};
  int label{label_nc};
  double posterior{0.0};
  double C{0.0};
  std::optional<double> mae;
  std::optional<double> pearson;
};

struct subject_prediction {
  int subject_id{0};
  int truth{label_nc};
  int predicted{label_nc};
  double score_nc{0.0};
  double score_disease{0.0};
  int abstentions{0};
  std::optional<double> mae;     // mean over landmarks of the predicted-t2 patch error
  std::optional<double> pearson; // mean over landmarks
  std::vector<landmark_diagnostic> landmarks;
};

struct strategy_report {
  arm strategy{arm::baseline};
  int tp{0}, tn{0}, fp{0}, fn{0};
  double accuracy{0.0};
  double sensitivity{0.0};
  double specificity{0.0};
  std::optional<double> mae;
  std::optional<double> pearson;
  std::vector<subject_prediction> predictions;
};

struct skipped_landmark {
  int index{0};
  std::string reason;
};

struct fold_summary {
  int subject_id{0};
  double threshold{0.0};
  int candidates{0};
  std::vector<voxel> landmarks;
  std::vector<skipped_landmark> skipped;
};

struct roi_report {
  std::string name;
  std::vector<strategy_report> strategies;
  std::vector<fold_summary> folds;
};

struct evaluation_report {
  int format_version{report_format_version};
  nlohmann::ordered_json config;
  std::vector<roi_report> rois;
};

struct loocv_timings {
  double edge_maps_s{0.0};
  double folds_s{0.0};
  std::vector<double> fold_s;
  int threads{1};
};

// Counts and rates from the per-subject predictions; disease is the positive
// class. An empty denominator gives 0.
inline void recompute_metrics(strategy_report& s) {
  s.tp = s.tn = s.fp = s.fn = 0;
  double mae_sum = 0.0, r_sum = 0.0;
  int mae_n = 0, r_n = 0;
  for (const auto& p : s.predictions) {
    const bool pos = p.truth > 0, said_pos = p.predicted > 0;
    (pos ? (said_pos ? s.tp : s.fn) : (said_pos ? s.fp : s.tn))++;
    if (p.mae) {
      mae_sum += *p.mae;
      ++mae_n;
    }
    if (p.pearson) {
      r_sum += *p.pearson;
      ++r_n;
    }
  }
  const int n = static_cast<int>(s.predictions.size());
  s.accuracy = n ? static_cast<double>(s.tp + s.tn) / n : 0.0;
  s.sensitivity = s.tp + s.fn ? static_cast<double>(s.tp) / (s.tp + s.fn) : 0.0;
  s.specificity = s.tn + s.fp ? static_cast<double>(s.tn) / (s.tn + s.fp) : 0.0;
  s.mae = mae_n ? std::optional<double>(mae_sum / mae_n) : std::nullopt;
  s.pearson = r_n ? std::optional<double>(r_sum / r_n) : std::nullopt;
}

namespace detail {

inline nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json();
}

inline std::optional<double> opt_from(const nlohmann::ordered_json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

} // namespace detail

inline nlohmann::ordered_json report_to_json(const evaluation_report& r) {
  using oj = nlohmann::ordered_json;
  oj j;
  j["format_version"] = r.format_version;
  j["config"] = r.config;
  j["rois"] = oj::array();
  for (const auto& roi : r.rois) {
    oj jr;
    jr["name"] = roi.name;
    jr["strategies"] = oj::array();
    for (const auto& s : roi.strategies) {
      oj js{{"strategy", to_string(s.strategy)},
            {"tp", s.tp},
            {"tn", s.tn},
            {"fp", s.fp},
            {"fn", s.fn},
            {"accuracy", s.accuracy},
            {"sensitivity", s.sensitivity},
            {"specificity", s.specificity},
            {"mae", detail::opt_json(s.mae)},
            {"pearson", detail::opt_json(s.pearson)}};
      js["predictions"] = oj::array();
      for (const auto& p : s.predictions) {
        oj jp{{"subject", p.subject_id},
              {"truth", class_name(p.truth)},
              {"predicted", class_name(p.predicted)},
              {"score_nc", p.score_nc},
              {"score_disease", p.score_disease},
              {"abstentions", p.abstentions},
              {"mae", detail::opt_json(p.mae)},
              {"pearson", detail::opt_json(p.pearson)}};
        jp["landmarks"] = oj::array();
        for (const auto& l : p.landmarks)
          jp["landmarks"].push_back(oj{{"index", l.index},
                                       {"coord", {l.coord.x, l.coord.y, l.coord.z}},
                                       {"abstained", l.abstained},
                                       {"label", class_name(l.label)},
                                       {"posterior", l.posterior},
                                       {"C", l.C},
                                       {"mae", detail::opt_json(l.mae)},
                                       {"pearson", detail::opt_json(l.pearson)}});
        js["predictions"].push_back(std::move(jp));
      }
      jr["strategies"].push_back(std::move(js));
    }
    jr["folds"] = oj::array();
    for (const auto& f : roi.folds) {
      oj jf{{"subject", f.subject_id}, {"threshold", f.threshold}, {"candidates", f.candidates}};
      jf["landmarks"] = oj::array();
      for (const auto& v : f.landmarks) jf["landmarks"].push_back({v.x, v.y, v.z});
      jf["skipped"] = oj::array();
      for (const auto& s : f.skipped) jf["skipped"].push_back(oj{{"index", s.index}, {"reason", s.reason}});
      jr["folds"].push_back(std::move(jf));
    }
    j["rois"].push_back(std::move(jr));
  }
  return j;
}

inline evaluation_report report_from_json(const nlohmann::ordered_json& j) {
  evaluation_report r;
  try {
    r.format_version = j.at("format_version").get<int>();
    if (r.format_version != report_format_version) throw data_error("unsupported report format version");
    r.config = j.at("config");
    for (const auto& jr : j.at("rois")) {
      roi_report roi;
      roi.name = jr.at("name").get<std::string>();
      for (const auto& js : jr.at("strategies")) {
        strategy_report s;
        s.strategy = arm_from_string(js.at("strategy").get<std::string>());
        s.tp = js.at("tp");
        s.tn = js.at("tn");
        s.fp = js.at("fp");
        s.fn = js.at("fn");
        s.accuracy = js.at("accuracy");
        s.sensitivity = js.at("sensitivity");
        s.specificity = js.at("specificity");
        s.mae = detail::opt_from(js.at("mae"));
        s.pearson = detail::opt_from(js.at("pearson"));
        for (const auto& jp : js.at("predictions")) {
          subject_prediction p;
          p.subject_id = jp.at("subject");
          p.truth = class_from_name(jp.at("truth"));
          p.predicted = class_from_name(jp.at("predicted"));
          p.score_nc = jp.at("score_nc");
          p.score_disease = jp.at("score_disease");
          p.abstentions = jp.at("abstentions");
          p.mae = detail::opt_from(jp.at("mae"));
          p.pearson = detail::opt_from(jp.at("pearson"));
          for (const auto& jl : jp.at("landmarks")) {
            landmark_diagnostic l;
            l.index = jl.at("index");
            const auto c = jl.at("coord").get<std::array<int, 3>>();
            l.coord = {c[0], c[1], c[2]};
            l.abstained = jl.at("abstained");
            l.label = class_from_name(jl.at("label"));
            l.posterior = jl.at("posterior");
            l.C = jl.at("C");
            l.mae = detail::opt_from(jl.at("mae"));
            l.pearson = detail::opt_from(jl.at("pearson"));
            p.landmarks.push_back(l);
          }
          s.predictions.push_back(std::move(p));
        }
        roi.strategies.push_back(std::move(s));
      }
      for (const auto& jf : jr.at("folds")) {
        fold_summary f;
        f.subject_id = jf.at("subject");
        f.threshold = jf.at("threshold");
        f.candidates = jf.at("candidates");
        for (const auto& v : jf.at("landmarks")) {
          const auto c = v.get<std::array<int, 3>>();
          f.landmarks.push_back({c[0], c[1], c[2]});
        }
        for (const auto& s : jf.at("skipped")) f.skipped.push_back({s.at("index"), s.at("reason")});
        roi.folds.push_back(std::move(f));
      }
      r.rois.push_back(std::move(roi));
    }
  } catch (const nlohmann::json::exception& e) {
    throw data_error(std::string("bad report: ") + e.what());
  }
  return r;
}

inline evaluation_report load_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw data_error("cannot open report " + path.string());
  nlohmann::ordered_json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw data_error("malformed report " + path.string() + ": " + e.what());
  }
  return report_from_json(j);
}

namespace detail {

inline std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_number(const std::optional<double>& v) { return v ? csv_number(*v) : std::string(); }

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw data_error("cannot write " + p.string());
  os << text;
  if (!os) throw data_error("write failed: " + p.string());
}

} // namespace detail

inline constexpr const char* metrics_csv_header = "roi,strategy,accuracy,sensitivity,specificity,mae,pearson";

// report.json, metrics.csv and two plot series. Baseline rows leave the
// prediction columns empty.
inline void emit_report(const evaluation_report& r, const std::filesystem::path& outdir) {
  std::error_code ec;
  std::filesystem::create_directories(outdir, ec);
  if (ec) throw data_error("cannot create " + outdir.string() + ": " + ec.message());
  detail::write_text(outdir / "report.json", report_to_json(r).dump(2) + "\n");

  std::string metrics = std::string(metrics_csv_header) + "\n";
  std::string mae = "roi,strategy,mae\n";
  std::string acc = "roi,strategy,accuracy\n";
  for (const auto& roi : r.rois)
    for (const auto& s : roi.strategies) {
      const std::string key = roi.name + "," + to_string(s.strategy) + ",";
      metrics += key + detail::csv_number(s.accuracy) + "," + detail::csv_number(s.sensitivity) + "," +
                 detail::csv_number(s.specificity) + "," + detail::csv_number(s.mae) + "," +
                 detail::csv_number(s.pearson) + "\n";
      if (s.mae) mae += key + detail::csv_number(s.mae) + "\n";
      acc += key + detail::csv_number(s.accuracy) + "\n";
    }
  detail::write_text(outdir / "metrics.csv", metrics);
  detail::write_text(outdir / "plot_mae_by_strategy.csv", mae);
  detail::write_text(outdir / "plot_accuracy_by_strategy.csv", acc);
}

inline void emit_timings(const loocv_timings& t, const std::filesystem::path& outdir) {
  std::error_code ec;
  std::filesystem::create_directories(outdir, ec);
  if (ec) throw data_error("cannot create " + outdir.string() + ": " + ec.message());
  nlohmann::ordered_json j{{"threads", t.threads}, {"edge_maps_s", t.edge_maps_s}, {"folds_s", t.folds_s}, {"fold_s", t.fold_s}};
  detail::write_text(outdir / "timings.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// LOOCV
// ---------------------------------------------------------------------------

// Everything a fold learns from its training subjects, per ROI and landmark.
// Used to check that the held-out subject cannot influence training.
struct arm_training_trace {
  row_mat features;
  Eigen::VectorXd mean, scale, w;
  double bias{0.0}, C{0.0}, A{0.0}, B{0.0};
};

struct fold_trace {
  std::vector<double> thresholds;                  // per roi
  std::vector<std::vector<landmark>> landmarks;    // per roi
  std::vector<std::vector<std::array<std::optional<arm_training_trace>, 3>>> arms; // per roi, landmark
};

struct fold_roi_result {
  double threshold{0.0};
  int candidates{0};
  std::vector<landmark> landmarks;
  std::vector<skipped_landmark> skipped;
  std::array<subject_prediction, 3> arms;
};

struct fold_result {
  int subject_id{0};
  std::vector<fold_roi_result> rois;
};

namespace detail {

inline std::vector<landmark> cap_landmarks(std::vector<landmark> lms, int cap) {
  if (cap <= 0 || static_cast<int>(lms.size()) <= cap) return lms;
  const std::size_t stride = (lms.size() + cap - 1) / static_cast<std::size_t>(cap);
  std::vector<landmark> out;
  for (std::size_t i = 0; i < lms.size() && static_cast<int>(out.size()) < cap; i += stride) out.push_back(lms[i]);
  return out;
}

inline row_mat stack_rows(std::span<const vec> a, std::span<const vec> b = {}) {
  const auto da = a.front().size(), db = b.empty() ? 0 : b.front().size();
  row_mat x(static_cast<Eigen::Index>(a.size()), da + db);
  for (std::size_t i = 0; i < a.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)).head(da) = a[i].transpose();
    if (db) x.row(static_cast<Eigen::Index>(i)).tail(db) = b[i].transpose();
  }
  return x;
}

inline vec concat(const vec& a, const vec& b) {
  vec v(a.size() + b.size());
  v << a, b;
  return v;
}

} // namespace detail

class loocv_engine {
public:
  loocv_engine(const pipeline_config& cfg, const cohort_data& data) : cfg_(cfg), data_(data) {
    validate(cfg_);
    if (data_.size() < 3) throw config_error("loocv: need at least 3 subjects");
    const auto d = data_.subjects.front().t1.dims();
    for (const auto& s : data_.subjects)
      if (!(s.t1.dims() == d) || !(s.t2.dims() == d) || !(s.labels.dims() == d))
        throw data_error("loocv: subject " + std::to_string(s.id) + " has mismatched dims");
    grid_ = c_grid(cfg_.svm.c_lo_exp, cfg_.svm.c_hi_exp);
  }

  const pipeline_config& config() const { return cfg_; }

  // Each subject's edge map depends on its own label map only.
  void compute_edge_maps(int threads) {
    edges_.assign(cfg_.rois.size(), std::vector<volume>(data_.size()));
    parallel_for(cfg_.rois.size() * data_.size(), threads, [&](std::size_t k) {
      const auto r = k / data_.size(), s = k % data_.size();
      const auto& roi = cfg_.rois[r];
      edges_[r][s] = sobel_edge_map(data_.subjects[s].labels, roi.label, roi.sobel);
    });
  }

  fold_result run_fold(std::size_t test, fold_trace* trace = nullptr) const {
    if (edges_.size() != cfg_.rois.size()) throw config_error("loocv: edge maps not computed");
    std::vector<int> train;
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (i != test) train.push_back(static_cast<int>(i));
    std::vector<int> labels, ids;
    for (int i : train) {
      labels.push_back(data_.subjects[i].label);
      ids.push_back(data_.subjects[i].id);
    }
    if (detail::min_class_count(labels) == 0)
      throw config_error("loocv: training fold for subject " + std::to_string(data_.subjects[test].id) +
                         " has a single class");

    fold_result out;
    out.subject_id = data_.subjects[test].id;
    if (trace) *trace = {};
    for (std::size_t r = 0; r < cfg_.rois.size(); ++r) {
      const auto& roi = cfg_.rois[r];
      std::vector<volume> fold_edges;
      for (int i : train) fold_edges.push_back(edges_[r][i]);
      const volume density = edge_density_map(fold_edges);
      fold_roi_result fr;
      fr.threshold = roi.edge_threshold ? *roi.edge_threshold : auto_threshold(density);
      auto candidates = select_landmarks(density, fr.threshold, roi.patch_side / 2, static_cast<int>(r));
      fr.candidates = static_cast<int>(candidates.size());
      fr.landmarks = detail::cap_landmarks(std::move(candidates), roi.max_landmarks);
      if (trace) {
        trace->thresholds.push_back(fr.threshold);
        trace->landmarks.push_back(fr.landmarks);
        trace->arms.emplace_back(fr.landmarks.size());
      }
      run_roi(r, test, train, labels, ids, fr, trace);
      out.rois.push_back(std::move(fr));
    }
    return out;
  }

private:
  struct landmark_work {
    std::array<bool, 3> ok{};
    std::array<row_mat, 3> train_features;
    std::array<vec, 3> test_features;
    std::array<std::optional<vec>, 3> test_prediction; // predicted t2 for sas / mkml
  };

  bool uses(const roi_config& roi, arm a) const {
    return std::find(roi.arms.begin(), roi.arms.end(), a) != roi.arms.end();
  }

  prediction_config prediction_for(const roi_config& roi, arm a) const {
    prediction_config p;
    if (a == arm::sas) {
      p = default_prediction_config(selection_strategy::sas, roi.K_sas);
      p.transfer = roi.transfer_sas;
    } else {
      p = default_prediction_config(selection_strategy::mkml, roi.K_mkml);
      p.transfer = roi.transfer_mkml;
      p.weighting = cfg_.prediction.mkml_weighting;
    }
    p.quotient = {cfg_.prediction.quotient_cap, cfg_.prediction.quotient_floor};
    p.intensity_max = cfg_.prediction.intensity_max;
    return p;
  }

  mkml_params mkml_for(const roi_config& roi) const {
    return {roi.c, cfg_.mkml.beta, cfg_.mkml.gamma, cfg_.mkml.rho, cfg_.mkml.max_iters, cfg_.mkml.tol};
  }

  kernel_bank bank_for(const roi_config& roi, std::span<const vec> patches) const {
    const auto sig = sigma_grid(roi.m, cfg_.mkml.sigma_lo, cfg_.mkml.sigma_hi);
    return build_kernel_bank(patches, sig, {cfg_.mkml.knn_k, cfg_.mkml.normalize_kernels});
  }

  // Builds features for every active arm at one landmark. Training rows never
  // see the held-out subject; its t1 patch only enters the test-side ranking.
  // A failing arm is logged and abstains; the other arms still run.
  landmark_work prepare_landmark(const roi_config& roi, const landmark& lm, std::size_t test,
                                 std::span<const int> train, std::span<const int> ids,
                                 std::vector<skipped_landmark>& skipped) const {
    landmark_work w;
    auto guarded = [&](arm a, auto&& body) {
      if (!uses(roi, a)) return;
      try {
        body();
      } catch (const invalid_input& e) {
        skipped.push_back({lm.index, std::string(to_string(a)) + ": " + e.what()});
      } catch (const numerical_error& e) {
        skipped.push_back({lm.index, std::string(to_string(a)) + ": " + e.what()});
      }
    };
    const int side = roi.patch_side;
    std::vector<vec> t1, t2;
    for (int i : train) {
      t1.push_back(extract_patch_values(data_.subjects[i].t1, lm.coord, side));
      t2.push_back(extract_patch_values(data_.subjects[i].t2, lm.coord, side));
    }
    const vec test_t1 = extract_patch_values(data_.subjects[test].t1, lm.coord, side);
    const bool truth_followup = cfg_.prediction.training_followup == followup_source::ground_truth;

    guarded(arm::baseline, [&] {
      w.train_features[0] = detail::stack_rows(t1);
      w.test_features[0] = test_t1;
      w.ok[0] = true;
    });
    guarded(arm::sas, [&] {
      const auto pc = prediction_for(roi, arm::sas);
      const auto pairs = build_pair_error_dataset(t1, t2, pc.quotient, lm.index);
      const auto reg = train_error_regressors(pairs, cfg_.svr.C, cfg_.svr.eps, {cfg_.svr.tol, cfg_.svr.max_epochs});
      const vec pred = predict_followup(rank_atlases_sas(reg, t1, test_t1, ids), t1, t2, test_t1, pc);
      std::vector<vec> train_pred(t1.size());
      for (std::size_t i = 0; i < t1.size(); ++i) {
        if (truth_followup) {
          train_pred[i] = t2[i];
          continue;
        }
        auto ranking = rank_atlases_sas(reg, t1, t1[i], ids);
        std::erase_if(ranking.entries, [&](const ranking_entry& e) { return e.index == static_cast<int>(i); });
        train_pred[i] = predict_followup(ranking, t1, t2, t1[i], pc);
      }
      w.train_features[1] = detail::stack_rows(t1, train_pred);
      w.test_features[1] = detail::concat(test_t1, pred);
      w.test_prediction[1] = pred;
      w.ok[1] = true;
    });
    guarded(arm::mkml, [&] {
      const auto pc = prediction_for(roi, arm::mkml);
      const auto params = mkml_for(roi);
      // Test side: the held-out baseline patch joins the manifold as the last row.
      std::vector<vec> with_test = t1;
      with_test.push_back(test_t1);
      std::vector<int> with_ids(ids.begin(), ids.end());
      with_ids.push_back(data_.subjects[test].id);
      const auto model_test = optimize_similarity(bank_for(roi, with_test), params);
      const auto ranking = rank_atlases_mkml(model_test, static_cast<int>(t1.size()), with_ids);
      const vec pred = predict_followup(ranking, t1, t2, test_t1, pc);
      // Training side: a manifold over the training patches alone.
      std::vector<vec> train_pred(t1.size());
      if (truth_followup) {
        train_pred = t2;
      } else {
        const auto model_train = optimize_similarity(bank_for(roi, t1), params);
        for (std::size_t i = 0; i < t1.size(); ++i)
          train_pred[i] = predict_followup(rank_atlases_mkml(model_train, static_cast<int>(i), ids), t1, t2, t1[i], pc);
      }
      w.train_features[2] = detail::stack_rows(t1, train_pred);
      w.test_features[2] = detail::concat(test_t1, pred);
      w.test_prediction[2] = pred;
      w.ok[2] = true;
    });
    return w;
  }

  classifier_options classifier_for() const {
    classifier_options o;
    o.grid = grid_;
    o.folds = cfg_.svm.folds;
    o.platt_folds = cfg_.svm.platt_folds;
    o.standardize = cfg_.svm.standardize;
    o.std_floor = cfg_.svm.std_floor;
    o.solver = {cfg_.svm.tol, cfg_.svm.max_epochs};
    return o;
  }

  std::uint64_t landmark_seed(std::size_t test, std::size_t roi, const landmark& lm) const {
    return derive_seed(cfg_.seed, "landmark", {static_cast<std::int64_t>(test), static_cast<std::int64_t>(roi), lm.index});
  }

  void run_roi(std::size_t r, std::size_t test, std::span<const int> train, std::span<const int> labels,
               std::span<const int> ids, fold_roi_result& fr, fold_trace* trace) const {
    const auto& roi = cfg_.rois[r];
    const auto n_lm = fr.landmarks.size();
    std::vector<std::optional<landmark_work>> work(n_lm);
    for (std::size_t l = 0; l < n_lm; ++l) work[l] = prepare_landmark(roi, fr.landmarks[l], test, train, ids, fr.skipped);

    // Shared mode: one C per arm from the CV accuracy averaged over landmarks.
    std::array<std::optional<double>, 3> shared_C;
    if (cfg_.svm.tuning == c_tuning_mode::shared_roi)
      for (arm a : all_arms) {
        const int k = static_cast<int>(a);
        std::vector<double> acc(grid_.size(), 0.0);
        bool any = false;
        for (std::size_t l = 0; l < n_lm; ++l) {
          if (!work[l] || !work[l]->ok[k]) continue;
          row_mat z = work[l]->train_features[k];
          if (cfg_.svm.standardize) z = apply_standardization(z, fit_standardization(z, cfg_.svm.std_floor));
          const auto t = tune_C_from_gram(linear_kernel(z), labels, grid_, cfg_.svm.folds,
                                          derive_seed(landmark_seed(test, r, fr.landmarks[l]), "cv-folds"),
                                          {cfg_.svm.tol, cfg_.svm.max_epochs});
          for (std::size_t g = 0; g < grid_.size(); ++g) acc[g] += t.accuracy[g];
          any = true;
        }
        if (any) shared_C[k] = grid_[std::max_element(acc.begin(), acc.end()) - acc.begin()];
      }

    std::array<std::vector<std::optional<vote>>, 3> votes;
    for (auto& v : votes) v.assign(n_lm, std::nullopt);
    std::array<std::vector<landmark_diagnostic>, 3> diags;
    const auto& truth = data_.subjects[test];

    for (std::size_t l = 0; l < n_lm; ++l) {
      const auto& lm = fr.landmarks[l];
      for (arm a : all_arms) {
        const int k = static_cast<int>(a);
        if (!uses(roi, a)) continue;
        landmark_diagnostic d;
        d.index = lm.index;
        d.coord = lm.coord;
        d.abstained = true;
        if (work[l] && work[l]->ok[k]) {
          try {
            auto opt = classifier_for();
            opt.fixed_C = shared_C[k];
            const auto lc = train_landmark_classifier(work[l]->train_features[k], labels, opt,
                                                      landmark_seed(test, r, lm), lm.index);
            const auto v = landmark_vote(lc, work[l]->test_features[k]);
            votes[k][l] = v;
            d.abstained = false;
            d.label = v.label;
            d.posterior = v.posterior;
            d.C = lc.C;
            if (work[l]->test_prediction[k]) {
              const vec gt = extract_patch_values(truth.t2, lm.coord, roi.patch_side);
              d.mae = mae(*work[l]->test_prediction[k], gt);
              d.pearson = pearson(*work[l]->test_prediction[k], gt).value;
            }
            if (trace)
              trace->arms[r][l][k] = arm_training_trace{work[l]->train_features[k], lc.mean, lc.scale, lc.model.w,
                                                        lc.model.bias, lc.C, lc.A, lc.B};
          } catch (const numerical_error& e) {
            fr.skipped.push_back({lm.index, std::string(to_string(a)) + ": " + e.what()});
          }
        }
        diags[k].push_back(d);
      }
    }

    for (arm a : all_arms) {
      const int k = static_cast<int>(a);
      if (!uses(roi, a)) continue;
      const auto vr = weighted_vote(std::span<const std::optional<vote>>(votes[k]));
      auto& p = fr.arms[k];
      p.subject_id = truth.id;
      p.truth = truth.label;
      p.predicted = vr.label;
      p.score_nc = vr.score_nc;
      p.score_disease = vr.score_disease;
      p.abstentions = vr.abstentions;
      double m = 0.0, rsum = 0.0;
      int cnt = 0;
      for (const auto& d : diags[k])
        if (d.mae) {
          m += *d.mae;
          rsum += *d.pearson;
          ++cnt;
        }
      if (cnt) {
        p.mae = m / cnt;
        p.pearson = rsum / cnt;
      }
      p.landmarks = std::move(diags[k]);
    }
  }

  pipeline_config cfg_;
  const cohort_data& data_;
  std::vector<double> grid_;
  std::vector<std::vector<volume>> edges_; // [roi][subject]
};

inline evaluation_report run_loocv(const pipeline_config& cfg, const cohort_data& data, loocv_timings* timings = nullptr) {
  using clock = std::chrono::steady_clock;
  const int threads = resolve_threads(cfg.threads);
  loocv_engine engine(cfg, data);
  const auto t0 = clock::now();
  engine.compute_edge_maps(threads);
  const auto t1 = clock::now();

  std::vector<fold_result> folds(data.size());
  std::vector<double> fold_s(data.size(), 0.0);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto s = clock::now();
    folds[i] = engine.run_fold(i);
    fold_s[i] = std::chrono::duration<double>(clock::now() - s).count();
  });
  const auto t2 = clock::now();

  evaluation_report rep;
  // Execution settings are left out so they cannot change the report bytes.
  rep.config = config_to_json(cfg);
  rep.config.erase("threads");
  rep.config.erase("output_dir");
  for (std::size_t r = 0; r < cfg.rois.size(); ++r) {
    const auto& roi = cfg.rois[r];
    roi_report rr;
    rr.name = roi.name;
    for (arm a : all_arms) {
      if (std::find(roi.arms.begin(), roi.arms.end(), a) == roi.arms.end()) continue;
      strategy_report s;
      s.strategy = a;
      for (const auto& f : folds) s.predictions.push_back(f.rois[r].arms[static_cast<int>(a)]);
      recompute_metrics(s);
      rr.strategies.push_back(std::move(s));
    }
    for (const auto& f : folds) {
      const auto& fr = f.rois[r];
      fold_summary fs{f.subject_id, fr.threshold, fr.candidates, {}, fr.skipped};
      for (const auto& lm : fr.landmarks) fs.landmarks.push_back(lm.coord);
      rr.folds.push_back(std::move(fs));
    }
    rep.rois.push_back(std::move(rr));
  }
  if (timings) {
    timings->threads = threads;
    timings->edge_maps_s = std::chrono::duration<double>(t1 - t0).count();
    timings->folds_s = std::chrono::duration<double>(t2 - t1).count();
    timings->fold_s = std::move(fold_s);
  }
  return rep;
}

} // namespace patchtraj
