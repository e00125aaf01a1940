#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sure/cli/checkpoint.hpp"
#include "sure/cli/config.hpp"
#include "sure/cli/manifest.hpp"
#include "sure/cli/pgm.hpp"
#include "sure/geometry/correspondence_io.hpp"
#include "sure/model/evaluate.hpp"
#include "sure/train/trainer.hpp"

namespace sure::cli {

namespace fs = std::filesystem;

using Real = float;

enum ExitCode : int { kOk = 0, kValidation = 2, kNumeric = 3, kIo = 4 };

/// Maps the library's exception families onto process exit codes.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return kIo;
  if (dynamic_cast<const NumericError*>(&e)) return kNumeric;
  return kValidation;
}

// ---- synth ------------------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 0;
  std::size_t count = 0;
  train::Difficulty difficulty = train::Difficulty::easy;
  std::size_t image_size = 64;
  fs::path out_dir;
};

inline std::string pair_file(std::size_t k, char side) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%05zu_%c.pgm", k, side);
  return buf;
}

inline void create_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

/// Pair k uses seed derive_seed(seed, k). Writes the PGMs and manifest.json.
inline Manifest cmd_synth(const SynthArgs& a) {
  if (a.image_size == 0 || a.image_size % 8 != 0)
    throw InvalidArgument("image size must be a positive multiple of 8");
  create_dir(a.out_dir);
  Manifest m;
  m.seed = a.seed;
  m.difficulty = a.difficulty;
  m.image_size = a.image_size;
  const auto opts = synth_options(m);
  for (std::size_t k = 0; k < a.count; ++k) {
    const auto s = derive_seed(a.seed, k);
    const auto p = train::generate_pair(s, a.image_size, a.difficulty, opts);
    ManifestPair mp{k, s, pair_file(k, 'a'), pair_file(k, 'b'), p.h_true.rows()};
    write_pgm(a.out_dir / mp.image_a, p.image_a);
    write_pgm(a.out_dir / mp.image_b, p.image_b);
    m.pairs.push_back(mp);
  }
  write_text(a.out_dir / "manifest.json", to_json(m).dump(2) + "\n");
  return m;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  RunConfig config;
  fs::path manifest;
  fs::path out_checkpoint;
  std::optional<fs::path> run_log;  // defaults to <checkpoint>.log.jsonl
  std::ostream* progress = nullptr;
};

struct TrainResult {
  std::vector<train::EpochReport> epochs;
  fs::path run_log;
};

inline json epoch_json(const train::EpochReport& r) {
  return {{"epoch", r.epoch},         {"l_c", r.mean_coarse},  {"l_f", r.mean_fine},
          {"total", r.mean_total},    {"grad_norm", r.mean_grad_norm},
          {"steps", r.steps},         {"skipped_steps", r.skipped_steps},
          {"wall_ms", r.wall_ms}};
}

inline TrainResult cmd_train(const TrainArgs& a) {
  a.config.validate();
  const auto manifest = read_manifest(a.manifest);
  const auto data = load_pairs(manifest, a.manifest.parent_path());
  TrainResult res;
  res.run_log = a.run_log ? *a.run_log : fs::path(a.out_checkpoint.string() + ".log.jsonl");
  std::ofstream log(res.run_log, std::ios::trunc);
  if (!log) throw IoError("cannot open run log " + res.run_log.string());

  auto m = model::Model<Real>::init(a.config.model_config(), a.config.model_seed());
  train::TrainState st;
  for (std::size_t e = 0; e < a.config.train.epochs; ++e) {
    train::EpochReport rep;
    try {
      rep = train::train_epoch(m, st, data, a.config.train);
    } catch (const NumericError& err) {
      log << json{{"epoch", e}, {"error", err.what()}}.dump() << '\n';
      log.flush();
      throw;
    }
    res.epochs.push_back(rep);
    log << epoch_json(rep).dump() << '\n';
    log.flush();
    if (a.progress) *a.progress << epoch_json(rep).dump() << '\n';
  }
  save_checkpoint(a.out_checkpoint, make_checkpoint(m, {a.config, st.epochs_done}));
  return res;
}

// ---- match ------------------------------------------------------------------

/// Inference-time overrides of the checkpoint's ablation switches.
struct MatchOverrides {
  std::optional<double> tau_c;
  std::optional<double> q_a;
  std::optional<double> q_e;
  bool no_filter = false;
  bool absolute = false;

  RunConfig apply(RunConfig c) const {
    if (tau_c) c.tau_c = *tau_c;
    if (q_a) c.q_a = *q_a;
    if (q_e) c.q_e = *q_e;
    if (no_filter) c.filtering_enabled = false;
    if (absolute) c.absolute_thresholds = true;
    c.validate();
    return c;
  }
};

struct LoadedModel {
  model::Model<Real> model;
  TrainedModel info;
};

inline LoadedModel load_model(const fs::path& checkpoint) {
  const auto ck = load_checkpoint(checkpoint);
  TrainedModel info;
  auto m = restore_model<Real>(ck, &info);
  return {std::move(m), info};
}

struct MatchResult {
  std::vector<std::string> header;
  std::vector<geo::MatchRecord> records;
  std::size_t coarse_count = 0;
  std::size_t refined_count = 0;
};

inline geo::MatchRecord to_record(const evi::MatchWithUncertainty& m) {
  return {m.correspondence(), m.u_a, m.u_e};
}

/// Matches two images, padding each to a multiple of 8 by border replication.
/// Matches whose endpoints fall in the padding are dropped.
inline MatchResult match_images(LoadedModel& lm, const Image& a, const Image& b,
                                const MatchOverrides& ov) {
  const auto cfg = ov.apply(lm.info.config);
  const auto pa = pad_to_multiple(a), pb = pad_to_multiple(b);
  if (pa.image.width != pb.image.width || pa.image.height != pb.image.height)
    throw InvalidArgument("images must have the same size after padding (" +
                          std::to_string(pa.image.width) + "x" + std::to_string(pa.image.height) +
                          " vs " + std::to_string(pb.image.width) + "x" +
                          std::to_string(pb.image.height) + ")");
  const auto out = model::match(lm.model, pa.image.to_tensor<Real>(), pb.image.to_tensor<Real>(),
                                cfg.match_options());
  auto inside = [](geo::Point2 p, const Image& img) {
    return p.x >= 0.0 && p.y >= 0.0 && p.x < static_cast<double>(img.width) &&
           p.y < static_cast<double>(img.height);
  };
  MatchResult r;
  r.coarse_count = out.coarse_count;
  r.refined_count = out.all.size();
  for (const auto& m : out.kept)
    if (inside(m.a, a) && inside(m.b, b)) r.records.push_back(to_record(m));
  char buf[160];
  r.header.push_back("sure match");
  r.header.push_back("config_hash " + config_hash(cfg));
  r.header.push_back("checkpoint_version " + std::to_string(kFormatVersion));
  std::snprintf(buf, sizeof buf, "image_a %zux%zu pad_right %zu pad_bottom %zu", a.width, a.height,
                pa.pad_right, pa.pad_bottom);
  r.header.push_back(buf);
  std::snprintf(buf, sizeof buf, "image_b %zux%zu pad_right %zu pad_bottom %zu", b.width, b.height,
                pb.pad_right, pb.pad_bottom);
  r.header.push_back(buf);
  std::snprintf(buf, sizeof buf, "tau_c %.6g q_a %.6g q_e %.6g filtering %s", cfg.tau_c, cfg.q_a,
                cfg.q_e, cfg.filtering_enabled ? "on" : "off");
  r.header.push_back(buf);
  std::snprintf(buf, sizeof buf, "coarse %zu before_filter %zu after_filter %zu", out.coarse_count,
                out.all.size(), r.records.size());
  r.header.push_back(buf);
  r.header.push_back("columns xA yA xB yB confidence u_a u_e");
  return r;
}

inline MatchResult cmd_match(const fs::path& checkpoint, const fs::path& image_a,
                             const fs::path& image_b, const MatchOverrides& ov, std::ostream& out) {
  auto lm = load_model(checkpoint);
  const auto r = match_images(lm, read_pgm(image_a), read_pgm(image_b), ov);
  geo::write_correspondences(out, r.header, r.records);
  if (!out) throw IoError("failed to write correspondences");
  return r;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::vector<double> thresholds{3.0, 5.0, 10.0};
  std::optional<std::string> ablate;
  MatchOverrides overrides;
  std::size_t timing_runs = 10;
  std::uint64_t seed = 0;
  std::optional<fs::path> csv_out;
};

/// `filter` / `no_filter` toggle filtering; a head mode or `no_fusion` must
/// describe the checkpoint, since those switches change the trained weights.
inline RunConfig apply_ablation(RunConfig c, const std::string& mode) {
  if (mode == "no_filter") {
    c.filtering_enabled = false;
  } else if (mode == "filter") {
    c.filtering_enabled = true;
  } else if (mode == "no_fusion" || mode == "fusion") {
    if (c.fusion_enabled != (mode == "fusion"))
      throw InvalidArgument("--ablate " + mode + " needs a checkpoint trained with fusion_enabled " +
                            (mode == "fusion" ? "true" : "false"));
  } else {
    const auto h = model::parse_head_mode(mode);
    if (h != c.head_mode)
      throw InvalidArgument("--ablate " + mode + " needs a checkpoint trained with head_mode " + mode +
                            "; this one uses " + model::to_string(c.head_mode));
  }
  return c;
}

inline std::string threshold_key(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", t);
  return buf;
}

inline json nullable(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json eval_json(const model::EvalReport& r, const RunConfig& cfg,
                      const std::vector<double>& thresholds) {
  json auc = json::object();
  for (double t : thresholds) auc[threshold_key(t)] = r.auc.auc.at(t);
  std::size_t failed = 0;
  for (const auto& p : r.pairs) failed += p.homography_ok ? 0 : 1;
  return {{"pairs", r.pairs.size()},
          {"failed_pairs", failed},
          {"thresholds", thresholds},
          {"auc", auc},
          {"mean_epe", nullable(r.mean_epe)},
          {"mean_center_epe", nullable(r.mean_center_epe)},
          {"spearman_ua_epe", nullable(r.spearman_ua)},
          {"spearman_ue_epe", nullable(r.spearman_ue)},
          {"median_match_ms", r.median_match_ms},
          {"head_mode", model::to_string(cfg.head_mode)},
          {"fusion_enabled", cfg.fusion_enabled},
          {"filtering_enabled", cfg.filtering_enabled},
          {"config_hash", config_hash(cfg)}};
}

inline void validate_eval_json(const json& j) {
  for (const char* k : {"pairs", "failed_pairs", "thresholds", "auc", "mean_epe", "mean_center_epe",
                        "spearman_ua_epe", "spearman_ue_epe", "median_match_ms", "head_mode",
                        "fusion_enabled", "filtering_enabled", "config_hash"})
    if (!j.contains(k)) throw StateError(std::string("eval report lacks '") + k + "'");
  for (const auto& t : j.at("thresholds"))
    if (!j.at("auc").contains(threshold_key(t.get<double>())))
      throw StateError("eval report lacks an AUC entry for a threshold");
  for (const auto& [k, v] : j.at("auc").items())
    if (!v.is_number() || v.get<double>() < 0.0 || v.get<double>() > 1.0)
      throw StateError("eval report AUC '" + k + "' is outside [0, 1]");
}

inline const char* kEvalCsvHeader =
    "index,seed,coarse_matches,refined_matches,kept_matches,homography_ok,corner_error,mean_epe,"
    "mean_center_epe,match_ms";

inline std::string eval_csv(const model::EvalReport& r) {
  std::ostringstream os;
  os << kEvalCsvHeader << '\n';
  char buf[256];
  for (std::size_t k = 0; k < r.pairs.size(); ++k) {
    const auto& p = r.pairs[k];
    std::snprintf(buf, sizeof buf, "%zu,%llu,%zu,%zu,%zu,%d,%.9g,%.9g,%.9g,%.4f", k,
                  static_cast<unsigned long long>(p.seed), p.coarse_matches, p.refined_matches,
                  p.kept_matches, p.homography_ok ? 1 : 0, p.corner_error, p.mean_epe,
                  p.mean_center_epe, p.match_ms);
    os << buf << '\n';
  }
  return os.str();
}

/// Every row has as many fields as the header; returns the row count.
inline std::size_t validate_csv(const std::string& text, const std::string& header) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != header) throw StateError("CSV header mismatch");
  const auto cols = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')) + 1;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1 != cols)
      throw StateError("CSV row " + std::to_string(rows + 1) + " has the wrong field count");
    ++rows;
  }
  return rows;
}

struct EvalResult {
  model::EvalReport report;
  json summary;
};

inline EvalResult evaluate_loaded(LoadedModel& lm, const std::vector<train::SyntheticPair>& data,
                                  const EvalArgs& a) {
  auto cfg = a.overrides.apply(lm.info.config);
  if (a.ablate) cfg = apply_ablation(cfg, *a.ablate);
  model::EvalOptions eo;
  eo.match = cfg.match_options();
  eo.thresholds = a.thresholds;
  eo.timing_runs = a.timing_runs;
  eo.seed = a.seed;
  auto rep = model::evaluate(lm.model, data, eo);
  auto summary = eval_json(rep, cfg, a.thresholds);
  validate_eval_json(json::parse(summary.dump()));
  return {std::move(rep), std::move(summary)};
}

inline EvalResult cmd_eval(const fs::path& checkpoint, const fs::path& manifest_path,
                           const EvalArgs& a, std::ostream& json_out) {
  auto lm = load_model(checkpoint);
  const auto data = load_pairs(read_manifest(manifest_path), manifest_path.parent_path());
  auto res = evaluate_loaded(lm, data, a);
  if (a.csv_out) {
    const auto csv = eval_csv(res.report);
    validate_csv(csv, kEvalCsvHeader);
    write_text(*a.csv_out, csv);
  }
  json_out << res.summary.dump(2) << '\n';
  return res;
}

// ---- calib ------------------------------------------------------------------

struct CalibTriple {
  std::size_t pair = 0;
  std::size_t match = 0;
  double u_a = 0.0;
  double u_e = 0.0;
  double epe = 0.0;
  bool top_k = false;
};

/// 3x3 Spearman matrix over {u_a, u_e, epe}; undefined entries are null with
/// a reason.
inline json spearman_matrix(const std::vector<double>& ua, const std::vector<double>& ue,
                            const std::vector<double>& epe) {
  const std::vector<std::pair<std::string, const std::vector<double>*>> vars{
      {"u_a", &ua}, {"u_e", &ue}, {"epe", &epe}};
  auto constant = [](const std::vector<double>& v) {
    return std::adjacent_find(v.begin(), v.end(), std::not_equal_to<>()) == v.end();
  };
  json names = json::array(), matrix = json::array(), reasons = json::object();
  for (const auto& [n, v] : vars) names.push_back(n);
  for (const auto& [ni, vi] : vars) {
    json row = json::array();
    for (const auto& [nj, vj] : vars) {
      std::string why;
      if (vi->size() < 3)
        why = "fewer than 3 matches";
      else if (constant(*vi))
        why = ni + " is constant";
      else if (constant(*vj))
        why = nj + " is constant";
      if (!why.empty()) {
        row.push_back(nullptr);
        reasons[ni + "," + nj] = why;
        continue;
      }
      const auto s = model::spearman_or_null(*vi, *vj);
      row.push_back(nullable(s));
      if (!s) reasons[ni + "," + nj] = "undefined rank correlation";
    }
    matrix.push_back(row);
  }
  return {{"variables", names}, {"matrix", matrix}, {"undefined", reasons}};
}

/// Flags the k matches with the highest u_e (earlier matches win ties).
inline void flag_top_k(std::vector<CalibTriple>& t, std::size_t k) {
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return t[x].u_e > t[y].u_e; });
  for (std::size_t r = 0; r < std::min(k, order.size()); ++r) t[order[r]].top_k = true;
}

inline const char* kCalibCsvHeader = "pair,match,u_a,u_e,epe,top_k";

inline std::string calib_csv(const std::vector<CalibTriple>& t) {
  std::ostringstream os;
  os << kCalibCsvHeader << '\n';
  char buf[160];
  for (const auto& x : t) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%d", x.pair, x.match, x.u_a, x.u_e, x.epe,
                  x.top_k ? 1 : 0);
    os << buf << '\n';
  }
  return os.str();
}

inline json calib_summary(std::vector<CalibTriple>& t, std::size_t top_k) {
  flag_top_k(t, top_k);
  std::vector<double> ua, ue, epe;
  for (const auto& x : t) {
    ua.push_back(x.u_a);
    ue.push_back(x.u_e);
    epe.push_back(x.epe);
  }
  return {{"matches", t.size()}, {"top_k", std::min(top_k, t.size())},
          {"spearman", spearman_matrix(ua, ue, epe)}};
}

struct CalibArgs {
  std::size_t top_k = 50;
  MatchOverrides overrides;
  std::optional<fs::path> csv_out;
};

/// Uses every refined match, before uncertainty filtering.
inline std::vector<CalibTriple> calibration_triples(LoadedModel& lm,
                                                    const std::vector<train::SyntheticPair>& data,
                                                    const MatchOverrides& ov) {
  auto cfg = ov.apply(lm.info.config);
  cfg.filtering_enabled = false;
  std::vector<CalibTriple> out;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const auto& p = data[k];
    const auto mo = model::match(lm.model, p.image_a.to_tensor<Real>(), p.image_b.to_tensor<Real>(),
                                 cfg.match_options());
    for (std::size_t i = 0; i < mo.all.size(); ++i) {
      const auto w = p.h_true.apply(mo.all[i].a);
      const double e = w ? geo::distance(mo.all[i].b, *w) : std::numeric_limits<double>::infinity();
      out.push_back({k, i, mo.all[i].u_a, mo.all[i].u_e, e, false});
    }
  }
  return out;
}

inline json cmd_calib(const fs::path& checkpoint, const fs::path& manifest_path, const CalibArgs& a,
                      std::ostream& json_out) {
  auto lm = load_model(checkpoint);
  const auto data = load_pairs(read_manifest(manifest_path), manifest_path.parent_path());
  auto triples = calibration_triples(lm, data, a.overrides);
  auto summary = calib_summary(triples, a.top_k);
  if (a.csv_out) {
    const auto csv = calib_csv(triples);
    validate_csv(csv, kCalibCsvHeader);
    write_text(*a.csv_out, csv);
  }
  json_out << summary.dump(2) << '\n';
  return summary;
}

}  // namespace sure::cli
