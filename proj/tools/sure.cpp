#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sure/cli/commands.hpp"

namespace fs = std::filesystem;
using namespace sure;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("config " + path + " is not valid JSON: " + e.what());
  }
}

/// Flags shared by match, eval and calib that adjust the checkpoint's
/// inference switches.
struct InferenceFlags {
  std::string config;
  std::optional<double> tau_c, q_a, q_e;
  bool no_filter = false;
  bool absolute = false;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--config", config,
                    "JSON file with tau_c, q_a, q_e, filtering_enabled, absolute_thresholds");
    app->add_option("--tau-c", tau_c, "coarse confidence threshold");
    app->add_option("--qa", q_a, "aleatoric quantile level");
    app->add_option("--qe", q_e, "epistemic quantile level");
    app->add_flag("--no-filter", no_filter, "disable uncertainty filtering");
    app->add_flag("--absolute", absolute,
                  "read --qa/--qe as uncertainty thresholds, not quantiles");
    app->add_option("--seed", seed, "seed for randomized steps");
  }

  cli::MatchOverrides overrides() const {
    cli::MatchOverrides o;
    if (!config.empty()) {
      const auto j = read_json_file(config);
      if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
      if (j.contains("tau_c")) o.tau_c = j.at("tau_c").get<double>();
      if (j.contains("q_a")) o.q_a = j.at("q_a").get<double>();
      if (j.contains("q_e")) o.q_e = j.at("q_e").get<double>();
      if (j.contains("filtering_enabled")) o.no_filter = !j.at("filtering_enabled").get<bool>();
      if (j.contains("absolute_thresholds")) o.absolute = j.at("absolute_thresholds").get<bool>();
    }
    if (tau_c) o.tau_c = tau_c;
    if (q_a) o.q_a = q_a;
    if (q_e) o.q_e = q_e;
    if (no_filter) o.no_filter = true;
    if (absolute) o.absolute = true;
    return o;
  }
};

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path, std::ios::trunc);
  if (!file) throw IoError("cannot open " + path + " for writing");
  return file;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SURE semi-dense matcher with evidential uncertainty"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate synthetic homography pairs");
  cli::SynthArgs sa;
  std::string synth_difficulty = "easy", synth_out;
  synth->add_option("--seed", sa.seed, "base seed");
  synth->add_option("--count", sa.count, "number of pairs")->required();
  synth->add_option("--difficulty", synth_difficulty, "easy, medium or hard");
  synth->add_option("--size", sa.image_size, "image side in pixels (multiple of 8)");
  synth->add_option("--out", synth_out, "output directory")->required();

  // train
  auto* trn = app.add_subcommand("train", "train a model on a synthetic manifest");
  std::string train_config, train_manifest, train_out, train_log;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> t_seed;
  std::optional<std::size_t> t_epochs, t_batch, t_neighbors;
  std::optional<double> t_lr, t_tau_c, t_qa, t_qe;
  std::optional<std::string> t_head, t_supervision;
  bool t_no_fusion = false, t_no_filter = false;
  trn->add_option("--config", train_config, "JSON run config");
  trn->add_option("--manifest", train_manifest, "dataset manifest")->required();
  trn->add_option("--out", train_out, "checkpoint path")->required();
  trn->add_option("--log", train_log, "JSON-lines run log (default <out>.log.jsonl)");
  trn->add_option("--seed", t_seed, "training seed");
  trn->add_option("--epochs", t_epochs, "epochs");
  trn->add_option("--batch-size", t_batch, "pairs per step");
  trn->add_option("--lr", t_lr, "learning rate");
  trn->add_option("--neighbor-pairs", t_neighbors, "adjacent-cell fine pairs per image pair");
  trn->add_option("--head-mode", t_head, "direct_l2, coord_l2, coord_kl or evidential");
  trn->add_option("--fine-supervision", t_supervision, "teacher, predicted or mixed");
  trn->add_flag("--no-fusion", t_no_fusion, "use the 1/8 map alone for fine features");
  trn->add_flag("--no-filter", t_no_filter, "store filtering disabled in the checkpoint");
  trn->add_option("--tau-c", t_tau_c, "coarse confidence threshold");
  trn->add_option("--qa", t_qa, "aleatoric quantile level");
  trn->add_option("--qe", t_qe, "epistemic quantile level");
  trn->add_option("--set", sets, "override any config field, key=json_value");

  // match
  auto* mat = app.add_subcommand("match", "match two PGM images");
  std::string match_ckpt, match_a, match_b, match_out;
  InferenceFlags match_flags;
  mat->add_option("--checkpoint", match_ckpt, "checkpoint")->required();
  mat->add_option("image_a", match_a, "first image (PGM)")->required();
  mat->add_option("image_b", match_b, "second image (PGM)")->required();
  mat->add_option("--out", match_out, "correspondence file (default stdout)");
  match_flags.add(mat);

  // eval
  auto* ev = app.add_subcommand("eval", "homography AUC and uncertainty metrics on a manifest");
  std::string eval_ckpt, eval_manifest, eval_csv, eval_json;
  std::optional<std::string> eval_ablate;
  cli::EvalArgs ea;
  InferenceFlags eval_flags;
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint")->required();
  ev->add_option("--manifest", eval_manifest, "dataset manifest")->required();
  ev->add_option("--thresholds", ea.thresholds, "AUC thresholds in pixels")->delimiter(',');
  ev->add_option("--ablate", eval_ablate,
                 "filter, no_filter, fusion, no_fusion or the checkpoint's head mode");
  ev->add_option("--timing-runs", ea.timing_runs, "matches timed per pair (median reported)");
  ev->add_option("--out", eval_csv, "per-pair CSV");
  ev->add_option("--json", eval_json, "summary JSON path (default stdout)");
  eval_flags.add(ev);

  // calib
  auto* cal = app.add_subcommand("calib", "uncertainty versus end-point error");
  std::string calib_ckpt, calib_manifest, calib_json;
  cli::CalibArgs ca;
  InferenceFlags calib_flags;
  cal->add_option("--checkpoint", calib_ckpt, "checkpoint")->required();
  cal->add_option("--manifest", calib_manifest, "dataset manifest")->required();
  cal->add_option("--top-k", ca.top_k, "flag this many highest-u_e matches");
  cal->add_option("--out", ca.csv_out, "per-match CSV");
  cal->add_option("--json", calib_json, "summary JSON path (default stdout)");
  calib_flags.add(cal);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kValidation;
  }

  try {
    if (*synth) {
      sa.difficulty = train::parse_difficulty(synth_difficulty);
      sa.out_dir = synth_out;
      const auto m = cli::cmd_synth(sa);
      std::cout << "wrote " << m.pairs.size() << " pairs to " << synth_out << "\n";
    } else if (*trn) {
      json j = train_config.empty() ? json::object() : read_json_file(train_config);
      if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
      for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + s + "'");
        json v;
        try {
          v = json::parse(s.substr(eq + 1));
        } catch (const json::parse_error&) {
          v = s.substr(eq + 1);
        }
        j[s.substr(0, eq)] = v;
      }
      if (t_seed) j["seed"] = *t_seed;
      if (t_epochs) j["epochs"] = *t_epochs;
      if (t_batch) j["batch_size"] = *t_batch;
      if (t_lr) j["lr"] = *t_lr;
      if (t_neighbors) j["neighbor_pairs"] = *t_neighbors;
      if (t_head) j["head_mode"] = *t_head;
      if (t_supervision) j["fine_supervision"] = *t_supervision;
      if (t_no_fusion) j["fusion_enabled"] = false;
      if (t_no_filter) j["filtering_enabled"] = false;
      if (t_tau_c) j["tau_c"] = *t_tau_c;
      if (t_qa) j["q_a"] = *t_qa;
      if (t_qe) j["q_e"] = *t_qe;
      cli::TrainArgs ta;
      ta.config = cli::from_json(j);
      ta.manifest = train_manifest;
      ta.out_checkpoint = train_out;
      if (!train_log.empty()) ta.run_log = fs::path(train_log);
      ta.progress = &std::cerr;
      const auto r = cli::cmd_train(ta);
      std::cout << "trained " << r.epochs.size() << " epochs; checkpoint " << train_out << "\n";
    } else if (*mat) {
      std::ofstream file;
      auto& out = open_out(match_out, file);
      cli::cmd_match(match_ckpt, match_a, match_b, match_flags.overrides(), out);
    } else if (*ev) {
      ea.overrides = eval_flags.overrides();
      ea.ablate = eval_ablate;
      ea.seed = eval_flags.seed;
      if (!eval_csv.empty()) ea.csv_out = fs::path(eval_csv);
      std::ofstream file;
      auto& out = open_out(eval_json, file);
      cli::cmd_eval(eval_ckpt, eval_manifest, ea, out);
    } else if (*cal) {
      ca.overrides = calib_flags.overrides();
      std::ofstream file;
      auto& out = open_out(calib_json, file);
      cli::cmd_calib(calib_ckpt, calib_manifest, ca, out);
    }
  } catch (const cli::VersionMismatch& e) {
    std::cerr << "error: checkpoint version " << e.found_version << ", CLI version "
              << e.expected_version << "; refusing to load\n";
    return cli::kValidation;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::exit_code_for(e);
  }
  return cli::kOk;
}
