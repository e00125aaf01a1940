#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "sure/cli/commands.hpp"
#include "test_util.hpp"

using namespace sure;
using namespace sure::cli;
using namespace sure::testing;

namespace {

fs::path scratch(const std::string& name) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = fs::temp_directory_path() / "sure_cli_tests" /
             (std::string(info->test_suite_name()) + "." + info->name()) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig tiny_run_config() {
  RunConfig c;
  c.backbone = {4, 8, 8, 8, true};
  c.c_fine = 8;
  c.head_hidden = 8;
  c.train.image_size = 32;
  c.train.epochs = 1;
  c.train.neighbor_pairs = 4;
  c.tau_c = 0.0;
  return c;
}

std::vector<std::uint8_t> slurp(const fs::path& p) { return read_file(p); }

std::string text_of(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int run_tool(const std::string& args) {
  const std::string cmd = std::string(SURE_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// A synthesized dataset and a checkpoint trained on it, shared by the
/// inference tests.
struct Trained {
  fs::path dir, manifest, checkpoint;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained r;
    r.dir = fs::temp_directory_path() / "sure_cli_tests" / "shared";
    fs::remove_all(r.dir);
    SynthArgs sa{21, 3, train::Difficulty::easy, 32, r.dir / "data"};
    cmd_synth(sa);
    r.manifest = r.dir / "data" / "manifest.json";
    r.checkpoint = r.dir / "model.ckpt";
    cmd_train({tiny_run_config(), r.manifest, r.checkpoint, std::nullopt, nullptr});
    return r;
  }();
  return t;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  auto c = tiny_run_config();
  c.train.lr = 3e-4;
  c.head_mode = model::HeadMode::coord_kl;
  c.fusion_enabled = false;
  c.q_e = 0.8;
  const auto back = from_json(json::parse(to_json(c).dump()));
  EXPECT_EQ(canonical(back), canonical(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_NE(config_hash(RunConfig{}), config_hash(c));
}

TEST(Config, PartialJsonKeepsBase) {
  const auto c = from_json(json{{"epochs", 3}}, tiny_run_config());
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.c_fine, 8u);
}

TEST(Config, AbsoluteModeAcceptsThresholdsAboveOne) {
  EXPECT_THROW(from_json(json{{"q_a", 3.0}}), InvalidArgument);
  const auto c = from_json(json{{"q_a", 3.0}, {"absolute_thresholds", true}});
  EXPECT_TRUE(c.match_options().absolute_thresholds);
  EXPECT_DOUBLE_EQ(c.match_options().q_a, 3.0);
  EXPECT_THROW(from_json(json{{"q_e", -1.0}, {"absolute_thresholds", true}}), InvalidArgument);
}

TEST(Config, RejectsUnknownKeysAndWrongTypes) {
  EXPECT_THROW(from_json(json{{"learning_rate", 0.1}}), InvalidArgument);
  EXPECT_THROW(from_json(json{{"lr", "fast"}}), InvalidArgument);
  EXPECT_THROW(from_json(json{{"epochs", -1}}), InvalidArgument);
  EXPECT_THROW(from_json(json{{"fusion_enabled", 1}}), InvalidArgument);
  EXPECT_THROW(from_json(json{{"head_mode", "mystery"}}), InvalidArgument);
  EXPECT_THROW(from_json(json{{"q_a", 0.0}}), InvalidArgument);
  EXPECT_THROW(from_json(json::array()), InvalidArgument);
}

TEST(Checkpoint, RandomTablesRoundTripBitExact) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Checkpoint ck;
    ck.config_json = to_json(tiny_run_config()).dump();
    const auto n = rng.below(6);
    for (std::size_t k = 0; k < n; ++k) {
      std::vector<std::size_t> shape;
      for (std::size_t d = 0; d < rng.below(4); ++d) shape.push_back(1 + rng.below(5));
      std::size_t count = 1;
      for (auto d : shape) count *= d;
      std::vector<double> v(count);
      for (auto& x : v) x = rng.normal();
      ck.tensors["t" + std::to_string(k)] = to_record<double>(v, shape);
    }
    EXPECT_EQ(deserialize(serialize(ck)), ck);
  }
}

TEST(Checkpoint, ModelRoundTripThroughFile) {
  const auto dir = scratch("ck");
  const auto cfg = tiny_run_config();
  auto m = model::Model<float>::init(cfg.model_config(), 9);
  m.freeze_norms();
  save_checkpoint(dir / "m.ckpt", make_checkpoint(m, {cfg, 4}));
  EXPECT_FALSE(fs::exists(dir / "m.ckpt.tmp"));
  TrainedModel info;
  auto back = restore_model<float>(load_checkpoint(dir / "m.ckpt"), &info);
  EXPECT_EQ(info.epochs_done, 4u);
  EXPECT_EQ(canonical(info.config), canonical(cfg));
  EXPECT_TRUE(back.norms_frozen());
  std::vector<std::vector<float>> a, b;
  m.visit([&](const std::string&, Tensor<float>& t) { a.push_back(t.values()); });
  back.visit([&](const std::string&, Tensor<float>& t) { b.push_back(t.values()); });
  EXPECT_EQ(a, b);
}

TEST(Checkpoint, CorruptionAndVersionErrors) {
  Checkpoint ck;
  ck.config_json = "{}";
  ck.tensors["w"] = to_record<float>(std::vector<float>{1, 2, 3}, {3});
  const auto good = serialize(ck);

  auto flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  EXPECT_THROW(deserialize(flipped), IoError);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize(bad_magic), IoError);

  auto truncated = good;
  truncated.resize(5);
  EXPECT_THROW(deserialize(truncated), IoError);

  auto newer = ck;
  newer.version = kFormatVersion + 1;
  try {
    deserialize(serialize(newer));
    FAIL() << "expected VersionMismatch";
  } catch (const VersionMismatch& e) {
    EXPECT_EQ(e.found_version, kFormatVersion + 1);
    EXPECT_EQ(e.expected_version, kFormatVersion);
  }
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(load_checkpoint(scratch("none") / "absent.ckpt"), IoError);
}

TEST(Pgm, BinaryRoundTripIsExact) {
  const auto dir = scratch("pgm");
  Rng rng(2);
  Image img(13, 7);
  for (auto& v : img.pixels) v = static_cast<float>(rng.below(256)) / 255.0f;
  write_pgm(dir / "x.pgm", img);
  EXPECT_EQ(read_pgm(dir / "x.pgm"), img);
}

TEST(Pgm, ReadsAsciiWithComments) {
  const auto dir = scratch("pgm");
  std::ofstream(dir / "a.pgm") << "P2\n# note\n2 2\n255\n0 255\n51 102\n";
  const auto img = read_pgm(dir / "a.pgm");
  ASSERT_EQ(img.width, 2u);
  EXPECT_EQ(img.at(1, 0), 1.0f);
  EXPECT_FLOAT_EQ(img.at(0, 1), 0.2f);
}

TEST(Pgm, MalformedFilesAreIoErrors) {
  const auto dir = scratch("pgm");
  std::ofstream(dir / "p6.pgm") << "P6\n1 1\n255\nabc";
  std::ofstream(dir / "deep.pgm") << "P2\n1 1\n65535\n7\n";
  std::ofstream(dir / "short.pgm") << "P5\n4 4\n255\nab";
  for (const char* f : {"p6.pgm", "deep.pgm", "short.pgm", "absent.pgm"})
    EXPECT_THROW(read_pgm(dir / f), IoError) << f;
}

TEST(Pgm, PaddingReplicatesBorders) {
  Rng rng(3);
  Image img(13, 10);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  const auto p = pad_to_multiple(img);
  EXPECT_EQ(p.image.width, 16u);
  EXPECT_EQ(p.image.height, 16u);
  EXPECT_EQ(p.pad_right, 3u);
  EXPECT_EQ(p.pad_bottom, 6u);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x)
      EXPECT_EQ(p.image.at(x, y), img.at(std::min<std::size_t>(x, 12), std::min<std::size_t>(y, 9)));
  EXPECT_EQ(pad_to_multiple(p.image).image, p.image);
  EXPECT_THROW(pad_to_multiple(Image(0, 0)), InvalidArgument);
}

TEST(Manifest, JsonRoundTrip) {
  const auto dir = scratch("m");
  const auto m = cmd_synth({5, 2, train::Difficulty::hard, 32, dir});
  const auto back = read_manifest(dir / "manifest.json");
  EXPECT_EQ(to_json(back), to_json(m));
}

TEST(Manifest, FieldErrorsNameTheField) {
  const auto dir = scratch("m");
  const auto good = to_json(cmd_synth({5, 1, train::Difficulty::easy, 32, dir}));
  auto expect_error = [](json j, const std::string& needle) {
    try {
      manifest_from_json(j);
      ADD_FAILURE() << "accepted manifest missing " << needle;
    } catch (const InvalidArgument& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  auto j = good;
  j.erase("pairs");
  expect_error(j, "pairs");
  j = good;
  j["image_size"] = 30;
  expect_error(j, "image_size");
  j = good;
  j["difficulty"] = "brutal";
  expect_error(j, "difficulty");
  j = good;
  j["pairs"][0]["h_true"] = json::array({1, 0, 0});
  expect_error(j, "h_true");
  j = good;
  j["count"] = 4;
  expect_error(j, "count");
  j = good;
  j["pairs"][0]["seed"] = -3;
  expect_error(j, "seed");
}

TEST(Synth, ZeroCountWritesEmptyManifest) {
  const auto dir = scratch("s");
  const auto m = cmd_synth({1, 0, train::Difficulty::easy, 32, dir});
  EXPECT_TRUE(m.pairs.empty());
  EXPECT_TRUE(read_manifest(dir / "manifest.json").pairs.empty());
}

TEST(Synth, SameSeedSameBytes) {
  const auto a = scratch("a"), b = scratch("b");
  cmd_synth({7, 3, train::Difficulty::medium, 32, a});
  cmd_synth({7, 3, train::Difficulty::medium, 32, b});
  for (const auto& e : fs::directory_iterator(a))
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path();
}

TEST(Synth, ManifestRegeneratesImagesExactly) {
  const auto dir = scratch("s");
  const auto m = cmd_synth({8, 4, train::Difficulty::hard, 32, dir});
  const auto loaded = load_pairs(m, dir);
  for (std::size_t k = 0; k < m.pairs.size(); ++k) {
    const auto re = regenerate_pair(m, m.pairs[k]);
    EXPECT_EQ(re.image_a, loaded[k].image_a);
    EXPECT_EQ(re.image_b, loaded[k].image_b);
  }
}

TEST(Synth, RejectsBadSize) {
  EXPECT_THROW(cmd_synth({1, 1, train::Difficulty::easy, 60, scratch("s")}), InvalidArgument);
}

TEST(Train, ZeroEpochsStillWritesCheckpoint) {
  const auto dir = scratch("t");
  cmd_synth({3, 1, train::Difficulty::easy, 32, dir});
  auto cfg = tiny_run_config();
  cfg.train.epochs = 0;
  const auto res = cmd_train({cfg, dir / "manifest.json", dir / "z.ckpt", std::nullopt, nullptr});
  EXPECT_TRUE(res.epochs.empty());
  EXPECT_TRUE(text_of(res.run_log).empty());
  TrainedModel info;
  restore_model<float>(load_checkpoint(dir / "z.ckpt"), &info);
  EXPECT_EQ(info.epochs_done, 0u);
}

TEST(Train, RunLogHasOneLinePerEpoch) {
  const auto& t = trained();
  std::istringstream is(text_of(t.checkpoint.string() + ".log.jsonl"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) {
    const auto j = json::parse(line);
    for (const char* k : {"epoch", "l_c", "l_f", "total", "grad_norm", "steps", "wall_ms"})
      EXPECT_TRUE(j.contains(k)) << k;
    ++lines;
  }
  EXPECT_EQ(lines, 1u);
}

TEST(Match, FilteredMatchesAreSubsetOfUnfiltered) {
  const auto& t = trained();
  auto lm = load_model(t.checkpoint);
  const auto data = load_pairs(read_manifest(t.manifest), t.manifest.parent_path());
  for (const auto& p : data) {
    MatchOverrides on, off;
    on.q_a = 0.5;
    on.q_e = 0.5;
    off.no_filter = true;
    const auto kept = match_images(lm, p.image_a, p.image_b, on);
    const auto all = match_images(lm, p.image_a, p.image_b, off);
    EXPECT_LE(kept.records.size(), all.records.size());
    std::set<std::string> lines;
    for (const auto& r : all.records) lines.insert(geo::format_match_line(r));
    for (const auto& r : kept.records) EXPECT_TRUE(lines.count(geo::format_match_line(r)));
  }
}

TEST(Match, AbsoluteThresholdsKeepWhatLiesBelowThem) {
  const auto& t = trained();
  auto lm = load_model(t.checkpoint);
  const auto data = load_pairs(read_manifest(t.manifest), t.manifest.parent_path());
  MatchOverrides off;
  off.no_filter = true;
  const auto all = match_images(lm, data[0].image_a, data[0].image_b, off);
  ASSERT_FALSE(all.records.empty());
  std::vector<double> ua;
  for (const auto& r : all.records) ua.push_back(r.u_a);
  std::sort(ua.begin(), ua.end());
  MatchOverrides abs;
  abs.absolute = true;
  abs.q_a = ua[ua.size() / 2];
  abs.q_e = 1e300;
  const auto kept = match_images(lm, data[0].image_a, data[0].image_b, abs);
  const auto expected = static_cast<std::size_t>(
      std::count_if(ua.begin(), ua.end(), [&](double u) { return u <= *abs.q_a; }));
  EXPECT_EQ(kept.records.size(), expected);
  for (const auto& r : kept.records) EXPECT_LE(r.u_a, *abs.q_a);
}

TEST(Match, OutputParsesBackWithHeader) {
  const auto& t = trained();
  std::ostringstream os;
  const auto r = cmd_match(t.checkpoint, t.manifest.parent_path() / pair_file(0, 'a'),
                           t.manifest.parent_path() / pair_file(0, 'b'), {}, os);
  const auto text = os.str();
  EXPECT_EQ(text.rfind("# sure match\n", 0), 0u);
  EXPECT_NE(text.find("# config_hash "), std::string::npos);
  std::istringstream is(text);
  EXPECT_EQ(geo::read_correspondences(is).size(), r.records.size());
}

TEST(Match, BlankAndOddSizedImages) {
  const auto& t = trained();
  auto lm = load_model(t.checkpoint);
  Image blank(29, 21);
  const auto r = match_images(lm, blank, blank, {});
  for (const auto& m : r.records) {
    EXPECT_LT(m.corr.a.x, 29.0);
    EXPECT_LT(m.corr.a.y, 21.0);
    EXPECT_LT(m.corr.b.x, 29.0);
    EXPECT_LT(m.corr.b.y, 21.0);
  }
  EXPECT_NE(r.header[3].find("pad_right 3 pad_bottom 3"), std::string::npos);
  EXPECT_THROW(match_images(lm, Image(32, 32), Image(40, 32), {}), InvalidArgument);
}

TEST(Eval, SummaryAndCsvSelfValidate) {
  const auto& t = trained();
  const auto dir = scratch("e");
  EvalArgs a;
  a.timing_runs = 1;
  a.csv_out = dir / "pairs.csv";
  std::ostringstream os;
  const auto res = cmd_eval(t.checkpoint, t.manifest, a, os);
  const auto j = json::parse(os.str());
  EXPECT_NO_THROW(validate_eval_json(j));
  EXPECT_EQ(j.at("pairs"), 3);
  EXPECT_EQ(validate_csv(text_of(dir / "pairs.csv"), kEvalCsvHeader), 3u);
  EXPECT_EQ(res.summary.at("config_hash"), config_hash(tiny_run_config()));
}

TEST(Eval, AblationMustDescribeCheckpoint) {
  const auto cfg = tiny_run_config();
  EXPECT_FALSE(apply_ablation(cfg, "no_filter").filtering_enabled);
  EXPECT_TRUE(apply_ablation(cfg, "fusion").fusion_enabled);
  EXPECT_EQ(canonical(apply_ablation(cfg, "evidential")), canonical(cfg));
  EXPECT_THROW(apply_ablation(cfg, "no_fusion"), InvalidArgument);
  EXPECT_THROW(apply_ablation(cfg, "direct_l2"), InvalidArgument);
  EXPECT_THROW(apply_ablation(cfg, "everything"), InvalidArgument);
}

TEST(Eval, ValidatorsCatchBrokenOutput) {
  EXPECT_THROW(validate_csv("a,b\n1,2\n3\n", "a,b"), StateError);
  EXPECT_THROW(validate_csv("x,y\n", "a,b"), StateError);
  EXPECT_EQ(validate_csv("a,b\n1,2\n3,4\n", "a,b"), 2u);
  json j = {{"pairs", 1}};
  EXPECT_THROW(validate_eval_json(j), StateError);
}

TEST(Calib, SpearmanMatrixIdentityAndConstant) {
  const std::vector<double> x{1, 4, 2, 8, 5};
  const auto s = spearman_matrix(x, x, x);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(s["matrix"][i][k].get<double>(), 1.0);
  EXPECT_TRUE(s["undefined"].empty());

  const std::vector<double> flat(5, 0.3);
  const auto c = spearman_matrix(x, flat, x);
  EXPECT_TRUE(c["matrix"][0][1].is_null());
  EXPECT_TRUE(c["matrix"][1][1].is_null());
  EXPECT_EQ(c["undefined"]["u_a,u_e"], "u_e is constant");
  EXPECT_DOUBLE_EQ(c["matrix"][0][2].get<double>(), 1.0);

  const auto few = spearman_matrix({1, 2}, {1, 2}, {1, 2});
  EXPECT_EQ(few["undefined"]["u_a,epe"], "fewer than 3 matches");
}

TEST(Calib, TopKFlagsHighestEpistemic) {
  std::vector<CalibTriple> t(5);
  const double ue[] = {0.1, 0.9, 0.5, 0.9, 0.2};
  for (std::size_t k = 0; k < 5; ++k) t[k].u_e = ue[k];
  flag_top_k(t, 3);
  EXPECT_EQ((std::vector<bool>{t[0].top_k, t[1].top_k, t[2].top_k, t[3].top_k, t[4].top_k}),
            (std::vector<bool>{false, true, true, true, false}));
}

TEST(Calib, EndToEndCsvMatchesSummary) {
  const auto& t = trained();
  const auto dir = scratch("c");
  CalibArgs a;
  a.top_k = 5;
  a.csv_out = dir / "calib.csv";
  std::ostringstream os;
  const auto j = cmd_calib(t.checkpoint, t.manifest, a, os);
  EXPECT_EQ(json::parse(os.str()), j);
  EXPECT_EQ(validate_csv(text_of(dir / "calib.csv"), kCalibCsvHeader), j.at("matches").get<std::size_t>());
}

TEST(ExitCodes, ExceptionFamilies) {
  EXPECT_EQ(exit_code_for(IoError("x")), kIo);
  EXPECT_EQ(exit_code_for(NumericError("x")), kNumeric);
  EXPECT_EQ(exit_code_for(InvalidArgument("x")), kValidation);
  EXPECT_EQ(exit_code_for(VersionMismatch(2, 1)), kValidation);
}

TEST(ExitCodes, ToolReportsFailureKinds) {
  const auto& t = trained();
  const auto dir = scratch("x");
  EXPECT_EQ(run_tool("synth --count 1 --size 32 --out " + (dir / "d").string()), kOk);
  EXPECT_EQ(run_tool("synth --count 1 --size 30 --out " + (dir / "e").string()), kValidation);
  EXPECT_EQ(run_tool("synth --out " + dir.string()), kValidation);
  EXPECT_EQ(run_tool("frobnicate"), kValidation);
  EXPECT_EQ(run_tool("train --manifest " + (dir / "absent.json").string() + " --out " +
                     (dir / "m.ckpt").string()),
            kIo);
  EXPECT_EQ(run_tool("train --manifest " + t.manifest.string() + " --out " +
                     (dir / "m.ckpt").string() + " --set no_such_field=1"),
            kValidation);
  std::ofstream(dir / "junk.ckpt") << "garbage";
  EXPECT_EQ(run_tool("eval --checkpoint " + (dir / "junk.ckpt").string() + " --manifest " +
                     t.manifest.string()),
            kIo);
  EXPECT_EQ(run_tool("eval --checkpoint " + t.checkpoint.string() + " --manifest " +
                     t.manifest.string() + " --timing-runs 1 --ablate no_fusion"),
            kValidation);
}
