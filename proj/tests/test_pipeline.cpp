#include <gtest/gtest.h>

#include <sstream>

#include "esimft/cli.hpp"

using namespace esimft;

namespace {

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("esimft_pipeline_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

json tiny_config(const fs::path& out) {
  json j = json::parse(R"({
    "seed": 3,
    "data": {"pretrain_size": 1200, "finetune_size": 200},
    "model": {"d_model": 16, "encoder_layers": 1, "decoder_layers": 1, "heads": 2, "ff_width": 32},
    "training": {
      "pretrain": {"learning_rate": 0.005, "batch_size": 32, "max_epochs": 4},
      "sft_original": {"max_epochs": 1},
      "sft_new": {"max_epochs": 1},
      "dpo": {"max_epochs": 2},
      "ppo": {"max_epochs": 2, "rollouts_per_epoch": 32, "batch_size": 16},
      "ric": {"max_epochs": 1}
    },
    "probe": {"problems": 8},
    "evaluation": {"test_problems": 3, "budgets": [4]}
  })");
  j["output_dir"] = out.string();
  return j;
}

int cli(const std::vector<std::string>& args, std::string* err_text = nullptr) {
  std::vector<const char*> argv{"esimft"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (err_text) *err_text = err.str();
  return code;
}

std::string slurp(const fs::path& p) { return read_file(p); }

}  // namespace

TEST(Percentile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(percentile({3, 1, 2, 4}, 0), 1.0);
  EXPECT_DOUBLE_EQ(percentile({3, 1, 2, 4}, 100), 4.0);
  EXPECT_DOUBLE_EQ(percentile({3, 1, 2, 4}, 50), 2.5);
  EXPECT_DOUBLE_EQ(percentile({0, 10}, 40), 4.0);
  EXPECT_DOUBLE_EQ(percentile({7}, 40), 7.0);
  EXPECT_THROW(percentile({}, 40), std::invalid_argument);
  EXPECT_THROW(percentile({1}, 101), std::invalid_argument);
}

TEST(TestProblems, TargetsAchievableAndBoundsShared) {
  const auto cat = default_catalog();
  const auto pre = generate_pretrain_dataset(400, 1, cat);
  const auto a = make_test_problems(30, 9, pre, 40, cat);
  const auto b = make_test_problems(30, 9, pre, 40, cat);
  ASSERT_EQ(a.size(), 30u);
  const auto levels = bound_levels(pre, 40);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i], b[i]);
    Rng rng = derive_rng(9, {stream_tag("test-problems"), static_cast<std::uint64_t>(i)});
    const auto r = simulate(random_design(rng), cat);
    EXPECT_TRUE(r.valid);
    EXPECT_EQ(a[i].speed_target, r.log_speed_ratio);
    EXPECT_EQ(a[i].position_target, r.output_position);
    EXPECT_EQ(*a[i].bbox_bound, levels.bbox);
    EXPECT_EQ(*a[i].cost_bound, levels.cost);
  }
  EXPECT_NE(make_test_problems(30, 10, pre, 40, cat)[0], a[0]);
}

TEST(TestProblems, FullPercentileNeverBinds) {
  const auto cat = default_catalog();
  const auto pre = generate_pretrain_dataset(400, 2, cat);
  const auto ps = make_test_problems(5, 3, pre, 100, cat);
  for (const auto& e : pre)
    for (auto k : {RequirementKind::bbox, RequirementKind::cost}) EXPECT_TRUE(meets(e.metrics, ps[0], k, {}));
  // At the 40th percentile the bound binds for a sizable share of designs.
  const auto p40 = make_test_problems(1, 3, pre, 40, cat)[0];
  int met = 0;
  for (const auto& e : pre) met += meets(e.metrics, p40, RequirementKind::cost, {}) ? 1 : 0;
  EXPECT_GT(met, 100);
  EXPECT_LT(met, 300);
}

TEST(SignTest, ExactBinomialTail) {
  const std::vector<double> before(30, 1.0);
  std::vector<double> after(30, 0.5);
  EXPECT_NEAR(sign_test_improvement(before, after).p_value, std::pow(0.5, 30), 1e-15);
  for (int i = 0; i < 10; ++i) after[static_cast<std::size_t>(i)] = 2.0;
  const auto t = sign_test_improvement(before, after);
  EXPECT_EQ(t.improved, 20);
  EXPECT_EQ(t.worsened, 10);
  EXPECT_NEAR(t.p_value, 0.0493685733526945, 1e-12);  // P(Binom(30, 1/2) >= 20)
  after[0] = 1.0;
  after[1] = std::numeric_limits<double>::quiet_NaN();
  const auto u = sign_test_improvement(before, after);
  EXPECT_EQ(u.ties, 1);
  EXPECT_EQ(u.improved + u.worsened, 28);
  EXPECT_EQ(sign_test_improvement({}, {}).p_value, 1.0);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("exit");
  std::string err;
  EXPECT_EQ(cli({"-c", (dir / "absent.json").string(), "gen-data"}, &err), kExitMissing);
  EXPECT_NE(err.find("absent.json"), std::string::npos);

  write_file_atomic(dir / "bad.json", R"({"seed": 1, "surprise": true})");
  EXPECT_EQ(cli({"-c", (dir / "bad.json").string(), "gen-data"}), kExitConfig);
  write_file_atomic(dir / "bad2.json", R"({"evaluation": {"budgets": [1]}})");
  EXPECT_EQ(cli({"-c", (dir / "bad2.json").string(), "gen-data"}), kExitConfig);
  write_file_atomic(dir / "broken.json", "{not json");
  EXPECT_EQ(cli({"-c", (dir / "broken.json").string(), "gen-data"}), kExitConfig);

  write_json(dir / "ok.json", tiny_config(dir / "out"));
  const auto cfg = (dir / "ok.json").string();
  EXPECT_EQ(cli({"-c", cfg, "no-such-stage"}), kExitConfig);
  EXPECT_EQ(cli({"-c", cfg, "simft", "sft", "--requirement", "torque"}), kExitConfig);
  EXPECT_EQ(cli({"-c", cfg, "pretrain"}, &err), kExitMissing);
  EXPECT_NE(err.find("pretrain.jsonl"), std::string::npos);
  EXPECT_EQ(cli({"-c", cfg, "simft", "dpo", "--requirement", "cost"}, &err), kExitMissing);
  EXPECT_NE(err.find("pretrained.ckpt"), std::string::npos);
  EXPECT_EQ(cli({"-c", cfg, "pareto", "--method", "e_simft", "--budget", "4"}, &err), kExitMissing);
  EXPECT_EQ(cli({"-c", cfg, "schema"}), kExitOk);
  fs::remove_all(dir);
}

TEST(Pipeline, StagesProduceArtifactsAndReportIsReproducible) {
  const auto dir = scratch("run");
  write_json(dir / "cfg.json", tiny_config(dir / "a"));
  const auto cfg = (dir / "cfg.json").string();
  std::string err;
  ASSERT_EQ(cli({"-c", cfg, "gen-data"}, &err), kExitOk) << err;
  const std::string pre_bytes = slurp(dir / "a" / "data" / "pretrain.jsonl");
  ASSERT_EQ(cli({"-c", cfg, "gen-data"}), kExitOk);
  EXPECT_EQ(slurp(dir / "a" / "data" / "pretrain.jsonl"), pre_bytes);
  EXPECT_TRUE(fs::exists(dir / "a" / "vocab.json"));
  EXPECT_EQ(read_json(dir / "a" / "vocab.json").at("tokens").size(), 12u);
  // A stage out of order names the artifact it needs.
  EXPECT_EQ(cli({"-c", cfg, "simft", "sft", "--requirement", "speed"}, &err), kExitMissing);
  EXPECT_NE(err.find("pretrained.ckpt"), std::string::npos);
  ASSERT_EQ(cli({"-c", cfg, "pretrain"}, &err), kExitOk) << err;
  EXPECT_EQ(cli({"-c", cfg, "simft", "dpo", "--requirement", "bbox"}, &err), kExitMissing);
  EXPECT_NE(err.find("sft_bbox.ckpt"), std::string::npos);
  EXPECT_EQ(cli({"-c", cfg, "simft", "dpo", "--requirement", "speed"}), kExitConfig);
  for (const char* k : {"speed", "position", "bbox", "cost"})
    ASSERT_EQ(cli({"-c", cfg, "simft", "sft", "--requirement", k}, &err), kExitOk) << err;
  for (const char* k : {"bbox", "cost"}) {
    ASSERT_EQ(cli({"-c", cfg, "simft", "dpo", "--requirement", k}, &err), kExitOk) << err;
    ASSERT_EQ(cli({"-c", cfg, "simft", "ppo", "--requirement", k}, &err), kExitOk) << err;
  }
  const auto sel = read_json(dir / "a" / "models" / "dpo_cost.selection.json");
  EXPECT_GE(sel.at("epoch").get<int>(), 1);
  EXPECT_TRUE(fs::exists(dir / "a" / "models" / "dpo_cost" / "epoch_02.ckpt"));
  EXPECT_EQ(cli({"-c", cfg, "pareto", "--method", "ric", "--budget", "4"}, &err), kExitMissing);
  EXPECT_NE(err.find("ric.ckpt"), std::string::npos);
  ASSERT_EQ(cli({"-c", cfg, "baseline", "rs"}, &err), kExitOk) << err;
  ASSERT_EQ(cli({"-c", cfg, "baseline", "ric"}, &err), kExitOk) << err;
  EXPECT_EQ(cli({"-c", cfg, "report"}, &err), kExitMissing);
  for (auto m : kAllMethods)
    ASSERT_EQ(cli({"-c", cfg, "pareto", "--method", std::string(method_name(m)), "--budget", "4"}, &err), kExitOk) << err;
  ASSERT_EQ(cli({"-c", cfg, "report"}, &err), kExitOk) << err;

  // 3 problems x 10 scenarios per method, each with exactly N samples.
  const Pipeline p(load_config(cfg));
  for (auto m : kAllMethods)
    for (const auto& sc : enumerate_scenarios())
      for (int i = 0; i < 3; ++i) {
        const auto cell = cell_from_json(read_json(p.paths().cell(4, m, sc, i)));
        EXPECT_EQ(cell.samples_used(), 4);
      }

  // Report rows recomputed from the cell files.
  const std::string csv = slurp(p.paths().report());
  std::istringstream lines(csv);
  std::string header, line;
  std::getline(lines, header);
  EXPECT_EQ(header.rfind("budget,scenario,baseline_random_mean,baseline_random_std,", 0), 0u);
  std::vector<std::string> labels;
  while (std::getline(lines, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 2 + 2 * kAllMethods.size() + 1);
    labels.push_back(f[1]);
    if (f[1].rfind("mean_", 0) == 0) continue;
    const Scenario sc = parse_scenario(f[1]);
    double best = -1;
    std::string winner;
    for (std::size_t mi = 0; mi < kAllMethods.size(); ++mi) {
      std::vector<double> hv;
      for (int i = 0; i < 3; ++i)
        hv.push_back(cell_from_json(read_json(p.paths().cell(4, kAllMethods[mi], sc, i))).hypervolume);
      const double mean = (hv[0] + hv[1] + hv[2]) / 3;
      double ss2 = 0;
      for (double v : hv) ss2 += (v - mean) * (v - mean);
      EXPECT_NEAR(std::stod(f[2 + 2 * mi]), mean, 5e-7);
      EXPECT_NEAR(std::stod(f[3 + 2 * mi]), std::sqrt(ss2 / 2), 5e-7);
      if (mean > best) {
        best = mean;
        winner = std::string(method_name(kAllMethods[mi]));
      }
    }
    EXPECT_EQ(f.back(), winner);
  }
  const std::vector<std::string> expected{"speed+position", "speed+bbox", "speed+cost", "position+bbox",
                                          "position+cost",  "bbox+cost",  "mean_2req",  "speed+position+bbox",
                                          "speed+position+cost", "speed+bbox+cost", "position+bbox+cost", "mean_3req"};
  EXPECT_EQ(labels, expected);
  for (const auto& sc : enumerate_scenarios()) {
    const std::string svg = slurp(p.paths().svg(sc));
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("e_simft"), std::string::npos);
  }

  // A second output directory with the same config reproduces the report byte for byte.
  auto again = tiny_config(dir / "b");
  write_json(dir / "cfg_b.json", again);
  ASSERT_EQ(cli({"-c", (dir / "cfg_b.json").string(), "run-all"}, &err), kExitOk) << err;
  EXPECT_EQ(slurp(dir / "b" / "report.csv"), csv);
  fs::remove_all(dir);
}

TEST(Pipeline, SeedEnvironmentOverrideChangesData) {
  const auto dir = scratch("seed");
  write_json(dir / "cfg.json", tiny_config(dir / "out"));
  ASSERT_EQ(cli({"-c", (dir / "cfg.json").string(), "gen-data"}), kExitOk);
  const auto first = slurp(dir / "out" / "data" / "test_problems.json");
  setenv("ESIMFT_SEED", "99", 1);
  const int code = cli({"-c", (dir / "cfg.json").string(), "gen-data"});
  unsetenv("ESIMFT_SEED");
  ASSERT_EQ(code, kExitOk);
  EXPECT_NE(slurp(dir / "out" / "data" / "test_problems.json"), first);
  EXPECT_EQ(read_json(dir / "out" / "config.json").at("seed"), 99);
  fs::remove_all(dir);
}
