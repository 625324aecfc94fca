#include <cmath>
#include <fstream>
#include <sstream>

#include "mba/cli.hpp"
#include "mba/harness.hpp"
#include "test_util.hpp"

namespace mba {
namespace {

TEST(Dice, HandCases) {
  const std::vector<float> p{1, 1, 0, 0}, g{1, 0, 1, 0}, z{0, 0, 0, 0};
  EXPECT_DOUBLE_EQ(dice(p, g), 0.5);
  EXPECT_DOUBLE_EQ(dice(p, p), 1.0);
  EXPECT_DOUBLE_EQ(dice(z, z), 1.0);
  EXPECT_DOUBLE_EQ(dice(p, z), 0.0);
  EXPECT_THROW(dice(std::vector<float>{1}, g), ShapeError);
  const std::vector<float> all(10, 1.0f), half{1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
  EXPECT_DOUBLE_EQ(dice(all, half), 2.0 / 3.0);
}

TEST(Dice, SymmetricAndBounded) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    std::vector<float> a(30), b(30);
    for (auto& v : a) v = rng.bernoulli(0.3) ? 1.0f : 0.0f;
    for (auto& v : b) v = rng.bernoulli(0.3) ? 1.0f : 0.0f;
    const double d = dice(a, b);
    EXPECT_DOUBLE_EQ(d, dice(b, a));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(Summarize, PopulationStatisticsMatchWelford) {
  Rng rng(2);
  std::vector<SampleScore> scores;
  const char* classes[] = {"cystic", "solid", "mixed"};
  for (int i = 0; i < 40; ++i) {
    scores.push_back({"s" + std::to_string(i), classes[i % 3], i % 4 == 0 ? "B" : "A", rng.uniform()});
  }
  const auto report = summarize("test", scores);
  for (const auto& row : report.rows) {
    double mean = 0, m2 = 0;
    int n = 0;
    for (const auto& s : scores) {
      if (s.domain != row.domain || (row.lesion_class != "all" && s.lesion_class != row.lesion_class)) continue;
      ++n;
      const double delta = s.dice - mean;
      mean += delta / n;
      m2 += delta * (s.dice - mean);
    }
    EXPECT_EQ(row.n, n) << row.lesion_class << "/" << row.domain;
    EXPECT_NEAR(row.mean, 100 * mean, 1e-10);
    EXPECT_NEAR(row.std, 100 * std::sqrt(m2 / n), 1e-10);
  }
  ASSERT_EQ(report.rows.size(), 8u);
  EXPECT_EQ(report.rows[0].lesion_class, "cystic");
  EXPECT_EQ(report.rows[3].lesion_class, "all");
  EXPECT_EQ(report.rows[3].domain, "A");
  EXPECT_EQ(report.rows[7].domain, "B");
}

TEST(Summarize, SingleSampleHasZeroStd) {
  const auto report = summarize("val", {{"x", "solid", "A", 0.8}});
  ASSERT_NE(report.find("solid", "A"), nullptr);
  EXPECT_DOUBLE_EQ(report.find("solid", "A")->std, 0.0);
  EXPECT_EQ(report.find("cystic", "A"), nullptr);
}

TEST(Reports, CsvTextAndCrossDomainLayout) {
  const auto report = summarize("test", {{"a", "cystic", "A", 0.9}, {"b", "solid", "A", 0.7},
                                         {"c", "cystic", "B", 0.4}, {"d", "mixed", "B", 0.2}});
  const auto csv = report.csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "class,domain,n,dice_mean,dice_std");
  EXPECT_NE(csv.find("cystic,A,1,90.0000,0.0000"), std::string::npos);
  EXPECT_NE(csv.find("all,B,2,30.0000,10.0000"), std::string::npos);
  const auto table = cross_domain_table("A", report);
  std::istringstream lines(table);
  std::string header, in_row, cross_row;
  std::getline(lines, header);
  std::getline(lines, in_row);
  std::getline(lines, cross_row);
  EXPECT_NE(header.find("cystic"), std::string::npos);
  EXPECT_NE(header.find("average"), std::string::npos);
  EXPECT_EQ(in_row.rfind("in-domain (A -> A)", 0), 0u);
  EXPECT_EQ(cross_row.rfind("cross-domain (A -> B)", 0), 0u);
  EXPECT_NE(cross_row.find("30.00"), std::string::npos);
  EXPECT_NE(in_row.find(" - "), std::string::npos);  // no mixed samples in domain A
}

TEST(Ablation, TableMarksSanityAndDefaultRows) {
  std::vector<AblationCell> cells{{0, 0, true, "", 50.0, false, true},
                                  {3, 3, true, "", 72.126, true, false},
                                  {2, 6, false, "fusion plan has a cycle, somewhere", 0, false, false}};
  const auto table = ablation_table(cells, 6);
  EXPECT_EQ(table.rfind("Fusion ablation (m = 6)", 0), 0u);
  EXPECT_NE(table.find("independent branches"), std::string::npos);
  EXPECT_NE(table.find("72.13"), std::string::npos);
  EXPECT_NE(table.find("default"), std::string::npos);
  EXPECT_NE(table.find("invalid"), std::string::npos);
  const auto csv = ablation_csv(cells);
  EXPECT_NE(csv.find("3,3,1,72.1260,default"), std::string::npos);
  EXPECT_NE(csv.find("2,6,0,,fusion plan has a cycle; somewhere"), std::string::npos);
}

TEST(Gradcheck, SmallConfigPassesInFull) {
  auto cfg = test::tiny_config(1, 1, 1);
  cfg.C = 8;
  cfg.C_c = 4;
  cfg.C_d = 8;
  cfg.decoder_depth = 1;
  cfg.decoder_mlp_dim = 8;
  cfg.se_reduction = 2;
  cfg.x_s = 32;
  cfg.x_c = 8;
  cfg.validate();
  GradcheckOptions opts;
  opts.coords_per_tensor = 2;
  opts.batch = 1;
  const auto report = gradcheck(cfg, opts);
  EXPECT_TRUE(report.passed) << report.text();
  EXPECT_LT(report.max_rel, 1e-4);
  EXPECT_EQ(report.tensors.size(), MbaNet<double>(cfg, 0).params().items().size());
}

TEST(Gradcheck, DetectsAWrongGradient) {
  // An absurdly tight tolerance must fail; this guards against a pass rule
  // that accepts everything.
  auto cfg = test::tiny_config(1, 1, 1);
  cfg.C = 8;
  cfg.C_c = 4;
  cfg.C_d = 8;
  cfg.decoder_depth = 1;
  cfg.decoder_mlp_dim = 8;
  cfg.se_reduction = 2;
  cfg.x_s = 32;
  cfg.x_c = 8;
  GradcheckOptions opts;
  opts.coords_per_tensor = 1;
  opts.batch = 1;
  opts.tol = 1e-14;
  opts.atol = 1e-16;
  EXPECT_FALSE(gradcheck(cfg, opts).passed);
}

int run_cli(const std::vector<std::string>& args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run_cli({"--help"}), kExitOk);
  EXPECT_EQ(run_cli({}), kExitUsage);
  EXPECT_EQ(run_cli({"train"}), kExitUsage);
  EXPECT_EQ(run_cli({"frobnicate"}), kExitUsage);
  const auto dir = test::scratch_dir("cli");
  std::string err;
  EXPECT_EQ(run_cli({"eval", "--data", (dir / "none").string(), "--ckpt", (dir / "none").string()}, nullptr, &err),
            kExitData);
  EXPECT_NE(err.find("data error"), std::string::npos);
  EXPECT_EQ(run_cli({"ablate", "--data", dir.string(), "--out", dir.string(), "--rfin", "1,x"}), kExitUsage);
}

TEST(Cli, CycleConfigExitsWithPlanError) {
  const auto dir = test::scratch_dir("cli_cycle");
  auto cfg = test::tiny_config(3, 0, 0).to_json();
  cfg["m"] = 2;
  cfg["rfin_count"] = 3;
  cfg["dkin_count"] = 3;
  std::ofstream(dir / "cfg.json") << cfg.dump();
  std::string err;
  EXPECT_EQ(run_cli({"gradcheck", "--config", (dir / "cfg.json").string()}, nullptr, &err), kExitNumeric);
  EXPECT_NE(err.find("cycle"), std::string::npos) << err;
}

TEST(Cli, GenTrainEvalPredict) {
  const auto dir = test::scratch_dir("cli_flow");
  std::ofstream(dir / "cfg.json") << test::tiny_config().to_json().dump();
  const auto data = (dir / "data").string(), ckpt = (dir / "ckpt").string();
  ASSERT_EQ(run_cli({"gen-data", "--out", data, "--train", "2", "--val", "1", "--test", "1", "--size", "32",
                     "--paired"}),
            kExitOk);
  ASSERT_EQ(run_cli({"train", "--data", data, "--out", ckpt, "--config", (dir / "cfg.json").string(), "--epochs",
                     "1", "--domain", "A"}),
            kExitOk);
  EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(ckpt) / "loss_log.csv"));
  std::string out;
  ASSERT_EQ(run_cli({"eval", "--data", data, "--ckpt", ckpt, "--report", (dir / "r.csv").string()}, &out), kExitOk);
  EXPECT_NE(out.find("cross-domain (A -> B)"), std::string::npos) << out;
  EXPECT_TRUE(std::filesystem::exists(dir / "r.txt"));
  const auto img = load_manifest(data).samples[0].image;
  ASSERT_EQ(run_cli({"predict", "--ckpt", ckpt, "--image", (std::filesystem::path(data) / img).string(), "--out",
                     (dir / "pred.pgm").string()}),
            kExitOk);
  EXPECT_EQ(read_pgm(dir / "pred.pgm").width, 32);
}

}  // namespace
}  // namespace mba
