#include <fstream>
#include <set>
#include <sstream>

#include "mba/errors.hpp"
#include "mba/fusion.hpp"
#include "test_util.hpp"

namespace mba {
namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Independent replay: every layer of both branches runs once and in order,
// and each fusion step runs after its source and before its target.
void check_schedule(const FusionPlan& plan) {
  int prior_done = 0, domain_done = 0;
  std::set<int> rfin_ready, dkin_ready;
  for (const auto& s : plan.steps) {
    switch (s.kind) {
      case StepKind::Prior:
        ASSERT_EQ(s.first, prior_done + 1);
        for (int i = s.first; i <= s.second; ++i) {
          for (const auto& p : plan.dkin) {
            if (p.prior_layer == i) ASSERT_TRUE(dkin_ready.count(i)) << "prior " << i << " before its DKIN";
          }
        }
        prior_done = s.second;
        break;
      case StepKind::Domain:
        ASSERT_EQ(s.first, domain_done + 1);
        for (const auto& p : plan.rfin) {
          if (p.domain_layer == s.first) ASSERT_TRUE(rfin_ready.count(s.first)) << "domain " << s.first;
        }
        domain_done = s.first;
        break;
      case StepKind::Rfin:
        ASSERT_GE(prior_done, s.first);
        ASSERT_LT(domain_done, s.second);
        rfin_ready.insert(s.second);
        break;
      case StepKind::Dkin:
        ASSERT_GE(domain_done, s.first);
        ASSERT_LT(prior_done, s.second);
        dkin_ready.insert(s.second);
        break;
      default:
        ASSERT_EQ(prior_done, 4 * plan.m);
        ASSERT_EQ(domain_done, 8);
    }
  }
  EXPECT_EQ(rfin_ready.size(), plan.rfin.size());
  EXPECT_EQ(dkin_ready.size(), plan.dkin.size());
  ASSERT_GE(plan.steps.size(), 3u);
  EXPECT_EQ(plan.steps.back().kind, StepKind::Fuse);
}

TEST(FusionPairs, DeskWiring) {
  EXPECT_EQ(rfin_pairs(3, 3), (std::vector<RfinPair>{{3, 3}, {6, 4}, {9, 5}}));
  EXPECT_EQ(dkin_pairs(3, 3), (std::vector<DkinPair>{{6, 10}, {7, 11}, {8, 12}}));
  EXPECT_EQ(rfin_pairs(3, 1), (std::vector<RfinPair>{{3, 3}}));
  EXPECT_EQ(dkin_pairs(3, 1), (std::vector<DkinPair>{{8, 12}}));
  EXPECT_EQ(dkin_pairs(6, 6),
            (std::vector<DkinPair>{{6, 19}, {7, 20}, {8, 21}, {6, 22}, {7, 23}, {8, 24}}));
  EXPECT_TRUE(rfin_pairs(4, 0).empty());
}

TEST(FusionPlan, GoldenTraceAtDeskConfig) {
  const auto plan = build_plan(3, 3, 3);
  EXPECT_EQ(plan.trace(), read_file(std::string(MBA_GOLDEN_DIR) + "/plan_m3_r3_d3.txt"));
  check_schedule(plan);
}

TEST(FusionPlan, CycleIsRejectedWithLayerNames) {
  try {
    build_plan(2, 3, 3);
    FAIL() << "expected a cycle error";
  } catch (const PlanCycleError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("cycle"), std::string::npos) << msg;
    EXPECT_NE(msg.find("prior layer"), std::string::npos) << msg;
    EXPECT_NE(msg.find("domain layer"), std::string::npos) << msg;
  }
  EXPECT_THROW(build_plan(1, 3, 3), PlanCycleError);
}

TEST(FusionPlan, AblationGridIsValidAtM6) {
  for (int r : {0, 1, 2, 3}) {
    for (int d : {1, 3, 6}) {
      SCOPED_TRACE("r=" + std::to_string(r) + " d=" + std::to_string(d));
      const auto plan = build_plan(6, r, d);
      EXPECT_EQ(plan.rfin.size(), static_cast<std::size_t>(r));
      EXPECT_EQ(plan.dkin.size(), static_cast<std::size_t>(d));
      check_schedule(plan);
      EXPECT_NO_THROW(validate_plan(plan));
    }
  }
}

// Property: every wiring either yields a schedule that passes both replays,
// or is rejected as a cycle.
TEST(FusionPlan, EveryWiringSchedulesOrReportsCycle) {
  int valid = 0, cyclic = 0;
  for (int m = 1; m <= 6; ++m) {
    for (int r = 0; r <= 3; ++r) {
      for (int d = 0; d <= 4 * m; ++d) {
        SCOPED_TRACE("m=" + std::to_string(m) + " r=" + std::to_string(r) + " d=" + std::to_string(d));
        try {
          const auto plan = build_plan(m, r, d);
          check_schedule(plan);
          EXPECT_NO_THROW(validate_plan(plan));
          ++valid;
        } catch (const PlanCycleError&) {
          ++cyclic;
        }
      }
    }
  }
  EXPECT_GT(valid, 0);
  EXPECT_GT(cyclic, 0);
}

TEST(FusionPlan, ValidateRejectsReorderedSteps) {
  auto plan = build_plan(3, 3, 3);
  std::swap(plan.steps[0], plan.steps[1]);  // RFIN before its prior source
  EXPECT_THROW(validate_plan(plan), std::logic_error);
}

TEST(FusionModules, StartAtZeroOutput) {
  const auto cfg = test::tiny_config();
  ParamSet<double> ps(1);
  const auto r = make_rfin(ps, cfg, {3, 3});
  const auto d = make_dkin(ps, cfg, {6, 10});
  Rng rng(2);
  const auto tokens = test::random_tensor({2, cfg.grid() * cfg.grid(), cfg.C}, rng, -1, 1, false);
  const auto out = rfin(tokens, r);
  EXPECT_EQ(out.shape(), (Shape{2, cfg.C_c, cfg.grid(), cfg.grid()}));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
  const auto fmap = test::random_tensor({2, cfg.C_c, cfg.grid(), cfg.grid()}, rng, -1, 1, false);
  const auto injected = dkin(fmap, d);
  EXPECT_EQ(injected.shape(), (Shape{2, cfg.grid() * cfg.grid(), cfg.C}));
  const auto normed = layer_norm(injected, d.norm.gamma, d.norm.beta);
  for (double v : normed.data()) EXPECT_EQ(v, 0.0);
}

}  // namespace
}  // namespace mba
