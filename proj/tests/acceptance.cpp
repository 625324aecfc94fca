// Acceptance runner. Prints one PASS/FAIL line per criterion; with
// --criterion N only that criterion runs. Exit status is nonzero when any
// selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mba/cli.hpp"
#include "mba/errors.hpp"
#include "mba/harness.hpp"

namespace {

using namespace mba;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), pattern, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path work_dir(int criterion) {
  const fs::path dir = fs::current_path() / "acceptance_work" / ("c" + std::to_string(criterion));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Runs a CLI command in-process; output goes to a log file in the work dir.
int cli(const fs::path& log, const std::vector<std::string>& args) {
  std::ofstream out(log, std::ios::app);
  out << "$ mba";
  for (const auto& a : args) out << ' ' << a;
  out << '\n';
  return run(args, out, out);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> random_views(const ModelConfig& cfg, Index b, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<T> xs(static_cast<std::size_t>(b * cfg.x_s * cfg.x_s));
  std::vector<T> xc(static_cast<std::size_t>(b * cfg.x_c * cfg.x_c));
  for (T& v : xs) v = static_cast<T>(rng.uniform());
  for (T& v : xc) v = static_cast<T>(rng.uniform());
  return {Tensor<T>::from_data({b, 1, cfg.x_s, cfg.x_s}, xs), Tensor<T>::from_data({b, 1, cfg.x_c, cfg.x_c}, xc)};
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0;
}

double mean_dice(const EvalReport& r) {
  double s = 0;
  for (const auto& x : r.samples) s += x.dice;
  return s / static_cast<double>(r.samples.size());
}

Outcome gradient_integrity() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = gradcheck(ModelConfig{}, GradcheckOptions{});
  const double secs = seconds_since(t0);
  int failed = 0;
  for (const auto& t : report.tensors) failed += !t.passed;
  Outcome o;
  o.pass = report.passed && report.max_rel < 1e-4 && secs < 600;
  o.detail = fmt("%zu/%zu tensors pass, %d checks, max relative error %.2e (checks with |g| >= 1e-5), "
                 "%d smaller checks within 1e-9 absolute, %.0f s",
                 report.tensors.size() - failed, report.tensors.size(), report.total_checks, report.max_rel,
                 report.below_floor, secs);
  return o;
}

Outcome wiring_fidelity() {
  const auto plan = build_plan(3, 3, 3);
  const bool rfin_ok = plan.rfin == std::vector<RfinPair>{{3, 3}, {6, 4}, {9, 5}};
  const bool dkin_ok = plan.dkin == std::vector<DkinPair>{{6, 10}, {7, 11}, {8, 12}};
  const bool trace_ok = plan.trace() == slurp(std::string(MBA_GOLDEN_DIR) + "/plan_m3_r3_d3.txt");
  std::string cycle_msg;
  try {
    build_plan(2, 3, 3);
  } catch (const PlanCycleError& e) {
    cycle_msg = e.what();
  }
  Outcome o;
  o.pass = rfin_ok && dkin_ok && trace_ok && !cycle_msg.empty();
  o.detail = fmt("RFIN pairs %s, DKIN pairs %s, golden trace %s, m=2 d=3: %s", rfin_ok ? "match" : "DIFFER",
                 dkin_ok ? "match" : "DIFFER", trace_ok ? "matches" : "DIFFERS",
                 cycle_msg.empty() ? "no error raised" : cycle_msg.c_str());
  return o;
}

Outcome zero_fusion_identity() {
  ModelConfig fused_cfg;
  ModelConfig bare_cfg;
  bare_cfg.rfin_count = 0;
  bare_cfg.dkin_count = 0;
  MbaNet<float> fused(fused_cfg, 17);
  MbaNet<float> bare(bare_cfg, 17);
  // Start from random fusion weights so the zeroing is what matters.
  Rng rng(5);
  for (auto& p : fused.params().items()) {
    if (p.name.starts_with("fusion.")) {
      for (float& v : p.tensor.mutable_data()) v = static_cast<float>(rng.normal());
    }
  }
  std::size_t zeroed = 0;
  for (auto& p : fused.params().items()) {
    if (p.name.starts_with("fusion.")) {
      for (float& v : p.tensor.mutable_data()) v = 0.0f;
      ++zeroed;
    }
  }
  NoGradGuard no_grad;
  int equal = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto [xs, xc] = random_views<float>(fused_cfg, 1, 1000 + s);
    equal += bitwise_equal(fused.forward(xs, xc), bare.forward(xs, xc));
  }
  Outcome o;
  o.pass = equal == 10 && zeroed > 0;
  o.detail = fmt("%zu fusion tensors zeroed, %d/10 random inputs bitwise equal to the r=0, d=0 model", zeroed, equal);
  return o;
}

Outcome overfit_sanity() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = work_dir(4);
  const auto log = dir / "log.txt";
  const auto data = (dir / "data").string(), ckpt = (dir / "ckpt").string();
  if (cli(log, {"gen-data", "--out", data, "--train", "4", "--val", "0", "--test", "0", "--size", "64", "--paired",
                "--seed", "1"}) != 0 ||
      cli(log, {"train", "--data", data, "--out", ckpt, "--epochs", "50", "--batch", "2", "--lr", "3e-3",
                "--no-augment", "--seed", "1"}) != 0) {
    return {false, "command failed, see " + log.string()};
  }
  const auto model = load_model(ckpt);
  const auto manifest = load_manifest(data);
  const auto report =
      evaluate([&](const LoadedSample& s) { return predict_mask(model, s.image); }, manifest, "train", "");
  const std::string loss_log = slurp(fs::path(ckpt) / "loss_log.csv");
  const int iterations = static_cast<int>(std::count(loss_log.begin(), loss_log.end(), '\n')) - 1;
  const double d = mean_dice(report), secs = seconds_since(t0);
  Outcome o;
  o.pass = report.samples.size() == 8 && iterations == 200 && d >= 0.95 && secs < 900;
  o.detail = fmt("%zu samples, %d iterations (lr 3e-3, no augmentation), training-set mean Dice %.4f, %.0f s",
                 report.samples.size(), iterations, d, secs);
  return o;
}

Outcome cross_domain_harness() {
  const auto dir = work_dir(5);
  const auto log = dir / "log.txt";
  const auto data = (dir / "data").string(), ckpt = (dir / "ckpt").string();
  if (cli(log, {"gen-data", "--out", data, "--train", "60", "--val", "0", "--test", "10", "--size", "64",
                "--paired", "--seed", "2"}) != 0 ||
      cli(log, {"train", "--data", data, "--out", ckpt, "--domain", "A", "--epochs", "10", "--seed", "2"}) != 0) {
    return {false, "command failed, see " + log.string()};
  }
  const auto report_a = dir / "report_A.csv", report_b = dir / "report_B.csv";
  if (cli(log, {"eval", "--data", data, "--ckpt", ckpt, "--domain", "A", "--report", report_a.string()}) != 0 ||
      cli(log, {"eval", "--data", data, "--ckpt", ckpt, "--report", report_b.string()}) != 0) {
    return {false, "eval failed, see " + log.string()};
  }
  const auto manifest = load_manifest(data);
  const auto trained_on = load_samples(manifest, "train", "A").size();
  const auto trained = load_model(ckpt);
  const auto eval_b = [&](const MbaNet<float>& m) {
    return mean_dice(evaluate([&](const LoadedSample& s) { return predict_mask(m, s.image); }, manifest, "test", "B"));
  };
  const double trained_b = eval_b(trained);
  const MbaNet<float> untrained(trained.config(), 2);
  const double untrained_b = eval_b(untrained);
  const std::string both = slurp(report_b.string().substr(0, report_b.string().size() - 4) + ".txt");
  const bool rows = both.find("in-domain (A -> A)") != std::string::npos &&
                    both.find("cross-domain (A -> B)") != std::string::npos;
  Outcome o;
  o.pass = trained_on == 60 && fs::exists(report_a) && fs::exists(report_b) && rows && std::isfinite(trained_b) &&
           trained_b >= untrained_b;
  o.detail = fmt("trained on %zu A samples for 10 epochs; domain-B test Dice %.4f (untrained %.4f); "
                 "in-domain and cross-domain rows %s",
                 trained_on, trained_b, untrained_b, rows ? "present" : "MISSING");
  return o;
}

Outcome ablation_grid() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = work_dir(6);
  const auto log = dir / "log.txt";
  const auto data = (dir / "data").string(), out = (dir / "out").string();
  ModelConfig m6;
  m6.m = 6;
  std::ofstream(dir / "m6.json") << m6.to_json().dump(2);
  if (cli(log, {"gen-data", "--out", data, "--train", "4", "--val", "2", "--test", "0", "--size", "64", "--paired",
                "--seed", "3"}) != 0 ||
      cli(log, {"ablate", "--data", data, "--out", out, "--config", (dir / "m6.json").string(), "--epochs", "2",
                "--seed", "3"}) != 0) {
    return {false, "command failed, see " + log.string()};
  }
  std::istringstream csv(slurp(fs::path(out) / "ablation.csv"));
  std::string line;
  std::getline(csv, line);
  int grid_cells = 0, valid = 0;
  bool default_row = false;
  while (std::getline(csv, line)) {
    int r = 0, d = 0, v = 0;
    if (std::sscanf(line.c_str(), "%d,%d,%d", &r, &d, &v) != 3 || (r == 0 && d == 0)) continue;
    ++grid_cells;
    valid += v;
    if (r == 3 && d == 3) default_row = line.ends_with(",default") && v == 1;
  }
  const ModelConfig defaults;
  const bool default_cfg = defaults.rfin_count == 3 && defaults.dkin_count == 3;
  const bool table = fs::exists(fs::path(out) / "ablation.txt");
  Outcome o;
  o.pass = grid_cells == 12 && valid == 12 && default_row && default_cfg && table;
  o.detail = fmt("%d/12 grid cells trained and scored (%d valid), (3,3) row marked default: %s, table written: %s, "
                 "%.0f s",
                 grid_cells, valid, default_row ? "yes" : "no", table ? "yes" : "no", seconds_since(t0));
  return o;
}

Outcome determinism() {
  const auto dir = work_dir(7);
  const auto log = dir / "log.txt";
  const auto data = (dir / "data").string();
  if (cli(log, {"gen-data", "--out", data, "--train", "3", "--val", "0", "--test", "0", "--size", "64", "--paired",
                "--seed", "4"}) != 0) {
    return {false, "gen-data failed"};
  }
  for (const char* run_dir : {"run1", "run2"}) {
    if (cli(log, {"train", "--data", data, "--out", (dir / run_dir).string(), "--epochs", "3", "--seed", "9"}) != 0) {
      return {false, "train failed, see " + log.string()};
    }
  }
  int files = 0, identical = 0;
  for (const auto& entry : fs::directory_iterator(dir / "run1")) {
    ++files;
    identical += slurp(entry.path()) == slurp(dir / "run2" / entry.path().filename());
  }
  const bool log_same = slurp(dir / "run1" / "loss_log.csv") == slurp(dir / "run2" / "loss_log.csv");
  Outcome o;
  o.pass = files > 3 && identical == files && log_same;
  o.detail = fmt("%d/%d files byte-identical across two seeded runs (loss log %s)", identical, files,
                 log_same ? "identical" : "DIFFERS");
  return o;
}

Outcome serialization() {
  const auto dir = work_dir(8);
  ModelConfig cfg;
  MbaNet<float> net(cfg, 8);
  Rng rng(8);
  for (auto& p : net.params().items()) {
    for (float& v : p.tensor.mutable_data()) v += static_cast<float>(0.01 * rng.normal());
  }
  save_checkpoint(dir / "ckpt", net.params(), CheckpointMeta{cfg, 1, 8});
  const auto loaded = load_model(dir / "ckpt");
  NoGradGuard no_grad;
  const auto [xs, xc] = random_views<float>(cfg, 2, 88);
  const bool same = bitwise_equal(net.forward(xs, xc), loaded.forward(xs, xc));

  const auto expect_named = [&](const std::function<void()>& fn, const std::string& name) {
    try {
      fn();
    } catch (const DataError& e) {
      return std::string(e.what()).find(name) != std::string::npos;
    }
    return false;
  };
  fs::copy(dir / "ckpt", dir / "corrupt", fs::copy_options::recursive);
  const std::string victim = "domain.layer3.conv1.weight";
  {
    std::fstream f(dir / "corrupt" / (victim + ".bin"), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(16);
    f.put('\x55');
  }
  const bool corrupt_named = expect_named([&] { load_model(dir / "corrupt"); }, victim);

  ModelConfig wide = cfg;
  wide.C_c = 32;
  MbaNet<float> other(wide, 0);
  const bool shape_named =
      expect_named([&] { load_checkpoint_params(dir / "ckpt", other.params()); }, "domain.layer1.conv1.weight");
  ModelConfig fewer = cfg;
  fewer.dkin_count = 2;
  MbaNet<float> smaller(fewer, 0);
  const bool extra_named = expect_named([&] { load_checkpoint_params(dir / "ckpt", smaller.params()); }, "fusion.dkin");

  Outcome o;
  o.pass = same && corrupt_named && shape_named && extra_named;
  o.detail = fmt("reload forward %s; corrupted file names '%s': %s; width mismatch named: %s; "
                 "extra tensor named: %s",
                 same ? "bitwise equal" : "DIFFERS", victim.c_str(), corrupt_named ? "yes" : "no",
                 shape_named ? "yes" : "no", extra_named ? "yes" : "no");
  return o;
}

Outcome schedule_protocol() {
  const TrainConfig cfg;
  const double first = learning_rate(cfg, 0), last = learning_rate(cfg, cfg.epochs);
  std::vector<double> theta{1.0}, grad{0.5}, v{0.0};
  sgd_update<double>(theta, grad, v, 0.1, 0.9, 0.01);
  const double step1 = theta[0];
  sgd_update<double>(theta, grad, v, 0.1, 0.9, 0.01);
  const double err = std::max(std::abs(step1 - 0.949), std::abs(theta[0] - 0.852151));
  Outcome o;
  o.pass = first == 3e-4 && last == 0.0 && err <= 1e-12 && cfg.momentum == 0.99 && cfg.weight_decay == 1e-4;
  o.detail = fmt("lr(epoch 0) = %g (exactly 3e-4: %s), lr(epoch %d) = %g, two-step momentum/decay example error %.1e", first, first == 3e-4 ? "yes" : "no",
                 cfg.epochs, last, err);
  return o;
}

struct Criterion {
  const char* name;
  std::function<Outcome()> fn;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "Run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {"gradient integrity", gradient_integrity},  {"wiring fidelity", wiring_fidelity},
      {"zero-fusion identity", zero_fusion_identity}, {"overfit sanity", overfit_sanity},
      {"cross-domain harness", cross_domain_harness}, {"ablation grid", ablation_grid},
      {"determinism", determinism},                 {"serialization", serialization},
      {"schedule and optimizer", schedule_protocol},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<int>(i) + 1 != only) continue;
    Outcome o;
    try {
      o = criteria[i].fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << criteria[i].name
              << "): " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
