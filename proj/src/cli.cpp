#include "mba/cli.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "mba/errors.hpp"
#include "mba/harness.hpp"

namespace mba {

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::vector<int> parse_int_list(const std::string& s, const std::string& flag) {
  std::vector<int> values;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(flag + " expects a comma-separated list of integers, got '" + s + "'");
    }
  }
  if (values.empty()) throw ConfigError(flag + " must not be empty");
  return values;
}

ModelConfig load_config(const std::string& path) {
  if (path.empty()) return ModelConfig{};
  auto cfg = ModelConfig::load(path);
  cfg.validate();
  return cfg;
}

/// Training flags shared by `train` and `ablate`.
struct TrainFlags {
  TrainConfig cfg;
  std::string schedule = "poly";
  bool no_augment = false;

  void add_to(CLI::App* app) {
    app->add_option("--epochs", cfg.epochs, "Training epochs");
    app->add_option("--batch", cfg.batch, "Batch size");
    app->add_option("--lr", cfg.lr0, "Initial learning rate");
    app->add_option("--momentum", cfg.momentum, "SGD momentum");
    app->add_option("--weight-decay", cfg.weight_decay, "L2 weight decay");
    app->add_option("--lr-schedule", schedule, "poly or exp");
    app->add_option("--seed", cfg.seed, "Seed for initialization, order and augmentation");
    app->add_flag("--no-augment", no_augment, "Disable intensity and flip augmentation");
  }

  TrainConfig resolve() const {
    TrainConfig c = cfg;
    c.schedule = lr_schedule_from_string(schedule);
    if (no_augment) {
      c.aug.scale_lo = c.aug.scale_hi = 1.0;
      c.aug.shift_lo = c.aug.shift_hi = 0.0;
      c.aug.flip_prob = 0.0;
    }
    c.validate();
    return c;
  }
};

int cmd_gen_data(const std::string& out_dir, const GenOptions& opts, std::ostream& out) {
  const auto manifest = gen_dataset(out_dir, opts);
  out << "wrote " << manifest.samples.size() << " samples to " << out_dir << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data, out, config, split = "train", domain;
  TrainFlags flags;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const ModelConfig mc = load_config(a.config);
  const TrainConfig tc = a.flags.resolve();
  const auto manifest = load_manifest(a.data);
  const auto samples = load_samples(manifest, a.split, a.domain);
  if (samples.empty()) {
    throw DataError("no training samples in split '" + a.split + "'" +
                    (a.domain.empty() ? "" : " for domain " + a.domain));
  }
  MbaNet<float> model(mc, tc.seed);
  out << "training on " << samples.size() << " samples, " << model.params().total_elements()
      << " parameters\n";
  const auto result = train(model, samples, tc, [&](int epoch, const std::vector<LossRecord>& log) {
    double sum = 0;
    int n = 0;
    for (auto it = log.rbegin(); it != log.rend() && it->epoch == epoch; ++it, ++n) sum += it->loss;
    out << "epoch " << epoch + 1 << "/" << tc.epochs << " lr " << log.back().lr << " mean loss "
        << (n ? sum / n : 0.0) << "\n";
    out.flush();
  });

  const fs::path dir = a.out;
  save_checkpoint(dir, model.params(), CheckpointMeta{mc, result.epochs_completed, tc.seed});
  write_text(dir / "loss_log.csv", loss_log_csv(result.log));
  const nlohmann::json info{{"data", a.data},
                            {"split", a.split},
                            {"domain", a.domain},
                            {"samples", samples.size()},
                            {"epochs", tc.epochs},
                            {"batch", tc.batch},
                            {"lr", tc.lr0},
                            {"momentum", tc.momentum},
                            {"weight_decay", tc.weight_decay},
                            {"lr_schedule", a.flags.schedule},
                            {"augment", !a.flags.no_augment},
                            {"seed", tc.seed}};
  write_text(dir / "train.json", info.dump(2) + "\n");
  out << "checkpoint written to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& data, const std::string& ckpt, const std::string& split,
             const std::string& domain, const std::string& report_path, std::ostream& out) {
  const auto model = load_model(ckpt);
  const auto manifest = load_manifest(data);
  const auto report =
      evaluate([&](const LoadedSample& s) { return predict_mask(model, s.image); }, manifest, split, domain);
  std::string text = report.text();
  const fs::path info_path = fs::path(ckpt) / "train.json";
  if (fs::exists(info_path)) {
    std::ifstream in(info_path);
    const auto info = nlohmann::json::parse(in, nullptr, false);
    const std::string trained_on = info.is_object() ? info.value("domain", "") : "";
    if (!trained_on.empty()) text += "\n" + cross_domain_table(trained_on, report);
  }
  out << text;
  if (!report_path.empty()) {
    write_text(report_path, report.csv());
    write_text(fs::path(report_path).replace_extension(".txt"), text);
  }
  return kExitOk;
}

int cmd_predict(const std::string& ckpt, const std::string& image_path, const std::string& out_path,
                std::ostream& out) {
  const auto model = load_model(ckpt);
  const auto image = read_pgm(image_path);
  const auto mask = predict_mask(model, image);
  write_pgm(out_path, mask);
  std::size_t fg = 0;
  for (float v : mask.pixels) fg += v > 0;
  out << "wrote " << out_path << " (" << fg << " foreground pixels)\n";
  return kExitOk;
}

int cmd_gradcheck(const std::string& config, GradcheckOptions opts, const std::string& report_path,
                  bool verbose, std::ostream& out) {
  const ModelConfig mc = load_config(config);
  if (verbose) opts.progress = [&](const std::string& line) { out << line << "\n" << std::flush; };
  const auto report = gradcheck(mc, opts);
  const std::string text = report.text();
  if (!report_path.empty()) write_text(report_path, text);
  if (verbose) {
    out << text.substr(text.rfind('\n', text.size() - 2) + 1);
  } else {
    out << text;
  }
  out << (report.passed ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return report.passed ? kExitOk : kExitNumeric;
}

struct AblateArgs {
  std::string data, out, config, rfin = "0,1,2,3", dkin = "1,3,6", split = "val";
  TrainFlags flags;
};

int cmd_ablate(AblateArgs a, std::ostream& out) {
  AblationOptions opts;
  opts.base = load_config(a.config);
  opts.train = a.flags.resolve();
  opts.rfin = parse_int_list(a.rfin, "--rfin");
  opts.dkin = parse_int_list(a.dkin, "--dkin");
  opts.eval_split = a.split;
  const auto manifest = load_manifest(a.data);
  const auto cells = ablate(manifest, opts, [&](const std::string& line) { out << line << "\n" << std::flush; });
  const fs::path dir = a.out;
  fs::create_directories(dir);
  write_text(dir / "ablation.csv", ablation_csv(cells));
  const std::string table = ablation_table(cells, opts.base.m);
  write_text(dir / "ablation.txt", table);
  out << table;
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-branch lesion segmentation: data generation, training, evaluation and checks", "mba"};
  app.require_subcommand(1);

  GenOptions gen;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic two-domain phantom dataset");
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");
  gen_cmd->add_option("--train", gen.train, "Training geometries");
  gen_cmd->add_option("--val", gen.val, "Validation geometries");
  gen_cmd->add_option("--test", gen.test, "Test geometries");
  gen_cmd->add_option("--size", gen.size, "Image side in pixels");
  gen_cmd->add_flag("--paired", gen.paired, "Render every geometry in both domains");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint and loss log");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  train_cmd->add_option("--out", tr.out, "Checkpoint directory")->required();
  train_cmd->add_option("--config", tr.config, "Model config JSON (defaults to the desk config)");
  train_cmd->add_option("--split", tr.split, "Split to train on");
  train_cmd->add_option("--domain", tr.domain, "Restrict training to domain A or B");
  tr.flags.add_to(train_cmd);

  std::string ev_data, ev_ckpt, ev_split = "test", ev_domain, ev_report;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint with per-class Dice statistics");
  eval_cmd->add_option("--data", ev_data, "Dataset directory")->required();
  eval_cmd->add_option("--ckpt", ev_ckpt, "Checkpoint directory")->required();
  eval_cmd->add_option("--split", ev_split, "Split to evaluate");
  eval_cmd->add_option("--domain", ev_domain, "Restrict to domain A or B");
  eval_cmd->add_option("--report", ev_report, "CSV report path (a .txt table is written beside it)");

  std::string pr_ckpt, pr_image, pr_out;
  auto* predict_cmd = app.add_subcommand("predict", "Segment one PGM image");
  predict_cmd->add_option("--ckpt", pr_ckpt, "Checkpoint directory")->required();
  predict_cmd->add_option("--image", pr_image, "Input PGM")->required();
  predict_cmd->add_option("--out", pr_out, "Output mask PGM")->required();

  GradcheckOptions gc;
  std::string gc_config, gc_report;
  bool gc_verbose = false;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gc_cmd->add_option("--config", gc_config, "Model config JSON (defaults to the desk config)");
  gc_cmd->add_option("--eps", gc.eps, "Finite-difference step");
  gc_cmd->add_option("--tol", gc.tol, "Relative tolerance");
  gc_cmd->add_option("--atol", gc.atol, "Absolute tolerance floor");
  gc_cmd->add_option("--coords", gc.coords_per_tensor, "Sampled coordinates per tensor");
  gc_cmd->add_flag("--full", gc.full, "Check every scalar (small configs only)");
  gc_cmd->add_option("--seed", gc.seed, "Seed for parameters, inputs and sampling");
  gc_cmd->add_option("--batch", gc.batch, "Batch size of the probe input");
  gc_cmd->add_option("--report", gc_report, "Write the per-tensor table here");
  gc_cmd->add_flag("--verbose", gc_verbose, "Print one line per tensor as it is checked");

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate a grid of RFIN/DKIN counts");
  ablate_cmd->add_option("--data", ab.data, "Dataset directory")->required();
  ablate_cmd->add_option("--out", ab.out, "Output directory")->required();
  ablate_cmd->add_option("--rfin", ab.rfin, "RFIN counts, comma-separated");
  ablate_cmd->add_option("--dkin", ab.dkin, "DKIN counts, comma-separated");
  ablate_cmd->add_option("--config", ab.config, "Base model config JSON");
  ablate_cmd->add_option("--split", ab.split, "Split used for scoring");
  ab.flags.cfg.epochs = 10;
  ab.flags.add_to(ablate_cmd);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen_out, gen, out);
    if (train_cmd->parsed()) return cmd_train(tr, out);
    if (eval_cmd->parsed()) return cmd_eval(ev_data, ev_ckpt, ev_split, ev_domain, ev_report, out);
    if (predict_cmd->parsed()) return cmd_predict(pr_ckpt, pr_image, pr_out, out);
    if (gc_cmd->parsed()) return cmd_gradcheck(gc_config, gc, gc_report, gc_verbose, out);
    if (ablate_cmd->parsed()) return cmd_ablate(ab, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const PlanCycleError& e) {
    err << "plan error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace mba
