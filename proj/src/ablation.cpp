#include <cstdio>
#include <sstream>

#include "mba/errors.hpp"
#include "mba/harness.hpp"

namespace mba {

namespace {

std::string fmt_dice(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

std::vector<AblationCell> ablate(const Manifest& manifest, const AblationOptions& opts,
                                 const std::function<void(const std::string&)>& log) {
  const auto train_data = load_samples(manifest, "train", "");
  if (train_data.empty()) throw DataError("ablation needs a non-empty train split");
  if (manifest.select(opts.eval_split, "").empty()) {
    throw DataError("ablation needs a non-empty '" + opts.eval_split + "' split");
  }
  const ModelConfig defaults;

  std::vector<std::pair<int, int>> grid;
  if (opts.sanity_row) grid.emplace_back(0, 0);
  for (int r : opts.rfin) {
    for (int d : opts.dkin) grid.emplace_back(r, d);
  }

  std::vector<AblationCell> cells;
  for (const auto& [r, d] : grid) {
    AblationCell cell;
    cell.rfin = r;
    cell.dkin = d;
    cell.sanity = opts.sanity_row && cells.empty();
    cell.is_default = r == defaults.rfin_count && d == defaults.dkin_count;
    ModelConfig cfg = opts.base;
    cfg.rfin_count = r;
    cfg.dkin_count = d;
    try {
      cfg.validate();
      build_plan(cfg.m, r, d);
    } catch (const PlanCycleError& e) {
      cell.valid = false;
      cell.reason = e.what();
    } catch (const ConfigError& e) {
      cell.valid = false;
      cell.reason = e.what();
    }
    if (cell.valid) {
      MbaNet<float> model(cfg, opts.train.seed);
      train(model, train_data, opts.train);
      const auto report = evaluate([&](const LoadedSample& s) { return predict_mask(model, s.image); },
                                   manifest, opts.eval_split, "");
      double sum = 0;
      for (const auto& s : report.samples) sum += s.dice;
      cell.dice = 100.0 * sum / static_cast<double>(report.samples.size());
    }
    if (log) {
      std::ostringstream os;
      os << "rfin=" << r << " dkin=" << d << ": ";
      if (cell.valid) {
        os << "dice " << cell.dice << "%";
      } else {
        os << "invalid (" << cell.reason << ")";
      }
      log(os.str());
    }
    cells.push_back(cell);
  }
  return cells;
}

std::string ablation_csv(const std::vector<AblationCell>& cells) {
  std::string out = "rfin,dkin,valid,avg_dice,note\n";
  char buf[96];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%d,", c.rfin, c.dkin, c.valid ? 1 : 0);
    out += buf;
    if (c.valid) {
      std::snprintf(buf, sizeof(buf), "%.4f", c.dice);
      out += buf;
    }
    out += ',';
    std::string note = c.sanity ? "independent branches" : (c.is_default ? "default" : "");
    if (!c.valid) note = c.reason;
    for (char& ch : note) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    out += note + "\n";
  }
  return out;
}

std::string ablation_table(const std::vector<AblationCell>& cells, int m) {
  std::ostringstream os;
  char buf[256];
  os << "Fusion ablation (m = " << m << ")\n";
  std::snprintf(buf, sizeof(buf), "%-6s %-6s %-15s %s\n", "RFIN", "DKIN", "Avg. Dice (%)", "");
  os << buf;
  for (const auto& c : cells) {
    const std::string value = c.valid ? fmt_dice(c.dice) : "invalid";
    std::string note;
    if (c.sanity) note = "independent branches";
    if (c.is_default) note = "default";
    if (!c.valid) note = c.reason;
    std::snprintf(buf, sizeof(buf), "%-6d %-6d %-15s %s\n", c.rfin, c.dkin, value.c_str(), note.c_str());
    os << buf;
  }
  return os.str();
}

}  // namespace mba
