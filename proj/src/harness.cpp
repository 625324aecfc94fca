#include "mba/harness.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "mba/errors.hpp"

namespace mba {

namespace {

const std::vector<std::string> kClassOrder{"cystic", "solid", "mixed"};
const std::vector<std::string> kDomainOrder{"A", "B"};
constexpr const char* kEmptyNote = "Dice is 1.0 when prediction and ground truth are both empty.";

std::string fmt(const char* pattern, double a, double b) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, a, b);
  return buf;
}

EvalRow stats_row(const std::string& cls, const std::string& domain, const std::vector<double>& values) {
  EvalRow row{cls, domain, static_cast<int>(values.size()), 0, 0};
  double sum = 0;
  for (double v : values) sum += v;
  const double mean = sum / values.size();
  double sq = 0;
  for (double v : values) sq += (v - mean) * (v - mean);
  row.mean = 100.0 * mean;
  row.std = 100.0 * std::sqrt(sq / values.size());
  return row;
}

}  // namespace

double dice(std::span<const float> pred, std::span<const float> gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("dice: masks have " + std::to_string(pred.size()) + " and " +
                     std::to_string(gt.size()) + " pixels");
  }
  std::size_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0.0f, b = gt[i] != 0.0f;
    inter += a && b;
    p += a;
    g += b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

double dice(const GrayImage& pred, const GrayImage& gt) {
  if (pred.width != gt.width || pred.height != gt.height) {
    throw ShapeError("dice: extents " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                     " and " + std::to_string(gt.width) + "x" + std::to_string(gt.height) + " differ");
  }
  return dice(pred.pixels, gt.pixels);
}

GrayImage predict_mask(const MbaNet<float>& model, const GrayImage& image) {
  const auto& cfg = model.config();
  NoGradGuard no_grad;
  const auto inputs = make_inputs<float>({&image}, cfg);
  const auto logits = model.forward(inputs.prior, inputs.domain);
  GrayImage logit_map{cfg.x_c, cfg.x_c, std::vector<float>(logits.data().begin(), logits.data().end())};
  GrayImage mask = resize_bilinear(logit_map, image.width, image.height);
  for (float& v : mask.pixels) v = v > 0.0f ? 1.0f : 0.0f;
  return mask;
}

MbaNet<float> load_model(const fs::path& dir) {
  const auto meta = read_checkpoint_meta(dir);
  MbaNet<float> model(meta.config, meta.seed);
  load_checkpoint_params(dir, model.params());
  return model;
}

EvalReport summarize(const std::string& split, std::vector<SampleScore> scores) {
  EvalReport report;
  report.split = split;
  report.samples = std::move(scores);
  for (const auto& d : kDomainOrder) {
    std::vector<double> all;
    for (const auto& c : kClassOrder) {
      std::vector<double> values;
      for (const auto& s : report.samples) {
        if (s.domain == d && s.lesion_class == c) values.push_back(s.dice);
      }
      if (!values.empty()) report.rows.push_back(stats_row(c, d, values));
      all.insert(all.end(), values.begin(), values.end());
    }
    if (!all.empty()) report.rows.push_back(stats_row("all", d, all));
  }
  return report;
}

const EvalRow* EvalReport::find(const std::string& lesion_class, const std::string& domain) const {
  for (const auto& r : rows) {
    if (r.lesion_class == lesion_class && r.domain == domain) return &r;
  }
  return nullptr;
}

std::string EvalReport::csv() const {
  std::string out = "class,domain,n,dice_mean,dice_std\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%d,%.4f,%.4f\n", r.lesion_class.c_str(), r.domain.c_str(), r.n,
                  r.mean, r.std);
    out += buf;
  }
  out += std::string("# ") + kEmptyNote + "\n";
  return out;
}

std::string EvalReport::text() const {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%-8s %-6s %5s  %s\n", "Class", "Domain", "n", "Dice (%)");
  os << "Split: " << split << "\n" << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-8s %-6s %5d  %6.2f \xC2\xB1 %5.2f\n", r.lesion_class.c_str(),
                  r.domain.c_str(), r.n, r.mean, r.std);
    os << buf;
  }
  os << kEmptyNote << "\n";
  return os.str();
}

EvalReport evaluate(const Predictor& predictor, const Manifest& manifest, const std::string& split,
                    const std::string& domain) {
  const auto records = manifest.select(split, domain);
  if (records.empty()) {
    throw DataError("no samples in split '" + split + "'" + (domain.empty() ? "" : " and domain '" + domain + "'"));
  }
  std::vector<SampleScore> scores;
  for (const auto& rec : records) {
    const auto sample = load_sample(manifest.root, rec);
    const auto pred = predictor(sample);
    scores.push_back({rec.id, to_string(rec.lesion_class), rec.domain, dice(pred, sample.mask)});
  }
  return summarize(split, std::move(scores));
}

std::string cross_domain_table(const std::string& train_domain, const EvalReport& report) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-22s", "Setting");
  os << buf;
  for (const auto& c : kClassOrder) {
    std::snprintf(buf, sizeof(buf), " %-16s", c.c_str());
    os << buf;
  }
  os << " average\n";
  for (const auto& d : kDomainOrder) {
    if (!report.find("all", d)) continue;
    const std::string label =
        (d == train_domain ? "in-domain (" : "cross-domain (") + train_domain + " -> " + d + ")";
    std::snprintf(buf, sizeof(buf), "%-22s", label.c_str());
    os << buf;
    for (const auto& c : kClassOrder) {
      const EvalRow* r = report.find(c, d);
      const std::string cell = r ? fmt("%.2f \xC2\xB1 %.2f", r->mean, r->std) : "-";
      std::snprintf(buf, sizeof(buf), " %-17s", cell.c_str());
      os << buf;
    }
    const EvalRow* all = report.find("all", d);
    os << ' ' << fmt("%.2f \xC2\xB1 %.2f", all->mean, all->std) << '\n';
  }
  os << kEmptyNote << "\n";
  return os.str();
}

}  // namespace mba
