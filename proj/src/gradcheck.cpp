#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>

#include "mba/harness.hpp"

namespace mba {

namespace {

struct Probe {
  double loss;
  std::uint64_t signature;
};

/// Sparse perturbation direction: (flat index, weight) pairs.
using Direction = std::vector<std::pair<std::size_t, double>>;

}  // namespace

GradcheckReport gradcheck(const ModelConfig& cfg, const GradcheckOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  cfg.validate();
  MbaNet<double> model(cfg, opts.seed);
  Rng rng(mix_seed(opts.seed, hash_string("gradcheck")));

  // Zero- and one-initialized tensors (biases, norm affines, fusion norms)
  // are moved off their initial values so no gradient path is trivially zero.
  for (auto& p : model.params().items()) {
    if (p.init.kind == InitKind::Zeros || p.init.kind == InitKind::Ones) {
      for (double& v : p.tensor.mutable_data()) v += 0.1 * rng.normal();
    }
  }

  const Index b = opts.batch;
  std::vector<double> xs(static_cast<std::size_t>(b * cfg.x_s * cfg.x_s));
  std::vector<double> xc(static_cast<std::size_t>(b * cfg.x_c * cfg.x_c));
  for (double& v : xs) v = rng.uniform();
  for (double& v : xc) v = rng.uniform();
  const auto prior_view = Tensor<double>::from_data({b, 1, cfg.x_s, cfg.x_s}, xs);
  const auto domain_view = Tensor<double>::from_data({b, 1, cfg.x_c, cfg.x_c}, xc);
  std::vector<double> tgt;
  for (Index n = 0; n < b; ++n) {
    const double cx = rng.uniform(0.3, 0.7) * cfg.x_c, cy = rng.uniform(0.3, 0.7) * cfg.x_c;
    const double r = rng.uniform(0.15, 0.3) * cfg.x_c;
    for (Index y = 0; y < cfg.x_c; ++y) {
      for (Index x = 0; x < cfg.x_c; ++x) tgt.push_back(std::hypot(x + 0.5 - cx, y + 0.5 - cy) <= r ? 1.0 : 0.0);
    }
  }
  const auto target = Tensor<double>::from_data({b, 1, cfg.x_c, cfg.x_c}, tgt);

  const auto probe = [&]() {
    NoGradGuard no_grad;
    KinkProbe kinks;
    const double loss = seg_loss(model.forward(prior_view, domain_view), target).item();
    return Probe{loss, kinks.signature()};
  };

  model.params().zero_grad();
  seg_loss(model.forward(prior_view, domain_view), target).backward();
  const Probe base = probe();

  GradcheckReport report;
  for (auto& p : model.params().items()) {
    TensorCheck tc;
    tc.name = p.name;
    tc.numel = p.tensor.numel();
    const std::vector<double> grad(p.tensor.grad().begin(), p.tensor.grad().end());
    const std::vector<double> original(p.tensor.data().begin(), p.tensor.data().end());
    auto data = p.tensor.mutable_data();

    const auto at = [&](const Direction& dir, double t) {
      for (const auto& [i, w] : dir) data[i] = original[i] + t * w;
      const Probe r = probe();
      for (const auto& [i, w] : dir) data[i] = original[i];
      return r;
    };
    // Central difference unless the step changes an activation sign; then a
    // second-order one-sided difference on the unchanged side.
    const auto numeric = [&](const Direction& dir, double h, bool& adjusted) -> std::optional<double> {
      const Probe plus = at(dir, h), minus = at(dir, -h);
      const bool plus_ok = plus.signature == base.signature;
      const bool minus_ok = minus.signature == base.signature;
      if (plus_ok && minus_ok) return (plus.loss - minus.loss) / (2 * h);
      adjusted = true;
      if (minus_ok) {
        const Probe m2 = at(dir, -2 * h);
        if (m2.signature == base.signature) return (3 * base.loss - 4 * minus.loss + m2.loss) / (2 * h);
      } else if (plus_ok) {
        const Probe p2 = at(dir, 2 * h);
        if (p2.signature == base.signature) return (-3 * base.loss + 4 * plus.loss - p2.loss) / (2 * h);
      }
      return std::nullopt;
    };

    std::vector<Direction> directions;
    {
      Direction dir;
      const double w = 1.0 / std::sqrt(static_cast<double>(tc.numel));
      for (Index i = 0; i < tc.numel; ++i) dir.emplace_back(static_cast<std::size_t>(i), rng.bernoulli(0.5) ? w : -w);
      directions.push_back(std::move(dir));
    }
    if (opts.full) {
      for (Index i = 0; i < tc.numel; ++i) directions.push_back({{static_cast<std::size_t>(i), 1.0}});
    } else {
      for (int k = 0; k < opts.coords_per_tensor; ++k) {
        directions.push_back({{static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(tc.numel))), 1.0}});
      }
    }

    for (const auto& dir : directions) {
      double analytic = 0;
      for (const auto& [i, w] : dir) analytic += w * grad[i];
      bool adjusted = false;
      std::optional<double> num;
      for (double h = opts.eps; !num && h >= opts.eps * 1e-2; h /= 10) num = numeric(dir, h, adjusted);
      ++tc.checks;
      tc.kink_adjusted += adjusted;
      if (!num) {
        tc.passed = false;
        tc.failure = "every step size crosses an activation kink";
        continue;
      }
      const double err = std::abs(analytic - *num);
      const double mag = std::max(std::abs(analytic), std::abs(*num));
      const double rel = mag > 0 ? err / mag : 0.0;
      tc.max_abs = std::max(tc.max_abs, err);
      if (mag >= opts.atol / opts.tol) {
        tc.max_rel = std::max(tc.max_rel, rel);
      } else {
        ++tc.below_floor;
      }
      if (err > opts.atol + opts.tol * mag) {
        tc.passed = false;
        std::ostringstream os;
        os << "analytic " << analytic << " vs numeric " << *num;
        tc.failure = os.str();
      }
    }
    report.total_checks += tc.checks;
    report.below_floor += tc.below_floor;
    report.max_rel = std::max(report.max_rel, tc.max_rel);
    report.passed = report.passed && tc.passed;
    if (opts.progress) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%-44s %8lld  rel %.2e  %s", tc.name.c_str(),
                    static_cast<long long>(tc.numel), tc.max_rel, tc.passed ? "ok" : "FAIL");
      opts.progress(buf);
    }
    report.tensors.push_back(std::move(tc));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string GradcheckReport::text() const {
  std::ostringstream os;
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%-44s %8s %6s %10s %10s %5s %5s  %s\n", "tensor", "numel", "checks", "max_rel",
                "max_abs", "kinks", "floor", "status");
  os << buf;
  int failed = 0;
  for (const auto& t : tensors) {
    std::snprintf(buf, sizeof(buf), "%-44s %8lld %6d %10.3e %10.3e %5d %5d  %s\n", t.name.c_str(),
                  static_cast<long long>(t.numel), t.checks, t.max_rel, t.max_abs, t.kink_adjusted, t.below_floor,
                  t.passed ? "ok" : ("FAIL: " + t.failure).c_str());
    os << buf;
    failed += !t.passed;
  }
  std::snprintf(buf, sizeof(buf),
                "%zu tensors, %d checks, %d failed, max relative error %.3e, %d checks below the magnitude "
                "floor, %.1f s\n",
                tensors.size(), total_checks, failed, max_rel, below_floor, seconds);
  os << buf;
  return os.str();
}

}  // namespace mba
