#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vigor/tensor.hpp"

namespace vigor {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  std::string worst_param;
  // Name of the first parameter with a non-finite analytic or numeric
  // gradient, if any.
  std::optional<std::string> non_finite;

  bool empty() const noexcept { return entries.empty(); }
  bool passed(double tolerance) const { return !non_finite && max_rel_err <= tolerance; }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

enum class FiniteDifference {
  kCentral,    // (f(x+h) - f(x-h)) / 2h
  kFivePoint,  // (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h
  // Five-point estimates at steps h, h/s, h/s^2, ...; returns the first
  // estimate that agrees with the next smaller step to within `ladder_rtol`
  // or the estimated rounding noise. Selection looks only at the finite
  // differences, never at the analytic gradient.
  kLadder,
};

struct GradCheckOptions {
  double step = 1e-5;
  FiniteDifference method = FiniteDifference::kCentral;
  int ladder_steps = 5;
  double shrink = 10.0;
  double ladder_rtol = 1e-6;
};

// Compares the tape gradient of every parameter against finite differences
// of `loss_fn`. `loss_fn` must be deterministic. When it returns more than
// one element the checked function is the sum of its elements, and the
// differences are taken element-wise before summing.
inline GradCheckReport grad_check(std::span<Parameter* const> params,
                                  const std::function<Var(Tape&)>& loss_fn,
                                  const GradCheckOptions& opts) {
  GradCheckReport report;
  if (params.empty()) return report;

  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = loss_fn(tape);
    tape.backward(loss.value().size() == 1 ? loss : sum(loss));
  }
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  auto evaluate = [&loss_fn]() {
    Tape tape;
    tape.set_grad_enabled(false);
    return loss_fn(tape).value();
  };
  double magnitude = 0.0;
  for (double v : evaluate().values()) magnitude += std::abs(v);
  // Rounding noise of one loss evaluation, with a generous safety factor.
  const double noise = 64.0 * std::numeric_limits<double>::epsilon() * std::max(magnitude, 1.0);

  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    GradCheckEntry entry{p.name};
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      auto central = [&](double h) {
        p.value[i] = saved + h;
        const Matrix up = evaluate();
        p.value[i] = saved - h;
        const Matrix down = evaluate();
        p.value[i] = saved;
        double d = 0.0;
        for (std::size_t j = 0; j < up.size(); ++j) d += up[j] - down[j];
        return d / (2.0 * h);
      };
      auto five_point = [&](double h) { return (4.0 * central(h) - central(2.0 * h)) / 3.0; };
      double numeric = 0.0;
      switch (opts.method) {
        case FiniteDifference::kCentral:
          numeric = central(opts.step);
          break;
        case FiniteDifference::kFivePoint:
          numeric = five_point(opts.step);
          break;
        case FiniteDifference::kLadder: {
          double h = opts.step;
          double cur = five_point(h);
          numeric = cur;
          double best_gap = std::numeric_limits<double>::infinity();
          for (int s = 1; s < opts.ladder_steps; ++s) {
            const double next = five_point(h / opts.shrink);
            const double gap = std::abs(cur - next);
            const double allowed = std::max(opts.ladder_rtol * std::max(std::abs(cur), std::abs(next)),
                                            1.5 * noise / h + 1.5 * noise * opts.shrink / h);
            if (gap <= allowed) {
              numeric = cur;
              break;
            }
            if (gap < best_gap) {
              best_gap = gap;
              numeric = next;
            }
            h /= opts.shrink;
            cur = next;
          }
          break;
        }
      }
      const double a = analytic[k][i];
      if (!std::isfinite(a) || !std::isfinite(numeric)) {
        if (!report.non_finite) report.non_finite = p.name;
        continue;
      }
      const double err = relative_error(a, numeric);
      if (i == 0 || err > entry.max_rel_err) {
        entry.max_rel_err = err;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    if (report.entries.empty() || entry.max_rel_err > report.max_rel_err) {
      report.max_rel_err = entry.max_rel_err;
      report.worst_param = entry.name;
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

inline GradCheckReport grad_check(std::span<Parameter* const> params,
                                  const std::function<Var(Tape&)>& loss_fn, double step = 1e-5) {
  return grad_check(params, loss_fn, GradCheckOptions{step});
}

}  // namespace vigor
