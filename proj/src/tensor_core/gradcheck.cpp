#include "mg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "mg/ops.hpp"
#include "mg/rng.hpp"

namespace mg {

double gradient_rel_error(double analytic, double numeric) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

namespace {

struct Probe {
  double value;
  bool diverged;
};

Probe evaluate(const std::function<Tensor(Tape&)>& loss_fn, const BranchTrace* base) {
  Tape quiet(false);
  std::optional<BranchTrace> replay;
  if (base) replay.emplace(BranchTrace::Kind::Replay, base);
  const Tensor loss = loss_fn(quiet);
  const double v = loss.item();
  if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite loss during perturbation");
  return {v, replay && replay->diverged()};
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(Tape&)>& loss_fn, std::vector<NamedTensor> wrt,
                           const GradCheckOptions& options) {
  for (auto& t : wrt) {
    t.tensor.set_requires_grad(true);
    t.tensor.zero_grad();
  }
  std::optional<BranchTrace> base;
  {
    Tape tape;
    if (options.freeze_branches) base.emplace(BranchTrace::Kind::Record);
    const Tensor loss = loss_fn(tape);
    if (!std::isfinite(loss.item())) throw NumericalError("grad_check: non-finite loss at the base point");
    tape.backward(loss);
  }
  if (base) base->stop();
  const BranchTrace* recorded = base ? &*base : nullptr;
  if (options.after_backward) options.after_backward();

  GradCheckReport report;
  Rng rng(options.seed);
  for (auto& [name, tensor] : wrt) {
    std::vector<float> analytic(tensor.grad().begin(), tensor.grad().end());
    std::vector<std::int64_t> coords(static_cast<std::size_t>(tensor.numel()));
    std::iota(coords.begin(), coords.end(), 0);
    const bool sampled = options.max_coords_per_tensor > 0 && tensor.numel() > options.max_coords_per_tensor;
    if (sampled) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.max_coords_per_tensor));
      std::sort(coords.begin(), coords.end());
    }
    TensorGradReport tr;
    tr.name = name;
    auto values = tensor.data();
    for (auto c : coords) {
      const auto at = static_cast<std::size_t>(c);
      const float original = values[at];
      const float up = static_cast<float>(original + options.step);
      const float down = static_cast<float>(original - options.step);
      values[at] = up;
      const auto f_up = evaluate(loss_fn, recorded);
      values[at] = down;
      const auto f_down = evaluate(loss_fn, recorded);
      values[at] = original;
      if (f_up.diverged || f_down.diverged) ++tr.kinks_straddled;
      const double numeric = (f_up.value - f_down.value) / (static_cast<double>(up) - static_cast<double>(down));
      const double err = gradient_rel_error(analytic[at], numeric);
      if (!std::isfinite(err)) throw NumericalError("grad_check: non-finite gradient for " + name);
      if (err > tr.max_rel_error || tr.worst_index < 0) {
        tr.max_rel_error = err;
        tr.worst_index = c;
        tr.analytic = analytic[at];
        tr.numeric = numeric;
      }
      ++tr.coords_checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, tr.max_rel_error);
    report.kinks_straddled += tr.kinks_straddled;
    report.tensors.push_back(std::move(tr));
  }
  return report;
}

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Tensor point, double step) {
  GradCheckOptions options;
  options.step = step;
  const auto report = grad_check([&](Tape& tape) { return f(tape, point); }, {{"point", point}}, options);
  return report.max_rel_error;
}

}  // namespace mg
