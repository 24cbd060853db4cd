#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mg/tensor.hpp"

namespace mg {

struct GradCheckOptions {
  double step = 1e-3;
  /// Coordinates sampled per tensor; <= 0 checks every coordinate.
  std::int64_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Evaluate the probe points with the ReLU sides and max-pool winners of
  /// the base point (see BranchTrace), so a probe that straddles a kink still
  /// measures the derivative of the piece the analytic gradient belongs to.
  bool freeze_branches = true;
  /// Runs between the analytic backward pass and the comparison. Negative
  /// controls use it to corrupt gradients.
  std::function<void()> after_backward;
};

struct TensorGradReport {
  std::string name;
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  std::int64_t coords_checked = 0;
  std::int64_t kinks_straddled = 0;  // probes that would have switched branch
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::int64_t kinks_straddled = 0;
  std::vector<TensorGradReport> tensors;
};

/// |analytic - numeric| / max(1, |analytic|, |numeric|)
double gradient_rel_error(double analytic, double numeric);

/// Compares backward() against central differences for every tensor in
/// `wrt`. `loss_fn` must build a scalar on the tape it is given and be a
/// deterministic function of the tensors' values.
GradCheckReport grad_check(const std::function<Tensor(Tape&)>& loss_fn, std::vector<NamedTensor> wrt,
                           const GradCheckOptions& options = {});

/// Single-point form: max relative error of d f/d point.
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Tensor point, double step = 1e-3);

}  // namespace mg
