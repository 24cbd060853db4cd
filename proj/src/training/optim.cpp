#include <cmath>
#include <stdexcept>

#include "mg/training.hpp"

namespace mg {

namespace {

void ensure_slots(std::span<const NamedTensor> params, std::vector<std::vector<float>>& slots) {
  if (slots.empty()) {
    for (const auto& p : params) slots.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
  }
  if (slots.size() != params.size()) throw ParameterError("optimizer: slot count does not match the parameters");
}

void require_grad(const NamedTensor& p) {
  if (!p.tensor.has_grad()) throw ParameterError("optimizer: parameter '" + p.name + "' has no gradient");
}

}  // namespace

void sgd_step(std::span<const NamedTensor> params, OptimizerSlots& slots, double lr, double momentum) {
  for (const auto& p : params) require_grad(p);
  ensure_slots(params, slots.first);
  const auto mu = static_cast<float>(momentum), rate = static_cast<float>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].tensor;
    auto theta = t.data();
    const auto g = std::as_const(t).grad();
    auto& v = slots.first[k];
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = mu * v[i] + g[i];
      theta[i] -= rate * v[i];
    }
  }
  ++slots.step;
}

void adam_step(std::span<const NamedTensor> params, OptimizerSlots& slots, double lr, double beta1, double beta2,
               double eps) {
  for (const auto& p : params) require_grad(p);
  ensure_slots(params, slots.first);
  ensure_slots(params, slots.second);
  ++slots.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(slots.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(slots.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].tensor;
    auto theta = t.data();
    const auto g = std::as_const(t).grad();
    auto& m = slots.first[k];
    auto& v = slots.second[k];
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<float>(beta1 * m[i] + (1.0 - beta1) * gi);
      v[i] = static_cast<float>(beta2 * v[i] + (1.0 - beta2) * gi * gi);
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      theta[i] = static_cast<float>(theta[i] - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

void optimizer_step(const OptimizerConfig& cfg, std::span<const NamedTensor> params, OptimizerSlots& slots,
                    double lr) {
  if (cfg.kind == OptimizerConfig::Kind::Sgd) {
    sgd_step(params, slots, lr, cfg.momentum);
  } else {
    adam_step(params, slots, lr, cfg.beta1, cfg.beta2, cfg.eps);
  }
}

double step_decay(double lr0, int epoch, int every, double factor) {
  if (epoch < 0 || every < 1) throw ParameterError("step_decay: need epoch >= 0 and every >= 1");
  return lr0 * std::pow(factor, epoch / every);
}

double ReduceOnPlateau::update(double val_accuracy) {
  if (val_accuracy > best) {
    best = val_accuracy;
    stalls = 0;
  } else if (++stalls >= patience) {
    lr *= factor;
    stalls = 0;
  }
  return lr;
}

bool EarlyStopping::update(double val_accuracy) {
  if (val_accuracy > best) {
    best = val_accuracy;
    best_call = calls;
    stalls = 0;
  } else {
    ++stalls;
  }
  ++calls;
  return stalls >= patience;
}

}  // namespace mg
