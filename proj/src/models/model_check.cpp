#include "mg/model_check.hpp"

#include <algorithm>

namespace mg {

GradCheckReport check_network_gradients(Network& net, const Tensor& batch, std::span<const int> labels,
                                        const GradCheckOptions& options) {
  const Mode saved = net.mode();
  net.set_mode(Mode::Train);
  const std::uint64_t dropout_seed = derive_seed(options.seed, {0xd50u});

  Tensor target = batch.clone();
  for (auto& v : target.data()) v = std::clamp(v, 0.0f, 1.0f);

  const auto loss_fn = [&](Tape& tape) {
    net.seed_dropout(dropout_seed);
    auto out = net.forward(tape, batch);
    if (net.kind() == ModelKind::ConvAeClf) {
      return hybrid_loss(tape, out.logits, labels, out.reconstruction, target, net.convae_config().alpha);
    }
    return softmax_cross_entropy(tape, out.logits, labels);
  };
  std::vector<NamedTensor> wrt = net.parameters();
  net.zero_grad();
  auto report = grad_check(loss_fn, std::move(wrt), options);
  net.set_mode(saved);
  return report;
}

}  // namespace mg
