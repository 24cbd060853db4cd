#pragma once

#include <span>

#include "mg/gradcheck.hpp"
#include "mg/network.hpp"

namespace mg {

/// Finite-difference check of the full training loss (cross-entropy, or the
/// hybrid loss for ConvAeClf) with respect to every parameter of `net`.
/// Runs in train mode with the dropout stream reseeded before every forward,
/// so the masks are identical across evaluations. The reconstruction target
/// is `batch` clamped to [0,1].
GradCheckReport check_network_gradients(Network& net, const Tensor& batch, std::span<const int> labels,
                                        const GradCheckOptions& options = {});

}  // namespace mg
