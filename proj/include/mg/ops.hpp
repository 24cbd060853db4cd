#pragma once

#include <span>
#include <vector>

#include "mg/rng.hpp"
#include "mg/tensor.hpp"

// Differentiable operations. Every op takes the Tape it records onto; an op
// records a backward entry only when the tape is recording and at least one
// input requires grad.

namespace mg {

enum class Mode { Train, Eval };

/// Discrete choices (ReLU side, max-pool winner) made by piecewise-linear ops
/// on this thread while the trace is alive. A recording trace stores them; a
/// replaying trace forces a later forward pass to take the recorded choices,
/// which evaluates the network on the linear piece of the recorded point.
/// Finite differences taken that way measure the derivative rather than a
/// kink that the probe happens to straddle.
class BranchTrace {
 public:
  enum class Kind { Record, Replay };

  /// Replay traces read from `source`, which must outlive them.
  explicit BranchTrace(Kind kind, const BranchTrace* source = nullptr);
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  /// Stops observing ops; the recorded choices stay available for replay.
  void stop();

  /// Replay only: true when some op would have chosen differently.
  bool diverged() const { return diverged_; }

  static BranchTrace* current();
  /// Returns the choices to use for a ReLU-like op over `x` (1 = positive side).
  std::vector<std::uint8_t> sides(std::span<const float> x);
  /// Returns the winner indices to use for a max-pool whose natural winners are `natural`.
  std::vector<std::int64_t> winners(std::vector<std::int64_t> natural);

 private:
  Kind kind_;
  const BranchTrace* source_;
  BranchTrace* previous_;
  std::vector<std::vector<std::uint8_t>> sides_;
  std::vector<std::vector<std::int64_t>> winners_;
  std::size_t side_cursor_ = 0;
  std::size_t winner_cursor_ = 0;
  bool diverged_ = false;
  bool stopped_ = false;
};

// ---- convolution and pooling ------------------------------------------------

/// 2-D cross-correlation. `input` is [C,H,W] or [N,C,H,W]; `kernel` is
/// [C_out,C_in,kh,kw]; `bias` is [C_out].
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride = 1, int padding = 0);

/// Max pooling over square windows; ties resolve to the first element in row-major order.
Tensor max_pool2d(Tape& tape, const Tensor& input, int window, int stride);

/// Nearest-neighbour 2x spatial upsampling of [C,H,W] or [N,C,H,W].
Tensor upsample_nearest2x(Tape& tape, const Tensor& input);

/// Concatenation along the channel axis.
Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);

enum class Activation { Relu, LeakyRelu, Sigmoid, None };

struct ActivationSpec {
  Activation kind = Activation::Relu;
  float slope = 0.01f;  // LeakyRelu only
};

/// upsample(input) ++ skip along channels, then conv (3x3, pad 1) and activation.
Tensor upsample_block(Tape& tape, const Tensor& input, const Tensor& skip, const Tensor& kernel,
                      const Tensor& bias, ActivationSpec act = {});

// ---- dense -----------------------------------------------------------------

/// out = input * weight^T + bias; input [N,d_in], weight [d_out,d_in], bias [d_out].
Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Flattens every axis after the first: [N,...] -> [N,prod(...)].
Tensor flatten(Tape& tape, const Tensor& input);

// ---- elementwise -----------------------------------------------------------

Tensor relu(Tape& tape, const Tensor& input);
Tensor leaky_relu(Tape& tape, const Tensor& input, float slope);
Tensor sigmoid(Tape& tape, const Tensor& input);
Tensor activation(Tape& tape, const Tensor& input, ActivationSpec act);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, float factor);

/// Scalar sum of all elements.
Tensor sum(Tape& tape, const Tensor& input);
/// Scalar holding input[flat_index].
Tensor pick(Tape& tape, const Tensor& input, std::int64_t flat_index);

// ---- normalization / regularization -----------------------------------------

struct BatchNormState {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  float eps = 1e-5f;
  float momentum = 0.1f;
};

/// Per-channel batch normalization of [N,C,H,W]. Train mode normalizes with
/// batch statistics and updates the running statistics in place; eval mode
/// uses the running statistics.
Tensor batch_norm2d(Tape& tape, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, Mode mode);

/// Inverted dropout: survivors are scaled by 1/(1-rate). Identity in eval mode.
Tensor dropout(Tape& tape, const Tensor& input, float rate, Mode mode, Rng& rng);

// ---- probabilities and losses ------------------------------------------------

/// Row-wise softmax of [N,K] logits.
Tensor softmax(Tape& tape, const Tensor& logits);

/// Mean negative log-likelihood of `labels` under softmax(logits).
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels);

/// Per-row cross-entropy, no gradient.
std::vector<float> cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels);

/// Mean of squared differences over every element.
Tensor mse_loss(Tape& tape, const Tensor& reconstruction, const Tensor& target);

}  // namespace mg
