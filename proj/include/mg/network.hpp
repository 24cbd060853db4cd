#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mg/ops.hpp"
#include "mg/rng.hpp"
#include "mg/tensor.hpp"

namespace mg {

inline constexpr int kNumGrades = 3;

enum class ModelKind { SingleTaskCnn, ConvAeClf };

/// VGG-style stack: each block is `convs_per_block[i]` x (conv3x3 + batchnorm
/// + ReLU) at `block_channels[i]` channels followed by a 2x2 max-pool.
struct VggStyleConfig {
  std::vector<int> block_channels{16, 32, 64};
  std::vector<int> convs_per_block{1, 1, 1};
  /// Fully-connected widths after the flattened conv features; the last entry
  /// is the number of grades.
  std::vector<int> fc_dims{128, kNumGrades};
  int input_channels = 3;
  int input_size = 64;
  float dropout_rate = 0.5f;
  /// Pairs of convs inside a block get a shortcut connection (1x1 projection
  /// when the channel count changes).
  bool residual = false;

  void validate() const;
  /// Spatial extent of the final pooled feature map.
  int final_size() const;
  /// Flattened size of the final pooled feature map.
  std::int64_t latent_dim() const;

  static VggStyleConfig desk();
  static VggStyleConfig vgg11(int input_size = 224);
  static VggStyleConfig vgg16(int input_size = 224);
};

/// Encoder / decoder with skip connections plus a fully-connected classifier
/// on the flattened encoder output.
struct ConvAeClfConfig {
  VggStyleConfig encoder;  // fc_dims unused
  std::vector<int> classifier_dims{1024, 128, kNumGrades};
  float alpha = 0.05f;
  float classifier_dropout = 0.4f;
  float leaky_slope = 0.01f;

  void validate() const;
  static ConvAeClfConfig desk();
};

struct ForwardOutput {
  Tensor logits;          // [N,3]
  Tensor latent;          // [N,d]
  Tensor reconstruction;  // [N,3,S,S], ConvAeClf only
};

using StateDict = std::vector<NamedTensor>;

class Network {
 public:
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  ModelKind kind() const { return kind_; }
  const VggStyleConfig& encoder_config() const { return encoder_cfg_; }
  const ConvAeClfConfig& convae_config() const { return convae_cfg_; }

  /// `batch` is [N,C,S,S]. With `param_grads` false, parameters are used
  /// detached so only the input (if it requires grad) receives gradients.
  ForwardOutput forward(Tape& tape, const Tensor& batch, bool param_grads = true);

  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }

  /// Replaces every skip tensor fed to the decoder with zeros (ablation).
  void set_skip_ablation(bool on) { ablate_skips_ = on; }

  /// Reseeds the generator that draws dropout masks.
  void seed_dropout(std::uint64_t seed) { rng_.seed(seed); }

  const std::vector<NamedTensor>& parameters() const { return params_; }
  const std::vector<NamedTensor>& buffers() const { return buffers_; }
  Tensor parameter(const std::string& name) const;
  void zero_grad();
  std::int64_t parameter_count() const;
  std::int64_t latent_dim() const { return encoder_cfg_.latent_dim(); }
  std::int64_t conv_layer_count() const;
  std::int64_t fc_layer_count() const;

  /// Deep copy of every parameter and buffer.
  StateDict state_dict() const;
  /// Copies values in by name; every parameter and buffer must be present with matching shape.
  void load_state_dict(const StateDict& state);

  friend Network build_single_task_cnn(const VggStyleConfig& cfg, Rng& rng);
  friend Network build_convae_clf(const ConvAeClfConfig& cfg, Rng& rng);

 private:
  struct ConvUnit {
    Tensor weight, bias;
    Tensor gamma, beta;
    BatchNormState bn;
  };
  struct Shortcut {
    std::size_t first_conv;
    std::optional<std::pair<Tensor, Tensor>> projection;
  };
  struct EncoderBlock {
    std::vector<ConvUnit> convs;
    std::vector<Shortcut> shortcuts;
  };
  struct Dense {
    Tensor weight, bias;
  };

  Network(ModelKind kind, VggStyleConfig enc, ConvAeClfConfig convae);

  Tensor add_param(const std::string& name, Shape shape);
  Tensor add_buffer(const std::string& name, Shape shape, float fill);
  void build_encoder(Rng& rng);
  Tensor run_conv_unit(Tape& tape, const Tensor& x, ConvUnit& unit, bool param_grads, bool activate);

  ModelKind kind_;
  VggStyleConfig encoder_cfg_;
  ConvAeClfConfig convae_cfg_;
  Mode mode_ = Mode::Train;
  bool ablate_skips_ = false;
  Rng rng_{0};

  std::vector<EncoderBlock> encoder_;
  std::vector<Dense> head_;          // fc stack (single-task) or classifier (ConvAeClf)
  std::vector<Dense> decoder_;       // one upsample block per encoder block, deepest first
  std::optional<Dense> decoder_out_;  // 1x1 conv to RGB

  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  std::map<std::string, std::size_t> param_index_;
};

/// Fills `tensor` i.i.d. uniform on [-sqrt(6/fan_in), +sqrt(6/fan_in)].
void he_uniform_init(Tensor& tensor, std::int64_t fan_in, Rng& rng);

Network build_single_task_cnn(const VggStyleConfig& cfg, Rng& rng);
Network build_convae_clf(const ConvAeClfConfig& cfg, Rng& rng);

/// Closed-form parameter count of a configuration (weights, biases, batchnorm affine).
std::int64_t count_parameters(const VggStyleConfig& cfg);
std::int64_t count_parameters(const ConvAeClfConfig& cfg);

struct HybridLossTerms {
  Tensor reconstruction;
  Tensor classification;
};

/// alpha * mse(reconstruction, target) + (1 - alpha) * cross_entropy(logits, labels)
Tensor hybrid_loss(Tape& tape, const Tensor& logits, std::span<const int> labels, const Tensor& reconstruction,
                   const Tensor& target, float alpha, HybridLossTerms* terms = nullptr);

}  // namespace mg
