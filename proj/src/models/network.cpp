#include "mg/network.hpp"

#include <cmath>

namespace mg {

// ---- configs ---------------------------------------------------------------

void VggStyleConfig::validate() const {
  if (block_channels.empty()) throw ParameterError("config: at least one conv block is required");
  if (block_channels.size() != convs_per_block.size()) {
    throw ParameterError("config: block_channels and convs_per_block differ in length");
  }
  for (std::size_t i = 0; i < block_channels.size(); ++i) {
    if (block_channels[i] < 1 || convs_per_block[i] < 1) {
      throw ParameterError("config: block " + std::to_string(i) + " needs positive channels and conv count");
    }
  }
  if (input_channels < 1 || input_size < 1) throw ParameterError("config: input extents must be positive");
  const int blocks = static_cast<int>(block_channels.size());
  if ((input_size >> blocks) == 0 && blocks < 31) {
    throw DimensionError("config: spatial size " + std::to_string(input_size) + " collapses to zero before block " +
                         std::to_string(blocks));
  }
  if (blocks >= 31 || input_size % (1 << blocks) != 0) {
    throw DimensionError("config: input size " + std::to_string(input_size) + " is not divisible by 2^" +
                         std::to_string(blocks));
  }
  if (fc_dims.empty() || fc_dims.back() != kNumGrades) {
    throw ParameterError("config: fc_dims must end in " + std::to_string(kNumGrades));
  }
  for (int d : fc_dims) {
    if (d < 1) throw ParameterError("config: fc widths must be positive");
  }
  if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f)) throw ParameterError("config: dropout rate must be in [0,1)");
}

int VggStyleConfig::final_size() const { return input_size >> static_cast<int>(block_channels.size()); }

std::int64_t VggStyleConfig::latent_dim() const {
  const std::int64_t s = final_size();
  return static_cast<std::int64_t>(block_channels.back()) * s * s;
}

VggStyleConfig VggStyleConfig::desk() { return {}; }

VggStyleConfig VggStyleConfig::vgg11(int input_size) {
  VggStyleConfig c;
  c.block_channels = {64, 128, 256, 512, 512};
  c.convs_per_block = {1, 1, 2, 2, 2};
  c.fc_dims = {4096, 4096, kNumGrades};
  c.input_size = input_size;
  return c;
}

VggStyleConfig VggStyleConfig::vgg16(int input_size) {
  VggStyleConfig c = vgg11(input_size);
  c.convs_per_block = {2, 2, 3, 3, 3};
  return c;
}

void ConvAeClfConfig::validate() const {
  VggStyleConfig enc = encoder;
  enc.fc_dims = {kNumGrades};
  enc.validate();
  if (classifier_dims.empty() || classifier_dims.back() != kNumGrades) {
    throw ParameterError("config: classifier_dims must end in " + std::to_string(kNumGrades));
  }
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw ParameterError("config: alpha must be in [0,1]");
  if (!(classifier_dropout >= 0.0f && classifier_dropout < 1.0f)) {
    throw ParameterError("config: classifier dropout must be in [0,1)");
  }
}

ConvAeClfConfig ConvAeClfConfig::desk() {
  ConvAeClfConfig c;
  c.encoder = VggStyleConfig::desk();
  return c;
}

// ---- init ------------------------------------------------------------------

void he_uniform_init(Tensor& tensor, std::int64_t fan_in, Rng& rng) {
  if (fan_in < 1) throw ParameterError("he_uniform_init: fan_in must be >= 1");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : tensor.data()) v = static_cast<float>(uniform(rng, -bound, bound));
}

// ---- network ---------------------------------------------------------------

Network::Network(ModelKind kind, VggStyleConfig enc, ConvAeClfConfig convae)
    : kind_(kind), encoder_cfg_(std::move(enc)), convae_cfg_(std::move(convae)) {}

Tensor Network::add_param(const std::string& name, Shape shape) {
  if (param_index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
  Tensor t(std::move(shape), 0.0f);
  t.set_requires_grad(true);
  param_index_[name] = params_.size();
  params_.push_back({name, t});
  return t;
}

Tensor Network::add_buffer(const std::string& name, Shape shape, float fill) {
  Tensor t(std::move(shape), fill);
  buffers_.push_back({name, t});
  return t;
}

void Network::build_encoder(Rng& rng) {
  int in_ch = encoder_cfg_.input_channels;
  for (std::size_t b = 0; b < encoder_cfg_.block_channels.size(); ++b) {
    const int ch = encoder_cfg_.block_channels[b];
    EncoderBlock block;
    const std::string prefix = "enc" + std::to_string(b);
    int conv_in = in_ch;
    for (int i = 0; i < encoder_cfg_.convs_per_block[b]; ++i) {
      const std::string name = prefix + ".conv" + std::to_string(i);
      ConvUnit u;
      u.weight = add_param(name + ".weight", {ch, conv_in, 3, 3});
      he_uniform_init(u.weight, static_cast<std::int64_t>(conv_in) * 9, rng);
      u.bias = add_param(name + ".bias", {ch});
      const std::string bn = prefix + ".bn" + std::to_string(i);
      u.gamma = add_param(bn + ".gamma", {ch});
      for (auto& v : u.gamma.data()) v = 1.0f;
      u.beta = add_param(bn + ".beta", {ch});
      u.bn.running_mean = add_buffer(bn + ".running_mean", {ch}, 0.0f);
      u.bn.running_var = add_buffer(bn + ".running_var", {ch}, 1.0f);
      block.convs.push_back(std::move(u));
      conv_in = ch;
    }
    if (encoder_cfg_.residual) {
      for (std::size_t i = 0; i + 1 < block.convs.size(); i += 2) {
        Shortcut s{i, std::nullopt};
        const int from = (i == 0) ? in_ch : ch;
        if (from != ch) {
          const std::string name = prefix + ".proj" + std::to_string(i / 2);
          auto w = add_param(name + ".weight", {ch, from, 1, 1});
          he_uniform_init(w, from, rng);
          auto bias = add_param(name + ".bias", {ch});
          s.projection = std::make_pair(w, bias);
        }
        block.shortcuts.push_back(std::move(s));
      }
    }
    encoder_.push_back(std::move(block));
    in_ch = ch;
  }
}

Network build_single_task_cnn(const VggStyleConfig& cfg, Rng& rng) {
  cfg.validate();
  Network net(ModelKind::SingleTaskCnn, cfg, ConvAeClfConfig{});
  net.build_encoder(rng);
  std::int64_t in = cfg.latent_dim();
  for (std::size_t i = 0; i < cfg.fc_dims.size(); ++i) {
    const std::string name = "fc" + std::to_string(i);
    Network::Dense d;
    d.weight = net.add_param(name + ".weight", {cfg.fc_dims[i], in});
    he_uniform_init(d.weight, in, rng);
    d.bias = net.add_param(name + ".bias", {cfg.fc_dims[i]});
    net.head_.push_back(std::move(d));
    in = cfg.fc_dims[i];
  }
  return net;
}

Network build_convae_clf(const ConvAeClfConfig& cfg, Rng& rng) {
  cfg.validate();
  VggStyleConfig enc = cfg.encoder;
  Network net(ModelKind::ConvAeClf, enc, cfg);
  net.build_encoder(rng);

  // decoder, deepest block first; block j outputs block_channels[j] at the resolution of skip j
  const auto& chans = enc.block_channels;
  int prev = chans.back();
  for (std::size_t k = chans.size(); k-- > 0;) {
    const std::string name = "dec" + std::to_string(k);
    const int in_ch = prev + chans[k];
    Network::Dense d;
    d.weight = net.add_param(name + ".weight", {chans[k], in_ch, 3, 3});
    he_uniform_init(d.weight, static_cast<std::int64_t>(in_ch) * 9, rng);
    d.bias = net.add_param(name + ".bias", {chans[k]});
    net.decoder_.push_back(std::move(d));
    prev = chans[k];
  }
  Network::Dense out;
  out.weight = net.add_param("dec.out.weight", {enc.input_channels, prev, 1, 1});
  he_uniform_init(out.weight, prev, rng);
  out.bias = net.add_param("dec.out.bias", {enc.input_channels});
  net.decoder_out_ = std::move(out);

  std::int64_t in = enc.latent_dim();
  for (std::size_t i = 0; i < cfg.classifier_dims.size(); ++i) {
    const std::string name = "clf" + std::to_string(i);
    Network::Dense d;
    d.weight = net.add_param(name + ".weight", {cfg.classifier_dims[i], in});
    he_uniform_init(d.weight, in, rng);
    d.bias = net.add_param(name + ".bias", {cfg.classifier_dims[i]});
    net.head_.push_back(std::move(d));
    in = cfg.classifier_dims[i];
  }
  return net;
}

Tensor Network::run_conv_unit(Tape& tape, const Tensor& x, ConvUnit& unit, bool param_grads, bool activate) {
  auto p = [param_grads](const Tensor& t) { return param_grads ? t : t.detach(); };
  auto y = conv2d(tape, x, p(unit.weight), p(unit.bias), 1, 1);
  y = batch_norm2d(tape, y, p(unit.gamma), p(unit.beta), unit.bn, mode_);
  return activate ? relu(tape, y) : y;
}

ForwardOutput Network::forward(Tape& tape, const Tensor& batch, bool param_grads) {
  const auto& cfg = encoder_cfg_;
  if (batch.ndim() != 4 || batch.dim(1) != cfg.input_channels || batch.dim(2) != cfg.input_size ||
      batch.dim(3) != cfg.input_size) {
    throw DimensionError("forward: expected [N," + std::to_string(cfg.input_channels) + "," +
                         std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) + "], got " +
                         shape_str(batch.shape()));
  }
  auto p = [param_grads](const Tensor& t) { return param_grads ? t : t.detach(); };

  std::vector<Tensor> skips;
  Tensor x = batch;
  for (auto& block : encoder_) {
    std::size_t next_shortcut = 0;
    for (std::size_t i = 0; i < block.convs.size(); ++i) {
      const bool pair_start = next_shortcut < block.shortcuts.size() && block.shortcuts[next_shortcut].first_conv == i;
      if (!pair_start) {
        x = run_conv_unit(tape, x, block.convs[i], param_grads, true);
        continue;
      }
      const auto& sc = block.shortcuts[next_shortcut++];
      Tensor identity = x;
      if (sc.projection) identity = conv2d(tape, x, p(sc.projection->first), p(sc.projection->second));
      auto h = run_conv_unit(tape, x, block.convs[i], param_grads, true);
      h = run_conv_unit(tape, h, block.convs[i + 1], param_grads, false);
      x = relu(tape, add(tape, h, identity));
      ++i;
    }
    skips.push_back(x);
    x = max_pool2d(tape, x, 2, 2);
  }

  ForwardOutput out;
  out.latent = flatten(tape, x);

  Tensor h = out.latent;
  const bool convae = kind_ == ModelKind::ConvAeClf;
  for (std::size_t i = 0; i < head_.size(); ++i) {
    h = linear(tape, h, p(head_[i].weight), p(head_[i].bias));
    if (i + 1 == head_.size()) break;
    if (convae) {
      h = leaky_relu(tape, h, convae_cfg_.leaky_slope);
      h = dropout(tape, h, convae_cfg_.classifier_dropout, mode_, rng_);
    } else {
      h = relu(tape, h);
      h = dropout(tape, h, cfg.dropout_rate, mode_, rng_);
    }
  }
  out.logits = h;

  if (convae) {
    Tensor y = x;
    for (std::size_t k = 0; k < decoder_.size(); ++k) {
      Tensor skip = skips[skips.size() - 1 - k];
      if (ablate_skips_) skip = Tensor::zeros(skip.shape());
      y = upsample_block(tape, y, skip, p(decoder_[k].weight), p(decoder_[k].bias), {Activation::Relu});
    }
    out.reconstruction = sigmoid(tape, conv2d(tape, y, p(decoder_out_->weight), p(decoder_out_->bias)));
  }
  return out;
}

Tensor Network::parameter(const std::string& name) const {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second].tensor;
}

void Network::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::int64_t Network::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::int64_t Network::conv_layer_count() const {
  std::int64_t n = 0;
  for (const auto& b : encoder_) n += static_cast<std::int64_t>(b.convs.size());
  return n;
}

std::int64_t Network::fc_layer_count() const { return static_cast<std::int64_t>(head_.size()); }

StateDict Network::state_dict() const {
  StateDict out;
  out.reserve(params_.size() + buffers_.size());
  for (const auto& p : params_) out.push_back({p.name, p.tensor.clone()});
  for (const auto& b : buffers_) out.push_back({b.name, b.tensor.clone()});
  return out;
}

void Network::load_state_dict(const StateDict& state) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& e : state) by_name[e.name] = &e.tensor;
  auto copy_into = [&](const NamedTensor& dst) {
    auto it = by_name.find(dst.name);
    if (it == by_name.end()) throw std::invalid_argument("state is missing tensor " + dst.name);
    if (it->second->shape() != dst.tensor.shape()) {
      throw DimensionError("state tensor " + dst.name + " has shape " + shape_str(it->second->shape()) +
                           ", expected " + shape_str(dst.tensor.shape()));
    }
    Tensor target = dst.tensor;
    const auto src = it->second->data();
    std::copy(src.begin(), src.end(), target.data().begin());
  };
  for (const auto& p : params_) copy_into(p);
  for (const auto& b : buffers_) copy_into(b);
}

// ---- closed-form counts --------------------------------------------------------

namespace {

std::int64_t encoder_params(const VggStyleConfig& cfg) {
  std::int64_t n = 0;
  std::int64_t in = cfg.input_channels;
  for (std::size_t b = 0; b < cfg.block_channels.size(); ++b) {
    const std::int64_t ch = cfg.block_channels[b];
    for (int i = 0; i < cfg.convs_per_block[b]; ++i) {
      const std::int64_t from = i == 0 ? in : ch;
      n += ch * from * 9 + ch + 2 * ch;  // kernel, bias, gamma, beta
    }
    if (cfg.residual && cfg.convs_per_block[b] >= 2 && in != ch) n += ch * in + ch;  // first-pair projection
    in = ch;
  }
  return n;
}

std::int64_t dense_params(std::int64_t in, const std::vector<int>& dims) {
  std::int64_t n = 0;
  for (int d : dims) {
    n += in * d + d;
    in = d;
  }
  return n;
}

}  // namespace

std::int64_t count_parameters(const VggStyleConfig& cfg) {
  return encoder_params(cfg) + dense_params(cfg.latent_dim(), cfg.fc_dims);
}

std::int64_t count_parameters(const ConvAeClfConfig& cfg) {
  const auto& enc = cfg.encoder;
  std::int64_t n = encoder_params(enc) + dense_params(enc.latent_dim(), cfg.classifier_dims);
  std::int64_t prev = enc.block_channels.back();
  for (std::size_t k = enc.block_channels.size(); k-- > 0;) {
    const std::int64_t ch = enc.block_channels[k];
    n += ch * (prev + ch) * 9 + ch;
    prev = ch;
  }
  return n + enc.input_channels * prev + enc.input_channels;
}

// ---- loss ----------------------------------------------------------------------

Tensor hybrid_loss(Tape& tape, const Tensor& logits, std::span<const int> labels, const Tensor& reconstruction,
                   const Tensor& target, float alpha, HybridLossTerms* terms) {
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw ParameterError("hybrid_loss: alpha must be in [0,1]");
  auto rec = mse_loss(tape, reconstruction, target);
  auto clf = softmax_cross_entropy(tape, logits, labels);
  if (terms) *terms = {rec, clf};
  return add(tape, scale(tape, rec, alpha), scale(tape, clf, 1.0f - alpha));
}

}  // namespace mg
