#include "mg/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

namespace mg {

namespace {

constexpr std::array<char, 4> kMagic{'M', 'G', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class UInt>
void put_le(std::ostream& out, UInt v) {
  std::array<char, sizeof(UInt)> bytes;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <class UInt>
UInt get_le(std::istream& in) {
  std::array<unsigned char, sizeof(UInt)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) throw CheckpointError("checkpoint: truncated file");
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) v |= static_cast<UInt>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_tensors(std::ostream& out, const StateDict& tensors) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw CheckpointError("checkpoint: tensor name too long: " + name.substr(0, 40));
    if (t.ndim() > 0xFF) throw CheckpointError("checkpoint: too many dimensions for " + name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
    for (auto d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw CheckpointError("checkpoint: write failed");
}

StateDict read_tensors(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw CheckpointError("checkpoint: bad magic");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kVersion) throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = get_le<std::uint32_t>(in);
  StateDict out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint16_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw CheckpointError("checkpoint: truncated file");
    const auto ndim = get_le<std::uint8_t>(in);
    Shape shape(ndim);
    for (auto& d : shape) {
      d = get_le<std::uint32_t>(in);
      if (d == 0) throw CheckpointError("checkpoint: zero extent in " + name);
    }
    Tensor t(shape);
    for (auto& v : t.data()) v = std::bit_cast<float>(get_le<std::uint32_t>(in));
    out.push_back({std::move(name), std::move(t)});
  }
  return out;
}

void save_tensors(const std::filesystem::path& path, const StateDict& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_tensors(out, tensors);
}

StateDict load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_tensors(in);
}

// ---- architecture metadata ----------------------------------------------------

namespace {

Tensor ints(const std::vector<int>& v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor({n}, std::vector<float>(v.begin(), v.end()));
}

std::vector<int> to_ints(const Tensor& t) {
  std::vector<int> v;
  for (float f : t.data()) v.push_back(static_cast<int>(f));
  return v;
}

}  // namespace

StateDict network_meta(const Network& net) {
  const auto& e = net.encoder_config();
  StateDict m;
  m.push_back({"meta.kind", Tensor::scalar(net.kind() == ModelKind::ConvAeClf ? 1.0f : 0.0f)});
  m.push_back({"meta.block_channels", ints(e.block_channels)});
  m.push_back({"meta.convs_per_block", ints(e.convs_per_block)});
  m.push_back({"meta.fc_dims", ints(e.fc_dims)});
  m.push_back({"meta.input", ints({e.input_channels, e.input_size})});
  m.push_back({"meta.residual", Tensor::scalar(e.residual ? 1.0f : 0.0f)});
  m.push_back({"meta.dropout", Tensor::scalar(e.dropout_rate)});
  if (net.kind() == ModelKind::ConvAeClf) {
    const auto& c = net.convae_config();
    m.push_back({"meta.classifier_dims", ints(c.classifier_dims)});
    m.push_back({"meta.alpha", Tensor::scalar(c.alpha)});
    m.push_back({"meta.classifier_dropout", Tensor::scalar(c.classifier_dropout)});
    m.push_back({"meta.leaky_slope", Tensor::scalar(c.leaky_slope)});
  }
  return m;
}

Network build_from_meta(const StateDict& tensors) {
  std::map<std::string, Tensor> meta;
  for (const auto& [name, t] : tensors) {
    if (name.rfind("meta.", 0) == 0) meta[name] = t;
  }
  auto get = [&](const std::string& key) -> const Tensor& {
    auto it = meta.find(key);
    if (it == meta.end()) throw CheckpointError("checkpoint: missing " + key);
    return it->second;
  };
  VggStyleConfig enc;
  enc.block_channels = to_ints(get("meta.block_channels"));
  enc.convs_per_block = to_ints(get("meta.convs_per_block"));
  enc.fc_dims = to_ints(get("meta.fc_dims"));
  const auto input = to_ints(get("meta.input"));
  if (input.size() != 2) throw CheckpointError("checkpoint: malformed meta.input");
  enc.input_channels = input[0];
  enc.input_size = input[1];
  enc.residual = get("meta.residual").item() != 0.0f;
  enc.dropout_rate = get("meta.dropout").item();

  Rng rng(0);
  if (get("meta.kind").item() == 0.0f) return build_single_task_cnn(enc, rng);
  ConvAeClfConfig c;
  c.encoder = enc;
  c.classifier_dims = to_ints(get("meta.classifier_dims"));
  c.alpha = get("meta.alpha").item();
  c.classifier_dropout = get("meta.classifier_dropout").item();
  c.leaky_slope = get("meta.leaky_slope").item();
  return build_convae_clf(c, rng);
}

void save_network(const std::filesystem::path& path, const Network& net) {
  auto all = network_meta(net);
  for (auto& e : net.state_dict()) all.push_back(std::move(e));
  save_tensors(path, all);
}

Network load_network(const std::filesystem::path& path) {
  const auto tensors = load_tensors(path);
  Network net = build_from_meta(tensors);
  net.load_state_dict(tensors);
  net.set_mode(Mode::Eval);
  return net;
}

}  // namespace mg
