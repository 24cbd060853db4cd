#include <doctest.h>

#include <bit>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "mg/checkpoint.hpp"
#include "test_util.hpp"

using namespace mg;
using mg::testing::random_tensor;

namespace {

std::string bytes_of(const StateDict& d) {
  std::ostringstream out(std::ios::binary);
  write_tensors(out, d);
  return out.str();
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mg_test_checkpoint";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("byte layout of a single tensor") {
  StateDict d{{"w", Tensor({2}, std::vector<float>{1.0f, -2.0f})}};
  const std::string b = bytes_of(d);
  // magic, version, count, name len, name, ndim, dim, payload
  REQUIRE(b.size() == 4 + 4 + 4 + 2 + 1 + 1 + 4 + 8);
  CHECK(b.substr(0, 4) == "MGCK");
  CHECK(b[4] == 1);
  CHECK(b[8] == 1);
  CHECK(b[12] == 1);
  CHECK(b[13] == 0);
  CHECK(b[14] == 'w');
  CHECK(b[15] == 1);
  CHECK(b[16] == 2);
  // 1.0f = 0x3F800000 little-endian
  CHECK(static_cast<unsigned char>(b[20]) == 0x00);
  CHECK(static_cast<unsigned char>(b[23]) == 0x3F);
}

TEST_CASE("round trip is bit-identical, including special values") {
  auto t = random_tensor({3, 4, 5}, 1);
  t.at(0) = -0.0f;
  t.at(1) = std::numeric_limits<float>::denorm_min();
  t.at(2) = std::numeric_limits<float>::infinity();
  StateDict d{{"a.weight", t}, {"b", Tensor::scalar(7.0f)}, {"ünïcode", Tensor({1, 1, 1, 2}, 0.5f)}};
  std::istringstream in(bytes_of(d), std::ios::binary);
  auto back = read_tensors(in);
  REQUIRE(back.size() == d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(back[i].name == d[i].name);
    CHECK(back[i].tensor.shape() == d[i].tensor.shape());
    for (std::int64_t j = 0; j < d[i].tensor.numel(); ++j) {
      CHECK(std::bit_cast<std::uint32_t>(back[i].tensor.at(j)) == std::bit_cast<std::uint32_t>(d[i].tensor.at(j)));
    }
  }
  CHECK(bytes_of(back) == bytes_of(d));
}

TEST_CASE("malformed input is rejected") {
  std::istringstream bad_magic("XXXX0000");
  CHECK_THROWS_AS(read_tensors(bad_magic), CheckpointError);
  std::string b = bytes_of({{"w", Tensor({4}, 1.0f)}});
  std::istringstream truncated(b.substr(0, b.size() - 3));
  CHECK_THROWS_AS(read_tensors(truncated), CheckpointError);
  b[4] = 2;
  std::istringstream bad_version(b);
  CHECK_THROWS_AS(read_tensors(bad_version), CheckpointError);
  CHECK_THROWS_AS(load_tensors(temp_file("does_not_exist.mgck")), CheckpointError);
}

TEST_CASE("network save/load reproduces architecture, parameters and outputs") {
  Rng rng(3);
  ConvAeClfConfig cfg = ConvAeClfConfig::desk();
  cfg.encoder.input_size = 32;
  cfg.classifier_dims = {24, 3};
  cfg.alpha = 0.25f;
  auto net = build_convae_clf(cfg, rng);
  const auto x = random_tensor({2, 3, 32, 32}, 4);
  Tape quiet(false);
  net.forward(quiet, x);  // moves the running statistics
  net.set_mode(Mode::Eval);

  const auto path = temp_file("convae.mgck");
  save_network(path, net);
  auto loaded = load_network(path);
  CHECK(loaded.kind() == ModelKind::ConvAeClf);
  CHECK(loaded.convae_config().alpha == 0.25f);
  CHECK(loaded.convae_config().classifier_dims == cfg.classifier_dims);
  CHECK(loaded.mode() == Mode::Eval);

  const auto a = net.forward(quiet, x);
  const auto b = loaded.forward(quiet, x);
  for (std::int64_t i = 0; i < a.logits.numel(); ++i) CHECK(a.logits.at(i) == b.logits.at(i));
  for (std::int64_t i = 0; i < a.reconstruction.numel(); ++i) CHECK(a.reconstruction.at(i) == b.reconstruction.at(i));

  // saving the loaded network yields the same bytes
  const auto path2 = temp_file("convae2.mgck");
  save_network(path2, loaded);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
}

TEST_CASE("single-task network round trip") {
  Rng rng(5);
  VggStyleConfig cfg = VggStyleConfig::desk();
  cfg.convs_per_block = {2, 1, 2};
  cfg.residual = true;
  cfg.dropout_rate = 0.3f;
  auto net = build_single_task_cnn(cfg, rng);
  const auto path = temp_file("cnn.mgck");
  save_network(path, net);
  auto loaded = load_network(path);
  CHECK(loaded.kind() == ModelKind::SingleTaskCnn);
  CHECK(loaded.encoder_config().residual);
  CHECK(loaded.encoder_config().dropout_rate == 0.3f);
  CHECK(loaded.parameter_count() == net.parameter_count());
}
