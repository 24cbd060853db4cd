#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "mg/network.hpp"

namespace mg {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary layout, all integers and floats little-endian:
//   "MGCK" | u32 version=1 | u32 count |
//   count x ( u16 name_len | name (UTF-8) | u8 ndim | u32 dims[ndim] | f32 payload[prod(dims)] )

void write_tensors(std::ostream& out, const StateDict& tensors);
StateDict read_tensors(std::istream& in);

void save_tensors(const std::filesystem::path& path, const StateDict& tensors);
StateDict load_tensors(const std::filesystem::path& path);

/// Network checkpoint: architecture tensors under "meta." followed by the state dict.
void save_network(const std::filesystem::path& path, const Network& net);
Network load_network(const std::filesystem::path& path);

/// Architecture description as "meta." tensors, and its inverse.
StateDict network_meta(const Network& net);
Network build_from_meta(const StateDict& tensors);

}  // namespace mg
