#pragma once

#include <string>
#include <vector>

#include "mg/tensor.hpp"

namespace mg {

enum class Grade { A = 0, B = 1, C = 2 };

inline char grade_char(Grade g) { return static_cast<char>('A' + static_cast<int>(g)); }

/// An image in [0,1] units ([C,H,W], before feature scaling) with its label.
struct Sample {
  std::string id;
  Tensor image;
  int label = 0;  // Grade as an index
};

using SampleSet = std::vector<Sample>;

}  // namespace mg
