#pragma once

#include <cstddef>
#include <vector>

#include "kd/tensor.hpp"

namespace kd::data {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kSeparatorId = 1;

/// Next-token training batch. targets[i, t] = inputs[i, t+1] of the
/// underlying (L+1)-token window; `windows` records which windows were used.
struct Batch {
  IntTensor inputs;
  IntTensor targets;
  std::vector<std::size_t> windows;

  std::size_t size() const { return inputs.shape[0]; }
  std::size_t seq_len() const { return inputs.shape[1]; }
};

}  // namespace kd::data
