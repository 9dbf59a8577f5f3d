#pragma once

#include <cstddef>
#include <string>
#include <type_traits>

#include "ddanet/tensor.hpp"

namespace ddanet::detail {

// Loops shorter than this stay serial; thread start-up would dominate.
inline constexpr std::ptrdiff_t kParallelGrain = 1 << 14;

// 64-bit tensors are the verification mode: every op output is checked.
template <typename T>
inline void verify_finite(const Tensor<T>& t, const char* op) {
  if constexpr (!std::is_same_v<T, float>) {
    if (!t.all_finite()) throw std::logic_error(std::string(op) + " produced a non-finite value");
  } else {
#ifndef NDEBUG
    if (!t.all_finite()) throw std::logic_error(std::string(op) + " produced a non-finite value");
#endif
  }
}

// Accumulator type: float widens to double, wider types accumulate in themselves.
template <typename T>
using Acc = std::conditional_t<std::is_same_v<T, float>, double, T>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

}  // namespace ddanet::detail
