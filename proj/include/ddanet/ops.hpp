#pragma once

#include <vector>

#include "ddanet/graph.hpp"

namespace ddanet {

enum class BinaryKind { add, mul };
enum class ActivationKind { relu, sigmoid };
enum class ReduceKind { sum, mean };

// Elementwise add/mul. `b` may also have shape (N,1,H,W) against a's
// (N,C,H,W), in which case it is broadcast over the channel axis.
template <typename T>
Var<T> ew_binary(const Var<T>& a, const Var<T>& b, BinaryKind kind);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return ew_binary(a, b, BinaryKind::add);
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return ew_binary(a, b, BinaryKind::mul);
}

template <typename T>
Var<T> activation(const Var<T>& x, ActivationKind kind);

template <typename T>
Var<T> relu(const Var<T>& x) {
  return activation(x, ActivationKind::relu);
}
template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return activation(x, ActivationKind::sigmoid);
}

// Reduced axes are kept with size 1. An empty axis list reduces all axes.
template <typename T>
Var<T> reduce(const Var<T>& x, ReduceKind kind, std::vector<std::size_t> axes = {});

// Channel concatenation of two rank-4 tensors; a's channels come first.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

// Channels [begin, end) of a rank-4 tensor.
template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t end);

// y = x * w^T + b with x (N, C_in), w (C_out, C_in), b (C_out).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

// x (N,C,H,W) scaled per (n, c) by s (N,C).
template <typename T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& s);

// Multiplication by a constant.
template <typename T>
Var<T> scale(const Var<T>& x, T factor);

}  // namespace ddanet
