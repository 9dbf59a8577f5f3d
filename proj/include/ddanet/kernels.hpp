#pragma once

#include <cstddef>
#include <cstdint>

// Raw convolution / pooling / normalisation kernels.
//
// Every kernel exists twice: an OpenMP-parallel production version in
// ddanet::kernels and a serial direct-loop version in
// ddanet::kernels::reference. The parallel kernels partition work only over
// output elements and keep each reduction in a fixed order, so their results
// do not depend on the thread count.
namespace ddanet::kernels {

// Geometry of a 2-D cross-correlation mapping (n, in_c, in_h, in_w) to
// (n, out_c, out_h, out_w) with a square stride and symmetric zero padding.
struct ConvGeometry {
  std::size_t n = 1;
  std::size_t in_c = 1, in_h = 1, in_w = 1;
  std::size_t out_c = 1;
  std::size_t k_h = 1, k_w = 1;
  std::size_t stride = 1, pad = 0;
  std::size_t out_h = 1, out_w = 1;

  std::size_t in_size() const { return n * in_c * in_h * in_w; }
  std::size_t out_size() const { return n * out_c * out_h * out_w; }
  std::size_t weight_size() const { return out_c * in_c * k_h * k_w; }
};

// Throws InvalidArgument if the output size is not a positive integer.
ConvGeometry make_conv_geometry(std::size_t n, std::size_t in_c, std::size_t in_h, std::size_t in_w, std::size_t out_c,
                                std::size_t k_h, std::size_t k_w, std::size_t stride, std::size_t pad);

// y = conv(x, w) + b. `bias` may be null. w is (out_c, in_c, k_h, k_w).
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y);

// dx = conv^T(dy, w), overwriting dx.
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx);

// dw = sum_n dy (x) x, overwriting dw; db (optional) = sum of dy per channel.
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* dy, T* dw, T* db);

// 2x2 / stride 2 max pooling over (planes, h, w). argmax receives the flat
// in-plane index of the first maximal element of each window.
template <typename T>
void maxpool2x2_forward(std::size_t planes, std::size_t h, std::size_t w, const T* x, T* y, std::int32_t* argmax);

template <typename T>
void maxpool2x2_backward(std::size_t planes, std::size_t h, std::size_t w, const T* dy, const std::int32_t* argmax,
                         T* dx);

// Per-channel mean and biased variance over (N, H, W).
template <typename T>
void channel_moments(std::size_t n, std::size_t c, std::size_t plane, const T* x, T* mean, T* var);

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y);

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx);

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* dy, T* dw, T* db);

template <typename T>
void maxpool2x2_forward(std::size_t planes, std::size_t h, std::size_t w, const T* x, T* y, std::int32_t* argmax);

template <typename T>
void channel_moments(std::size_t n, std::size_t c, std::size_t plane, const T* x, T* mean, T* var);

}  // namespace reference
}  // namespace ddanet::kernels
