#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "ddanet/graph.hpp"
#include "ddanet/ops.hpp"
#include "ddanet/rng.hpp"

namespace ddanet {

enum class Mode { train, eval };

// Parameters are learnable; buffers (batch-norm running statistics) are state.
enum class TensorRole { parameter, buffer };

// Where a forward pass records to. With no graph, parameters enter the
// computation as untracked views and nothing is recorded.
template <typename T>
struct ForwardContext {
  Graph<T>* graph = nullptr;
  Mode mode = Mode::eval;

  Var<T> param(const Tensor<T>& t) const { return graph ? graph->parameter(t) : Var<T>::view(t); }
};

template <typename T>
struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  // Transposed convolutions store weight as (in, out, kh, kw), so one weight
  // tensor serves a convolution and its adjoint.
  bool transposed = false;
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;

  // Zero-initialised spec; pass an Rng to draw Kaiming-uniform weights.
  static ConvSpec create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
                         bool with_bias, bool transposed, Rng* rng);

  void validate() const;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight, TensorRole::parameter);
    if (bias) f(prefix + ".bias", *bias, TensorRole::parameter);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".weight", weight, TensorRole::parameter);
    if (bias) f(prefix + ".bias", *bias, TensorRole::parameter);
  }
};

template <typename T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  static BatchNormState create(std::size_t channels);

  std::size_t channels() const { return gamma.numel(); }
  void validate() const;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    visit_impl(*this, prefix, f);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    visit_impl(*this, prefix, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& s, const std::string& prefix, F& f) {
    f(prefix + ".gamma", s.gamma, TensorRole::parameter);
    f(prefix + ".beta", s.beta, TensorRole::parameter);
    f(prefix + ".running_mean", s.running_mean, TensorRole::buffer);
    f(prefix + ".running_var", s.running_var, TensorRole::buffer);
  }
};

// Squeeze-and-excitation: C -> C/r -> C fully connected bottleneck.
template <typename T>
struct SEParams {
  std::size_t channels = 0;
  std::size_t reduction = 8;
  Tensor<T> fc1_weight;  // (C/r, C)
  Tensor<T> fc1_bias;    // (C/r)
  Tensor<T> fc2_weight;  // (C, C/r)
  Tensor<T> fc2_bias;    // (C)

  static SEParams create(std::size_t channels, std::size_t reduction, Rng* rng);

  void validate() const;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    visit_impl(*this, prefix, f);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    visit_impl(*this, prefix, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& s, const std::string& prefix, F& f) {
    f(prefix + ".fc1.weight", s.fc1_weight, TensorRole::parameter);
    f(prefix + ".fc1.bias", s.fc1_bias, TensorRole::parameter);
    f(prefix + ".fc2.weight", s.fc2_weight, TensorRole::parameter);
    f(prefix + ".fc2.bias", s.fc2_bias, TensorRole::parameter);
  }
};

template <typename T>
struct Shortcut {
  ConvSpec<T> conv;  // 1x1, no bias
  BatchNormState<T> bn;
};

// Two 3x3 conv + BN stages with an identity or 1x1-projection shortcut.
// Convolutions feeding a batch norm carry no bias: BN removes it exactly.
template <typename T>
struct ResidualBlockParams {
  ConvSpec<T> conv1;
  BatchNormState<T> bn1;
  ConvSpec<T> conv2;
  BatchNormState<T> bn2;
  std::optional<Shortcut<T>> shortcut;

  static ResidualBlockParams create(std::size_t in_channels, std::size_t out_channels, Rng* rng);

  std::size_t in_channels() const { return conv1.in_channels; }
  std::size_t out_channels() const { return conv2.out_channels; }
  void validate() const;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    visit_impl(*this, prefix, f);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    visit_impl(*this, prefix, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& s, const std::string& prefix, F& f) {
    s.conv1.visit(prefix + ".conv1", f);
    s.bn1.visit(prefix + ".bn1", f);
    s.conv2.visit(prefix + ".conv2", f);
    s.bn2.visit(prefix + ".bn2", f);
    if (s.shortcut) {
      s.shortcut->conv.visit(prefix + ".shortcut.conv", f);
      s.shortcut->bn.visit(prefix + ".shortcut.bn", f);
    }
  }
};

// --- differentiable primitives over explicit weight vars ---------------------

// Cross-correlation with zero padding; `bias` may be an undefined Var.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t padding);

// Adjoint of conv2d. weight is (in, out, kh, kw); output size (H-1)*stride - 2*padding + kh.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
                        std::size_t padding);

// Train mode normalises with biased batch statistics and updates the running
// statistics in `state`; eval mode uses the running statistics and never mutates.
template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state, Mode mode);

template <typename T>
Var<T> maxpool2d(const Var<T>& x);

// --- layer-level ops ---------------------------------------------------------

template <typename T>
Var<T> conv2d(const ForwardContext<T>& ctx, const Var<T>& x, const ConvSpec<T>& spec);

template <typename T>
Var<T> conv_transpose2d(const ForwardContext<T>& ctx, const Var<T>& x, const ConvSpec<T>& spec);

template <typename T>
Var<T> batchnorm2d(const ForwardContext<T>& ctx, const Var<T>& x, BatchNormState<T>& state);

template <typename T>
Var<T> se_block(const ForwardContext<T>& ctx, const Var<T>& x, const SEParams<T>& p);

template <typename T>
Var<T> residual_block(const ForwardContext<T>& ctx, const Var<T>& x, ResidualBlockParams<T>& p);

// Closed-form output shapes, used for validation and dry runs.
Shape conv2d_output_shape(const Shape& in, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                          std::size_t padding);
Shape conv_transpose2d_output_shape(const Shape& in, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                                    std::size_t padding);
Shape maxpool2d_output_shape(const Shape& in);

}  // namespace ddanet
