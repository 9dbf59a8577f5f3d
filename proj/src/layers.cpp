#include "ddanet/layers.hpp"

#include <cmath>
#include <memory>
#include <vector>

#include "ddanet/kernels.hpp"
#include "internal.hpp"

namespace ddanet {

using detail::require;
using detail::verify_finite;

namespace {

using Index = std::ptrdiff_t;

// Kaiming-uniform with ReLU gain: U(-b, b), b = sqrt(6 / fan_in).
template <typename T>
void kaiming_uniform(Tensor<T>& t, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

void require_rank4(const Shape& s, const char* op) {
  require(s.size() == 4, std::string(op) + ": expected a rank-4 (N,C,H,W) input, got " + to_string(s));
}

}  // namespace

// --- parameter structs --------------------------------------------------------

template <typename T>
ConvSpec<T> ConvSpec<T>::create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                                std::size_t padding, bool with_bias, bool transposed, Rng* rng) {
  require(in > 0 && out > 0 && kernel > 0 && stride > 0, "ConvSpec: channels, kernel and stride must be positive");
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_h = kernel;
  s.kernel_w = kernel;
  s.stride = stride;
  s.padding = padding;
  s.transposed = transposed;
  s.weight = transposed ? Tensor<T>(Shape{in, out, kernel, kernel}) : Tensor<T>(Shape{out, in, kernel, kernel});
  if (with_bias) s.bias = Tensor<T>(Shape{out});
  if (rng) {
    const std::size_t taps = transposed ? (kernel + stride - 1) / stride : kernel;
    kaiming_uniform(s.weight, in * taps * taps, *rng);
  }
  return s;
}

template <typename T>
void ConvSpec<T>::validate() const {
  const Shape expected = transposed ? Shape{in_channels, out_channels, kernel_h, kernel_w}
                                    : Shape{out_channels, in_channels, kernel_h, kernel_w};
  require(weight.shape() == expected, "ConvSpec: weight shape " + to_string(weight.shape()) + " != " + to_string(expected));
  if (bias) require(bias->shape() == Shape{out_channels}, "ConvSpec: bias shape " + to_string(bias->shape()));
  require(stride > 0, "ConvSpec: stride must be positive");
}

template <typename T>
BatchNormState<T> BatchNormState<T>::create(std::size_t channels) {
  BatchNormState s;
  s.gamma = Tensor<T>(Shape{channels}, T{1});
  s.beta = Tensor<T>(Shape{channels});
  s.running_mean = Tensor<T>(Shape{channels});
  s.running_var = Tensor<T>(Shape{channels}, T{1});
  return s;
}

template <typename T>
void BatchNormState<T>::validate() const {
  const Shape c{gamma.numel()};
  require(gamma.shape() == c && beta.shape() == c && running_mean.shape() == c && running_var.shape() == c,
          "BatchNormState: gamma/beta/running statistics must all have length C");
  for (auto v : running_var.data()) require(v >= T{0}, "BatchNormState: negative running variance");
  require(eps > T{0}, "BatchNormState: eps must be positive");
  require(momentum > T{0} && momentum < T{1}, "BatchNormState: momentum must lie in (0,1)");
}

template <typename T>
SEParams<T> SEParams<T>::create(std::size_t channels, std::size_t reduction, Rng* rng) {
  require(reduction > 0 && channels % reduction == 0,
          "SEParams: reduction ratio " + std::to_string(reduction) + " must divide " + std::to_string(channels));
  const std::size_t hidden = channels / reduction;
  SEParams p;
  p.channels = channels;
  p.reduction = reduction;
  p.fc1_weight = Tensor<T>(Shape{hidden, channels});
  p.fc1_bias = Tensor<T>(Shape{hidden});
  p.fc2_weight = Tensor<T>(Shape{channels, hidden});
  p.fc2_bias = Tensor<T>(Shape{channels});
  if (rng) {
    kaiming_uniform(p.fc1_weight, channels, *rng);
    kaiming_uniform(p.fc2_weight, hidden, *rng);
  }
  return p;
}

template <typename T>
void SEParams<T>::validate() const {
  require(reduction > 0 && channels % reduction == 0, "SEParams: reduction ratio must divide the channel count");
  const std::size_t hidden = channels / reduction;
  require(fc1_weight.shape() == Shape{hidden, channels} && fc1_bias.shape() == Shape{hidden},
          "SEParams: fc1 must map C -> C/r");
  require(fc2_weight.shape() == Shape{channels, hidden} && fc2_bias.shape() == Shape{channels},
          "SEParams: fc2 must map C/r -> C");
}

template <typename T>
ResidualBlockParams<T> ResidualBlockParams<T>::create(std::size_t in_channels, std::size_t out_channels, Rng* rng) {
  ResidualBlockParams p;
  p.conv1 = ConvSpec<T>::create(in_channels, out_channels, 3, 1, 1, false, false, rng);
  p.bn1 = BatchNormState<T>::create(out_channels);
  p.conv2 = ConvSpec<T>::create(out_channels, out_channels, 3, 1, 1, false, false, rng);
  p.bn2 = BatchNormState<T>::create(out_channels);
  if (in_channels != out_channels) {
    p.shortcut = Shortcut<T>{ConvSpec<T>::create(in_channels, out_channels, 1, 1, 0, false, false, rng),
                             BatchNormState<T>::create(out_channels)};
  }
  return p;
}

template <typename T>
void ResidualBlockParams<T>::validate() const {
  conv1.validate();
  conv2.validate();
  bn1.validate();
  bn2.validate();
  require(conv1.kernel_h == 3 && conv2.kernel_h == 3 && conv1.padding == 1 && conv2.padding == 1 &&
              conv1.stride == 1 && conv2.stride == 1,
          "ResidualBlockParams: convolutions must be 3x3, stride 1, padding 1");
  require(conv1.out_channels == conv2.in_channels && conv2.in_channels == conv2.out_channels,
          "ResidualBlockParams: conv1/conv2 channel mismatch");
  require(bn1.channels() == conv1.out_channels && bn2.channels() == conv2.out_channels,
          "ResidualBlockParams: batch norm width mismatch");
  require(shortcut.has_value() == (conv1.in_channels != conv2.out_channels),
          "ResidualBlockParams: shortcut projection must be present exactly when channel counts differ");
  if (shortcut) {
    shortcut->conv.validate();
    shortcut->bn.validate();
  }
}

// --- shapes ----------------------------------------------------------------------

Shape conv2d_output_shape(const Shape& in, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  require_rank4(in, "conv2d");
  const auto g = kernels::make_conv_geometry(in[0], in[1], in[2], in[3], out_channels, kernel, kernel, stride, padding);
  return {in[0], out_channels, g.out_h, g.out_w};
}

Shape conv_transpose2d_output_shape(const Shape& in, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                                    std::size_t padding) {
  require_rank4(in, "conv_transpose2d");
  require(stride > 0, "conv_transpose2d: stride must be positive");
  const auto big = [&](std::size_t h) -> std::size_t {
    const long long v = static_cast<long long>((h - 1) * stride + kernel) - 2 * static_cast<long long>(padding);
    require(h > 0 && v > 0, "conv_transpose2d: output size is not positive");
    return static_cast<std::size_t>(v);
  };
  return {in[0], out_channels, big(in[2]), big(in[3])};
}

Shape maxpool2d_output_shape(const Shape& in) {
  require_rank4(in, "maxpool2d");
  require(in[2] % 2 == 0 && in[3] % 2 == 0 && in[2] > 0 && in[3] > 0,
          "maxpool2d: height and width must be even, got " + to_string(in));
  return {in[0], in[1], in[2] / 2, in[3] / 2};
}

// --- primitives ------------------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t padding) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  require_rank4(sx, "conv2d");
  require(sw.size() == 4, "conv2d: weight must be rank 4");
  require(sx[1] == sw[1], "conv2d: input has " + std::to_string(sx[1]) + " channels, weight expects " + std::to_string(sw[1]));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.shape() == Shape{sw[0]}, "conv2d: bias shape " + to_string(bias.shape()));
  const auto g = kernels::make_conv_geometry(sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, padding);

  Tensor<T> out(Shape{g.n, g.out_c, g.out_h, g.out_w});
  kernels::conv2d_forward(g, x.value().raw(), weight.value().raw(), has_bias ? bias.value().raw() : nullptr, out.raw());
  verify_finite(out, "conv2d");

  auto vx = x.value_ptr();
  auto vw = weight.value_ptr();
  return Graph<T>::record(std::move(out), {&x, &weight, &bias},
                          [g, vx, vw](const Tensor<T>& dy, std::span<Tensor<T>> gin, std::span<const bool> needs) {
                            if (needs[0]) {
                              gin[0] = Tensor<T>(vx->shape());
                              kernels::conv2d_backward_input(g, dy.raw(), vw->raw(), gin[0].raw());
                            }
                            if (needs[1] || needs[2]) {
                              Tensor<T> dw(vw->shape());
                              Tensor<T> db(Shape{g.out_c});
                              kernels::conv2d_backward_weight(g, vx->raw(), dy.raw(), dw.raw(), needs[2] ? db.raw() : nullptr);
                              if (needs[1]) gin[1] = std::move(dw);
                              if (needs[2]) gin[2] = std::move(db);
                            }
                          });
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
                        std::size_t padding) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  require_rank4(sx, "conv_transpose2d");
  require(sw.size() == 4, "conv_transpose2d: weight must be rank 4");
  require(sx[1] == sw[0], "conv_transpose2d: input has " + std::to_string(sx[1]) + " channels, weight expects " +
                              std::to_string(sw[0]));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.shape() == Shape{sw[1]}, "conv_transpose2d: bias shape " + to_string(bias.shape()));
  const Shape out_shape = conv_transpose2d_output_shape(sx, sw[1], sw[2], stride, padding);
  require(sw[2] == sw[3], "conv_transpose2d: square kernels only");

  // The forward convolution this op is the adjoint of: out_shape -> sx.
  const auto g = kernels::make_conv_geometry(sx[0], sw[1], out_shape[2], out_shape[3], sx[1], sw[2], sw[3], stride, padding);
  require(g.out_h == sx[2] && g.out_w == sx[3], "conv_transpose2d: inconsistent geometry");

  Tensor<T> out(out_shape);
  kernels::conv2d_backward_input(g, x.value().raw(), weight.value().raw(), out.raw());
  if (has_bias) {
    const std::size_t plane = out_shape[2] * out_shape[3];
    for (std::size_t n = 0; n < out_shape[0]; ++n)
      for (std::size_t c = 0; c < out_shape[1]; ++c) {
        T* row = out.raw() + (n * out_shape[1] + c) * plane;
        const T b = bias.value()[c];
        for (std::size_t p = 0; p < plane; ++p) row[p] += b;
      }
  }
  verify_finite(out, "conv_transpose2d");

  auto vx = x.value_ptr();
  auto vw = weight.value_ptr();
  return Graph<T>::record(std::move(out), {&x, &weight, &bias},
                          [g, vx, vw](const Tensor<T>& dy, std::span<Tensor<T>> gin, std::span<const bool> needs) {
                            if (needs[0]) {
                              gin[0] = Tensor<T>(vx->shape());
                              kernels::conv2d_forward(g, dy.raw(), vw->raw(), static_cast<const T*>(nullptr), gin[0].raw());
                            }
                            if (needs[1]) {
                              gin[1] = Tensor<T>(vw->shape());
                              kernels::conv2d_backward_weight(g, dy.raw(), vx->raw(), gin[1].raw(), static_cast<T*>(nullptr));
                            }
                            if (needs[2]) {
                              // g.in_c is the transposed op's output channel count.
                              gin[2] = Tensor<T>(Shape{g.in_c});
                              const std::size_t plane = g.in_h * g.in_w;
                              for (std::size_t c = 0; c < g.in_c; ++c) {
                                T acc{0};
                                for (std::size_t n = 0; n < g.n; ++n) {
                                  const T* row = dy.raw() + (n * g.in_c + c) * plane;
                                  for (std::size_t p = 0; p < plane; ++p) acc += row[p];
                                }
                                gin[2][c] = acc;
                              }
                            }
                          });
}

template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state, Mode mode) {
  const Shape& sx = x.shape();
  require_rank4(sx, "batchnorm2d");
  const std::size_t n = sx[0], c = sx[1], plane = sx[2] * sx[3];
  require(c == state.channels(), "batchnorm2d: input has " + std::to_string(c) + " channels, state has " +
                                     std::to_string(state.channels()));
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c}, "batchnorm2d: gamma/beta must have length C");

  auto normalized = std::make_shared<Tensor<T>>(sx);
  auto inv_std = std::make_shared<std::vector<T>>(c);
  std::vector<T> mean(c), var(c);
  const bool train = mode == Mode::train;
  if (train) {
    require(n * plane >= 2, "batchnorm2d: train mode needs at least two values per channel, got N*H*W = " +
                                std::to_string(n * plane));
    kernels::channel_moments(n, c, plane, x.value().raw(), mean.data(), var.data());
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      var[ch] = state.running_var[ch];
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) (*inv_std)[ch] = T{1} / std::sqrt(var[ch] + state.eps);

  Tensor<T> out(sx);
  const T* px = x.value().raw();
  const T* pg = gamma.value().raw();
  const T* pb = beta.value().raw();
  const Index rows = static_cast<Index>(n * c);
#pragma omp parallel for schedule(static) if (rows * static_cast<Index>(plane) > detail::kParallelGrain)
  for (Index r = 0; r < rows; ++r) {
    const std::size_t ch = static_cast<std::size_t>(r) % c;
    const T m = mean[ch], is = (*inv_std)[ch], ga = pg[ch], be = pb[ch];
    T* xn = normalized->raw() + r * plane;
    T* po = out.raw() + r * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      xn[p] = (px[r * plane + p] - m) * is;
      po[p] = ga * xn[p] + be;
    }
  }
  verify_finite(out, "batchnorm2d");

  if (train) {
    const T mom = state.momentum;
    for (std::size_t ch = 0; ch < c; ++ch) {
      state.running_mean[ch] = (T{1} - mom) * state.running_mean[ch] + mom * mean[ch];
      state.running_var[ch] = (T{1} - mom) * state.running_var[ch] + mom * var[ch];
    }
  }

  auto vg = gamma.value_ptr();
  return Graph<T>::record(
      std::move(out), {&x, &gamma, &beta},
      [normalized, inv_std, vg, train, n, c, plane](const Tensor<T>& dy, std::span<Tensor<T>> gin,
                                                      std::span<const bool> needs) {
        // Per-channel sums of dy and dy * x_hat.
        std::vector<T> sum_dy(c, T{0}), sum_dy_xhat(c, T{0});
        for (std::size_t ch = 0; ch < c; ++ch) {
          T s1{0}, s2{0};
          for (std::size_t i = 0; i < n; ++i) {
            const T* d = dy.raw() + (i * c + ch) * plane;
            const T* xh = normalized->raw() + (i * c + ch) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
              s1 += d[p];
              s2 += d[p] * xh[p];
            }
          }
          sum_dy[ch] = s1;
          sum_dy_xhat[ch] = s2;
        }
        if (needs[0]) {
          gin[0] = Tensor<T>(dy.shape());
          const T count = static_cast<T>(n * plane);
          const Index rows = static_cast<Index>(n * c);
#pragma omp parallel for schedule(static) if (rows * static_cast<Index>(plane) > detail::kParallelGrain)
          for (Index r = 0; r < rows; ++r) {
            const std::size_t ch = static_cast<std::size_t>(r) % c;
            const T k = (*vg)[ch] * (*inv_std)[ch];
            const T* d = dy.raw() + r * plane;
            const T* xh = normalized->raw() + r * plane;
            T* o = gin[0].raw() + r * plane;
            if (train) {
              const T md = sum_dy[ch] / count;
              const T mdx = sum_dy_xhat[ch] / count;
              for (std::size_t p = 0; p < plane; ++p) o[p] = k * (d[p] - md - xh[p] * mdx);
            } else {
              for (std::size_t p = 0; p < plane; ++p) o[p] = k * d[p];
            }
          }
        }
        if (needs[1]) gin[1] = Tensor<T>(Shape{c}, sum_dy_xhat);
        if (needs[2]) gin[2] = Tensor<T>(Shape{c}, sum_dy);
      });
}

template <typename T>
Var<T> maxpool2d(const Var<T>& x) {
  const Shape out_shape = maxpool2d_output_shape(x.shape());
  const Shape in_shape = x.shape();
  const std::size_t planes = in_shape[0] * in_shape[1];
  auto argmax = std::make_shared<std::vector<std::int32_t>>(numel(out_shape));
  Tensor<T> out(out_shape);
  kernels::maxpool2x2_forward(planes, in_shape[2], in_shape[3], x.value().raw(), out.raw(), argmax->data());
  return Graph<T>::record(std::move(out), {&x},
                          [argmax, in_shape, planes](const Tensor<T>& dy, std::span<Tensor<T>> gin, std::span<const bool>) {
                            gin[0] = Tensor<T>(in_shape);
                            kernels::maxpool2x2_backward(planes, in_shape[2], in_shape[3], dy.raw(), argmax->data(),
                                                         gin[0].raw());
                          });
}

// --- layers ----------------------------------------------------------------------

template <typename T>
Var<T> conv2d(const ForwardContext<T>& ctx, const Var<T>& x, const ConvSpec<T>& spec) {
  require(!spec.transposed, "conv2d: spec describes a transposed convolution");
  require(x.shape().size() == 4 && x.shape()[1] == spec.in_channels,
          "conv2d: input " + to_string(x.shape()) + " does not have " + std::to_string(spec.in_channels) + " channels");
  const Var<T> b = spec.bias ? ctx.param(*spec.bias) : Var<T>();
  return conv2d(x, ctx.param(spec.weight), b, spec.stride, spec.padding);
}

template <typename T>
Var<T> conv_transpose2d(const ForwardContext<T>& ctx, const Var<T>& x, const ConvSpec<T>& spec) {
  require(spec.transposed, "conv_transpose2d: spec describes a regular convolution");
  require(x.shape().size() == 4 && x.shape()[1] == spec.in_channels,
          "conv_transpose2d: input " + to_string(x.shape()) + " does not have " + std::to_string(spec.in_channels) +
              " channels");
  const Var<T> b = spec.bias ? ctx.param(*spec.bias) : Var<T>();
  return conv_transpose2d(x, ctx.param(spec.weight), b, spec.stride, spec.padding);
}

template <typename T>
Var<T> batchnorm2d(const ForwardContext<T>& ctx, const Var<T>& x, BatchNormState<T>& state) {
  return batchnorm2d(x, ctx.param(state.gamma), ctx.param(state.beta), state, ctx.mode);
}

template <typename T>
Var<T> se_block(const ForwardContext<T>& ctx, const Var<T>& x, const SEParams<T>& p) {
  const Shape& s = x.shape();
  require(s.size() == 4 && s[1] == p.channels,
          "se_block: input " + to_string(s) + " does not have " + std::to_string(p.channels) + " channels");
  Var<T> squeezed = reshape(reduce(x, ReduceKind::mean, {2, 3}), Shape{s[0], s[1]});
  Var<T> hidden = relu(linear(squeezed, ctx.param(p.fc1_weight), ctx.param(p.fc1_bias)));
  Var<T> weights = sigmoid(linear(hidden, ctx.param(p.fc2_weight), ctx.param(p.fc2_bias)));
  return scale_channels(x, weights);
}

template <typename T>
Var<T> residual_block(const ForwardContext<T>& ctx, const Var<T>& x, ResidualBlockParams<T>& p) {
  require(x.shape().size() == 4 && x.shape()[1] == p.in_channels(),
          "residual_block: input " + to_string(x.shape()) + " does not have " + std::to_string(p.in_channels()) +
              " channels");
  Var<T> h = relu(batchnorm2d(ctx, conv2d(ctx, x, p.conv1), p.bn1));
  h = batchnorm2d(ctx, conv2d(ctx, h, p.conv2), p.bn2);
  Var<T> skip = p.shortcut ? batchnorm2d(ctx, conv2d(ctx, x, p.shortcut->conv), p.shortcut->bn) : x;
  return relu(add(h, skip));
}

#define DDANET_INSTANTIATE_LAYERS(T)                                                                     \
  template struct ConvSpec<T>;                                                                           \
  template struct BatchNormState<T>;                                                                     \
  template struct SEParams<T>;                                                                           \
  template struct ResidualBlockParams<T>;                                                                \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t);      \
  template Var<T> conv_transpose2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t,          \
                                      std::size_t);                                                      \
  template Var<T> batchnorm2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormState<T>&, Mode); \
  template Var<T> maxpool2d<T>(const Var<T>&);                                                           \
  template Var<T> conv2d<T>(const ForwardContext<T>&, const Var<T>&, const ConvSpec<T>&);                \
  template Var<T> conv_transpose2d<T>(const ForwardContext<T>&, const Var<T>&, const ConvSpec<T>&);      \
  template Var<T> batchnorm2d<T>(const ForwardContext<T>&, const Var<T>&, BatchNormState<T>&);           \
  template Var<T> se_block<T>(const ForwardContext<T>&, const Var<T>&, const SEParams<T>&);              \
  template Var<T> residual_block<T>(const ForwardContext<T>&, const Var<T>&, ResidualBlockParams<T>&);

DDANET_INSTANTIATE_LAYERS(float)
DDANET_INSTANTIATE_LAYERS(double)
DDANET_INSTANTIATE_LAYERS(long double)

}  // namespace ddanet
