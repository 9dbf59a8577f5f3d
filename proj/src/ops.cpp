#include "ddanet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "internal.hpp"

namespace ddanet {

using detail::kParallelGrain;
using detail::require;
using detail::verify_finite;

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::uint64_t fnv1a(const void* bytes, std::size_t size, std::uint64_t seed) {
  auto p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(reinterpret_cast<const unsigned char*>(a.raw()),
                    reinterpret_cast<const unsigned char*>(a.raw() + a.numel()),
                    reinterpret_cast<const unsigned char*>(b.raw()));
}

template <typename T>
std::uint64_t checksum(const Tensor<T>& t) {
  std::uint64_t h = fnv1a(t.shape().data(), t.shape().size() * sizeof(std::size_t));
  return fnv1a(t.raw(), t.numel() * sizeof(T), h);
}

namespace {

using Index = std::ptrdiff_t;

bool is_channel_broadcast(const Shape& a, const Shape& b) {
  return a.size() == 4 && b.size() == 4 && b[0] == a[0] && b[1] == 1 && b[2] == a[2] && b[3] == a[3];
}

}  // namespace

template <typename T>
Var<T> ew_binary(const Var<T>& a, const Var<T>& b, BinaryKind kind) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool same = sa == sb;
  const bool bcast = !same && is_channel_broadcast(sa, sb);
  require(same || bcast, "elementwise op: shape " + to_string(sb) + " is not broadcastable to " + to_string(sa));

  // Broadcast layout: a = (N, C, P), b = (N, 1, P) with P = H*W.
  const Index batch = bcast ? static_cast<Index>(sa[0]) : 1;
  const Index channels = bcast ? static_cast<Index>(sa[1]) : 1;
  const Index plane = bcast ? static_cast<Index>(sa[2] * sa[3]) : static_cast<Index>(a.value().numel());
  const Index total = batch * channels * plane;

  Tensor<T> out(sa);
  const T* pa = a.value().raw();
  const T* pb = b.value().raw();
  T* po = out.raw();
  const bool is_add = kind == BinaryKind::add;

#pragma omp parallel for collapse(2) schedule(static) if (total > kParallelGrain)
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < channels; ++c) {
      const T* ra = pa + (n * channels + c) * plane;
      const T* rb = pb + n * plane;
      T* ro = po + (n * channels + c) * plane;
      if (is_add) {
        for (Index i = 0; i < plane; ++i) ro[i] = ra[i] + rb[i];
      } else {
        for (Index i = 0; i < plane; ++i) ro[i] = ra[i] * rb[i];
      }
    }
  }
  verify_finite(out, is_add ? "add" : "mul");

  auto va = a.value_ptr();
  auto vb = b.value_ptr();
  return Graph<T>::record(
      std::move(out), {&a, &b},
      [va, vb, is_add, batch, channels, plane, total](const Tensor<T>& g, std::span<Tensor<T>> gin,
                                                      std::span<const bool> needs) {
        const T* pg = g.raw();
        if (needs[0]) {
          if (is_add) {
            gin[0] = g;
          } else {
            gin[0] = Tensor<T>(g.shape());
            const T* pb = vb->raw();
            T* d = gin[0].raw();
#pragma omp parallel for collapse(2) schedule(static) if (total > kParallelGrain)
            for (Index n = 0; n < batch; ++n) {
              for (Index c = 0; c < channels; ++c) {
                const Index off = (n * channels + c) * plane;
                for (Index i = 0; i < plane; ++i) d[off + i] = pg[off + i] * pb[n * plane + i];
              }
            }
          }
        }
        if (needs[1]) {
          gin[1] = Tensor<T>(vb->shape());
          T* d = gin[1].raw();
          const T* pa = va->raw();
          // Channel sums run in channel order for every pixel.
#pragma omp parallel for collapse(2) schedule(static) if (total > kParallelGrain)
          for (Index n = 0; n < batch; ++n) {
            for (Index i = 0; i < plane; ++i) {
              T acc{0};
              for (Index c = 0; c < channels; ++c) {
                const Index k = (n * channels + c) * plane + i;
                acc += is_add ? pg[k] : pg[k] * pa[k];
              }
              d[n * plane + i] = acc;
            }
          }
        }
      });
}

template <typename T>
Var<T> activation(const Var<T>& x, ActivationKind kind) {
  const Index n = static_cast<Index>(x.value().numel());
  Tensor<T> out(x.shape());
  const T* px = x.value().raw();
  T* po = out.raw();
  const bool is_relu = kind == ActivationKind::relu;
  if (is_relu) {
#pragma omp parallel for schedule(static) if (n > kParallelGrain)
    for (Index i = 0; i < n; ++i) po[i] = px[i] > T{0} ? px[i] : T{0};
  } else {
#pragma omp parallel for schedule(static) if (n > kParallelGrain)
    for (Index i = 0; i < n; ++i) po[i] = T{1} / (T{1} + std::exp(-px[i]));
  }
  verify_finite(out, is_relu ? "relu" : "sigmoid");

  auto vx = x.value_ptr();
  auto vy = std::make_shared<const Tensor<T>>(std::move(out));
  // The closure keeps the output alive; it is only read during backward.
  std::weak_ptr<const Tensor<T>> wy = vy;
  return Graph<T>::record(vy, {&x}, [vx, wy, is_relu, n](const Tensor<T>& g, std::span<Tensor<T>> gin, std::span<const bool>) {
    gin[0] = Tensor<T>(g.shape());
    T* d = gin[0].raw();
    const T* pg = g.raw();
    if (is_relu) {
      const T* px = vx->raw();
#pragma omp parallel for schedule(static) if (n > kParallelGrain)
      for (Index i = 0; i < n; ++i) d[i] = px[i] > T{0} ? pg[i] : T{0};
    } else {
      auto y = wy.lock();
      const T* py = y->raw();
#pragma omp parallel for schedule(static) if (n > kParallelGrain)
      for (Index i = 0; i < n; ++i) d[i] = pg[i] * py[i] * (T{1} - py[i]);
    }
  });
}

template <typename T>
Var<T> reduce(const Var<T>& x, ReduceKind kind, std::vector<std::size_t> axes) {
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  std::vector<bool> reduced(rank, axes.empty());
  for (auto ax : axes) {
    require(ax < rank, "reduce: axis " + std::to_string(ax) + " is invalid for rank " + std::to_string(rank));
    require(!reduced[ax], "reduce: axis " + std::to_string(ax) + " listed twice");
    reduced[ax] = true;
  }
  Shape out_shape = in;
  std::size_t count = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    if (reduced[d]) {
      count *= in[d];
      out_shape[d] = 1;
    }
  }

  // out_index(i) for every input element, computed once and shared with backward.
  auto index = std::make_shared<std::vector<std::size_t>>(x.value().numel());
  {
    std::vector<std::size_t> out_stride(rank, 1);
    for (std::size_t d = rank; d-- > 1;) out_stride[d - 1] = out_stride[d] * out_shape[d];
    std::vector<std::size_t> coord(rank, 0);
    for (std::size_t i = 0; i < index->size(); ++i) {
      std::size_t o = 0;
      for (std::size_t d = 0; d < rank; ++d) o += reduced[d] ? 0 : coord[d] * out_stride[d];
      (*index)[i] = o;
      for (std::size_t d = rank; d-- > 0;) {
        if (++coord[d] < in[d]) break;
        coord[d] = 0;
      }
    }
  }

  Tensor<T> out(out_shape);
  const T* px = x.value().raw();
  T* po = out.raw();
  const T norm = kind == ReduceKind::mean && count > 0 ? T{1} / static_cast<T>(count) : T{1};
  // Compensated (Neumaier) accumulation. Means are taken about the first
  // element of each group, which makes them exact for constant input.
  const std::size_t m = out.numel();
  using A = detail::Acc<T>;
  std::vector<A> sum(m, A{0}), comp(m, A{0});
  std::vector<T> ref(m, T{0});
  std::vector<bool> seen(m, kind == ReduceKind::sum);
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::size_t o = (*index)[i];
    if (!seen[o]) {
      seen[o] = true;
      ref[o] = px[i];
    }
    const A v = static_cast<A>(px[i]) - static_cast<A>(ref[o]);
    const A t = sum[o] + v;
    comp[o] += std::abs(sum[o]) >= std::abs(v) ? (sum[o] - t) + v : (v - t) + sum[o];
    sum[o] = t;
  }
  for (std::size_t o = 0; o < m; ++o) {
    const A total = sum[o] + comp[o];
    po[o] = kind == ReduceKind::sum ? static_cast<T>(total)
                                    : static_cast<T>(static_cast<A>(ref[o]) + total * static_cast<A>(norm));
  }
  verify_finite(out, "reduce");

  Shape in_shape = in;
  return Graph<T>::record(std::move(out), {&x}, [index, in_shape, norm](const Tensor<T>& g, std::span<Tensor<T>> gin, std::span<const bool>) {
    gin[0] = Tensor<T>(in_shape);
    T* d = gin[0].raw();
    const T* pg = g.raw();
    for (std::size_t i = 0; i < index->size(); ++i) d[i] = pg[(*index)[i]] * norm;
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() == 4 && sb.size() == 4, "concat_channels: inputs must be rank 4");
  require(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
          "concat_channels: batch/spatial mismatch " + to_string(sa) + " vs " + to_string(sb));
  const std::size_t n = sa[0], ca = sa[1], cb = sb[1], plane = sa[2] * sa[3];
  Tensor<T> out(Shape{n, ca + cb, sa[2], sa[3]});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().raw() + i * ca * plane, ca * plane, out.raw() + i * (ca + cb) * plane);
    std::copy_n(b.value().raw() + i * cb * plane, cb * plane, out.raw() + (i * (ca + cb) + ca) * plane);
  }
  return Graph<T>::record(std::move(out), {&a, &b}, [sa, sb, n, ca, cb, plane](const Tensor<T>& g, std::span<Tensor<T>> gin, std::span<const bool> needs) {
    if (needs[0]) {
      gin[0] = Tensor<T>(sa);
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(g.raw() + i * (ca + cb) * plane, ca * plane, gin[0].raw() + i * ca * plane);
    }
    if (needs[1]) {
      gin[1] = Tensor<T>(sb);
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(g.raw() + (i * (ca + cb) + ca) * plane, cb * plane, gin[1].raw() + i * cb * plane);
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  require(s.size() == 4, "slice_channels: input must be rank 4");
  require(begin < end && end <= s[1], "slice_channels: invalid range");
  const std::size_t n = s[0], c = s[1], k = end - begin, plane = s[2] * s[3];
  Tensor<T> out(Shape{n, k, s[2], s[3]});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.value().raw() + (i * c + begin) * plane, k * plane, out.raw() + i * k * plane);
  return Graph<T>::record(std::move(out), {&x}, [s, n, c, k, begin, plane](const Tensor<T>& g, std::span<Tensor<T>> gin, std::span<const bool>) {
    gin[0] = Tensor<T>(s);
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(g.raw() + i * k * plane, k * plane, gin[0].raw() + (i * c + begin) * plane);
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  require(sx.size() == 2, "linear: input must be rank 2, got " + to_string(sx));
  require(sw.size() == 2 && sw[1] == sx[1], "linear: weight " + to_string(sw) + " incompatible with input " + to_string(sx));
  require(b.shape() == Shape{sw[0]}, "linear: bias must have shape (" + std::to_string(sw[0]) + ")");
  const std::size_t n = sx[0], in = sx[1], out_f = sw[0];
  Tensor<T> out(Shape{n, out_f});
  const T* px = x.value().raw();
  const T* pw = w.value().raw();
  const T* pb = b.value().raw();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out_f; ++o) {
      T acc{0};
      for (std::size_t k = 0; k < in; ++k) acc += px[i * in + k] * pw[o * in + k];
      out[i * out_f + o] = acc + pb[o];
    }
  }
  verify_finite(out, "linear");

  auto vx = x.value_ptr();
  auto vw = w.value_ptr();
  return Graph<T>::record(std::move(out), {&x, &w, &b}, [vx, vw, n, in, out_f](const Tensor<T>& g, std::span<Tensor<T>> gin, std::span<const bool> needs) {
    const T* pg = g.raw();
    if (needs[0]) {
      gin[0] = Tensor<T>(vx->shape());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out_f; ++o)
          for (std::size_t k = 0; k < in; ++k) gin[0][i * in + k] += pg[i * out_f + o] * (*vw)[o * in + k];
    }
    if (needs[1]) {
      gin[1] = Tensor<T>(vw->shape());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out_f; ++o)
          for (std::size_t k = 0; k < in; ++k) gin[1][o * in + k] += pg[i * out_f + o] * (*vx)[i * in + k];
    }
    if (needs[2]) {
      gin[2] = Tensor<T>(Shape{out_f});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out_f; ++o) gin[2][o] += pg[i * out_f + o];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  Shape in_shape = x.shape();
  return Graph<T>::record(std::move(out), {&x}, [in_shape](const Tensor<T>& g, std::span<Tensor<T>> gin, std::span<const bool>) {
    gin[0] = g.reshaped(in_shape);
  });
}

template <typename T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& s) {
  const Shape& sx = x.shape();
  require(sx.size() == 4, "scale_channels: input must be rank 4");
  require(s.shape() == Shape{sx[0], sx[1]}, "scale_channels: scale shape " + to_string(s.shape()) + " does not match " + to_string(sx));
  const Index rows = static_cast<Index>(sx[0] * sx[1]);
  const Index plane = static_cast<Index>(sx[2] * sx[3]);
  Tensor<T> out(sx);
  const T* px = x.value().raw();
  const T* ps = s.value().raw();
  T* po = out.raw();
#pragma omp parallel for schedule(static) if (rows * plane > kParallelGrain)
  for (Index r = 0; r < rows; ++r)
    for (Index i = 0; i < plane; ++i) po[r * plane + i] = px[r * plane + i] * ps[r];
  verify_finite(out, "scale_channels");

  auto vx = x.value_ptr();
  auto vs = s.value_ptr();
  return Graph<T>::record(std::move(out), {&x, &s}, [vx, vs, rows, plane](const Tensor<T>& g, std::span<Tensor<T>> gin, std::span<const bool> needs) {
    const T* pg = g.raw();
    if (needs[0]) {
      gin[0] = Tensor<T>(vx->shape());
      T* d = gin[0].raw();
      const T* ps = vs->raw();
#pragma omp parallel for schedule(static) if (rows * plane > kParallelGrain)
      for (Index r = 0; r < rows; ++r)
        for (Index i = 0; i < plane; ++i) d[r * plane + i] = pg[r * plane + i] * ps[r];
    }
    if (needs[1]) {
      gin[1] = Tensor<T>(vs->shape());
      T* d = gin[1].raw();
      const T* px = vx->raw();
#pragma omp parallel for schedule(static) if (rows * plane > kParallelGrain)
      for (Index r = 0; r < rows; ++r) {
        T acc{0};
        for (Index i = 0; i < plane; ++i) acc += pg[r * plane + i] * px[r * plane + i];
        d[r] = acc;
      }
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * factor;
  return Graph<T>::record(std::move(out), {&x}, [factor](const Tensor<T>& g, std::span<Tensor<T>> gin, std::span<const bool>) {
    gin[0] = Tensor<T>(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) gin[0][i] = g[i] * factor;
  });
}

#define DDANET_INSTANTIATE_OPS(T)                                                      \
  template bool bitwise_equal<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template std::uint64_t checksum<T>(const Tensor<T>&);                                \
  template Var<T> ew_binary<T>(const Var<T>&, const Var<T>&, BinaryKind);              \
  template Var<T> activation<T>(const Var<T>&, ActivationKind);                        \
  template Var<T> reduce<T>(const Var<T>&, ReduceKind, std::vector<std::size_t>);      \
  template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                    \
  template Var<T> slice_channels<T>(const Var<T>&, std::size_t, std::size_t);          \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);              \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                    \
  template Var<T> scale_channels<T>(const Var<T>&, const Var<T>&);                     \
  template Var<T> scale<T>(const Var<T>&, T);

DDANET_INSTANTIATE_OPS(float)
DDANET_INSTANTIATE_OPS(double)
DDANET_INSTANTIATE_OPS(long double)

}  // namespace ddanet
