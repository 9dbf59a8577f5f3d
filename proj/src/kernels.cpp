#include "ddanet/kernels.hpp"

#include <algorithm>
#include <string>
#include <type_traits>
#include <vector>

#include "ddanet/errors.hpp"

namespace ddanet::kernels {

namespace {

using Index = std::ptrdiff_t;

// Columns of the unfolded input processed per tile; bounds scratch memory to
// in_c * k_h * k_w * kTile elements per thread.
constexpr std::size_t kTile = 256;

template <typename T>
using Acc = std::conditional_t<std::is_same_v<T, float>, double, T>;

// Unfolds columns [p0, p0 + cols) of image `x` (in_c, in_h, in_w) into
// col (K, cols) with K = in_c * k_h * k_w. Rows [k_begin, k_end) only.
template <typename T>
void im2col_tile(const ConvGeometry& g, const T* x, std::size_t p0, std::size_t cols, std::size_t k_begin,
                 std::size_t k_end, T* col) {
  const std::size_t kk = g.k_h * g.k_w;
  for (std::size_t k = k_begin; k < k_end; ++k) {
    const std::size_t c = k / kk;
    const std::size_t kh = (k % kk) / g.k_w;
    const std::size_t kw = k % g.k_w;
    const T* plane = x + c * g.in_h * g.in_w;
    T* row = col + k * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t p = p0 + j;
      const std::size_t oh = p / g.out_w;
      const std::size_t ow = p % g.out_w;
      const Index ih = static_cast<Index>(oh * g.stride + kh) - static_cast<Index>(g.pad);
      const Index iw = static_cast<Index>(ow * g.stride + kw) - static_cast<Index>(g.pad);
      row[j] = (ih >= 0 && iw >= 0 && ih < static_cast<Index>(g.in_h) && iw < static_cast<Index>(g.in_w))
                   ? plane[ih * static_cast<Index>(g.in_w) + iw]
                   : T{0};
    }
  }
}

// Dot product with eight interleaved partial sums combined in a fixed order.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T s[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) s[l] += a[i + l] * b[i + l];
  }
  for (; i < n; ++i) s[0] += a[i] * b[i];
  return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
}

}  // namespace

ConvGeometry make_conv_geometry(std::size_t n, std::size_t in_c, std::size_t in_h, std::size_t in_w, std::size_t out_c,
                                std::size_t k_h, std::size_t k_w, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw InvalidArgument("convolution stride must be positive");
  if (k_h == 0 || k_w == 0) throw InvalidArgument("convolution kernel must be non-empty");
  const std::size_t ph = in_h + 2 * pad;
  const std::size_t pw = in_w + 2 * pad;
  if (ph < k_h || pw < k_w || (ph - k_h) % stride != 0 || (pw - k_w) % stride != 0) {
    throw InvalidArgument("convolution output size is not a positive integer for input " + std::to_string(in_h) + "x" +
                          std::to_string(in_w) + ", kernel " + std::to_string(k_h) + "x" + std::to_string(k_w) +
                          ", stride " + std::to_string(stride) + ", padding " + std::to_string(pad));
  }
  ConvGeometry g;
  g.n = n;
  g.in_c = in_c;
  g.in_h = in_h;
  g.in_w = in_w;
  g.out_c = out_c;
  g.k_h = k_h;
  g.k_w = k_w;
  g.stride = stride;
  g.pad = pad;
  g.out_h = (ph - k_h) / stride + 1;
  g.out_w = (pw - k_w) / stride + 1;
  return g;
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  const std::size_t K = g.in_c * g.k_h * g.k_w;
  const std::size_t P = g.out_h * g.out_w;
  const Index tiles = static_cast<Index>((P + kTile - 1) / kTile);
  const Index jobs = static_cast<Index>(g.n) * tiles;

#pragma omp parallel
  {
    std::vector<T> col(K * kTile);
    std::vector<T> acc(kTile);
#pragma omp for schedule(static)
    for (Index job = 0; job < jobs; ++job) {
      const std::size_t n = static_cast<std::size_t>(job / tiles);
      const std::size_t p0 = static_cast<std::size_t>(job % tiles) * kTile;
      const std::size_t cols = std::min(kTile, P - p0);
      im2col_tile(g, x + n * g.in_c * g.in_h * g.in_w, p0, cols, 0, K, col.data());
      for (std::size_t oc = 0; oc < g.out_c; ++oc) {
        std::fill_n(acc.data(), cols, T{0});
        const T* wrow = w + oc * K;
        for (std::size_t k = 0; k < K; ++k) {
          const T wv = wrow[k];
          const T* crow = col.data() + k * cols;
          for (std::size_t j = 0; j < cols; ++j) acc[j] += wv * crow[j];
        }
        T* yrow = y + (n * g.out_c + oc) * P + p0;
        const T b = bias ? bias[oc] : T{0};
        for (std::size_t j = 0; j < cols; ++j) yrow[j] = acc[j] + b;
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx) {
  const std::size_t K = g.in_c * g.k_h * g.k_w;
  const std::size_t kk = g.k_h * g.k_w;
  const std::size_t P = g.out_h * g.out_w;
  const std::size_t in_plane = g.in_h * g.in_w;
  std::fill_n(dx, g.in_size(), T{0});
  std::vector<T> col(K * kTile);

  for (std::size_t n = 0; n < g.n; ++n) {
    const T* dyn = dy + n * g.out_c * P;
    T* dxn = dx + n * g.in_c * in_plane;
    for (std::size_t p0 = 0; p0 < P; p0 += kTile) {
      const std::size_t cols = std::min(kTile, P - p0);
      // col[k, j] = sum_oc w[oc, k] * dy[oc, p0 + j]
#pragma omp parallel for schedule(static)
      for (Index k = 0; k < static_cast<Index>(K); ++k) {
        T* crow = col.data() + k * cols;
        std::fill_n(crow, cols, T{0});
        for (std::size_t oc = 0; oc < g.out_c; ++oc) {
          const T wv = w[oc * K + k];
          const T* drow = dyn + oc * P + p0;
          for (std::size_t j = 0; j < cols; ++j) crow[j] += wv * drow[j];
        }
      }
      // Fold back; each input channel owns rows [c*kk, (c+1)*kk).
#pragma omp parallel for schedule(static)
      for (Index c = 0; c < static_cast<Index>(g.in_c); ++c) {
        T* plane = dxn + c * in_plane;
        for (std::size_t r = 0; r < kk; ++r) {
          const std::size_t kh = r / g.k_w;
          const std::size_t kw = r % g.k_w;
          const T* crow = col.data() + (c * kk + r) * cols;
          for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t p = p0 + j;
            const Index ih = static_cast<Index>((p / g.out_w) * g.stride + kh) - static_cast<Index>(g.pad);
            const Index iw = static_cast<Index>((p % g.out_w) * g.stride + kw) - static_cast<Index>(g.pad);
            if (ih >= 0 && iw >= 0 && ih < static_cast<Index>(g.in_h) && iw < static_cast<Index>(g.in_w)) {
              plane[ih * static_cast<Index>(g.in_w) + iw] += crow[j];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* dy, T* dw, T* db) {
  const std::size_t K = g.in_c * g.k_h * g.k_w;
  const std::size_t P = g.out_h * g.out_w;
  std::fill_n(dw, g.weight_size(), T{0});
  std::vector<T> col(K * kTile);

  for (std::size_t n = 0; n < g.n; ++n) {
    const T* xn = x + n * g.in_c * g.in_h * g.in_w;
    const T* dyn = dy + n * g.out_c * P;
    for (std::size_t p0 = 0; p0 < P; p0 += kTile) {
      const std::size_t cols = std::min(kTile, P - p0);
#pragma omp parallel for schedule(static)
      for (Index k = 0; k < static_cast<Index>(K); ++k) {
        im2col_tile(g, xn, p0, cols, static_cast<std::size_t>(k), static_cast<std::size_t>(k) + 1, col.data());
      }
      const Index cells = static_cast<Index>(g.out_c * K);
#pragma omp parallel for schedule(static)
      for (Index cell = 0; cell < cells; ++cell) {
        const std::size_t oc = static_cast<std::size_t>(cell) / K;
        const std::size_t k = static_cast<std::size_t>(cell) % K;
        dw[cell] += dot(dyn + oc * P + p0, col.data() + k * cols, cols);
      }
    }
  }

  if (db) {
#pragma omp parallel for schedule(static)
    for (Index oc = 0; oc < static_cast<Index>(g.out_c); ++oc) {
      Acc<T> s{0};
      for (std::size_t n = 0; n < g.n; ++n) {
        const T* row = dy + (n * g.out_c + oc) * P;
        for (std::size_t p = 0; p < P; ++p) s += row[p];
      }
      db[oc] = static_cast<T>(s);
    }
  }
}

template <typename T>
void maxpool2x2_forward(std::size_t planes, std::size_t h, std::size_t w, const T* x, T* y, std::int32_t* argmax) {
  const std::size_t oh = h / 2, ow = w / 2;
#pragma omp parallel for schedule(static)
  for (Index pl = 0; pl < static_cast<Index>(planes); ++pl) {
    const T* xp = x + pl * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t base = 2 * i * w + 2 * j;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q) {
          if (xp[cand[q]] > xp[best]) best = cand[q];
        }
        y[pl * oh * ow + i * ow + j] = xp[best];
        argmax[pl * oh * ow + i * ow + j] = static_cast<std::int32_t>(best);
      }
    }
  }
}

template <typename T>
void maxpool2x2_backward(std::size_t planes, std::size_t h, std::size_t w, const T* dy, const std::int32_t* argmax,
                         T* dx) {
  const std::size_t out = (h / 2) * (w / 2);
  std::fill_n(dx, planes * h * w, T{0});
#pragma omp parallel for schedule(static)
  for (Index pl = 0; pl < static_cast<Index>(planes); ++pl) {
    for (std::size_t i = 0; i < out; ++i) dx[pl * h * w + argmax[pl * out + i]] += dy[pl * out + i];
  }
}

template <typename T>
void channel_moments(std::size_t n, std::size_t c, std::size_t plane, const T* x, T* mean, T* var) {
  const Acc<T> count = static_cast<Acc<T>>(n * plane);
#pragma omp parallel for schedule(static)
  for (Index ch = 0; ch < static_cast<Index>(c); ++ch) {
    Acc<T> s{0};
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = x + (i * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) s += row[p];
    }
    const Acc<T> m = s / count;
    Acc<T> q{0};
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = x + (i * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const Acc<T> d = row[p] - m;
        q += d * d;
      }
    }
    mean[ch] = static_cast<T>(m);
    var[ch] = static_cast<T>(q / count);
  }
}

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t oc = 0; oc < g.out_c; ++oc)
      for (std::size_t oh = 0; oh < g.out_h; ++oh)
        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
          T acc{0};
          for (std::size_t c = 0; c < g.in_c; ++c)
            for (std::size_t kh = 0; kh < g.k_h; ++kh)
              for (std::size_t kw = 0; kw < g.k_w; ++kw) {
                const Index ih = static_cast<Index>(oh * g.stride + kh) - static_cast<Index>(g.pad);
                const Index iw = static_cast<Index>(ow * g.stride + kw) - static_cast<Index>(g.pad);
                if (ih < 0 || iw < 0 || ih >= static_cast<Index>(g.in_h) || iw >= static_cast<Index>(g.in_w)) continue;
                acc += w[((oc * g.in_c + c) * g.k_h + kh) * g.k_w + kw] *
                       x[((n * g.in_c + c) * g.in_h + ih) * g.in_w + iw];
              }
          y[((n * g.out_c + oc) * g.out_h + oh) * g.out_w + ow] = acc + (bias ? bias[oc] : T{0});
        }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx) {
  std::fill_n(dx, g.in_size(), T{0});
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t oc = 0; oc < g.out_c; ++oc)
      for (std::size_t oh = 0; oh < g.out_h; ++oh)
        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
          const T d = dy[((n * g.out_c + oc) * g.out_h + oh) * g.out_w + ow];
          for (std::size_t c = 0; c < g.in_c; ++c)
            for (std::size_t kh = 0; kh < g.k_h; ++kh)
              for (std::size_t kw = 0; kw < g.k_w; ++kw) {
                const Index ih = static_cast<Index>(oh * g.stride + kh) - static_cast<Index>(g.pad);
                const Index iw = static_cast<Index>(ow * g.stride + kw) - static_cast<Index>(g.pad);
                if (ih < 0 || iw < 0 || ih >= static_cast<Index>(g.in_h) || iw >= static_cast<Index>(g.in_w)) continue;
                dx[((n * g.in_c + c) * g.in_h + ih) * g.in_w + iw] += w[((oc * g.in_c + c) * g.k_h + kh) * g.k_w + kw] * d;
              }
        }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* x, const T* dy, T* dw, T* db) {
  std::fill_n(dw, g.weight_size(), T{0});
  if (db) std::fill_n(db, g.out_c, T{0});
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t oc = 0; oc < g.out_c; ++oc)
      for (std::size_t oh = 0; oh < g.out_h; ++oh)
        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
          const T d = dy[((n * g.out_c + oc) * g.out_h + oh) * g.out_w + ow];
          if (db) db[oc] += d;
          for (std::size_t c = 0; c < g.in_c; ++c)
            for (std::size_t kh = 0; kh < g.k_h; ++kh)
              for (std::size_t kw = 0; kw < g.k_w; ++kw) {
                const Index ih = static_cast<Index>(oh * g.stride + kh) - static_cast<Index>(g.pad);
                const Index iw = static_cast<Index>(ow * g.stride + kw) - static_cast<Index>(g.pad);
                if (ih < 0 || iw < 0 || ih >= static_cast<Index>(g.in_h) || iw >= static_cast<Index>(g.in_w)) continue;
                dw[((oc * g.in_c + c) * g.k_h + kh) * g.k_w + kw] += d * x[((n * g.in_c + c) * g.in_h + ih) * g.in_w + iw];
              }
        }
}

template <typename T>
void maxpool2x2_forward(std::size_t planes, std::size_t h, std::size_t w, const T* x, T* y, std::int32_t* argmax) {
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t i = 0; i < h / 2; ++i)
      for (std::size_t j = 0; j < w / 2; ++j) {
        std::size_t best = 2 * i * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = (2 * i + di) * w + 2 * j + dj;
            if (x[pl * h * w + idx] > x[pl * h * w + best]) best = idx;
          }
        const std::size_t o = pl * (h / 2) * (w / 2) + i * (w / 2) + j;
        y[o] = x[pl * h * w + best];
        argmax[o] = static_cast<std::int32_t>(best);
      }
}

template <typename T>
void channel_moments(std::size_t n, std::size_t c, std::size_t plane, const T* x, T* mean, T* var) {
  for (std::size_t ch = 0; ch < c; ++ch) {
    long double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < plane; ++p) s += x[(i * c + ch) * plane + p];
    const long double m = s / static_cast<long double>(n * plane);
    long double q = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const long double d = x[(i * c + ch) * plane + p] - m;
        q += d * d;
      }
    mean[ch] = static_cast<T>(m);
    var[ch] = static_cast<T>(q / static_cast<long double>(n * plane));
  }
}

}  // namespace reference

#define DDANET_INSTANTIATE_KERNELS(T)                                                                          \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);                      \
  template void conv2d_backward_input<T>(const ConvGeometry&, const T*, const T*, T*);                         \
  template void conv2d_backward_weight<T>(const ConvGeometry&, const T*, const T*, T*, T*);                    \
  template void maxpool2x2_forward<T>(std::size_t, std::size_t, std::size_t, const T*, T*, std::int32_t*);     \
  template void maxpool2x2_backward<T>(std::size_t, std::size_t, std::size_t, const T*, const std::int32_t*, T*); \
  template void channel_moments<T>(std::size_t, std::size_t, std::size_t, const T*, T*, T*);                   \
  template void reference::conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);           \
  template void reference::conv2d_backward_input<T>(const ConvGeometry&, const T*, const T*, T*);              \
  template void reference::conv2d_backward_weight<T>(const ConvGeometry&, const T*, const T*, T*, T*);         \
  template void reference::maxpool2x2_forward<T>(std::size_t, std::size_t, std::size_t, const T*, T*,          \
                                                 std::int32_t*);                                               \
  template void reference::channel_moments<T>(std::size_t, std::size_t, std::size_t, const T*, T*, T*);

DDANET_INSTANTIATE_KERNELS(float)
DDANET_INSTANTIATE_KERNELS(double)
DDANET_INSTANTIATE_KERNELS(long double)

}  // namespace ddanet::kernels
