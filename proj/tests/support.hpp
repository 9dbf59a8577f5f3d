#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <vector>

#include "ddanet/graph.hpp"
#include "ddanet/layers.hpp"
#include "ddanet/ops.hpp"
#include "ddanet/rng.hpp"
#include "ddanet/tensor.hpp"

namespace ddanet::test {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Tracked parameter when g is set, otherwise a plain view.
template <typename T>
Var<T> input(Graph<T>* g, const Tensor<T>& t) {
  return g ? g->parameter(t) : Var<T>::view(t);
}

// L = sum(y * r) for a fixed random r shaped like y; gives every output
// element a distinct upstream gradient.
template <typename T>
Var<T> probe(const Var<T>& y, const Tensor<T>& r) {
  return reduce(mul(y, Var<T>::view(r)), ReduceKind::sum);
}

struct GradCheck {
  double max_rel = 0;
  std::size_t checked = 0;
  // Location of the worst entry, for diagnostics.
  std::size_t worst_tensor = 0, worst_index = 0;
  double worst_analytic = 0, worst_numeric = 0;
};

inline std::ostream& operator<<(std::ostream& os, const GradCheck& r) {
  return os << "max_rel=" << r.max_rel << " over " << r.checked << " entries; worst at tensor " << r.worst_tensor
            << "[" << r.worst_index << "] analytic=" << r.worst_analytic << " numeric=" << r.worst_numeric;
}

using Wide = long double;

// Finite-difference check of a test case. `Case<T>` is constructed from a
// seed, draws all of its data through Rng (so Case<double> and Case<Wide>
// hold the same values), and provides
//   std::vector<Tensor<T>*> wrt();  Var<T> loss(Graph<T>*);
// Analytic gradients come from Case<double>. The central difference with
// step h perturbs the same entry of Case<Wide> and evaluates the loss in
// extended precision, which keeps the oracle's own roundoff (eps * |L| / h)
// far below the tolerance. Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-8). Tensors larger than `per_tensor` are
// sampled at `per_tensor` positions.
namespace detail {

template <typename C>
Wide central(C& c, Tensor<Wide>& t, std::size_t i, Wide h) {
  const Wide saved = t[i];
  t[i] = saved + h;
  const Wide up = c.loss(nullptr).value().item();
  t[i] = saved - h;
  const Wide down = c.loss(nullptr).value().item();
  t[i] = saved;
  return (up - down) / (2 * h);
}

}  // namespace detail

// Finite-difference check of a test case. `Case<T>` is constructed from a
// seed, draws all of its data through Rng (so Case<double> and Case<Wide>
// hold the same values), and provides
//   std::vector<Tensor<T>*> wrt();  Var<T> loss(Graph<T>*);
// Analytic gradients come from Case<double>. The central difference with
// step h perturbs the same entry of Case<Wide> and evaluates the loss in
// extended precision, which keeps the oracle's own roundoff (eps * |L| / h)
// far below the tolerance. Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-8). Tensors larger than `per_tensor` are
// sampled at `per_tensor` positions.
//
// With `steps` holding more than one value (largest first) the step is
// chosen per entry: the first h whose central differences at h and 2h agree,
// i.e. no ReLU or max-pool kink lies within 2h of the point. Whole networks
// put kinks everywhere, so one fixed step either crosses some or drowns
// tiny gradients in roundoff.
template <template <typename> class Case>
GradCheck grad_check(std::uint64_t seed, std::size_t per_tensor = std::numeric_limits<std::size_t>::max(),
                     std::vector<double> steps = {1e-5}) {
  Case<double> lo(seed);
  Case<Wide> hi(seed);
  Graph<double> g;
  const Var<double> loss = lo.loss(&g);
  const Gradients<double> grads = g.backward(loss);
  const auto wrt_lo = lo.wrt();
  const auto wrt_hi = hi.wrt();
  const Wide l0 = std::abs(hi.loss(nullptr).value().item());
  Rng pick(seed ^ 0xfdfdfdULL);
  GradCheck out;
  for (std::size_t ti = 0; ti < wrt_lo.size(); ++ti) {
    const Tensor<double>& analytic = grads.of(*wrt_lo[ti]);
    Tensor<Wide>& t = *wrt_hi[ti];
    std::vector<std::size_t> idx;
    if (t.numel() <= per_tensor) {
      for (std::size_t i = 0; i < t.numel(); ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < per_tensor; ++i) idx.push_back(pick.index(t.numel()));
    }
    for (std::size_t i : idx) {
      Wide numeric = 0;
      for (std::size_t k = 0; k < steps.size(); ++k) {
        const Wide h = steps[k];
        numeric = detail::central(hi, t, i, h);
        if (k + 1 == steps.size()) break;
        const Wide wide = detail::central(hi, t, i, 2 * h);
        const Wide noise = 8 * std::numeric_limits<Wide>::epsilon() * (l0 + 1) / h;
        if (std::abs(numeric - wide) <= 1e-7L * std::max(std::abs(numeric), Wide(1e-8)) + noise) break;
      }
      const double n = static_cast<double>(numeric);
      const double a = analytic[i];
      const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
      if (rel > out.max_rel) out = {rel, out.checked, ti, i, a, n};
      ++out.checked;
    }
  }
  return out;
}

// ---- straight-line oracles, written independently of the library ----

// y[n,o,i,j] = b[o] + sum_{c,u,v} x[n,c,i*s+u-p, j*s+v-p] w[o,c,u,v]
inline Tensor<double> conv2d_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b,
                                    std::size_t s, std::size_t p) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const std::size_t OH = (H + 2 * p - KH) / s + 1, OW = (W + 2 * p - KW) / s + 1;
  Tensor<double> y(Shape{N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < OH; ++i)
        for (std::size_t j = 0; j < OW; ++j) {
          double acc = b ? (*b)[o] : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < KH; ++u)
              for (std::size_t v = 0; v < KW; ++v) {
                const long r = static_cast<long>(i * s + u) - static_cast<long>(p);
                const long q = static_cast<long>(j * s + v) - static_cast<long>(p);
                if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
                acc += x.at(n, c, r, q) * w.at(o, c, u, v);
              }
          y.at(n, o, i, j) = acc;
        }
  return y;
}

// Scatter form: every input pixel stamps w[c,o,:,:] onto the output.
inline Tensor<double> conv_transpose2d_oracle(const Tensor<double>& x, const Tensor<double>& w,
                                              const Tensor<double>* b, std::size_t s, std::size_t p) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  const std::size_t OH = (H - 1) * s + KH - 2 * p, OW = (W - 1) * s + KW - 2 * p;
  Tensor<double> y(Shape{N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < OH; ++i)
        for (std::size_t j = 0; j < OW; ++j) y.at(n, o, i, j) = b ? (*b)[o] : 0.0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t u = 0; u < KH; ++u)
              for (std::size_t v = 0; v < KW; ++v) {
                const long r = static_cast<long>(i * s + u) - static_cast<long>(p);
                const long q = static_cast<long>(j * s + v) - static_cast<long>(p);
                if (r < 0 || q < 0 || r >= static_cast<long>(OH) || q >= static_cast<long>(OW)) continue;
                y.at(n, o, r, q) += x.at(n, c, i, j) * w.at(c, o, u, v);
              }
  return y;
}

inline Tensor<double> maxpool_oracle(const Tensor<double>& x) {
  Tensor<double> y(Shape{x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t i = 0; i < y.dim(2); ++i)
        for (std::size_t j = 0; j < y.dim(3); ++j)
          y.at(n, c, i, j) = std::max({x.at(n, c, 2 * i, 2 * j), x.at(n, c, 2 * i, 2 * j + 1),
                                       x.at(n, c, 2 * i + 1, 2 * j), x.at(n, c, 2 * i + 1, 2 * j + 1)});
  return y;
}

inline double sigmoid_scalar(double v) { return 1.0 / (1.0 + std::exp(-v)); }

struct Confusion {
  double dsc, iou, recall, precision;
};

// Brute-force counts from the definitions, 0/0 -> 1.
inline Confusion confusion_oracle(const std::vector<int>& pred, const std::vector<int>& gt) {
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == 1 && gt[i] == 1) ++tp;
    if (pred[i] == 1 && gt[i] == 0) ++fp;
    if (pred[i] == 0 && gt[i] == 1) ++fn;
  }
  auto r = [](long a, long b) { return b == 0 ? 1.0 : static_cast<double>(a) / static_cast<double>(b); };
  return {r(2 * tp, 2 * tp + fp + fn), r(tp, tp + fp + fn), r(tp, tp + fn), r(tp, tp + fp)};
}

}  // namespace ddanet::test
