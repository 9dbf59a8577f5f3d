#include "ddanet/loss.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "internal.hpp"

namespace ddanet {

using detail::require;
using detail::verify_finite;

void LossConfig::validate() const {
  require(dice_smooth > 0, "LossConfig: dice smoothing must be positive");
  require(reconstruction_weight >= 0, "LossConfig: reconstruction weight must be non-negative");
  require(bce_clamp > 0 && bce_clamp < 0.5, "LossConfig: BCE clamp must lie in (0, 0.5)");
}

template <typename T>
Var<T> bce(const Var<T>& pred, const Tensor<T>& target, double clamp) {
  require(pred.shape() == target.shape(),
          "bce: prediction " + to_string(pred.shape()) + " and target " + to_string(target.shape()) + " differ");
  require(clamp > 0 && clamp < 0.5, "bce: clamp must lie in (0, 0.5)");
  const std::size_t n = target.numel();
  require(n > 0, "bce: empty input");
  const T lo = static_cast<T>(clamp);
  const T hi = static_cast<T>(1.0 - clamp);
  const T* p = pred.value().raw();
  const T* t = target.raw();
  using A = detail::Acc<T>;
  A acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T pc = std::clamp(p[i], lo, hi);
    const T qc = std::clamp(T{1} - p[i], lo, hi);
    acc -= static_cast<A>(t[i]) * std::log(static_cast<A>(pc)) +
           (A{1} - static_cast<A>(t[i])) * std::log(static_cast<A>(qc));
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<A>(n)));
  verify_finite(out, "bce");

  auto vp = pred.value_ptr();
  auto vt = std::make_shared<const Tensor<T>>(target);
  return Graph<T>::record(std::move(out), {&pred}, [vp, vt, lo, hi, n](const Tensor<T>& g, std::span<Tensor<T>> gin, std::span<const bool>) {
    gin[0] = Tensor<T>(vp->shape());
    const T scale = g[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T p = (*vp)[i];
      const T t = (*vt)[i];
      T d{0};
      if (p > lo && p < hi) d -= t / p;
      if (T{1} - p > lo && T{1} - p < hi) d += (T{1} - t) / (T{1} - p);
      gin[0][i] = d * scale;
    }
  });
}

template <typename T>
Var<T> dice_loss(const Var<T>& pred, const Tensor<T>& target, double smooth) {
  require(pred.shape() == target.shape(),
          "dice_loss: prediction " + to_string(pred.shape()) + " and target " + to_string(target.shape()) + " differ");
  require(smooth > 0, "dice_loss: smoothing must be positive");
  require(!target.shape().empty() && target.numel() > 0, "dice_loss: empty input");
  const std::size_t batch = target.shape()[0];
  const std::size_t per = target.numel() / batch;
  const T eps = static_cast<T>(smooth);
  const T* p = pred.value().raw();
  const T* t = target.raw();

  // Per image: intersection, sum(p) + sum(t).
  std::vector<T> inter(batch, T{0}), total(batch, T{0});
  T loss{0};
  for (std::size_t b = 0; b < batch; ++b) {
    T i_acc{0}, sp{0}, st{0};
    for (std::size_t k = b * per; k < (b + 1) * per; ++k) {
      i_acc += p[k] * t[k];
      sp += p[k];
      st += t[k];
    }
    inter[b] = i_acc;
    total[b] = sp + st;
    loss += T{1} - (T{2} * i_acc + eps) / (sp + st + eps);
  }
  Tensor<T> out = Tensor<T>::scalar(loss / static_cast<T>(batch));
  verify_finite(out, "dice_loss");

  auto vt = std::make_shared<const Tensor<T>>(target);
  return Graph<T>::record(std::move(out), {&pred}, [vt, inter, total, eps, batch, per](const Tensor<T>& g, std::span<Tensor<T>> gin, std::span<const bool>) {
    gin[0] = Tensor<T>(vt->shape());
    const T scale = g[0] / static_cast<T>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      const T den = total[b] + eps;
      const T num = T{2} * inter[b] + eps;
      for (std::size_t k = b * per; k < (b + 1) * per; ++k) {
        // d/dp [1 - num/den] = -(2 t den - num) / den^2
        gin[0][k] = -(T{2} * (*vt)[k] * den - num) / (den * den) * scale;
      }
    }
  });
}

template <typename T>
LossBreakdown<T> total_loss(const ForwardOutput<T>& out, const Tensor<T>& mask_gt, const Tensor<T>& gray_gt,
                            const LossConfig& cfg) {
  cfg.validate();
  LossBreakdown<T> r;
  Var<T> b = bce(out.mask, mask_gt, cfg.bce_clamp);
  Var<T> d = dice_loss(out.mask, mask_gt, cfg.dice_smooth);
  Var<T> g = bce(out.gray, gray_gt, cfg.bce_clamp);
  r.total = add(add(b, d), scale(g, static_cast<T>(cfg.reconstruction_weight)));
  r.bce_mask = static_cast<double>(b.value().item());
  r.dice = static_cast<double>(d.value().item());
  r.bce_gray = static_cast<double>(g.value().item());
  return r;
}

template <typename T>
std::vector<SegmentationScores> segmentation_metrics(const Tensor<T>& pred, const Tensor<T>& gt, double threshold) {
  require(pred.shape() == gt.shape(), "segmentation_metrics: prediction " + to_string(pred.shape()) +
                                          " and ground truth " + to_string(gt.shape()) + " differ");
  require(!gt.shape().empty() && gt.numel() > 0, "segmentation_metrics: empty input");
  const std::size_t batch = gt.shape()[0];
  const std::size_t per = gt.numel() / batch;
  const auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  std::vector<SegmentationScores> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    SegmentationScores& s = out[b];
    for (std::size_t k = b * per; k < (b + 1) * per; ++k) {
      const bool p = static_cast<double>(pred[k]) >= threshold;
      const bool t = static_cast<double>(gt[k]) >= 0.5;
      s.tp += p && t;
      s.fp += p && !t;
      s.fn += !p && t;
      s.tn += !p && !t;
    }
    s.dsc = ratio(2 * s.tp, 2 * s.tp + s.fp + s.fn);
    s.iou = ratio(s.tp, s.tp + s.fp + s.fn);
    s.recall = ratio(s.tp, s.tp + s.fn);
    s.precision = ratio(s.tp, s.tp + s.fp);
  }
  return out;
}

MetricsReport aggregate(const std::vector<SegmentationScores>& scores) {
  MetricsReport r;
  r.n_images = scores.size();
  if (scores.empty()) return r;
  for (const auto& s : scores) {
    r.dsc += s.dsc;
    r.miou += s.iou;
    r.recall += s.recall;
    r.precision += s.precision;
  }
  const double n = static_cast<double>(scores.size());
  r.dsc /= n;
  r.miou /= n;
  r.recall /= n;
  r.precision /= n;
  return r;
}

std::string MetricsReport::to_json() const {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "{\"dsc\": %.6f, \"miou\": %.6f, \"recall\": %.6f, \"precision\": %.6f, \"fps\": %.6f, \"n_images\": %zu}",
                dsc, miou, recall, precision, fps, n_images);
  return buf;
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MetricsReport r;
  r.dsc = j.at("dsc").get<double>();
  r.miou = j.at("miou").get<double>();
  r.recall = j.at("recall").get<double>();
  r.precision = j.at("precision").get<double>();
  r.fps = j.at("fps").get<double>();
  r.n_images = j.at("n_images").get<std::size_t>();
  return r;
}

std::string BenchResult::to_json() const {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "{\"fps\": %.6f, \"mean_ms\": %.6f, \"p50_ms\": %.6f, \"p95_ms\": %.6f, \"n_timed\": %zu}", fps,
                mean_ms, p50_ms, p95_ms, n_timed);
  return buf;
}

template <typename T>
BenchResult fps_benchmark(const DDANetParams<T>& params, std::size_t h, std::size_t w, std::size_t n_warmup,
                          std::size_t n_timed) {
  require(n_timed > 0, "fps_benchmark: n_timed must be positive");
  Tensor<T> x(Shape{1, params.config.in_channels, h, w});
  Rng rng(0x5eed);
  for (auto& v : x.data()) v = static_cast<T>(rng.uniform());

  for (std::size_t i = 0; i < n_warmup; ++i) infer(params, x);
  using clock = std::chrono::steady_clock;
  std::vector<double> ms(n_timed);
  const auto start = clock::now();
  for (std::size_t i = 0; i < n_timed; ++i) {
    const auto t0 = clock::now();
    auto out = infer(params, x);
    ms[i] = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  }
  const double total_s = std::chrono::duration<double>(clock::now() - start).count();

  BenchResult r;
  r.n_timed = n_timed;
  r.fps = static_cast<double>(n_timed) / std::max(total_s, 1e-12);
  double sum = 0;
  for (double v : ms) sum += v;
  r.mean_ms = sum / static_cast<double>(n_timed);
  std::sort(ms.begin(), ms.end());
  const auto pct = [&](double q) {
    const std::size_t idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n_timed))) - 1;
    return ms[std::min(idx, n_timed - 1)];
  };
  r.p50_ms = pct(0.50);
  r.p95_ms = pct(0.95);
  return r;
}

#define DDANET_INSTANTIATE_LOSS(T)                                                                          \
  template Var<T> bce<T>(const Var<T>&, const Tensor<T>&, double);                                          \
  template Var<T> dice_loss<T>(const Var<T>&, const Tensor<T>&, double);                                    \
  template LossBreakdown<T> total_loss<T>(const ForwardOutput<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                          const LossConfig&);                                               \
  template std::vector<SegmentationScores> segmentation_metrics<T>(const Tensor<T>&, const Tensor<T>&, double); \
  template BenchResult fps_benchmark<T>(const DDANetParams<T>&, std::size_t, std::size_t, std::size_t, std::size_t);

DDANET_INSTANTIATE_LOSS(float)
DDANET_INSTANTIATE_LOSS(double)
DDANET_INSTANTIATE_LOSS(long double)

}  // namespace ddanet
