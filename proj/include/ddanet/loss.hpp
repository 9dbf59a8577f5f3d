#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ddanet/model.hpp"

namespace ddanet {

struct LossConfig {
  double dice_smooth = 1.0;           // epsilon in (2 sum(pt) + eps) / (sum p + sum t + eps)
  double reconstruction_weight = 1.0;  // lambda on the grayscale BCE term
  double bce_clamp = 1e-7;            // predictions clamped to [delta, 1 - delta]

  void validate() const;
};

// Mean binary cross-entropy over all elements.
template <typename T>
Var<T> bce(const Var<T>& pred, const Tensor<T>& target, double clamp = 1e-7);

// Soft dice loss, computed per image (axis 0) and averaged over the batch.
template <typename T>
Var<T> dice_loss(const Var<T>& pred, const Tensor<T>& target, double smooth = 1.0);

template <typename T>
struct LossBreakdown {
  Var<T> total;
  double bce_mask = 0;
  double dice = 0;
  double bce_gray = 0;
};

// total = bce(mask) + dice(mask) + lambda * bce(gray)
template <typename T>
LossBreakdown<T> total_loss(const ForwardOutput<T>& out, const Tensor<T>& mask_gt, const Tensor<T>& gray_gt,
                            const LossConfig& cfg = {});

struct SegmentationScores {
  double dsc = 1;
  double iou = 1;
  double recall = 1;
  double precision = 1;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

// Per-image scores; `pred` is binarised at `threshold` (values >= threshold
// are foreground), `gt` at 0.5. 0/0 ratios count as 1.
template <typename T>
std::vector<SegmentationScores> segmentation_metrics(const Tensor<T>& pred, const Tensor<T>& gt,
                                                     double threshold = 0.5);

struct MetricsReport {
  double dsc = 0;
  double miou = 0;
  double recall = 0;
  double precision = 0;
  double fps = 0;
  std::size_t n_images = 0;

  // Flat object with the six keys, values in 6-decimal fixed notation.
  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

// Means over images in order. fps is left at 0.
MetricsReport aggregate(const std::vector<SegmentationScores>& scores);

struct BenchResult {
  double fps = 0;
  double mean_ms = 0;
  double p50_ms = 0;
  double p95_ms = 0;
  std::size_t n_timed = 0;

  std::string to_json() const;
};

// Times single-image eval-mode forwards on a fixed pseudo-random input.
template <typename T>
BenchResult fps_benchmark(const DDANetParams<T>& params, std::size_t h, std::size_t w, std::size_t n_warmup = 10,
                          std::size_t n_timed = 100);

}  // namespace ddanet
