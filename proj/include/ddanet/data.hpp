#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ddanet/rng.hpp"
#include "ddanet/tensor.hpp"

namespace ddanet {

using Image = Tensor<float>;

// 1x3xHxW in [0,1]. Grayscale files are replicated to three channels.
Image load_image(const std::filesystem::path& path);

// 1x1xHxW in {0,1}; a pixel is foreground when its byte value is >= 128.
// Colour masks are reduced to luminance first.
Image load_mask(const std::filesystem::path& path);

// Writers quantise v in [0,1] to round(255 v).
void save_rgb_png(const std::filesystem::path& path, const Image& image);
void save_gray_png(const std::filesystem::path& path, const Image& gray);
// Binary mask written as 0/255.
void save_mask_png(const std::filesystem::path& path, const Image& mask);

// BT.601 luminance 0.299 R + 0.587 G + 0.114 B; (N,3,H,W) -> (N,1,H,W).
template <typename T>
Tensor<T> to_grayscale(const Tensor<T>& image);

// Bilinear resampling of every (n, c) plane, pixel centres at (i + 0.5) / size.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

// Bilinear resize followed by re-binarisation at 0.5.
template <typename T>
Tensor<T> resize_mask(const Tensor<T>& mask, std::size_t out_h, std::size_t out_w);

enum class DatasetSource { directory, synthetic };

struct DataItem {
  std::string stem;
  std::optional<std::filesystem::path> image_path;
  std::optional<std::filesystem::path> mask_path;
  // Populated for in-memory items.
  std::optional<Image> image;
  std::optional<Image> mask;
};

struct Dataset {
  std::string name;
  DatasetSource source = DatasetSource::directory;
  std::vector<DataItem> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
};

// A training sample at a fixed resolution.
struct Sample {
  Image image;  // 1x3xSxS
  Image mask;   // 1x1xSxS binary
  Image gray;   // 1x1xSxS reconstruction target
};

struct SampleBatch {
  Image images;  // Nx3xHxW
  Image masks;   // Nx1xHxW
  Image grays;   // Nx1xHxW
};

// Loads `<root>/images/*` and `<root>/masks/*`, paired by file stem and
// ordered by stem. Unpaired stems are an error listing every offender.
Dataset load_directory(const std::filesystem::path& root);

// Loads (or copies) one item and brings it to h x w.
Sample materialize(const DataItem& item, std::size_t h, std::size_t w);

SampleBatch make_batch(const Dataset& dataset, const std::vector<std::size_t>& indices, std::size_t h, std::size_t w);

struct SplitSpec {
  double train_fraction = 0.88;
  std::uint64_t seed = 0;

  void validate() const;
};

// Seeded shuffle, then the first floor(train_fraction * N) items train.
std::pair<Dataset, Dataset> split(const Dataset& dataset, const SplitSpec& spec);

// Fisher-Yates driven by `rng`.
void shuffle_in_place(std::vector<std::size_t>& v, Rng& rng);

// Deterministic shuffle of [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

// Desk-scale stand-in for a polyp dataset: smooth textured background with
// one to three coloured ellipses; the mask is the union of the ellipses.
Dataset synthetic_blobs(std::size_t n, std::size_t size, std::uint64_t seed);

// Writes images/<stem>.png and masks/<stem>.png under `root`.
void export_dataset(const Dataset& dataset, const std::filesystem::path& root);

}  // namespace ddanet
