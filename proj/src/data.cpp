#include "ddanet/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "internal.hpp"

namespace ddanet {

namespace fs = std::filesystem;
using detail::require;

namespace {

cv::Mat read_8bit(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw IoError(path.string(), "no such file");
  cv::Mat m;
  try {
    m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw IoError(path.string(), std::string("cannot decode image: ") + e.what());
  }
  if (m.empty()) throw IoError(path.string(), "cannot decode image");
  if (m.depth() != CV_8U) throw IoError(path.string(), "unsupported bit depth (8-bit images only)");
  if (m.channels() != 1 && m.channels() != 3 && m.channels() != 4) {
    throw IoError(path.string(), "unsupported channel count " + std::to_string(m.channels()));
  }
  return m;
}

void write_png(const fs::path& path, const cv::Mat& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), m);
  } catch (const cv::Exception& e) {
    throw IoError(path.string(), std::string("cannot write PNG: ") + e.what());
  }
  if (!ok) throw IoError(path.string(), "cannot write PNG");
}

std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::map<std::string, fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.string(), "not a directory");
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
    const std::string stem = entry.path().stem().string();
    if (!out.emplace(stem, entry.path()).second) {
      throw InvalidArgument("duplicate stem '" + stem + "' in " + dir.string());
    }
  }
  return out;
}

}  // namespace

Image load_image(const fs::path& path) {
  const cv::Mat m = read_8bit(path);
  const std::size_t h = static_cast<std::size_t>(m.rows), w = static_cast<std::size_t>(m.cols);
  Image out(Shape{1, 3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    const std::uint8_t* row = m.ptr<std::uint8_t>(static_cast<int>(y));
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        // OpenCV stores BGR(A).
        const std::uint8_t byte = m.channels() == 1 ? row[x] : row[x * m.channels() + (2 - c)];
        out.at(0, c, y, x) = static_cast<float>(byte) / 255.0f;
      }
    }
  }
  return out;
}

Image load_mask(const fs::path& path) {
  cv::Mat m = read_8bit(path);
  if (m.channels() == 3) {
    cv::cvtColor(m, m, cv::COLOR_BGR2GRAY);
  } else if (m.channels() == 4) {
    cv::cvtColor(m, m, cv::COLOR_BGRA2GRAY);
  }
  const std::size_t h = static_cast<std::size_t>(m.rows), w = static_cast<std::size_t>(m.cols);
  Image out(Shape{1, 1, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    const std::uint8_t* row = m.ptr<std::uint8_t>(static_cast<int>(y));
    for (std::size_t x = 0; x < w; ++x) out.at(0, 0, y, x) = row[x] >= 128 ? 1.0f : 0.0f;
  }
  return out;
}

void save_rgb_png(const fs::path& path, const Image& image) {
  require(image.rank() == 4 && image.dim(0) == 1 && image.dim(1) == 3, "save_rgb_png: expected a 1x3xHxW image");
  const int h = static_cast<int>(image.dim(2)), w = static_cast<int>(image.dim(3));
  cv::Mat m(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) row[x * 3 + (2 - c)] = quantize(image.at(0, c, y, x));
  }
  write_png(path, m);
}

void save_gray_png(const fs::path& path, const Image& gray) {
  require(gray.rank() == 4 && gray.dim(0) == 1 && gray.dim(1) == 1, "save_gray_png: expected a 1x1xHxW image");
  const int h = static_cast<int>(gray.dim(2)), w = static_cast<int>(gray.dim(3));
  cv::Mat m(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at<std::uint8_t>(y, x) = quantize(gray.at(0, 0, y, x));
  write_png(path, m);
}

void save_mask_png(const fs::path& path, const Image& mask) {
  require(mask.rank() == 4 && mask.dim(0) == 1 && mask.dim(1) == 1, "save_mask_png: expected a 1x1xHxW mask");
  const int h = static_cast<int>(mask.dim(2)), w = static_cast<int>(mask.dim(3));
  cv::Mat m(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at<std::uint8_t>(y, x) = mask.at(0, 0, y, x) >= 0.5f ? 255 : 0;
  write_png(path, m);
}

template <typename T>
Tensor<T> to_grayscale(const Tensor<T>& image) {
  require(image.rank() == 4 && image.dim(1) == 3, "to_grayscale: expected (N,3,H,W), got " + to_string(image.shape()));
  const std::size_t n = image.dim(0), h = image.dim(2), w = image.dim(3);
  Tensor<T> out(Shape{n, 1, h, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const T v = T(0.299) * image.at(i, 0, y, x) + T(0.587) * image.at(i, 1, y, x) + T(0.114) * image.at(i, 2, y, x);
        out.at(i, 0, y, x) = std::clamp(v, T{0}, T{1});
      }
  return out;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  require(x.rank() == 4, "resize_bilinear: expected a rank-4 tensor");
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: output size must be at least 1x1");
  const std::size_t planes = x.dim(0) * x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  if (in_h == out_h && in_w == out_w) return x;

  struct Tap {
    std::size_t i0, i1;
    T frac;
  };
  const auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const std::size_t i0 = static_cast<std::size_t>(std::floor(src));
      t[i] = {i0, std::min(i0 + 1, in - 1), static_cast<T>(src - static_cast<double>(i0))};
    }
    return t;
  };
  const auto ty = taps(in_h, out_h);
  const auto tx = taps(in_w, out_w);

  Tensor<T> out(Shape{x.dim(0), x.dim(1), out_h, out_w});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.raw() + p * in_h * in_w;
    T* dst = out.raw() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T* r0 = src + ty[i].i0 * in_w;
      const T* r1 = src + ty[i].i1 * in_w;
      const T fy = ty[i].frac;
      for (std::size_t j = 0; j < out_w; ++j) {
        const T fx = tx[j].frac;
        const T top = r0[tx[j].i0] * (T{1} - fx) + r0[tx[j].i1] * fx;
        const T bot = r1[tx[j].i0] * (T{1} - fx) + r1[tx[j].i1] * fx;
        dst[i * out_w + j] = top * (T{1} - fy) + bot * fy;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> resize_mask(const Tensor<T>& mask, std::size_t out_h, std::size_t out_w) {
  Tensor<T> r = resize_bilinear(mask, out_h, out_w);
  for (auto& v : r.data()) v = v >= T(0.5) ? T{1} : T{0};
  return r;
}

Dataset load_directory(const fs::path& root) {
  const auto images = list_images(root / "images");
  const auto masks = list_images(root / "masks");
  std::vector<std::string> unpaired;
  for (const auto& [stem, _] : images)
    if (!masks.count(stem)) unpaired.push_back("images/" + stem);
  for (const auto& [stem, _] : masks)
    if (!images.count(stem)) unpaired.push_back("masks/" + stem);
  if (!unpaired.empty()) {
    std::string msg = "unpaired files under " + root.string() + ":";
    for (const auto& s : unpaired) msg += " " + s;
    throw InvalidArgument(msg);
  }
  Dataset d;
  d.name = root.filename().string();
  if (d.name.empty()) d.name = root.parent_path().filename().string();
  d.source = DatasetSource::directory;
  for (const auto& [stem, path] : images) {
    DataItem item;
    item.stem = stem;
    item.image_path = path;
    item.mask_path = masks.at(stem);
    d.items.push_back(std::move(item));
  }
  return d;
}

Sample materialize(const DataItem& item, std::size_t h, std::size_t w) {
  Image image = item.image ? *item.image : load_image(item.image_path.value());
  Image mask = item.mask ? *item.mask : load_mask(item.mask_path.value());
  if (image.dim(2) != mask.dim(2) || image.dim(3) != mask.dim(3)) {
    throw InvalidArgument("item '" + item.stem + "': image " + to_string(image.shape()) + " and mask " +
                          to_string(mask.shape()) + " differ in size");
  }
  Sample s;
  s.image = resize_bilinear(image, h, w);
  s.mask = resize_mask(mask, h, w);
  s.gray = to_grayscale(s.image);
  return s;
}

SampleBatch make_batch(const Dataset& dataset, const std::vector<std::size_t>& indices, std::size_t h, std::size_t w) {
  require(!indices.empty(), "make_batch: empty index list");
  const std::size_t n = indices.size();
  SampleBatch b{Image(Shape{n, 3, h, w}), Image(Shape{n, 1, h, w}), Image(Shape{n, 1, h, w})};
  for (std::size_t i = 0; i < n; ++i) {
    require(indices[i] < dataset.size(), "make_batch: index out of range");
    const Sample s = materialize(dataset.items[indices[i]], h, w);
    std::copy(s.image.data().begin(), s.image.data().end(), b.images.raw() + i * 3 * h * w);
    std::copy(s.mask.data().begin(), s.mask.data().end(), b.masks.raw() + i * h * w);
    std::copy(s.gray.data().begin(), s.gray.data().end(), b.grays.raw() + i * h * w);
  }
  return b;
}

void SplitSpec::validate() const {
  require(train_fraction > 0 && train_fraction < 1, "SplitSpec: train_fraction must lie in (0,1)");
}

void shuffle_in_place(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  Rng rng(seed);
  shuffle_in_place(v, rng);
  return v;
}

std::pair<Dataset, Dataset> split(const Dataset& dataset, const SplitSpec& spec) {
  spec.validate();
  require(!dataset.empty(), "split: dataset is empty");
  const auto order = shuffled_indices(dataset.size(), spec.seed);
  const std::size_t n_train =
      static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(dataset.size()) + 1e-9));
  std::pair<Dataset, Dataset> out;
  out.first.name = dataset.name + "/train";
  out.second.name = dataset.name + "/val";
  out.first.source = out.second.source = dataset.source;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? out.first : out.second).items.push_back(dataset.items[order[i]]);
  }
  return out;
}

Dataset synthetic_blobs(std::size_t n, std::size_t size, std::uint64_t seed) {
  require(size > 0 && size % 16 == 0, "synthetic_blobs: size " + std::to_string(size) + " must be a positive multiple of 16");
  Dataset d;
  d.name = "synthetic";
  d.source = DatasetSource::synthetic;
  const double s = static_cast<double>(size);
  constexpr double kPi = std::numbers::pi;

  for (std::size_t idx = 0; idx < n; ++idx) {
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + idx + 1);

    // Dark tinted background plus three low-frequency waves. Both the colours
    // and the noise are kept near the ends of the range so the grayscale
    // target is nearly binary and its cross-entropy floor stays low.
    const double base[3] = {0.07 + rng.uniform(-0.02, 0.02), 0.03 + rng.uniform(-0.01, 0.01),
                            0.03 + rng.uniform(-0.01, 0.01)};
    struct Wave {
      double fx, fy, phase, amp;
    };
    Wave waves[3];
    for (auto& wv : waves) {
      wv = {rng.uniform(0.5, 3.0) * 2 * kPi / s, rng.uniform(0.5, 3.0) * 2 * kPi / s, rng.uniform(0, 2 * kPi),
            rng.uniform(0.005, 0.015)};
    }

    struct Ellipse {
      double cx, cy, a, b, cos_t, sin_t;
      double color[3];
      double tex_f, tex_phase;
    };
    const std::size_t k = 1 + rng.index(3);
    std::vector<Ellipse> blobs(k);
    for (auto& e : blobs) {
      e.a = rng.uniform(0.10, 0.24) * s;
      e.b = rng.uniform(0.10, 0.24) * s;
      const double theta = rng.uniform(0, kPi);
      e.cos_t = std::cos(theta);
      e.sin_t = std::sin(theta);
      const double margin = std::max(e.a, e.b) + 1.0;
      e.cx = rng.uniform(margin, s - margin);
      e.cy = rng.uniform(margin, s - margin);
      e.color[0] = 0.97 + rng.uniform(-0.02, 0.02);
      e.color[1] = 0.93 + rng.uniform(-0.03, 0.03);
      e.color[2] = 0.84 + rng.uniform(-0.04, 0.04);
      e.tex_f = rng.uniform(4.0, 8.0) * 2 * kPi / s;
      e.tex_phase = rng.uniform(0, 2 * kPi);
    }

    Image image(Shape{1, 3, size, size});
    Image mask(Shape{1, 1, size, size});
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        double shade = 0;
        for (const auto& wv : waves) shade += wv.amp * std::sin(wv.fx * px + wv.fy * py + wv.phase);
        double rgb[3] = {base[0] + shade, base[1] + 0.7 * shade, base[2] + 0.5 * shade};
        for (const auto& e : blobs) {
          const double dx = px - e.cx, dy = py - e.cy;
          const double u = (dx * e.cos_t + dy * e.sin_t) / e.a;
          const double v = (-dx * e.sin_t + dy * e.cos_t) / e.b;
          const double r2 = u * u + v * v;
          if (r2 > 1.0) continue;
          mask.at(0, 0, y, x) = 1.0f;
          const double tex = 0.01 * std::sin(e.tex_f * (px + py) + e.tex_phase) - 0.02 * r2;
          for (int c = 0; c < 3; ++c) rgb[c] = e.color[c] + tex;
        }
        // Stored on the 8-bit grid so exported PNGs reload bit-exactly.
        for (std::size_t c = 0; c < 3; ++c) image.at(0, c, y, x) = static_cast<float>(quantize(static_cast<float>(rgb[c]))) / 255.0f;
      }
    }

    DataItem item;
    char stem[32];
    std::snprintf(stem, sizeof stem, "synth_%05zu", idx);
    item.stem = stem;
    item.image = std::move(image);
    item.mask = std::move(mask);
    d.items.push_back(std::move(item));
  }
  return d;
}

void export_dataset(const Dataset& dataset, const fs::path& root) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const auto& item : dataset.items) {
    const Image image = item.image ? *item.image : load_image(item.image_path.value());
    const Image mask = item.mask ? *item.mask : load_mask(item.mask_path.value());
    save_rgb_png(root / "images" / (item.stem + ".png"), image);
    save_mask_png(root / "masks" / (item.stem + ".png"), mask);
  }
}

template Tensor<float> to_grayscale<float>(const Tensor<float>&);
template Tensor<double> to_grayscale<double>(const Tensor<double>&);
template Tensor<float> resize_bilinear<float>(const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> resize_bilinear<double>(const Tensor<double>&, std::size_t, std::size_t);
template Tensor<float> resize_mask<float>(const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> resize_mask<double>(const Tensor<double>&, std::size_t, std::size_t);

}  // namespace ddanet
