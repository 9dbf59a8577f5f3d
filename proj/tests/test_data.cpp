#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "ddanet/data.hpp"
#include "ddanet/errors.hpp"
#include "support.hpp"

using namespace ddanet;
using namespace ddanet::test;
namespace fs = std::filesystem;

namespace {

// Fresh directory under the system temp dir, removed on scope exit.
struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("ddanet_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
            std::to_string(++counter) + "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Image bytes_image(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  Image t(Shape{1, c, h, w});
  for (auto& v : t.data()) v = static_cast<float>(rng.index(256)) / 255.0f;
  return t;
}

Dataset stems_only(std::size_t n) {
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) d.items.push_back({"item" + std::to_string(i), {}, {}, {}, {}});
  return d;
}

std::set<std::string> stems(const Dataset& d) {
  std::set<std::string> s;
  for (const auto& it : d.items) s.insert(it.stem);
  return s;
}

}  // namespace

TEST(ImageIo, WhiteImageLoadsAsOnes) {
  TempDir dir;
  save_rgb_png(dir.path / "w.png", Image(Shape{1, 3, 2, 2}, 1.0f));
  const Image x = load_image(dir.path / "w.png");
  EXPECT_EQ(x.shape(), (Shape{1, 3, 2, 2}));
  for (float v : x.data()) EXPECT_EQ(v, 1.0f);
}

TEST(ImageIo, ByteValueOverTwoFiftyFive) {
  TempDir dir;
  save_rgb_png(dir.path / "g.png", Image(Shape{1, 3, 1, 1}, 128.0f / 255.0f));
  const Image x = load_image(dir.path / "g.png");
  for (float v : x.data()) EXPECT_NEAR(v, 0.50196, 1e-5);
}

TEST(ImageIo, RgbRoundTripIsExactAndChannelOrderKept) {
  TempDir dir;
  Rng rng(1);
  const Image x = bytes_image(3, 5, 7, rng);
  save_rgb_png(dir.path / "x.png", x);
  EXPECT_TRUE(bitwise_equal(load_image(dir.path / "x.png"), x));
}

TEST(ImageIo, GrayscaleFileIsReplicatedToThreeChannels) {
  TempDir dir;
  Rng rng(2);
  const Image g = bytes_image(1, 4, 6, rng);
  save_gray_png(dir.path / "g.png", g);
  const Image x = load_image(dir.path / "g.png");
  ASSERT_EQ(x.shape(), (Shape{1, 3, 4, 6}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(x.at(0, c, i, j), g.at(0, 0, i, j));
}

TEST(MaskIo, RandomBinaryMaskRoundTripsExactly) {
  TempDir dir;
  Rng rng(3);
  Image m(Shape{1, 1, 9, 11});
  for (auto& v : m.data()) v = rng.uniform() < 0.4 ? 1.0f : 0.0f;
  save_mask_png(dir.path / "m.png", m);
  const Image back = load_mask(dir.path / "m.png");
  EXPECT_TRUE(bitwise_equal(back, m));
  // Written as 0/255.
  const Image raw = load_image(dir.path / "m.png");
  for (float v : raw.data()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
}

TEST(MaskIo, ThresholdAt128AndOracleCount) {
  TempDir dir;
  Image g(Shape{1, 1, 1, 4});
  g[0] = 127.0f / 255.0f;
  g[1] = 128.0f / 255.0f;
  g[2] = 0.0f;
  g[3] = 1.0f;
  save_gray_png(dir.path / "t.png", g);
  const Image m = load_mask(dir.path / "t.png");
  EXPECT_EQ(m[0], 0.0f);
  EXPECT_EQ(m[1], 1.0f);
  EXPECT_EQ(m[2], 0.0f);
  EXPECT_EQ(m[3], 1.0f);

  Rng rng(4);
  const Image r = bytes_image(1, 16, 16, rng);
  save_gray_png(dir.path / "r.png", r);
  std::size_t ones = 0;
  for (float v : r.data()) ones += std::lround(v * 255.0f) >= 128;
  std::size_t loaded = 0;
  const Image rm = load_mask(dir.path / "r.png");
  for (float v : rm.data()) loaded += v == 1.0f;
  EXPECT_EQ(loaded, ones);
}

TEST(ImageIo, ErrorsNameThePath) {
  TempDir dir;
  try {
    load_image(dir.path / "missing.png");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.png"), std::string::npos);
  }
  std::ofstream(dir.path / "junk.png") << "not an image";
  EXPECT_THROW(load_image(dir.path / "junk.png"), IoError);
  EXPECT_THROW(load_mask(dir.path / "junk.png"), IoError);
}

TEST(Grayscale, WeightsAndOracle) {
  Image red(Shape{1, 3, 1, 1});
  red[0] = 1.0f;
  EXPECT_NEAR(to_grayscale(red)[0], 0.299f, 1e-7);
  Rng rng(5);
  const auto x = random_tensor<double>({2, 3, 4, 5}, rng, 0, 1);
  const auto g = to_grayscale(x);
  ASSERT_EQ(g.shape(), (Shape{2, 1, 4, 5}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        const double r = x.at(n, 0, i, j), gr = x.at(n, 1, i, j), b = x.at(n, 2, i, j);
        EXPECT_NEAR(g.at(n, 0, i, j), 0.299 * r + 0.587 * gr + 0.114 * b, 1e-15);
        EXPECT_GE(g.at(n, 0, i, j), std::min({r, gr, b}) - 1e-15);
        EXPECT_LE(g.at(n, 0, i, j), std::max({r, gr, b}) + 1e-15);
      }
  const Tensor<double> flat(Shape{1, 3, 2, 2}, 0.3);
  const auto fg = to_grayscale(flat);
  for (double v : fg.data()) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(Resize, IdentityAndConstant) {
  Rng rng(6);
  const auto x = random_tensor<double>({2, 3, 5, 7}, rng, 0, 1);
  EXPECT_TRUE(bitwise_equal(resize_bilinear(x, 5, 7), x));
  const Tensor<double> c(Shape{1, 1, 3, 3}, 0.42);
  const auto cr = resize_bilinear(c, 8, 5);
  for (double v : cr.data()) EXPECT_NEAR(v, 0.42, 1e-15);
}

TEST(Resize, HandComputedHalfPixelCentres) {
  // Output column j samples source x = (j + 0.5) * 2 / 4 - 0.5, clamped to [0, 1].
  Tensor<double> x(Shape{1, 1, 2, 2});
  x.at(0, 0, 0, 1) = 1.0;
  x.at(0, 0, 1, 1) = 1.0;
  const auto y = resize_bilinear(x, 2, 4);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  const double expected[4] = {0.0, 0.25, 0.75, 1.0};
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(y.at(0, 0, i, j), expected[j]);
}

TEST(Resize, MaskIsRebinarised) {
  Tensor<double> m(Shape{1, 1, 2, 2});
  m.at(0, 0, 0, 1) = 1.0;
  m.at(0, 0, 1, 1) = 1.0;
  const auto y = resize_mask(m, 2, 4);
  const double expected[4] = {0.0, 0.0, 1.0, 1.0};
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(y.at(0, 0, 0, j), expected[j]);
  Rng rng(7);
  const auto rm = resize_mask(random_tensor<double>({1, 1, 7, 7}, rng, 0, 1), 16, 16);
  for (double v : rm.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

TEST(Directory, LoadsPairsByStemInOrder) {
  TempDir dir;
  const Dataset synth = synthetic_blobs(3, 16, 9);
  export_dataset(synth, dir.path);
  const Dataset d = load_directory(dir.path);
  ASSERT_EQ(d.size(), 3u);
  EXPECT_EQ(d.source, DatasetSource::directory);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(d.items[i].stem, synth.items[i].stem);
    const Sample s = materialize(d.items[i], 16, 16);
    EXPECT_TRUE(bitwise_equal(s.image, *synth.items[i].image));
    EXPECT_TRUE(bitwise_equal(s.mask, *synth.items[i].mask));
    EXPECT_TRUE(bitwise_equal(s.gray, to_grayscale(s.image)));
  }
}

TEST(Directory, UnpairedStemsAreListed) {
  TempDir dir;
  export_dataset(synthetic_blobs(2, 16, 1), dir.path);
  fs::remove(dir.path / "masks" / "synth_00001.png");
  save_rgb_png(dir.path / "images" / "extra.png", Image(Shape{1, 3, 16, 16}));
  save_mask_png(dir.path / "masks" / "orphan.png", Image(Shape{1, 1, 16, 16}));
  try {
    load_directory(dir.path);
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("synth_00001"), std::string::npos) << msg;
    EXPECT_NE(msg.find("extra"), std::string::npos) << msg;
    EXPECT_NE(msg.find("orphan"), std::string::npos) << msg;
  }
  EXPECT_THROW(load_directory(dir.path / "nowhere"), IoError);
}

TEST(Directory, ResizesBothToTheRequestedSize) {
  TempDir dir;
  export_dataset(synthetic_blobs(1, 32, 2), dir.path);
  const Sample s = materialize(load_directory(dir.path).items[0], 16, 16);
  EXPECT_EQ(s.image.shape(), (Shape{1, 3, 16, 16}));
  EXPECT_EQ(s.mask.shape(), (Shape{1, 1, 16, 16}));
  for (float v : s.mask.data()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
}

TEST(Split, EightyEightTwelveProportions) {
  const auto [train, val] = split(stems_only(1000), SplitSpec{0.88, 3});
  EXPECT_EQ(train.size(), 880u);
  EXPECT_EQ(val.size(), 120u);
}

TEST(Split, DeterministicDisjointExhaustive) {
  Rng rng(10);
  for (int k = 0; k < 20; ++k) {
    const std::size_t n = 1 + rng.index(200);
    const Dataset d = stems_only(n);
    const SplitSpec spec{rng.uniform(0.05, 0.95), rng.index(1000)};
    const auto [a, b] = split(d, spec);
    const auto [a2, b2] = split(d, spec);
    EXPECT_EQ(a.size(), static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(n) + 1e-9)));
    std::vector<std::string> sa, sa2;
    for (const auto& it : a.items) sa.push_back(it.stem);
    for (const auto& it : a2.items) sa2.push_back(it.stem);
    EXPECT_EQ(sa, sa2);
    auto all = stems(a);
    for (const auto& s : stems(b)) EXPECT_TRUE(all.insert(s).second) << s;
    EXPECT_EQ(all, stems(d));
  }
  EXPECT_NE(stems(split(stems_only(50), {0.5, 1}).first), stems(split(stems_only(50), {0.5, 2}).first));
}

TEST(Split, Errors) {
  EXPECT_THROW(split(Dataset{}, SplitSpec{}), InvalidArgument);
  EXPECT_THROW(split(stems_only(4), SplitSpec{1.0, 0}), InvalidArgument);
  EXPECT_THROW(split(stems_only(4), SplitSpec{0.0, 0}), InvalidArgument);
}

TEST(Synthetic, DeterministicAndRejectsBadSize) {
  const Dataset a = synthetic_blobs(3, 32, 5), b = synthetic_blobs(3, 32, 5), c = synthetic_blobs(3, 32, 6);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(bitwise_equal(*a.items[i].image, *b.items[i].image));
    EXPECT_TRUE(bitwise_equal(*a.items[i].mask, *b.items[i].mask));
  }
  EXPECT_FALSE(bitwise_equal(*a.items[0].image, *c.items[0].image));
  EXPECT_THROW(synthetic_blobs(1, 40, 0), InvalidArgument);
  EXPECT_THROW(synthetic_blobs(1, 0, 0), InvalidArgument);
}

TEST(Synthetic, ForegroundFractionOverThousandSeeds) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Dataset d = synthetic_blobs(1, 64, seed);
    const Image& m = *d.items[0].mask;
    std::size_t ones = 0;
    for (std::size_t i = 0; i < 64; ++i)
      for (std::size_t j = 0; j < 64; ++j) {
        const float v = m.at(0, 0, i, j);
        ASSERT_TRUE(v == 0.0f || v == 1.0f);
        ones += v == 1.0f;
      }
    const double f = static_cast<double>(ones) / 4096.0;
    ASSERT_GT(f, 0.01) << "seed " << seed;
    ASSERT_LT(f, 0.6) << "seed " << seed;
  }
}

TEST(Synthetic, ImagesOnTheByteGridAndPolypsBrighter) {
  const Dataset d = synthetic_blobs(8, 32, 11);
  for (const auto& it : d.items) {
    const Image& x = *it.image;
    for (float v : x.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
      EXPECT_EQ(static_cast<float>(std::lround(v * 255.0f)) / 255.0f, v);
    }
    const Image g = to_grayscale(x);
    double fg = 0, bg = 0, nf = 0, nb = 0;
    for (std::size_t k = 0; k < g.numel(); ++k) {
      ((*it.mask)[k] == 1.0f ? fg : bg) += g[k];
      ((*it.mask)[k] == 1.0f ? nf : nb) += 1;
    }
    EXPECT_GT(fg / nf, bg / nb + 0.5);
  }
}

TEST(Synthetic, ExportedPairsReloadWithInvariants) {
  TempDir dir;
  const Dataset d = synthetic_blobs(4, 32, 12);
  export_dataset(d, dir.path);
  EXPECT_EQ(std::distance(fs::directory_iterator(dir.path / "images"), fs::directory_iterator{}), 4);
  const Dataset back = load_directory(dir.path);
  ASSERT_EQ(back.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    const Sample s = materialize(back.items[i], 32, 32);
    EXPECT_TRUE(bitwise_equal(s.image, *d.items[i].image));
    EXPECT_TRUE(bitwise_equal(s.mask, *d.items[i].mask));
  }
}

TEST(Batch, StacksItemsInIndexOrder) {
  const Dataset d = synthetic_blobs(3, 16, 13);
  const SampleBatch b = make_batch(d, {2, 0}, 16, 16);
  EXPECT_EQ(b.images.shape(), (Shape{2, 3, 16, 16}));
  EXPECT_EQ(b.masks.shape(), (Shape{2, 1, 16, 16}));
  EXPECT_EQ(b.images.at(0, 1, 3, 4), d.items[2].image->at(0, 1, 3, 4));
  EXPECT_EQ(b.masks.at(1, 0, 5, 6), d.items[0].mask->at(0, 0, 5, 6));
  EXPECT_THROW(make_batch(d, {}, 16, 16), InvalidArgument);
}
