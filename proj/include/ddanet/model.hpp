#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ddanet/layers.hpp"

namespace ddanet {

struct ModelConfig {
  std::size_t in_channels = 3;
  // Encoder widths, top (full resolution) to bottom.
  std::vector<std::size_t> channel_widths{32, 64, 128, 256};
  std::size_t se_ratio = 8;
  bool decoder_se = false;
  // Decoder stages (1-based) whose segmentation output is gated by the
  // autoencoder's attention map.
  std::vector<int> attention_stages{1, 2, 3};
  std::size_t input_h = 64;
  std::size_t input_w = 64;

  void validate() const;

  // Channel count produced by decoder stage `stage` (0-based): the encoder
  // widths mirrored, ending at the top width, e.g. 128, 64, 32, 32.
  std::size_t decoder_width(std::size_t stage) const;
  bool has_attention(std::size_t stage) const;

  // Widths {4, 8, 16, 32} with SE ratio 4; the desk-scale verification model.
  static ModelConfig tiny(std::size_t size = 16);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct EncoderBlockParams {
  ResidualBlockParams<T> res;
  SEParams<T> se;
};

template <typename T>
struct DecoderBlockParams {
  ConvSpec<T> up;  // 4x4 transposed convolution, stride 2, padding 1
  ResidualBlockParams<T> res1;
  ResidualBlockParams<T> res2;
  std::optional<SEParams<T>> se;
};

template <typename T>
struct DDANetParams {
  ModelConfig config;
  std::array<EncoderBlockParams<T>, 4> encoder;
  std::array<DecoderBlockParams<T>, 4> decoder_seg;
  std::array<DecoderBlockParams<T>, 4> decoder_auto;
  std::array<std::optional<ConvSpec<T>>, 4> attention;
  ConvSpec<T> head_seg;
  ConvSpec<T> head_auto;

  // Calls f(name, tensor, role) for every tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  void validate() const;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& s, F& f) {
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string p = "encoder." + std::to_string(i + 1);
      s.encoder[i].res.visit(p + ".res", f);
      s.encoder[i].se.visit(p + ".se", f);
    }
    visit_decoder(s.decoder_seg, "decoder_seg", f);
    visit_decoder(s.decoder_auto, "decoder_auto", f);
    for (std::size_t i = 0; i < 4; ++i) {
      if (s.attention[i]) s.attention[i]->visit("attention." + std::to_string(i + 1), f);
    }
    s.head_seg.visit("head_seg", f);
    s.head_auto.visit("head_auto", f);
  }

  template <typename Blocks, typename F>
  static void visit_decoder(Blocks& blocks, const std::string& name, F& f) {
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string p = name + "." + std::to_string(i + 1);
      blocks[i].up.visit(p + ".up", f);
      blocks[i].res1.visit(p + ".res1", f);
      blocks[i].res2.visit(p + ".res2", f);
      if (blocks[i].se) blocks[i].se->visit(p + ".se", f);
    }
  }
};

template <typename T>
struct ForwardOutput {
  Var<T> mask;  // (N,1,H,W) in (0,1)
  Var<T> gray;  // (N,1,H,W) in (0,1)
  std::vector<Var<T>> attention_maps;  // (N,1,h_i,w_i), one per attention stage
};

// Optional instrumentation of a forward pass.
struct ForwardTrace {
  std::vector<std::pair<std::string, Shape>> shapes;
  // Addresses of the skip tensors each decoder consumed, per stage.
  std::array<const void*, 4> seg_skips{};
  std::array<const void*, 4> auto_skips{};
  std::array<const void*, 4> encoder_skips{};
};

// Deterministic in (config, seed).
template <typename T>
DDANetParams<T> build(const ModelConfig& config, std::uint64_t seed);

// x is (N, in_channels, H, W) with values in [0,1] and H, W divisible by 16.
// Train mode updates batch-norm running statistics in `params`.
template <typename T>
ForwardOutput<T> forward(const ForwardContext<T>& ctx, DDANetParams<T>& params, const Var<T>& x,
                         ForwardTrace* trace = nullptr);

// Eval-mode forward without recording. Never writes to `params`, so it is safe
// to call concurrently on a shared parameter set.
template <typename T>
ForwardOutput<T> infer(const DDANetParams<T>& params, const Tensor<T>& x, ForwardTrace* trace = nullptr);

// The shape chain of forward() computed from closed-form layer formulas only.
std::vector<std::pair<std::string, Shape>> trace_shapes(const ModelConfig& config, std::size_t n, std::size_t h,
                                                        std::size_t w);

// Number of learnable scalars (batch-norm running statistics excluded).
template <typename T>
std::size_t count_params(const DDANetParams<T>& params);

template <typename T>
std::uint64_t params_checksum(const DDANetParams<T>& params);

template <typename U, typename T>
DDANetParams<U> cast_params(const DDANetParams<T>& params);

}  // namespace ddanet
