#include "ddanet/model.hpp"

#include <algorithm>
#include <functional>

#include "internal.hpp"

namespace ddanet {

using detail::require;

void ModelConfig::validate() const {
  require(in_channels > 0, "ModelConfig: in_channels must be positive");
  require(channel_widths.size() == 4, "ModelConfig: exactly 4 encoder widths are required, got " +
                                          std::to_string(channel_widths.size()));
  require(se_ratio > 0, "ModelConfig: se_ratio must be positive");
  for (auto w : channel_widths) {
    require(w > 0 && w % se_ratio == 0,
            "ModelConfig: width " + std::to_string(w) + " is not divisible by se_ratio " + std::to_string(se_ratio));
  }
  for (std::size_t i = 0; i < attention_stages.size(); ++i) {
    const int s = attention_stages[i];
    require(s >= 1 && s <= 4, "ModelConfig: attention stage " + std::to_string(s) + " outside 1..4");
    for (std::size_t j = 0; j < i; ++j) require(attention_stages[j] != s, "ModelConfig: duplicate attention stage");
  }
  require(input_h > 0 && input_w > 0 && input_h % 16 == 0 && input_w % 16 == 0,
          "ModelConfig: input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
              " must be a positive multiple of 16");
}

std::size_t ModelConfig::decoder_width(std::size_t stage) const {
  return stage < 3 ? channel_widths[2 - stage] : channel_widths[0];
}

bool ModelConfig::has_attention(std::size_t stage) const {
  return std::find(attention_stages.begin(), attention_stages.end(), static_cast<int>(stage + 1)) !=
         attention_stages.end();
}

ModelConfig ModelConfig::tiny(std::size_t size) {
  ModelConfig c;
  c.channel_widths = {4, 8, 16, 32};
  c.se_ratio = 4;
  c.input_h = size;
  c.input_w = size;
  return c;
}

template <typename T>
void DDANetParams<T>::validate() const {
  config.validate();
  std::size_t prev = config.in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    encoder[i].res.validate();
    encoder[i].se.validate();
    require(encoder[i].res.in_channels() == prev && encoder[i].res.out_channels() == config.channel_widths[i] &&
                encoder[i].se.channels == config.channel_widths[i],
            "DDANetParams: encoder block " + std::to_string(i + 1) + " widths do not match the config");
    prev = config.channel_widths[i];
  }
  for (const auto* dec : {&decoder_seg, &decoder_auto}) {
    std::size_t below = config.channel_widths[3];
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& b = (*dec)[i];
      const std::size_t width = config.decoder_width(i);
      const std::size_t skip = config.channel_widths[3 - i];
      b.up.validate();
      b.res1.validate();
      b.res2.validate();
      require(b.up.transposed && b.up.in_channels == below && b.up.out_channels == width &&
                  b.res1.in_channels() == width + skip && b.res1.out_channels() == width &&
                  b.res2.in_channels() == width && b.res2.out_channels() == width,
              "DDANetParams: decoder stage " + std::to_string(i + 1) + " widths do not match the config");
      require(b.se.has_value() == config.decoder_se, "DDANetParams: decoder SE presence does not match the config");
      below = width;
    }
  }
  for (std::size_t i = 0; i < 4; ++i) {
    require(attention[i].has_value() == config.has_attention(i),
            "DDANetParams: attention stage " + std::to_string(i + 1) + " does not match the config");
    if (attention[i]) {
      attention[i]->validate();
      require(attention[i]->in_channels == config.decoder_width(i) && attention[i]->out_channels == 1,
              "DDANetParams: attention conv must map the decoder width to 1 channel");
    }
  }
  head_seg.validate();
  head_auto.validate();
  require(head_seg.out_channels == 1 && head_auto.out_channels == 1, "DDANetParams: heads must emit 1 channel");
}

template <typename T>
DDANetParams<T> build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  DDANetParams<T> p;
  p.config = config;
  const auto& w = config.channel_widths;

  std::size_t prev = config.in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    p.encoder[i].res = ResidualBlockParams<T>::create(prev, w[i], &rng);
    p.encoder[i].se = SEParams<T>::create(w[i], config.se_ratio, &rng);
    prev = w[i];
  }
  for (auto* dec : {&p.decoder_seg, &p.decoder_auto}) {
    std::size_t below = w[3];
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t width = config.decoder_width(i);
      auto& b = (*dec)[i];
      b.up = ConvSpec<T>::create(below, width, 4, 2, 1, true, true, &rng);
      b.res1 = ResidualBlockParams<T>::create(width + w[3 - i], width, &rng);
      b.res2 = ResidualBlockParams<T>::create(width, width, &rng);
      if (config.decoder_se) b.se = SEParams<T>::create(width, config.se_ratio, &rng);
      below = width;
    }
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (config.has_attention(i)) {
      p.attention[i] = ConvSpec<T>::create(config.decoder_width(i), 1, 1, 1, 0, true, false, &rng);
    }
  }
  p.head_seg = ConvSpec<T>::create(config.decoder_width(3), 1, 1, 1, 0, true, false, &rng);
  p.head_auto = ConvSpec<T>::create(config.decoder_width(3), 1, 1, 1, 0, true, false, &rng);
  return p;
}

namespace {

void note(ForwardTrace* trace, const std::string& name, const Shape& shape) {
  if (trace) trace->shapes.emplace_back(name, shape);
}

template <typename T>
Var<T> decoder_block(const ForwardContext<T>& ctx, const Var<T>& below, const Var<T>& skip, DecoderBlockParams<T>& b,
                     const std::string& name, ForwardTrace* trace) {
  Var<T> u = conv_transpose2d(ctx, below, b.up);
  note(trace, name + ".up", u.shape());
  u = concat_channels(u, skip);
  note(trace, name + ".concat", u.shape());
  u = residual_block(ctx, residual_block(ctx, u, b.res1), b.res2);
  if (b.se) u = se_block(ctx, u, *b.se);
  note(trace, name + ".out", u.shape());
  return u;
}

}  // namespace

template <typename T>
ForwardOutput<T> forward(const ForwardContext<T>& ctx, DDANetParams<T>& params, const Var<T>& x, ForwardTrace* trace) {
  const ModelConfig& cfg = params.config;
  const Shape& s = x.shape();
  require(s.size() == 4 && s[1] == cfg.in_channels,
          "forward: expected input (N," + std::to_string(cfg.in_channels) + ",H,W), got " + to_string(s));
  require(s[0] > 0 && s[2] > 0 && s[3] > 0 && s[2] % 16 == 0 && s[3] % 16 == 0,
          "forward: spatial size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) + " is not divisible by 16");
  for (auto v : x.value().data()) require(v >= T{0} && v <= T{1}, "forward: input values must lie in [0,1]");
  note(trace, "input", s);

  std::array<Var<T>, 4> skips;
  Var<T> h = x;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string name = "encoder." + std::to_string(i + 1);
    skips[i] = se_block(ctx, residual_block(ctx, h, params.encoder[i].res), params.encoder[i].se);
    note(trace, name, skips[i].shape());
    if (trace) trace->encoder_skips[i] = &skips[i].value();
    h = maxpool2d(skips[i]);
    note(trace, i < 3 ? "pool." + std::to_string(i + 1) : std::string("bottleneck"), h.shape());
  }

  ForwardOutput<T> out;
  Var<T> seg = h;
  Var<T> aut = h;
  for (std::size_t i = 0; i < 4; ++i) {
    const Var<T>& skip = skips[3 - i];
    const std::string stage = std::to_string(i + 1);
    if (trace) {
      trace->seg_skips[i] = &skip.value();
      trace->auto_skips[i] = &skip.value();
    }
    aut = decoder_block(ctx, aut, skip, params.decoder_auto[i], "auto." + stage, trace);
    seg = decoder_block(ctx, seg, skip, params.decoder_seg[i], "seg." + stage, trace);
    if (params.attention[i]) {
      Var<T> a = sigmoid(conv2d(ctx, aut, *params.attention[i]));
      note(trace, "attention." + stage, a.shape());
      seg = mul(seg, a);
      out.attention_maps.push_back(a);
    }
  }
  out.mask = sigmoid(conv2d(ctx, seg, params.head_seg));
  out.gray = sigmoid(conv2d(ctx, aut, params.head_auto));
  note(trace, "mask", out.mask.shape());
  note(trace, "gray", out.gray.shape());
  return out;
}

template <typename T>
ForwardOutput<T> infer(const DDANetParams<T>& params, const Tensor<T>& x, ForwardTrace* trace) {
  ForwardContext<T> ctx;
  ctx.mode = Mode::eval;
  // Eval-mode batch norm reads the running statistics and never writes them.
  return forward(ctx, const_cast<DDANetParams<T>&>(params), Var<T>::view(x), trace);
}

std::vector<std::pair<std::string, Shape>> trace_shapes(const ModelConfig& cfg, std::size_t n, std::size_t h,
                                                        std::size_t w) {
  cfg.validate();
  require(n > 0 && h > 0 && w > 0 && h % 16 == 0 && w % 16 == 0,
          "trace_shapes: spatial size " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by 16");
  std::vector<std::pair<std::string, Shape>> out;
  Shape cur{n, cfg.in_channels, h, w};
  out.emplace_back("input", cur);
  std::array<Shape, 4> skips;
  for (std::size_t i = 0; i < 4; ++i) {
    // 3x3 / stride 1 / padding 1 convolutions preserve H and W.
    skips[i] = conv2d_output_shape(cur, cfg.channel_widths[i], 3, 1, 1);
    out.emplace_back("encoder." + std::to_string(i + 1), skips[i]);
    cur = maxpool2d_output_shape(skips[i]);
    out.emplace_back(i < 3 ? "pool." + std::to_string(i + 1) : std::string("bottleneck"), cur);
  }
  Shape seg = cur;
  Shape aut = cur;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string stage = std::to_string(i + 1);
    const std::size_t width = cfg.decoder_width(i);
    for (auto [branch, shape] : {std::pair<const char*, Shape*>{"auto.", &aut}, {"seg.", &seg}}) {
      Shape up = conv_transpose2d_output_shape(*shape, width, 4, 2, 1);
      out.emplace_back(branch + stage + ".up", up);
      const Shape& skip = skips[3 - i];
      require(up[2] == skip[2] && up[3] == skip[3], "trace_shapes: upsampled size does not match the skip tensor");
      Shape cat{up[0], up[1] + skip[1], up[2], up[3]};
      out.emplace_back(branch + stage + ".concat", cat);
      *shape = conv2d_output_shape(cat, width, 3, 1, 1);
      out.emplace_back(branch + stage + ".out", *shape);
    }
    if (cfg.has_attention(i)) out.emplace_back("attention." + stage, conv2d_output_shape(aut, 1, 1, 1, 0));
  }
  out.emplace_back("mask", conv2d_output_shape(seg, 1, 1, 1, 0));
  out.emplace_back("gray", conv2d_output_shape(aut, 1, 1, 1, 0));
  return out;
}

template <typename T>
std::size_t count_params(const DDANetParams<T>& params) {
  std::size_t total = 0;
  params.visit([&](const std::string&, const Tensor<T>& t, TensorRole role) {
    if (role == TensorRole::parameter) total += t.numel();
  });
  return total;
}

template <typename T>
std::uint64_t params_checksum(const DDANetParams<T>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  params.visit([&](const std::string& name, const Tensor<T>& t, TensorRole) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(t.raw(), t.numel() * sizeof(T), h);
  });
  return h;
}

template <typename U, typename T>
DDANetParams<U> cast_params(const DDANetParams<T>& params) {
  DDANetParams<U> out = build<U>(params.config, 0);
  std::vector<const Tensor<T>*> src;
  params.visit([&](const std::string&, const Tensor<T>& t, TensorRole) { src.push_back(&t); });
  std::size_t i = 0;
  out.visit([&](const std::string&, Tensor<U>& t, TensorRole) { t = src[i++]->template cast<U>(); });
  return out;
}

#define DDANET_INSTANTIATE_MODEL(T)                                                                           \
  template struct DDANetParams<T>;                                                                            \
  template DDANetParams<T> build<T>(const ModelConfig&, std::uint64_t);                                       \
  template ForwardOutput<T> forward<T>(const ForwardContext<T>&, DDANetParams<T>&, const Var<T>&, ForwardTrace*); \
  template ForwardOutput<T> infer<T>(const DDANetParams<T>&, const Tensor<T>&, ForwardTrace*);                \
  template std::size_t count_params<T>(const DDANetParams<T>&);                                               \
  template std::uint64_t params_checksum<T>(const DDANetParams<T>&);

DDANET_INSTANTIATE_MODEL(float)
DDANET_INSTANTIATE_MODEL(double)
DDANET_INSTANTIATE_MODEL(long double)
template DDANetParams<double> cast_params<double, float>(const DDANetParams<float>&);
template DDANetParams<float> cast_params<float, double>(const DDANetParams<double>&);
template DDANetParams<long double> cast_params<long double, double>(const DDANetParams<double>&);

}  // namespace ddanet
