#include "ddanet/trainer.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "internal.hpp"

namespace ddanet {

using detail::require;
using nlohmann::json;

void TrainConfig::validate() const {
  require(learning_rate > 0, "TrainConfig: learning rate must be positive");
  require(beta1 >= 0 && beta1 < 1, "TrainConfig: beta1 must lie in [0,1)");
  require(beta2 >= 0 && beta2 < 1, "TrainConfig: beta2 must lie in [0,1)");
  require(adam_eps > 0, "TrainConfig: adam eps must be positive");
  require(epochs >= 1, "TrainConfig: epochs must be at least 1");
  require(batch_size >= 1, "TrainConfig: batch size must be at least 1");
  require(input_size > 0 && input_size % 16 == 0, "TrainConfig: input size must be a positive multiple of 16");
  loss.validate();
}

template <typename T>
AdamState<T> adam_init(std::span<Tensor<T>* const> params) {
  AdamState<T> s;
  for (const Tensor<T>* p : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads, AdamState<T>& state,
               const TrainConfig& cfg) {
  require(params.size() == grads.size(), "adam_step: " + std::to_string(params.size()) + " parameters but " +
                                             std::to_string(grads.size()) + " gradients");
  require(state.m.size() == params.size() && state.v.size() == params.size(),
          "adam_step: optimiser state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(grads[i]->shape() == params[i]->shape(), "adam_step: gradient " + to_string(grads[i]->shape()) +
                                                         " does not match parameter " + to_string(params[i]->shape()));
    require(state.m[i].shape() == params[i]->shape() && state.v[i].shape() == params[i]->shape(),
            "adam_step: moment shape mismatch at tensor " + std::to_string(i));
  }
  ++state.step;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T lr = static_cast<T>(cfg.learning_rate), eps = static_cast<T>(cfg.adam_eps);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->raw();
    const T* g = grads[i]->raw();
    T* m = state.m[i].raw();
    T* v = state.v[i].raw();
    for (std::size_t k = 0, n = params[i]->numel(); k < n; ++k) {
      m[k] = b1 * m[k] + (T{1} - b1) * g[k];
      v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
      const T mhat = m[k] / c1;
      const T vhat = v[k] / c2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <typename T>
std::vector<Tensor<T>*> learnable_tensors(DDANetParams<T>& params) {
  std::vector<Tensor<T>*> out;
  params.visit([&](const std::string&, Tensor<T>& t, TensorRole role) {
    if (role == TensorRole::parameter) out.push_back(&t);
  });
  return out;
}

// ---- checkpoint format ----

namespace {

constexpr char kMagic[4] = {'D', 'D', 'A', 'N'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

json model_to_json(const ModelConfig& c) {
  return {{"in_channels", c.in_channels}, {"channel_widths", c.channel_widths}, {"se_ratio", c.se_ratio},
          {"decoder_se", c.decoder_se},   {"attention_stages", c.attention_stages}, {"input_h", c.input_h},
          {"input_w", c.input_w}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig c;
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.channel_widths = j.at("channel_widths").get<std::vector<std::size_t>>();
  c.se_ratio = j.at("se_ratio").get<std::size_t>();
  c.decoder_se = j.at("decoder_se").get<bool>();
  c.attention_stages = j.at("attention_stages").get<std::vector<int>>();
  c.input_h = j.at("input_h").get<std::size_t>();
  c.input_w = j.at("input_w").get<std::size_t>();
  return c;
}

json train_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"input_size", c.input_size},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"dice_smooth", c.loss.dice_smooth},
          {"reconstruction_weight", c.loss.reconstruction_weight},
          {"bce_clamp", c.loss.bce_clamp}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.input_size = j.at("input_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.checkpoint_every = j.at("checkpoint_every").get<std::size_t>();
  c.loss.dice_smooth = j.at("dice_smooth").get<double>();
  c.loss.reconstruction_weight = j.at("reconstruction_weight").get<double>();
  c.loss.bce_clamp = j.at("bce_clamp").get<double>();
  return c;
}

// (name, tensor) in file order: model tensors, then Adam moments.
std::vector<std::pair<std::string, const Tensor<float>*>> records_of(const Checkpoint& c) {
  std::vector<std::pair<std::string, const Tensor<float>*>> out;
  std::vector<std::string> learnable;
  c.params.visit([&](const std::string& name, const Tensor<float>& t, TensorRole role) {
    out.emplace_back(name, &t);
    if (role == TensorRole::parameter) learnable.push_back(name);
  });
  if (c.adam) {
    require(c.adam->m.size() == learnable.size() && c.adam->v.size() == learnable.size(),
            "checkpoint: optimiser state does not match the parameter list");
    for (std::size_t i = 0; i < learnable.size(); ++i) out.emplace_back("adam.m." + learnable[i], &c.adam->m[i]);
    for (std::size_t i = 0; i < learnable.size(); ++i) out.emplace_back("adam.v." + learnable[i], &c.adam->v[i]);
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> serialize(const Checkpoint& c) {
  const auto records = records_of(c);
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : records) {
    const std::uint64_t bytes = t->numel() * 4;
    tensors.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}, {"byte_length", bytes}});
    offset += bytes;
  }
  json manifest = {{"model", model_to_json(c.model)},
                   {"train", train_to_json(c.train)},
                   {"epoch", c.epoch},
                   {"rng_state", c.rng_state},
                   {"has_adam", c.adam.has_value()},
                   {"adam_step", c.adam ? c.adam->step : 0},
                   {"best_val_dsc", c.best_val_dsc ? json(*c.best_val_dsc) : json(nullptr)},
                   {"tensors", tensors}};
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + text.size() + offset);
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, Checkpoint::kFormatVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : records) {
    for (float v : t->data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw CorruptCheckpoint("magic", "not a DDAN file");
  if (bytes.size() < 8) throw CorruptCheckpoint("version", "file truncated");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != Checkpoint::kFormatVersion) {
    throw CorruptCheckpoint("version", "unsupported format version " + std::to_string(version));
  }
  if (bytes.size() < 16) throw CorruptCheckpoint("manifest_length", "file truncated");
  const std::uint64_t mlen = get_u64(bytes.data() + 8);
  if (mlen > bytes.size() - 16) throw CorruptCheckpoint("manifest", "truncated: runs past end of file");
  const std::uint8_t* payload = bytes.data() + 16 + mlen;
  const std::uint64_t payload_size = bytes.size() - 16 - mlen;

  json manifest;
  Checkpoint c;
  try {
    manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
    c.model = model_from_json(manifest.at("model"));
    c.train = train_from_json(manifest.at("train"));
    c.epoch = manifest.at("epoch").get<std::uint64_t>();
    c.rng_state = manifest.at("rng_state").get<std::string>();
    if (!manifest.at("best_val_dsc").is_null()) c.best_val_dsc = manifest.at("best_val_dsc").get<double>();
    c.model.validate();
  } catch (const json::exception& e) {
    throw CorruptCheckpoint("manifest", e.what());
  } catch (const InvalidArgument& e) {
    throw CorruptCheckpoint("manifest", e.what());
  }

  c.params = build<float>(c.model, 0);
  if (manifest.value("has_adam", false)) {
    auto learn = learnable_tensors(c.params);
    c.adam = adam_init<float>(learn);
    c.adam->step = manifest.value("adam_step", std::uint64_t{0});
  }

  std::map<std::string, const json*> by_name;
  const json& tensors = manifest.at("tensors");
  if (!tensors.is_array()) throw CorruptCheckpoint("tensors", "expected an array");
  for (const json& rec : tensors) by_name[rec.value("name", std::string{})] = &rec;

  const auto records = records_of(c);
  std::uint64_t covered = 0;
  if (by_name.size() != records.size() || tensors.size() != records.size()) {
    throw CorruptCheckpoint("tensors", "expected " + std::to_string(records.size()) + " tensor records, found " +
                                           std::to_string(tensors.size()));
  }
  for (const auto& [name, t] : records) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CorruptCheckpoint("tensor:" + name, "record missing");
    const json& rec = *it->second;
    std::uint64_t offset = 0, length = 0;
    Shape shape;
    try {
      shape = rec.at("shape").get<Shape>();
      offset = rec.at("offset").get<std::uint64_t>();
      length = rec.at("byte_length").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw CorruptCheckpoint("tensor:" + name, e.what());
    }
    if (shape != t->shape()) {
      throw CorruptCheckpoint("tensor:" + name, "shape " + to_string(shape) + " but the config implies " +
                                                    to_string(t->shape()));
    }
    if (length != t->numel() * 4) throw CorruptCheckpoint("tensor:" + name, "byte_length does not match the shape");
    if (offset > payload_size || length > payload_size - offset) {
      throw CorruptCheckpoint("tensor:" + name, "payload truncated");
    }
    // records_of hands out const pointers into `c`, which we own here.
    auto* dst = const_cast<Tensor<float>*>(t)->raw();
    for (std::size_t k = 0; k < t->numel(); ++k) dst[k] = std::bit_cast<float>(get_u32(payload + offset + 4 * k));
    covered += length;
  }
  if (covered != payload_size) {
    throw CorruptCheckpoint("tensors", std::to_string(payload_size - covered) + " unaccounted payload bytes");
  }
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const auto bytes = serialize(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(path.string(), "cannot open for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError(path.string(), "write failed");
  }
  std::filesystem::rename(tmp, path);
}

namespace {
std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string(), "cannot open for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}
}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize(read_file(path)); }

std::string checkpoint_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw CorruptCheckpoint("magic", "not a DDAN file");
  const std::uint64_t mlen = get_u64(bytes.data() + 8);
  if (mlen > bytes.size() - 16) throw CorruptCheckpoint("manifest", "truncated: runs past end of file");
  return std::string(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
}

// ---- training ----

std::string EpochRecord::to_json() const {
  char buf[320];
  char val[32] = "null";
  if (val_dsc) std::snprintf(val, sizeof val, "%.17g", *val_dsc);
  std::snprintf(buf, sizeof buf,
                "{\"epoch\": %zu, \"loss_total\": %.17g, \"loss_bce_mask\": %.17g, \"loss_dice\": %.17g, "
                "\"loss_bce_gray\": %.17g, \"val_dsc\": %s}",
                epoch, loss_total, loss_bce_mask, loss_dice, loss_bce_gray, val);
  return buf;
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x53485546464c45ULL;

double dataset_dsc(const DDANetParams<float>& params, const Dataset& data) {
  return evaluate(params, data).dsc;
}

}  // namespace

TrainResult train(const ModelConfig& model_in, const TrainConfig& cfg, const Dataset& train_set,
                  const Dataset* val_set, const TrainHooks& hooks, const Checkpoint* resume) {
  cfg.validate();
  require(!train_set.empty(), "train: the training set is empty");
  ModelConfig model = model_in;
  model.input_h = model.input_w = cfg.input_size;
  model.validate();

  TrainResult r;
  Checkpoint& c = r.final;
  c.model = model;
  c.train = cfg;
  Rng shuffle_rng(cfg.seed ^ kShuffleStream);
  if (resume) {
    require(resume->model == model, "train: resume checkpoint was made with a different model config");
    require(resume->adam.has_value(), "train: resume checkpoint carries no optimiser state");
    c.params = resume->params;
    c.adam = resume->adam;
    c.epoch = resume->epoch;
    c.best_val_dsc = resume->best_val_dsc;
    shuffle_rng.set_state(resume->rng_state);
  } else {
    c.params = build<float>(model, cfg.seed);
  }
  auto learn = learnable_tensors(c.params);
  if (!c.adam) c.adam = adam_init<float>(learn);
  require(c.adam->m.size() == learn.size(), "train: optimiser state does not match the model");

  const std::size_t n = train_set.size();
  const std::size_t s = cfg.input_size;
  // Inputs are re-materialised per batch, so cache them once.
  const SampleBatch all = [&] {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return make_batch(train_set, idx, s, s);
  }();
  const std::size_t img = 3 * s * s, px = s * s;

  for (std::size_t epoch = c.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    shuffle_in_place(order, shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0, b = 1; start < n; start += cfg.batch_size, ++b) {
      const std::size_t bn = std::min(cfg.batch_size, n - start);
      Tensor<float> x(Shape{bn, 3, s, s}), mask(Shape{bn, 1, s, s}), gray(Shape{bn, 1, s, s});
      for (std::size_t i = 0; i < bn; ++i) {
        const std::size_t k = order[start + i];
        std::copy_n(all.images.raw() + k * img, img, x.raw() + i * img);
        std::copy_n(all.masks.raw() + k * px, px, mask.raw() + i * px);
        std::copy_n(all.grays.raw() + k * px, px, gray.raw() + i * px);
      }

      Graph<float> graph;
      const ForwardContext<float> ctx{&graph, Mode::train};
      const auto out = forward(ctx, c.params, graph.leaf(std::move(x)));
      const auto loss = total_loss(out, mask, gray, cfg.loss);
      const double total = static_cast<double>(loss.total.value().item());
      if (!std::isfinite(total)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      const auto grads = graph.backward(loss.total);
      std::vector<Tensor<float>> zeros;
      zeros.reserve(learn.size());
      std::vector<const Tensor<float>*> g(learn.size());
      for (std::size_t i = 0; i < learn.size(); ++i) {
        if (grads.has(*learn[i])) {
          g[i] = &grads.of(*learn[i]);
        } else {
          zeros.emplace_back(learn[i]->shape());
          g[i] = &zeros.back();
        }
      }
      adam_step<float>(learn, g, *c.adam, cfg);

      r.step_losses.push_back(total);
      rec.loss_total += total;
      rec.loss_bce_mask += loss.bce_mask;
      rec.loss_dice += loss.dice;
      rec.loss_bce_gray += loss.bce_gray;
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    rec.loss_total /= nb;
    rec.loss_bce_mask /= nb;
    rec.loss_dice /= nb;
    rec.loss_bce_gray /= nb;

    c.epoch = epoch;
    c.rng_state = shuffle_rng.state();
    bool improved = false;
    if (val_set && !val_set->empty()) {
      rec.val_dsc = dataset_dsc(c.params, *val_set);
      if (!c.best_val_dsc || *rec.val_dsc > *c.best_val_dsc) {
        c.best_val_dsc = rec.val_dsc;
        improved = true;
      }
    }
    r.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (improved && hooks.on_best) hooks.on_best(c);
    if (cfg.checkpoint_every && epoch % cfg.checkpoint_every == 0 && hooks.on_checkpoint) hooks.on_checkpoint(c);
  }
  if (c.rng_state.empty()) c.rng_state = shuffle_rng.state();
  return r;
}

MetricsReport evaluate(const DDANetParams<float>& params, const Dataset& dataset, double threshold) {
  require(!dataset.empty(), "evaluate: dataset is empty");
  const std::size_t h = params.config.input_h, w = params.config.input_w;
  std::vector<SegmentationScores> scores;
  scores.reserve(dataset.size());
  double seconds = 0;
  for (const auto& item : dataset.items) {
    const Sample s = materialize(item, h, w);
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = infer(params, s.image);
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto per = segmentation_metrics(out.mask.value(), s.mask, threshold);
    scores.push_back(per.front());
  }
  MetricsReport r = aggregate(scores);
  r.fps = static_cast<double>(dataset.size()) / std::max(seconds, 1e-12);
  return r;
}

#define DDANET_INSTANTIATE_TRAINER(T)                                                                      \
  template AdamState<T> adam_init<T>(std::span<Tensor<T>* const>);                                         \
  template void adam_step<T>(std::span<Tensor<T>* const>, std::span<const Tensor<T>* const>, AdamState<T>&, \
                             const TrainConfig&);                                                          \
  template std::vector<Tensor<T>*> learnable_tensors<T>(DDANetParams<T>&);

DDANET_INSTANTIATE_TRAINER(float)
DDANET_INSTANTIATE_TRAINER(double)

}  // namespace ddanet
