#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddanet/data.hpp"
#include "ddanet/loss.hpp"
#include "ddanet/model.hpp"

namespace ddanet {

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 50;
  std::size_t batch_size = 4;
  std::size_t input_size = 64;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  LossConfig loss;

  void validate() const;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;
};

// Zero moments shaped like `params`.
template <typename T>
AdamState<T> adam_init(std::span<Tensor<T>* const> params);

// One bias-corrected Adam update of every tensor in `params`.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads, AdamState<T>& state,
               const TrainConfig& cfg);

// Learnable tensors in visit order (batch-norm running statistics excluded).
template <typename T>
std::vector<Tensor<T>*> learnable_tensors(DDANetParams<T>& params);

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  ModelConfig model;
  TrainConfig train;
  DDANetParams<float> params;
  std::optional<AdamState<float>> adam;
  std::uint64_t epoch = 0;
  std::string rng_state;
  std::optional<double> best_val_dsc;
};

// "DDAN" | u32 version | u64 manifest length | JSON manifest | f32 payloads,
// all little-endian.
std::vector<std::uint8_t> serialize(const Checkpoint& c);
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Reads only the manifest, for inspection.
std::string checkpoint_manifest(const std::filesystem::path& path);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss_total = 0;
  double loss_bce_mask = 0;
  double loss_dice = 0;
  double loss_bce_gray = 0;
  std::optional<double> val_dsc;

  std::string to_json() const;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  // Called every checkpoint_every epochs with the current state.
  std::function<void(const Checkpoint&)> on_checkpoint;
  // Called whenever the validation DSC improves.
  std::function<void(const Checkpoint&)> on_best;
};

struct TrainResult {
  Checkpoint final;
  std::vector<EpochRecord> log;
  // Total loss of every optimisation step, in order.
  std::vector<double> step_losses;
};

// Per epoch: seeded shuffle, batches in order (last partial batch kept),
// forward -> total_loss -> backward -> adam_step. With `resume`, continues
// from its epoch, parameters, optimiser and generator state.
TrainResult train(const ModelConfig& model, const TrainConfig& cfg, const Dataset& train_set,
                  const Dataset* val_set = nullptr, const TrainHooks& hooks = {},
                  const Checkpoint* resume = nullptr);

// Eval-mode forward of every item at the model's input size. Items are
// processed one at a time and fps covers the whole pass.
MetricsReport evaluate(const DDANetParams<float>& params, const Dataset& dataset, double threshold = 0.5);

}  // namespace ddanet
