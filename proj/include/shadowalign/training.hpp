#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "shadowalign/nn.hpp"
#include "shadowalign/rng.hpp"

namespace shadowalign {

struct TrainConfig {
  std::size_t batch_size = 64;
  float lr = 0.01f;
  float lr_divisor = 2.0f;
  // Epochs without strict validation-accuracy improvement before lr is divided.
  std::size_t patience = 5;
  float min_lr = 1e-5f;
  std::size_t max_epochs = 100;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;

  void validate() const;
};

struct LabeledDataset {
  std::vector<Tensor> records;
  std::vector<std::size_t> labels;
  std::vector<std::uint64_t> ids;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  void validate(std::size_t num_classes) const;
  LabeledDataset subset(std::span<const std::size_t> indices) const;
  // Position of each id, for membership lookups.
  std::size_t index_of(std::uint64_t id) const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  float lr = 0.0f;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
  // 1-based epoch at which the best validation accuracy was first reached.
  std::size_t best_epoch = 0;

  // epoch,train_acc,val_acc,lr
  std::string log_csv() const;
};

// Uniform in +-1/sqrt(fan_in) per parameterised layer, biases zero. Draws
// only from an Rng seeded with seed_wi, layer by layer in op order.
Model init_weights(const Model& arch, std::uint64_t seed_wi);

// Adam + step-halving schedule + early stop. Batch order comes only from
// seeds.bo, dropout masks only from seeds.ds, initial weights only from
// seeds.wi. Throws NumericError (with the epoch) on divergence.
TrainResult train(const Model& arch, const LabeledDataset& data, const LabeledDataset& val, const SeedBundle& seeds,
                  const TrainConfig& cfg);

// Same, starting from already-initialised weights; seeds.wi is unused.
TrainResult train_from(Model init, const LabeledDataset& data, const LabeledDataset& val, const SeedBundle& seeds,
                       const TrainConfig& cfg);

double accuracy(const Model& model, const LabeledDataset& data);

// Draws one dropout mask set for a forward pass; consumes nothing for p == 0.
DropoutMasks draw_dropout_masks(const Model& model, Rng& ds);

enum class Overlap { Disjoint, Identical };

struct PartitionSpec {
  std::size_t n_val = 0;            // |V1| = |V2|
  std::size_t adversary_size = 0;   // |D_A|
  std::size_t target_size = 0;      // |D_target|
  Overlap overlap = Overlap::Disjoint;
  std::size_t train_size = 0;       // |D_T| = |D_k|
  std::size_t num_shadows = 0;      // K
};

// Index sets into a dataset of the given size.
struct Splits {
  std::vector<std::size_t> v1, v2;
  std::vector<std::size_t> adversary;     // D_A
  std::vector<std::size_t> target_pool;   // D_target
  std::vector<std::size_t> target_train;  // D_T
  std::vector<std::vector<std::size_t>> shadow_train;  // D_1..D_K
};

// V1, V2 disjoint; D_T within D_target; each D_k within D_A with |D_k| =
// |D_T|. Disjoint overlap keeps D_A and D_target apart; Identical makes them
// the same set (all records outside V1 and V2, target_size ignored).
Splits make_splits(std::size_t dataset_size, const PartitionSpec& spec, Rng& rng);

}  // namespace shadowalign
