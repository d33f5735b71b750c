#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "cmsf/constraint.hpp"
#include "cmsf/datagen.hpp"
#include "cmsf/encoder.hpp"
#include "cmsf/losses.hpp"
#include "cmsf/membank.hpp"
#include "cmsf/optim.hpp"

namespace cmsf {

struct TrainConfig {
  LossKind loss = Cmsf{10};
  ConstraintMode mode = LabelConstrained{};
  bool include_target = true;
  std::size_t bank_capacity = 4096;
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  double lr0 = 0.05;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  double momentum_m = 0.99;
  // Hidden widths of the trunk and predictor MLPs; 0 means twice the input width.
  std::size_t trunk_hidden = 0;
  std::size_t predictor_hidden = 0;
  // Linear learning-rate warmup over the first warmup_epochs (SupCon recipe).
  bool warmup = false;
  std::size_t warmup_epochs = 10;
  AugmentPolicy target_aug = AugmentPolicy::weak();
  AugmentPolicy online_aug = AugmentPolicy::strong();
  std::uint64_t seed = 0;

  void validate() const;
  // Neighbor count for the CMSF loss (kTopAll for top-all); 1 for other losses.
  std::size_t k() const;
};

// Thrown when a step produces a non-finite loss.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::size_t step, const std::string& what)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Frozen encoder of the constraining view plus that view's features, row
// aligned with the training dataset.
struct ConstraintSource {
  EncoderPair encoder;
  Matrix features;
};

// Per-query record of what a step searched and selected.
struct QueryTrace {
  CandidateSet candidates;
  std::vector<Neighbor> neighbors;  // empty for losses that do not run top-k
  bool fell_back = false;           // S = {u} because M-hat was empty
};

struct StepReport {
  double loss = 0.0;
  double lr = 0.0;
  std::vector<QueryTrace> queries;  // filled when tracing
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
};

// One training run: encoder pair, optimizer, banks and RNG streams.
//
// Seeding: the encoder pair is created with `seed`, the epoch shuffles use
// mt19937_64(seed + 1), augmentations use mt19937_64(seed + 2), the Xent
// classifier is initialized from mt19937_64(seed + 3) and frozen prototypes
// are sampled with seed + 4. Each step draws the target view of every batch
// row, then the online view, then (cross-modal only) the constraint view.
class Trainer {
 public:
  Trainer(TrainConfig config, std::size_t input_dim, std::size_t classes);
  // Continue from an existing encoder (its momentum is replaced by the config's).
  Trainer(TrainConfig config, EncoderPair initial, std::size_t classes);

  // Required before training in CrossModal mode.
  void set_constraint(ConstraintSource source);

  // Fixes the cosine schedule length. train() sets it; direct train_step
  // callers may set it themselves, otherwise the rate stays at lr0.
  void set_total_steps(std::size_t total) { total_steps_ = total; }

  // Augment, forward both paths, build M-hat, take top-k, compute the loss,
  // update the online network, momentum-update the target, push u to the banks.
  // A collapsed or non-finite state surfaces as NumericError.
  StepReport train_step(const LabeledDataset& data, std::span<const std::size_t> batch,
                        bool trace = false);

  using EpochCallback = std::function<void(const EpochStats&, Trainer&)>;
  std::vector<EpochStats> train(const LabeledDataset& data, const EpochCallback& on_epoch = {});

  const TrainConfig& config() const { return config_; }
  EncoderPair& encoder() { return pair_; }
  const EncoderPair& encoder() const { return pair_; }
  const Mlp* classifier() const { return classifier_ ? &*classifier_ : nullptr; }
  const FrozenPrototypes* frozen_prototypes() const { return prototypes_ ? &*prototypes_ : nullptr; }
  BankSet banks() const;
  std::size_t step_count() const { return step_; }

 private:
  StepReport step_impl(const LabeledDataset& data, std::span<const std::size_t> batch, bool trace);
  double current_lr() const;
  std::optional<int> visible_label(const LabeledDataset& data, std::size_t row) const;
  void push_banks(const LabeledDataset& data, std::span<const std::size_t> batch, const Matrix& u,
                  const Matrix* u_constraint);

  TrainConfig config_;
  std::size_t classes_;
  EncoderPair pair_;
  std::optional<Mlp> classifier_;
  std::optional<FrozenPrototypes> prototypes_;
  OptimizerState optimizer_;
  std::mt19937_64 shuffle_rng_;
  std::mt19937_64 augment_rng_;

  std::optional<MemoryBank> bank_;           // every mode except semi and cross-modal
  std::optional<MemoryBank> labeled_bank_;   // semi
  std::optional<MemoryBank> unlabeled_bank_; // semi
  std::optional<AlignedBankPair> aligned_;   // cross-modal
  std::optional<ConstraintSource> constraint_;

  std::size_t step_ = 0;
  std::size_t total_steps_ = 0;
  std::size_t steps_per_epoch_ = 0;
};

// Convenience wrapper: fresh trainer, full run.
struct TrainResult {
  EncoderPair encoder;
  std::vector<EpochStats> history;
};
TrainResult train(const TrainConfig& config, const LabeledDataset& data);

}  // namespace cmsf
