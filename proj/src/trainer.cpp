#include "cmsf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cmsf/ops.hpp"

namespace cmsf {
namespace {

void copy_grad(const LossValue& lv, std::span<double> grad) {
  std::copy(lv.grad.begin(), lv.grad.end(), grad.begin());
}

Matrix single_row(std::span<const double> row) { return Matrix::row_vector(row); }

bool all_finite(const std::vector<Matrix>& ms) {
  return std::all_of(ms.begin(), ms.end(), [](const Matrix& m) { return m.all_finite(); });
}

}  // namespace

void TrainConfig::validate() const {
  validate_loss(loss);
  validate_mode(mode);
  target_aug.validate();
  online_aug.validate();
  if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch_size must be >= 2 (batch norm)");
  if (bank_capacity < batch_size) {
    throw std::invalid_argument("TrainConfig: bank_capacity must be >= batch_size");
  }
  if (!(lr0 > 0.0)) throw std::invalid_argument("TrainConfig: lr0 must be > 0");
  if (!(momentum_m >= 0.0 && momentum_m <= 1.0)) {
    throw std::invalid_argument("TrainConfig: momentum_m must lie in [0, 1]");
  }
  if (!(sgd_momentum >= 0.0 && sgd_momentum <= 1.0) || weight_decay < 0.0) {
    throw std::invalid_argument("TrainConfig: sgd_momentum must lie in [0, 1], weight_decay >= 0");
  }
  const bool needs_cmsf = std::holds_alternative<SemiSupervised>(mode) ||
                          std::holds_alternative<CrossModal>(mode);
  if (needs_cmsf && !std::holds_alternative<Cmsf>(loss)) {
    throw std::invalid_argument("TrainConfig: " + mode_name(mode) + " mode requires the cmsf loss");
  }
  if (warmup && warmup_epochs == 0) throw std::invalid_argument("TrainConfig: warmup_epochs must be >= 1");
}

std::size_t TrainConfig::k() const {
  if (const auto* c = std::get_if<Cmsf>(&loss)) return c->k;
  return 1;
}

Trainer::Trainer(TrainConfig config, std::size_t input_dim, std::size_t classes)
    : Trainer(config, EncoderPair::create(EncoderSpec::desk(input_dim, config.momentum_m, config.trunk_hidden,
                                                           config.predictor_hidden), config.seed),
              classes) {}

Trainer::Trainer(TrainConfig config, EncoderPair initial, std::size_t classes)
    : config_(std::move(config)),
      classes_(classes),
      pair_(std::move(initial)),
      shuffle_rng_(config_.seed + 1),
      augment_rng_(config_.seed + 2) {
  config_.validate();
  pair_.set_momentum(config_.momentum_m);
  optimizer_.lr0 = config_.lr0;
  optimizer_.momentum = config_.sgd_momentum;
  optimizer_.weight_decay = config_.weight_decay;

  const std::size_t dim = pair_.spec().trunk.output_width();
  if (std::holds_alternative<CrossEntropy>(config_.loss)) {
    if (classes_ < 2) throw std::invalid_argument("Trainer: cross-entropy needs >= 2 classes");
    std::mt19937_64 rng(config_.seed + 3);
    classifier_.emplace(MlpSpec::linear(dim, classes_), rng);
  }
  if (std::holds_alternative<FrzProto>(config_.loss)) {
    prototypes_ = FrozenPrototypes::sample(classes_, pair_.spec().predictor.output_width(), config_.seed + 4);
  }
  if (std::holds_alternative<SemiSupervised>(config_.mode)) {
    labeled_bank_.emplace(config_.bank_capacity, dim);
    unlabeled_bank_.emplace(config_.bank_capacity, dim);
  } else if (!std::holds_alternative<CrossModal>(config_.mode)) {
    bank_.emplace(config_.bank_capacity, dim);
  }
}

void Trainer::set_constraint(ConstraintSource source) {
  if (!std::holds_alternative<CrossModal>(config_.mode)) {
    throw std::invalid_argument("Trainer::set_constraint: mode is not cross-modal");
  }
  const std::size_t cdim = source.encoder.spec().trunk.output_width();
  aligned_.emplace(config_.bank_capacity, cdim, pair_.spec().trunk.output_width());
  constraint_ = std::move(source);
}

BankSet Trainer::banks() const {
  BankSet set;
  if (bank_) set.trained = &*bank_;
  if (aligned_) {
    set.trained = &aligned_->trained_bank();
    set.constraint = &aligned_->constraint_bank();
  }
  if (labeled_bank_) set.labeled = &*labeled_bank_;
  if (unlabeled_bank_) set.unlabeled = &*unlabeled_bank_;
  return set;
}

double Trainer::current_lr() const {
  if (total_steps_ == 0) return config_.lr0;
  const std::size_t t = std::min(step_, total_steps_);
  if (config_.warmup) {
    const std::size_t warm = std::min(total_steps_, config_.warmup_epochs * std::max<std::size_t>(steps_per_epoch_, 1));
    if (t < warm) return config_.lr0 * static_cast<double>(t + 1) / static_cast<double>(warm);
    if (total_steps_ == warm) return config_.lr0;
    return cosine_lr(t - warm, total_steps_ - warm, config_.lr0);
  }
  return cosine_lr(t, total_steps_, config_.lr0);
}

std::optional<int> Trainer::visible_label(const LabeledDataset& data, std::size_t row) const {
  if (std::holds_alternative<SemiSupervised>(config_.mode) && !data.label_mask[row]) return std::nullopt;
  return data.train_labels[row];
}

StepReport Trainer::train_step(const LabeledDataset& data, std::span<const std::size_t> batch,
                               bool trace) {
  try {
    return step_impl(data, batch, trace);
  } catch (const std::domain_error& e) {
    throw NumericError(step_, "numeric failure at step " + std::to_string(step_) + ": " + e.what());
  }
}

StepReport Trainer::step_impl(const LabeledDataset& data, std::span<const std::size_t> batch, bool trace) {
  const std::size_t n = batch.size();
  if (n < 2) throw std::invalid_argument("train_step: batch needs >= 2 rows (batch norm)");
  const std::size_t in_dim = pair_.spec().trunk.input_width();
  if (data.features.cols() != in_dim) {
    throw std::invalid_argument("train_step: dataset width " + std::to_string(data.features.cols()) +
                                " but encoder expects " + std::to_string(in_dim));
  }
  const bool cross_modal = std::holds_alternative<CrossModal>(config_.mode);
  if (cross_modal && !constraint_) throw std::logic_error("train_step: cross-modal mode without a constraint source");

  Matrix x(n, in_dim);
  for (std::size_t r = 0; r < n; ++r) {
    if (batch[r] >= data.size()) throw std::out_of_range("train_step: batch index out of range");
    std::copy_n(data.features.row(batch[r]).begin(), in_dim, x.row(r).begin());
  }
  const Matrix x_target = augment_rows(x, config_.target_aug, augment_rng_);
  const Matrix x_online = augment_rows(x, config_.online_aug, augment_rng_);
  const Matrix u = pair_.forward_target(x_target);

  std::optional<Matrix> u_constraint;
  if (cross_modal) {
    Matrix xc(n, constraint_->features.cols());
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(constraint_->features.row(batch[r]).begin(), xc.cols(), xc.row(r).begin());
    }
    u_constraint = constraint_->encoder.forward_target(augment_rows(xc, config_.target_aug, augment_rng_));
  }

  std::vector<std::optional<int>> labels(n);
  for (std::size_t r = 0; r < n; ++r) labels[r] = visible_label(data, batch[r]);
  auto require_label = [&](std::size_t r) {
    if (!labels[r]) throw std::invalid_argument("train_step: " + loss_name(config_.loss) + " needs labels");
    return *labels[r];
  };

  StepReport report;
  if (trace) report.queries.resize(n);

  Tape tape;
  ParamBinding binding;
  const Var input = tape.constant(x_online);
  Var loss;

  if (std::holds_alternative<CrossEntropy>(config_.loss)) {
    const Var h = pair_.forward_online_trunk(tape, input, binding);
    const Var logits = classifier_->forward(tape, h, binding);
    std::vector<int> ys(n);
    for (std::size_t r = 0; r < n; ++r) ys[r] = require_label(r);
    loss = xent_loss(tape, logits, ys);
  } else {
    const Var v = pair_.forward_online(tape, input, binding);
    const BankSet banks_now = banks();
    const auto byol_fallback = [&u](std::size_t r, std::span<const double> row, std::span<double> grad) {
      const auto lv = cmsf_loss(row, single_row(u.row(r)));
      copy_grad(lv, grad);
      return lv.value;
    };

    if (const auto* cm = std::get_if<Cmsf>(&config_.loss)) {
      std::vector<Matrix> targets(n);
      for (std::size_t r = 0; r < n; ++r) {
        const std::span<const double> cemb =
            u_constraint ? u_constraint->row(r) : std::span<const double>{};
        CandidateSet cand = candidate_set(config_.mode, banks_now, labels[r], cemb);
        const auto uq = u.row(r);
        if (cand.empty()) {
          targets[r] = single_row(uq);
          if (trace) report.queries[r] = QueryTrace{std::move(cand), {}, true};
          continue;
        }
        const MemoryBank& bank = banks_now.get(cand.bank);
        auto nb = constrained_topk(bank, uq, cand.indices, cm->k, config_.include_target);
        targets[r] = gather_embeddings(bank, uq, nb);
        if (trace) report.queries[r] = QueryTrace{std::move(cand), std::move(nb), false};
      }
      loss = mean_row_loss(tape, v, [&](std::size_t r, std::span<const double> row, std::span<double> grad) {
        const auto lv = cmsf_loss(row, targets[r]);
        copy_grad(lv, grad);
        return lv.value;
      });
    } else if (const auto* sc = std::get_if<SupCon>(&config_.loss)) {
      const MemoryBank& bank = banks_now.get(BankRole::Trained);
      std::vector<std::size_t> counts(classes_, 0);
      for (std::size_t i = 0; i < bank.size(); ++i) {
        if (const auto l = bank.label(i); l && *l >= 0 && static_cast<std::size_t>(*l) < classes_) ++counts[*l];
      }
      loss = mean_row_loss(tape, v, [&](std::size_t r, std::span<const double> row, std::span<double> grad) {
        const int y = require_label(r);
        if (!sc->target_in_positives && counts.at(static_cast<std::size_t>(y)) == 0) {
          return byol_fallback(r, row, grad);
        }
        const auto lv = supcon_loss(row, bank, y, u.row(r), sc->temperature, sc->target_in_positives);
        copy_grad(lv, grad);
        return lv.value;
      });
    } else if (const auto* pn = std::get_if<ProtoNW>(&config_.loss)) {
      const auto protos = ClassPrototypes::from_bank(banks_now.get(BankRole::Trained), classes_);
      loss = mean_row_loss(tape, v, [&](std::size_t r, std::span<const double> row, std::span<double> grad) {
        const int y = require_label(r);
        if (y < 0 || static_cast<std::size_t>(y) >= classes_ || !protos.present[static_cast<std::size_t>(y)]) {
          return byol_fallback(r, row, grad);
        }
        const auto lv = protonw_loss(row, protos, y, pn->temperature);
        copy_grad(lv, grad);
        return lv.value;
      });
    } else {
      loss = mean_row_loss(tape, v, [&](std::size_t r, std::span<const double> row, std::span<double> grad) {
        const auto lv = frzproto_loss(row, *prototypes_, require_label(r));
        copy_grad(lv, grad);
        return lv.value;
      });
    }
  }

  const double loss_value = tape.value(loss)(0, 0);
  if (!std::isfinite(loss_value)) {
    throw NumericError(step_, "non-finite loss at step " + std::to_string(step_));
  }
  tape.backward(loss);
  const auto grads = binding.gradients(tape);
  if (!all_finite(grads)) throw NumericError(step_, "non-finite gradient at step " + std::to_string(step_));

  report.loss = loss_value;
  report.lr = current_lr();
  sgd_step(optimizer_, binding.params, grads, report.lr);
  for (const Matrix* p : binding.params) {
    if (!p->all_finite()) throw NumericError(step_, "non-finite parameter after step " + std::to_string(step_));
  }
  pair_.momentum_update();
  push_banks(data, batch, u, u_constraint ? &*u_constraint : nullptr);
  ++step_;
  return report;
}

void Trainer::push_banks(const LabeledDataset& data, std::span<const std::size_t> batch, const Matrix& u,
                         const Matrix* u_constraint) {
  const std::size_t n = batch.size();
  std::vector<BankEntry> entries(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = u.row(r);
    const std::size_t i = batch[r];
    entries[r] = BankEntry{std::vector<double>(row.begin(), row.end()), visible_label(data, i),
                           data.true_labels[i], data.sample_ids[i], 0};
  }
  if (aligned_) {
    std::vector<BankEntry> centries(n);
    for (std::size_t r = 0; r < n; ++r) {
      const auto row = u_constraint->row(r);
      centries[r] = entries[r];
      centries[r].embedding.assign(row.begin(), row.end());
    }
    aligned_->push(centries, entries);
  } else if (unlabeled_bank_) {
    std::vector<BankEntry> labeled;
    for (const auto& e : entries) {
      if (e.label) labeled.push_back(e);
    }
    labeled_bank_->push(labeled);
    unlabeled_bank_->push(entries);
  } else {
    bank_->push(entries);
  }
}

std::vector<EpochStats> Trainer::train(const LabeledDataset& data, const EpochCallback& on_epoch) {
  std::vector<EpochStats> history;
  if (config_.epochs == 0) return history;
  steps_per_epoch_ = data.size() / config_.batch_size;
  if (steps_per_epoch_ == 0) {
    throw std::invalid_argument("train: batch_size " + std::to_string(config_.batch_size) +
                                " exceeds dataset size " + std::to_string(data.size()));
  }
  total_steps_ = step_ + config_.epochs * steps_per_epoch_;
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < config_.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng_);
    double total = 0.0;
    double lr = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch_; ++b) {
      const std::span<const std::size_t> batch(order.data() + b * config_.batch_size, config_.batch_size);
      const auto rep = train_step(data, batch);
      total += rep.loss;
      lr = rep.lr;
    }
    history.push_back(EpochStats{epoch + 1, total / static_cast<double>(steps_per_epoch_), lr});
    if (on_epoch) on_epoch(history.back(), *this);
  }
  return history;
}

TrainResult train(const TrainConfig& config, const LabeledDataset& data) {
  Trainer trainer(config, data.features.cols(), data.classes);
  auto history = trainer.train(data);
  return TrainResult{std::move(trainer.encoder()), std::move(history)};
}

}  // namespace cmsf
