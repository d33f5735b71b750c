#include "cmsf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

#include "cmsf/losses.hpp"
#include "cmsf/membank.hpp"
#include "cmsf/ops.hpp"
#include "cmsf/optim.hpp"

namespace cmsf {
namespace {

void require_labels(std::size_t rows, std::size_t labels, const char* what) {
  if (rows != labels) {
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(labels) + " labels for " +
                                std::to_string(rows) + " rows");
  }
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace

std::vector<int> knn_predict(const Matrix& train, std::span<const int> train_labels, const Matrix& test,
                             std::size_t k_eval) {
  require_labels(train.rows(), train_labels.size(), "knn_classify");
  if (k_eval == 0) throw std::invalid_argument("knn_classify: k_eval must be >= 1");
  if (k_eval > train.rows()) {
    throw std::invalid_argument("knn_classify: k_eval " + std::to_string(k_eval) + " exceeds train size " +
                                std::to_string(train.rows()));
  }
  if (test.rows() > 0 && test.cols() != train.cols()) {
    throw std::invalid_argument("knn_classify: embedding widths differ (" + shape_string(train) + " vs " +
                                shape_string(test) + ")");
  }
  const Matrix sims = matmul_bt(test, train);
  std::vector<std::size_t> order(train.rows());
  std::vector<int> out(test.rows());
  for (std::size_t q = 0; q < test.rows(); ++q) {
    const auto s = sims.row(q);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k_eval), order.end(),
                      [&](std::size_t a, std::size_t b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
    std::map<int, std::size_t> votes;
    for (std::size_t j = 0; j < k_eval; ++j) ++votes[train_labels[order[j]]];
    int best = votes.begin()->first;
    std::size_t best_count = 0;
    for (const auto& [label, count] : votes) {
      if (count > best_count) {
        best = label;
        best_count = count;
      }
    }
    out[q] = best;
  }
  return out;
}

double knn_classify(const Matrix& train, std::span<const int> train_labels, const Matrix& test,
                    std::span<const int> test_labels, std::size_t k_eval) {
  require_labels(test.rows(), test_labels.size(), "knn_classify");
  return accuracy(knn_predict(train, train_labels, test, k_eval), test_labels);
}

Standardizer Standardizer::fit(const Matrix& x) {
  if (x.rows() == 0) throw std::invalid_argument("Standardizer::fit: empty matrix");
  Standardizer s{std::vector<double>(x.cols(), 0.0), std::vector<double>(x.cols(), 0.0)};
  const double n = static_cast<double>(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) s.mean[c] += x(r, c);
  }
  for (auto& m : s.mean) m /= n;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) s.scale[c] += (x(r, c) - s.mean[c]) * (x(r, c) - s.mean[c]);
  }
  for (auto& v : s.scale) {
    const double sd = std::sqrt(v / n);
    v = sd > 0.0 ? sd : 1.0;
  }
  return s;
}

Matrix Standardizer::apply(const Matrix& x) const {
  if (x.cols() != mean.size()) throw std::invalid_argument("Standardizer::apply: width mismatch");
  Matrix out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = (x(r, c) - mean[c]) / scale[c];
  }
  return out;
}

void ProbeConfig::validate() const {
  if (!(lr0 > 0.0)) throw std::invalid_argument("ProbeConfig: lr0 must be > 0");
  if (batch_size == 0) throw std::invalid_argument("ProbeConfig: batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum <= 1.0) || weight_decay < 0.0) {
    throw std::invalid_argument("ProbeConfig: momentum must lie in [0, 1], weight_decay >= 0");
  }
}

ProbeResult linear_probe(const Matrix& train, std::span<const int> train_labels, const Matrix& test,
                         std::span<const int> test_labels, std::size_t classes, const ProbeConfig& config) {
  config.validate();
  require_labels(train.rows(), train_labels.size(), "linear_probe");
  require_labels(test.rows(), test_labels.size(), "linear_probe");
  if (classes < 2) throw std::invalid_argument("linear_probe: needs >= 2 classes");
  if (train.rows() == 0) throw std::invalid_argument("linear_probe: empty train split");

  ProbeResult result;
  const Matrix train_unit = l2_row_normalize(train);
  result.standardizer = Standardizer::fit(train_unit);
  const Matrix xtr = result.standardizer.apply(train_unit);
  const Matrix xte = test.rows() > 0 ? result.standardizer.apply(l2_row_normalize(test)) : Matrix(0, train.cols());

  std::mt19937_64 rng(config.seed);
  Mlp head(MlpSpec::linear(train.cols(), classes), rng);
  OptimizerState opt{config.lr0, config.momentum, config.weight_decay, {}};
  std::vector<std::size_t> order(xtr.rows());
  const std::size_t bs = std::min(config.batch_size, xtr.rows());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = step_lr(epoch, config.milestones, config.lr0);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start + bs <= order.size(); start += bs) {
      Matrix xb(bs, xtr.cols());
      std::vector<int> yb(bs);
      for (std::size_t r = 0; r < bs; ++r) {
        const auto src = xtr.row(order[start + r]);
        std::copy(src.begin(), src.end(), xb.row(r).begin());
        yb[r] = train_labels[order[start + r]];
      }
      Tape tape;
      ParamBinding binding;
      const Var logits = head.forward(tape, tape.constant(std::move(xb)), binding);
      const Var loss = xent_loss(tape, logits, yb);
      tape.backward(loss);
      const auto grads = binding.gradients(tape);
      sgd_step(opt, binding.params, grads, lr);
    }
  }
  result.train_accuracy = accuracy(argmax_rows(head.forward(xtr)), train_labels);
  result.test_accuracy = accuracy(argmax_rows(head.forward(xte)), test_labels);
  return result;
}

double recall_at_1(const Matrix& queries, std::span<const int> query_labels,
                   std::span<const std::size_t> query_ids, const Matrix& gallery,
                   std::span<const int> gallery_labels, std::span<const std::size_t> gallery_ids) {
  require_labels(queries.rows(), query_labels.size(), "recall_at_1");
  require_labels(queries.rows(), query_ids.size(), "recall_at_1");
  require_labels(gallery.rows(), gallery_labels.size(), "recall_at_1");
  require_labels(gallery.rows(), gallery_ids.size(), "recall_at_1");
  if (gallery.rows() == 0) throw std::invalid_argument("recall_at_1: empty gallery");
  if (queries.rows() > 0 && queries.cols() != gallery.cols()) {
    throw std::invalid_argument("recall_at_1: embedding widths differ");
  }
  const Matrix sims = matmul_bt(queries, gallery);
  std::size_t counted = 0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    std::size_t best = gallery.rows();
    for (std::size_t g = 0; g < gallery.rows(); ++g) {
      if (gallery_ids[g] == query_ids[q]) continue;
      if (best == gallery.rows() || sims(q, g) > sims(q, best)) best = g;
    }
    if (best == gallery.rows()) continue;
    ++counted;
    hits += gallery_labels[best] == query_labels[q] ? 1 : 0;
  }
  return counted == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(counted);
}

const PurityRow& PurityReport::row(const std::string& subset) const {
  for (const auto& r : rows) {
    if (r.subset == subset) return r;
  }
  throw std::out_of_range("PurityReport: no subset '" + subset + "'");
}

void PurityReport::write_markdown(std::ostream& os) const {
  os << "| subset | queries | top-" << k << " purity | random-" << k << " purity | gap |\n";
  os << "|---|---:|---:|---:|---:|\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << "| " << r.subset << " | " << r.queries << " | " << r.topk << " | " << r.random << " | "
       << r.topk - r.random << " |\n";
  }
  os.unsetf(std::ios::floatfield);
}

PurityReport purity_report(const EncoderPair& encoder, const LabeledDataset& data, std::size_t k,
                           std::uint64_t seed) {
  return purity_report(encoder.forward_target(data.features), data, k, seed);
}

PurityReport purity_report(const Matrix& embeddings, const LabeledDataset& data, std::size_t k,
                           std::uint64_t seed) {
  if (k == 0) throw std::invalid_argument("purity_report: k must be >= 1");
  if (embeddings.rows() != data.size()) throw std::invalid_argument("purity_report: one embedding per sample");
  const std::size_t n = data.size();
  MemoryBank bank(std::max<std::size_t>(n, 1), embeddings.cols());
  std::vector<BankEntry> entries(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto e = embeddings.row(i);
    entries[i] = BankEntry{{e.begin(), e.end()}, data.train_labels[i], data.true_labels[i], data.sample_ids[i], 0};
  }
  bank.push(entries);

  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < n; ++i) by_label[data.train_labels[i]].push_back(i);

  std::mt19937_64 rng(seed);
  struct Acc {
    std::size_t count = 0;
    double topk = 0.0;
    double random = 0.0;
  };
  Acc all, clean, corrupted;
  std::vector<std::size_t> cand;
  std::vector<int> picked;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& same = by_label[data.train_labels[i]];
    cand.clear();
    for (std::size_t j : same) {
      if (j != i) cand.push_back(j);
    }
    if (cand.empty()) continue;
    const int truth = data.true_labels[i];
    const auto nb = constrained_topk(bank, bank.embedding(i), cand, k, false);
    const double p_top = purity(gather_true_labels(bank, nb, truth), truth);

    const std::size_t take = std::min(k, cand.size());
    for (std::size_t j = 0; j < take; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, cand.size() - 1);
      std::swap(cand[j], cand[pick(rng)]);
    }
    picked.assign(take, 0);
    for (std::size_t j = 0; j < take; ++j) picked[j] = data.true_labels[cand[j]];
    const double p_rand = purity(picked, truth);

    for (Acc* acc : {&all, data.train_labels[i] == truth ? &clean : &corrupted}) {
      ++acc->count;
      acc->topk += p_top;
      acc->random += p_rand;
    }
  }
  PurityReport report;
  report.k = k;
  for (const auto& [name, acc] : {std::pair<const char*, Acc&>{"all", all}, {"clean", clean}, {"corrupted", corrupted}}) {
    const double c = acc.count == 0 ? 1.0 : static_cast<double>(acc.count);
    report.rows.push_back(PurityRow{name, acc.count, acc.topk / c, acc.random / c});
  }
  return report;
}

}  // namespace cmsf
