#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "cmsf/matrix.hpp"

namespace cmsf {

inline constexpr int kNoLabel = -1;
// Pass as k to rank the whole pool (top-all).
inline constexpr std::size_t kTopAll = std::numeric_limits<std::size_t>::max();
inline constexpr double kUnitTolerance = 1e-6;

struct BankEntry {
  std::vector<double> embedding;  // unit norm
  std::optional<int> label;       // training label, possibly corrupted
  int true_label = kNoLabel;      // ground truth; diagnostics only
  std::size_t sample_id = 0;
  std::uint64_t insert_seq = 0;   // assigned by the bank on push
};

// Fixed-capacity FIFO of unit-norm embeddings. Index 0 is the oldest entry.
//
// Reads are const and may run concurrently; push() needs exclusive access and
// either applies the whole batch or leaves the bank untouched.
class MemoryBank {
 public:
  MemoryBank(std::size_t capacity, std::size_t dim);

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  bool full() const { return size_ == capacity_; }

  // Appends at the tail, evicting the oldest entries beyond capacity. The
  // entries' insert_seq fields are ignored; the bank assigns its own counter.
  void push(std::span<const BankEntry> batch);
  void push(const BankEntry& entry) { push(std::span<const BankEntry>(&entry, 1)); }

  std::span<const double> embedding(std::size_t i) const;
  std::optional<int> label(std::size_t i) const;
  int true_label(std::size_t i) const { return true_labels_[slot(i)]; }
  std::size_t sample_id(std::size_t i) const { return sample_ids_[slot(i)]; }
  std::uint64_t insert_seq(std::size_t i) const { return seqs_[slot(i)]; }
  BankEntry entry(std::size_t i) const;
  std::uint64_t next_seq() const { return next_seq_; }

  // Header: sample_id,insert_seq,label,true_label,e0..e{d-1}. Missing labels
  // are written as empty fields. Rows in insertion order.
  void write_csv(std::ostream& os) const;

 private:
  std::size_t slot(std::size_t i) const;

  std::size_t capacity_;
  std::size_t dim_;
  std::size_t head_ = 0;  // physical slot of the oldest entry
  std::size_t size_ = 0;
  std::uint64_t next_seq_ = 0;
  Matrix storage_;
  std::vector<int> labels_;
  std::vector<int> true_labels_;
  std::vector<std::size_t> sample_ids_;
  std::vector<std::uint64_t> seqs_;
};

// Two banks pushed in lock step: entry i of each bank comes from the same sample.
class AlignedBankPair {
 public:
  AlignedBankPair(std::size_t capacity, std::size_t constraint_dim, std::size_t trained_dim);

  // Batches must have equal length and matching sample ids position by position.
  void push(std::span<const BankEntry> constraint_batch, std::span<const BankEntry> trained_batch);

  const MemoryBank& constraint_bank() const { return constraint_; }
  const MemoryBank& trained_bank() const { return trained_; }
  std::size_t size() const { return trained_.size(); }

 private:
  MemoryBank constraint_;
  MemoryBank trained_;
};

struct Neighbor {
  std::optional<std::size_t> bank_index;  // empty for the appended query itself
  double similarity = 0.0;

  bool is_query() const { return !bank_index.has_value(); }
  bool operator==(const Neighbor&) const = default;
};

// Exact top-k by cosine similarity inside `candidates` (indices into `bank`).
// With include_query the query is added to the pool first. Results are sorted
// by similarity descending; ties go to the appended query, then to the smaller
// insert_seq. A pool smaller than k is returned whole.
//
// Throws std::invalid_argument for k == 0, out-of-range candidates or a
// non-unit query, and std::domain_error when the pool is empty.
std::vector<Neighbor> constrained_topk(const MemoryBank& bank, std::span<const double> query,
                                       std::span<const std::size_t> candidates, std::size_t k,
                                       bool include_query);

// Embeddings of a top-k result, one row per neighbor.
Matrix gather_embeddings(const MemoryBank& bank, std::span<const double> query,
                         std::span<const Neighbor> neighbors);

// Ground-truth labels of a top-k result; the appended query contributes `query_true_label`.
std::vector<int> gather_true_labels(const MemoryBank& bank, std::span<const Neighbor> neighbors,
                                    int query_true_label);

// Fraction of `true_labels` equal to `label`. Requires a non-empty set.
double purity(std::span<const int> true_labels, int label);

}  // namespace cmsf
