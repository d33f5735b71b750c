#include "cmsf/membank.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace cmsf {
namespace {

void require_unit(std::span<const double> v, const char* what) {
  const double norm = std::sqrt(squared_norm(v));
  if (!(std::abs(norm - 1.0) <= kUnitTolerance)) {
    throw std::invalid_argument(std::string(what) + ": embedding norm " + std::to_string(norm) +
                                " is not 1");
  }
}

void write_double(std::ostream& os, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  os << buf;
}

}  // namespace

MemoryBank::MemoryBank(std::size_t capacity, std::size_t dim)
    : capacity_(capacity),
      dim_(dim),
      storage_(capacity, dim),
      labels_(capacity, kNoLabel),
      true_labels_(capacity, kNoLabel),
      sample_ids_(capacity, 0),
      seqs_(capacity, 0) {
  if (capacity == 0) throw std::invalid_argument("MemoryBank: capacity must be > 0");
  if (dim == 0) throw std::invalid_argument("MemoryBank: dim must be > 0");
}

std::size_t MemoryBank::slot(std::size_t i) const {
  if (i >= size_) {
    throw std::out_of_range("MemoryBank: index " + std::to_string(i) + " out of range (size " +
                            std::to_string(size_) + ")");
  }
  return (head_ + i) % capacity_;
}

void MemoryBank::push(std::span<const BankEntry> batch) {
  for (const auto& e : batch) {
    if (e.embedding.size() != dim_) {
      throw std::invalid_argument("MemoryBank::push: embedding width " +
                                  std::to_string(e.embedding.size()) + " but bank dim is " +
                                  std::to_string(dim_));
    }
    require_unit(e.embedding, "MemoryBank::push");
  }
  for (const auto& e : batch) {
    std::size_t s;
    if (size_ < capacity_) {
      s = (head_ + size_) % capacity_;
      ++size_;
    } else {
      s = head_;
      head_ = (head_ + 1) % capacity_;
    }
    std::copy(e.embedding.begin(), e.embedding.end(), storage_.row(s).begin());
    labels_[s] = e.label.value_or(kNoLabel);
    true_labels_[s] = e.true_label;
    sample_ids_[s] = e.sample_id;
    seqs_[s] = next_seq_++;
  }
}

std::span<const double> MemoryBank::embedding(std::size_t i) const { return storage_.row(slot(i)); }

std::optional<int> MemoryBank::label(std::size_t i) const {
  const int l = labels_[slot(i)];
  if (l == kNoLabel) return std::nullopt;
  return l;
}

BankEntry MemoryBank::entry(std::size_t i) const {
  const auto e = embedding(i);
  return BankEntry{std::vector<double>(e.begin(), e.end()), label(i), true_label(i), sample_id(i),
                   insert_seq(i)};
}

void MemoryBank::write_csv(std::ostream& os) const {
  os << "sample_id,insert_seq,label,true_label";
  for (std::size_t j = 0; j < dim_; ++j) os << ",e" << j;
  os << '\n';
  for (std::size_t i = 0; i < size_; ++i) {
    os << sample_id(i) << ',' << insert_seq(i) << ',';
    if (const auto l = label(i)) os << *l;
    os << ',';
    if (true_label(i) != kNoLabel) os << true_label(i);
    for (double v : embedding(i)) {
      os << ',';
      write_double(os, v);
    }
    os << '\n';
  }
}

AlignedBankPair::AlignedBankPair(std::size_t capacity, std::size_t constraint_dim,
                                 std::size_t trained_dim)
    : constraint_(capacity, constraint_dim), trained_(capacity, trained_dim) {}

void AlignedBankPair::push(std::span<const BankEntry> constraint_batch,
                           std::span<const BankEntry> trained_batch) {
  if (constraint_batch.size() != trained_batch.size()) {
    throw std::invalid_argument("AlignedBankPair::push: batch sizes differ (" +
                                std::to_string(constraint_batch.size()) + " vs " +
                                std::to_string(trained_batch.size()) + ")");
  }
  for (std::size_t i = 0; i < trained_batch.size(); ++i) {
    if (constraint_batch[i].sample_id != trained_batch[i].sample_id) {
      throw std::invalid_argument("AlignedBankPair::push: sample id mismatch at position " +
                                  std::to_string(i));
    }
  }
  // Both pushes validate before mutating; checking the trained batch up front
  // means neither bank changes unless both will.
  for (const auto& e : trained_batch) {
    if (e.embedding.size() != trained_.dim()) {
      throw std::invalid_argument("AlignedBankPair::push: trained embedding width mismatch");
    }
    require_unit(e.embedding, "AlignedBankPair::push");
  }
  constraint_.push(constraint_batch);
  trained_.push(trained_batch);
}

std::vector<Neighbor> constrained_topk(const MemoryBank& bank, std::span<const double> query,
                                       std::span<const std::size_t> candidates, std::size_t k,
                                       bool include_query) {
  if (k == 0) throw std::invalid_argument("constrained_topk: k must be >= 1");
  if (query.size() != bank.dim()) {
    throw std::invalid_argument("constrained_topk: query width " + std::to_string(query.size()) +
                                " but bank dim is " + std::to_string(bank.dim()));
  }
  require_unit(query, "constrained_topk(query)");
  const std::size_t pool_size = candidates.size() + (include_query ? 1 : 0);
  if (pool_size == 0) throw std::domain_error("constrained_topk: empty candidate pool");

  struct Scored {
    double sim;
    bool is_query;
    std::uint64_t seq;
    std::size_t index;
  };
  std::vector<Scored> pool;
  pool.reserve(pool_size);
  if (include_query) pool.push_back({dot(query, query), true, 0, 0});
  for (std::size_t idx : candidates) {
    if (idx >= bank.size()) {
      throw std::invalid_argument("constrained_topk: candidate " + std::to_string(idx) +
                                  " out of range (bank size " + std::to_string(bank.size()) + ")");
    }
    pool.push_back({dot(query, bank.embedding(idx)), false, bank.insert_seq(idx), idx});
  }
  const auto better = [](const Scored& a, const Scored& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    if (a.is_query != b.is_query) return a.is_query;
    return a.seq < b.seq;
  };
  const std::size_t take = std::min(k, pool.size());
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take), pool.end(), better);

  std::vector<Neighbor> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    const auto& s = pool[i];
    out.push_back(Neighbor{s.is_query ? std::nullopt : std::optional<std::size_t>(s.index), s.sim});
  }
  return out;
}

Matrix gather_embeddings(const MemoryBank& bank, std::span<const double> query,
                         std::span<const Neighbor> neighbors) {
  Matrix out(neighbors.size(), bank.dim());
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    const auto src = neighbors[i].is_query() ? query : bank.embedding(*neighbors[i].bank_index);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

std::vector<int> gather_true_labels(const MemoryBank& bank, std::span<const Neighbor> neighbors,
                                    int query_true_label) {
  std::vector<int> out;
  out.reserve(neighbors.size());
  for (const auto& n : neighbors) {
    out.push_back(n.is_query() ? query_true_label : bank.true_label(*n.bank_index));
  }
  return out;
}

double purity(std::span<const int> true_labels, int label) {
  if (true_labels.empty()) throw std::invalid_argument("purity: empty neighbor set");
  const auto hits = std::count(true_labels.begin(), true_labels.end(), label);
  return static_cast<double>(hits) / static_cast<double>(true_labels.size());
}

}  // namespace cmsf
