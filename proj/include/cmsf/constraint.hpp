#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cmsf/membank.hpp"

namespace cmsf {

// M-hat = M: plain mean shift over the whole bank.
struct Unconstrained {};
// M-hat = bank entries carrying the query's (possibly noisy) training label.
struct LabelConstrained {};
// Labeled queries search the labeled bank by label; unlabeled queries search
// the whole unlabeled bank.
struct SemiSupervised {};
// M-hat = indices of the n nearest neighbors of the constraint embedding in
// the constraint bank, applied to the aligned trained bank.
struct CrossModal {
  std::size_t n = 10;
};

using ConstraintMode = std::variant<Unconstrained, LabelConstrained, SemiSupervised, CrossModal>;

std::string mode_name(const ConstraintMode& mode);
void validate_mode(const ConstraintMode& mode);

enum class BankRole { Trained, Labeled, Unlabeled };

// Non-owning views of the banks a mode may consult.
struct BankSet {
  const MemoryBank* trained = nullptr;
  const MemoryBank* labeled = nullptr;
  const MemoryBank* unlabeled = nullptr;
  const MemoryBank* constraint = nullptr;  // aligned with `trained`

  const MemoryBank& get(BankRole role) const;
};

struct CandidateSet {
  BankRole bank = BankRole::Trained;
  std::vector<std::size_t> indices;  // ascending, duplicate-free

  bool empty() const { return indices.empty(); }
};

// Builds M-hat for one query. An empty result is returned as an empty set
// (never thrown); callers fall back to S = {query}.
//
// Throws std::invalid_argument when the mode needs a bank, label or
// constraint embedding that is not supplied.
CandidateSet candidate_set(const ConstraintMode& mode, const BankSet& banks,
                           std::optional<int> query_label,
                           std::span<const double> constraint_embedding = {});

}  // namespace cmsf
