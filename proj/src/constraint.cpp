#include "cmsf/constraint.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace cmsf {
namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::vector<std::size_t> all_indices(const MemoryBank& bank) {
  std::vector<std::size_t> out(bank.size());
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

std::vector<std::size_t> label_indices(const MemoryBank& bank, int label) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    if (bank.label(i) == label) out.push_back(i);
  }
  return out;
}

const MemoryBank& require_bank(const MemoryBank* bank, const char* what) {
  if (bank == nullptr) throw std::invalid_argument(std::string("candidate_set: missing ") + what + " bank");
  return *bank;
}

}  // namespace

std::string mode_name(const ConstraintMode& mode) {
  return std::visit(Overloaded{[](const Unconstrained&) { return std::string("unconstrained"); },
                               [](const LabelConstrained&) { return std::string("label"); },
                               [](const SemiSupervised&) { return std::string("semi"); },
                               [](const CrossModal&) { return std::string("crossmodal"); }},
                    mode);
}

void validate_mode(const ConstraintMode& mode) {
  if (const auto* cm = std::get_if<CrossModal>(&mode); cm != nullptr && cm->n < 1) {
    throw std::invalid_argument("CrossModal: n must be >= 1");
  }
}

const MemoryBank& BankSet::get(BankRole role) const {
  switch (role) {
    case BankRole::Trained: return require_bank(trained, "trained");
    case BankRole::Labeled: return require_bank(labeled, "labeled");
    case BankRole::Unlabeled: return require_bank(unlabeled, "unlabeled");
  }
  throw std::logic_error("BankSet::get: bad role");
}

CandidateSet candidate_set(const ConstraintMode& mode, const BankSet& banks,
                           std::optional<int> query_label,
                           std::span<const double> constraint_embedding) {
  validate_mode(mode);
  return std::visit(
      Overloaded{
          [&](const Unconstrained&) {
            return CandidateSet{BankRole::Trained, all_indices(banks.get(BankRole::Trained))};
          },
          [&](const LabelConstrained&) {
            if (!query_label) throw std::invalid_argument("candidate_set: label mode needs a query label");
            return CandidateSet{BankRole::Trained,
                                label_indices(banks.get(BankRole::Trained), *query_label)};
          },
          [&](const SemiSupervised&) {
            if (query_label) {
              return CandidateSet{BankRole::Labeled,
                                  label_indices(banks.get(BankRole::Labeled), *query_label)};
            }
            return CandidateSet{BankRole::Unlabeled, all_indices(banks.get(BankRole::Unlabeled))};
          },
          [&](const CrossModal& cm) {
            const MemoryBank& constraint = require_bank(banks.constraint, "constraint");
            const MemoryBank& trained = banks.get(BankRole::Trained);
            if (constraint.size() != trained.size()) {
              throw std::invalid_argument("candidate_set: constraint and trained banks are not aligned");
            }
            if (constraint_embedding.empty()) {
              throw std::invalid_argument("candidate_set: cross-modal mode needs a constraint embedding");
            }
            CandidateSet out{BankRole::Trained, {}};
            if (constraint.empty()) return out;
            const auto all = all_indices(constraint);
            const auto nearest = constrained_topk(constraint, constraint_embedding, all, cm.n, false);
            out.indices.reserve(nearest.size());
            for (const auto& nb : nearest) out.indices.push_back(*nb.bank_index);
            std::sort(out.indices.begin(), out.indices.end());
            return out;
          }},
      mode);
}

}  // namespace cmsf
