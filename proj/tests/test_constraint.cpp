#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "cmsf/constraint.hpp"
#include "oracles.hpp"

using namespace cmsf;

namespace {

BankEntry entry(std::vector<double> e, std::optional<int> label, std::size_t id) {
  return BankEntry{std::move(e), label, label.value_or(kNoLabel), id, 0};
}

void check_valid(const CandidateSet& s, const MemoryBank& bank) {
  CHECK(std::is_sorted(s.indices.begin(), s.indices.end()));
  CHECK(std::adjacent_find(s.indices.begin(), s.indices.end()) == s.indices.end());
  for (std::size_t i : s.indices) CHECK(i < bank.size());
}

}  // namespace

TEST_SUITE("constraint modes") {
  TEST_CASE("unconstrained returns every bank index") {
    std::mt19937_64 rng(1);
    MemoryBank bank(100, 3);
    for (std::size_t i = 0; i < 100; ++i) bank.push(entry(oracle::random_unit(3, rng), static_cast<int>(i % 4), i));
    const auto s = candidate_set(Unconstrained{}, BankSet{&bank}, std::nullopt);
    REQUIRE(s.indices.size() == 100);
    for (std::size_t i = 0; i < 100; ++i) CHECK(s.indices[i] == i);
    CHECK(s.bank == BankRole::Trained);
  }

  TEST_CASE("label mode keeps entries with the query's label") {
    MemoryBank bank(4, 2);
    bank.push(entry({1, 0}, 0, 0));  // a
    bank.push(entry({0, 1}, 1, 1));  // b
    bank.push(entry({-1, 0}, 0, 2)); // a
    bank.push(entry({0, -1}, 2, 3)); // c
    const auto s = candidate_set(LabelConstrained{}, BankSet{&bank}, 0);
    CHECK(s.indices == std::vector<std::size_t>{0, 2});
    CHECK(candidate_set(LabelConstrained{}, BankSet{&bank}, 7).empty());
    CHECK_THROWS_AS(candidate_set(LabelConstrained{}, BankSet{&bank}, std::nullopt), std::invalid_argument);
  }

  TEST_CASE("label mode: every index carries the label, and every carrier is included") {
    std::mt19937_64 rng(2);
    MemoryBank bank(50, 2);
    std::uniform_int_distribution<int> lab(0, 4);
    for (std::size_t i = 0; i < 80; ++i) bank.push(entry(oracle::random_unit(2, rng), lab(rng), i));
    for (int q = 0; q < 5; ++q) {
      const auto s = candidate_set(LabelConstrained{}, BankSet{&bank}, q);
      check_valid(s, bank);
      const std::set<std::size_t> got(s.indices.begin(), s.indices.end());
      for (std::size_t i = 0; i < bank.size(); ++i) CHECK((bank.label(i) == q) == (got.count(i) == 1));
    }
  }

  TEST_CASE("cross-modal keeps the n nearest in the constraint bank") {
    MemoryBank constraint(3, 2), trained(3, 2);
    const double a = std::acos(0.9), b = std::acos(0.1), c = std::acos(0.8);
    constraint.push(entry({std::cos(a), std::sin(a)}, std::nullopt, 0));
    constraint.push(entry({std::cos(b), std::sin(b)}, std::nullopt, 1));
    constraint.push(entry({std::cos(c), -std::sin(c)}, std::nullopt, 2));
    for (std::size_t i = 0; i < 3; ++i) trained.push(entry({0, 1}, std::nullopt, i));
    BankSet banks{&trained};
    banks.constraint = &constraint;
    const std::vector<double> q{1.0, 0.0};
    const auto s = candidate_set(CrossModal{2}, banks, std::nullopt, q);
    CHECK(s.indices == std::vector<std::size_t>{0, 2});
    CHECK(s.bank == BankRole::Trained);
    CHECK(candidate_set(CrossModal{3}, banks, std::nullopt, q).indices == std::vector<std::size_t>{0, 1, 2});
    CHECK(candidate_set(CrossModal{50}, banks, std::nullopt, q).indices.size() == 3);
  }

  TEST_CASE("cross-modal on an empty aligned pair yields an empty set") {
    MemoryBank constraint(3, 2), trained(3, 2);
    BankSet banks{&trained};
    banks.constraint = &constraint;
    const std::vector<double> q{1.0, 0.0};
    CHECK(candidate_set(CrossModal{2}, banks, std::nullopt, q).empty());
  }

  TEST_CASE("cross-modal errors") {
    MemoryBank constraint(3, 2), trained(3, 2);
    constraint.push(entry({1, 0}, std::nullopt, 0));
    const std::vector<double> q{1.0, 0.0};
    BankSet banks{&trained};
    CHECK_THROWS_AS(candidate_set(CrossModal{2}, banks, std::nullopt, q), std::invalid_argument);
    banks.constraint = &constraint;
    CHECK_THROWS_AS(candidate_set(CrossModal{2}, banks, std::nullopt, q), std::invalid_argument);
    trained.push(entry({1, 0}, std::nullopt, 0));
    CHECK_THROWS_AS(candidate_set(CrossModal{2}, banks, std::nullopt, {}), std::invalid_argument);
    CHECK_THROWS_AS(candidate_set(CrossModal{0}, banks, std::nullopt, q), std::invalid_argument);
  }

  TEST_CASE("semi-supervised routes by label availability") {
    MemoryBank labeled(4, 2), unlabeled(6, 2);
    labeled.push(entry({1, 0}, 0, 0));
    labeled.push(entry({0, 1}, 1, 1));
    labeled.push(entry({-1, 0}, 0, 2));
    for (std::size_t i = 0; i < 5; ++i) unlabeled.push(entry({0, 1}, std::nullopt, 10 + i));
    BankSet banks;
    banks.labeled = &labeled;
    banks.unlabeled = &unlabeled;
    const auto with_label = candidate_set(SemiSupervised{}, banks, 0);
    CHECK(with_label.bank == BankRole::Labeled);
    CHECK(with_label.indices == std::vector<std::size_t>{0, 2});
    const auto without = candidate_set(SemiSupervised{}, banks, std::nullopt);
    CHECK(without.bank == BankRole::Unlabeled);
    CHECK(without.indices.size() == 5);
    check_valid(without, unlabeled);
    BankSet missing;
    missing.unlabeled = &unlabeled;
    CHECK_THROWS_AS(candidate_set(SemiSupervised{}, missing, 0), std::invalid_argument);
  }

  TEST_CASE("mode names") {
    CHECK(mode_name(Unconstrained{}) == "unconstrained");
    CHECK(mode_name(LabelConstrained{}) == "label");
    CHECK(mode_name(SemiSupervised{}) == "semi");
    CHECK(mode_name(CrossModal{}) == "crossmodal");
  }
}
