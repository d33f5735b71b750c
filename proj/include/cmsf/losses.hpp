#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cmsf/matrix.hpp"
#include "cmsf/membank.hpp"
#include "cmsf/tape.hpp"

namespace cmsf {

// Mean-shift regression toward the top-k neighbor set (kTopAll for top-all).
struct Cmsf {
  std::size_t k = 10;
};
// Softmax cross-entropy through a linear classifier on the trunk output.
struct CrossEntropy {};
struct SupCon {
  double temperature = 0.1;
  bool target_in_positives = true;
};
struct ProtoNW {
  double temperature = 0.1;
};
// Cosine regression onto fixed random class prototypes.
struct FrzProto {};

using LossKind = std::variant<Cmsf, CrossEntropy, SupCon, ProtoNW, FrzProto>;

std::string loss_name(const LossKind& kind);
void validate_loss(const LossKind& kind);
// True for losses that read the memory bank (and thus need top-k or the bank).
bool uses_bank(const LossKind& kind);

struct LossValue {
  double value = 0.0;
  std::vector<double> grad;  // d(value)/dv
};

// (1/|S|) * sum_i (2 - 2 v.z_i), which equals the mean squared distance
// ||v - z_i||^2 for unit vectors. Gradient is -(2/|S|) * sum_i z_i.
LossValue cmsf_loss(std::span<const double> v, const Matrix& neighbors);

// Mean over rows of -log softmax(logits)[label].
double xent_loss(const Matrix& logits, std::span<const int> labels);
Var xent_loss(Tape& tape, Var logits, std::span<const int> labels);

// Supervised contrastive loss of v against a bank (mean of log-probabilities
// over positives). Positives: bank entries with the query label, plus u when
// target_in_positives. The denominator runs over every bank entry, plus u
// when target_in_positives.
LossValue supcon_loss(std::span<const double> v, const MemoryBank& bank, int query_label,
                      std::span<const double> u, double temperature, bool target_in_positives);

// Per-class means of bank embeddings, renormalized to unit length. Classes
// absent from the bank are marked as such.
struct ClassPrototypes {
  Matrix prototypes;          // classes x dim
  std::vector<char> present;  // one flag per class

  static ClassPrototypes from_bank(const MemoryBank& bank, std::size_t classes);
};

// Cross-entropy of softmax(v . proto_c / temperature) over present classes.
LossValue protonw_loss(std::span<const double> v, const ClassPrototypes& protos, int query_label,
                       double temperature);
LossValue protonw_loss(std::span<const double> v, const MemoryBank& bank, std::size_t classes,
                       int query_label, double temperature);

// Random unit prototypes, one per class, drawn once and never modified.
class FrozenPrototypes {
 public:
  FrozenPrototypes() = default;
  static FrozenPrototypes sample(std::size_t classes, std::size_t dim, std::uint64_t seed);

  const Matrix& matrix() const { return prototypes_; }
  std::size_t classes() const { return prototypes_.rows(); }

 private:
  Matrix prototypes_;
};

// 1 - v . proto_label
LossValue frzproto_loss(std::span<const double> v, const FrozenPrototypes& protos, int query_label);

}  // namespace cmsf
