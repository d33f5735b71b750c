#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cmsf/datagen.hpp"
#include "cmsf/encoder.hpp"
#include "cmsf/matrix.hpp"

namespace cmsf {

inline constexpr std::size_t kDefaultKnnK = 10;

// Majority vote over the k_eval cosine-nearest train rows. Similarity ties go
// to the smaller train index, vote ties to the smaller label.
std::vector<int> knn_predict(const Matrix& train, std::span<const int> train_labels, const Matrix& test,
                             std::size_t k_eval = kDefaultKnnK);
double knn_classify(const Matrix& train, std::span<const int> train_labels, const Matrix& test,
                    std::span<const int> test_labels, std::size_t k_eval = kDefaultKnnK);

// Per-dimension affine map fitted on the train split only. Dimensions with
// zero variance keep scale 1.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const Matrix& x);
  Matrix apply(const Matrix& x) const;
};

struct ProbeConfig {
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  std::vector<std::size_t> milestones{15, 30};
  std::uint64_t seed = 0;

  void validate() const;
};

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  Standardizer standardizer;
};

// Rows are L2-normalized, standardized with train statistics, then a single
// linear layer is trained with cross-entropy.
ProbeResult linear_probe(const Matrix& train, std::span<const int> train_labels, const Matrix& test,
                         std::span<const int> test_labels, std::size_t classes,
                         const ProbeConfig& config = {});

// Fraction of queries whose most similar gallery row has the same label. A
// gallery row sharing the query's sample id is skipped. Queries left with an
// empty gallery are not counted.
double recall_at_1(const Matrix& queries, std::span<const int> query_labels,
                   std::span<const std::size_t> query_ids, const Matrix& gallery,
                   std::span<const int> gallery_labels, std::span<const std::size_t> gallery_ids);

struct PurityRow {
  std::string subset;  // all, clean, corrupted
  std::size_t queries = 0;
  double topk = 0.0;
  double random = 0.0;
};

struct PurityReport {
  std::size_t k = 0;
  std::vector<PurityRow> rows;

  const PurityRow& row(const std::string& subset) const;
  void write_markdown(std::ostream& os) const;
};

// Target embeddings of every sample fill a label-constrained bank. Each query
// searches the entries carrying its training label, itself excluded, and
// compares the true-class purity of its top-k with a uniformly drawn k-subset
// of the same candidates.
PurityReport purity_report(const EncoderPair& encoder, const LabeledDataset& data, std::size_t k,
                           std::uint64_t seed);
PurityReport purity_report(const Matrix& embeddings, const LabeledDataset& data, std::size_t k,
                           std::uint64_t seed);

}  // namespace cmsf
