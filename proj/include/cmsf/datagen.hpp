#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "cmsf/matrix.hpp"

namespace cmsf {

// Each class is a mixture of `modes_per_class` Gaussian modes in latent space.
// Mode centers lie on the unit sphere; samples are mapped to ambient space by
// a fixed random linear map followed by tanh.
struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t modes_per_class = 3;
  std::size_t latent_dim = 8;
  std::size_t ambient_dim = 32;
  double within_mode_std = 0.1;
  // Isotropic Gaussian noise added in ambient space after the nonlinearity.
  double ambient_noise_std = 0.0;
  std::size_t samples = 4000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LabeledDataset {
  Matrix features;                 // samples x ambient_dim
  std::vector<int> true_labels;
  std::vector<int> train_labels;   // equal to true_labels unless corrupted
  std::vector<char> label_mask;    // 1 = label visible to training
  std::vector<int> mode_ids;       // latent mode per sample (diagnostics)
  std::vector<std::size_t> sample_ids;
  std::size_t classes = 0;

  std::size_t size() const { return true_labels.size(); }
  std::size_t corrupted_count() const;
  // Rows `indices` of this dataset, all per-sample fields carried along.
  LabeledDataset subset(std::span<const std::size_t> indices) const;
};

// Samples are interleaved by class (sample i has class i % classes), so any
// contiguous block whose length is a multiple of classes is balanced.
LabeledDataset generate(const SyntheticSpec& spec);

// Exactly floor(rate * N) samples, chosen by a seeded permutation, receive a
// training label drawn uniformly from the classes other than their true one.
// Always starts from true_labels, so repeated calls with one seed agree.
LabeledDataset inject_noise(const LabeledDataset& ds, double rate, std::uint64_t seed);

// Class-balanced label mask: in every class floor(fraction * count) samples
// chosen by a seeded permutation stay labeled.
LabeledDataset mask_labels(const LabeledDataset& ds, double fraction, std::uint64_t seed);

struct TrainTestSplit {
  LabeledDataset train;
  LabeledDataset test;
};
// The last round(test_fraction * N) samples, rounded down to a multiple of
// `block`, form the test split.
TrainTestSplit split_tail(const LabeledDataset& ds, double test_fraction, std::size_t block = 1);

struct AugmentPolicy {
  double jitter_std = 0.0;
  double drop_prob = 0.0;
  double scale_lo = 1.0;
  double scale_hi = 1.0;

  static AugmentPolicy weak() { return {0.05, 0.0, 1.0, 1.0}; }
  static AugmentPolicy strong() { return {0.15, 0.1, 0.8, 1.2}; }
  void validate() const;
};

// Additive Gaussian jitter, then per-coordinate dropout, then one global scale
// drawn from [scale_lo, scale_hi].
std::vector<double> augment(std::span<const double> x, const AugmentPolicy& policy,
                            std::mt19937_64& rng);
Matrix augment_rows(const Matrix& x, const AugmentPolicy& policy, std::mt19937_64& rng);

struct PairSpec {
  SyntheticSpec base;        // classes, modes, latent size, samples, seed
  std::size_t dim_a = 32;
  std::size_t dim_b = 32;
  double noise_a = 0.0;      // ambient noise std of view a
  double noise_b = 0.0;      // ambient noise std of view b

  void validate() const;
};

// Two views of one latent sample each, produced by independent random
// linear + tanh maps plus per-view noise.
struct ModalityPair {
  Matrix view_a;
  Matrix view_b;
};

struct PairedData {
  ModalityPair views;
  LabeledDataset labels;  // features hold view_b
};

PairedData generate_pair(const PairSpec& spec);

// Same sample bookkeeping as `ds`, different feature matrix.
LabeledDataset with_features(const LabeledDataset& ds, Matrix features);

// Header: sample_id,true_label,train_label,labeled_flag,f0..f{d-1}.
void write_dataset_csv(const std::filesystem::path& path, const LabeledDataset& ds);
LabeledDataset read_dataset_csv(const std::filesystem::path& path);

}  // namespace cmsf
