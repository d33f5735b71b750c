#include "cmsf/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

#include "cmsf/ops.hpp"

namespace cmsf {
namespace {

struct Latents {
  Matrix points;  // samples x latent_dim
  std::vector<int> labels;
  std::vector<int> modes;
};

Matrix random_map(std::size_t out_dim, std::size_t in_dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  Matrix m(in_dim, out_dim);
  for (auto& x : m.values()) x = normal(rng);
  return m;
}

// Consumes rng in a fixed order: mode centers, then per-sample noise.
Latents sample_latents(const SyntheticSpec& spec, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix centers(spec.classes * spec.modes_per_class, spec.latent_dim);
  for (auto& x : centers.values()) x = normal(rng);
  centers = l2_row_normalize(centers);

  Latents out{Matrix(spec.samples, spec.latent_dim), std::vector<int>(spec.samples),
              std::vector<int>(spec.samples)};
  for (std::size_t i = 0; i < spec.samples; ++i) {
    const std::size_t cls = i % spec.classes;
    const std::size_t mode = (i / spec.classes) % spec.modes_per_class;
    out.labels[i] = static_cast<int>(cls);
    out.modes[i] = static_cast<int>(cls * spec.modes_per_class + mode);
    const auto c = centers.row(cls * spec.modes_per_class + mode);
    auto row = out.points.row(i);
    for (std::size_t j = 0; j < spec.latent_dim; ++j) {
      row[j] = c[j] + spec.within_mode_std * normal(rng);
    }
  }
  return out;
}

Matrix embed_view(const Matrix& latents, const Matrix& map, double noise_std, std::mt19937_64& rng) {
  Matrix out = matmul(latents, map);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& x : out.values()) {
    x = std::tanh(x);
    if (noise_std > 0.0) x += noise_std * normal(rng);
  }
  return out;
}

LabeledDataset make_dataset(Matrix features, const Latents& lat, std::size_t classes) {
  LabeledDataset ds;
  ds.features = std::move(features);
  ds.true_labels = lat.labels;
  ds.train_labels = lat.labels;
  ds.label_mask.assign(lat.labels.size(), 1);
  ds.mode_ids = lat.modes;
  ds.sample_ids.resize(lat.labels.size());
  std::iota(ds.sample_ids.begin(), ds.sample_ids.end(), std::size_t{0});
  ds.classes = classes;
  return ds;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (classes < 1) throw std::invalid_argument("SyntheticSpec: classes must be >= 1");
  if (modes_per_class < 1) throw std::invalid_argument("SyntheticSpec: modes_per_class must be >= 1");
  if (latent_dim < 1) throw std::invalid_argument("SyntheticSpec: latent_dim must be >= 1");
  if (ambient_dim < latent_dim) throw std::invalid_argument("SyntheticSpec: ambient_dim must be >= latent_dim");
  if (within_mode_std < 0.0 || ambient_noise_std < 0.0) {
    throw std::invalid_argument("SyntheticSpec: noise levels must be >= 0");
  }
  if (samples == 0 || samples % classes != 0) {
    throw std::invalid_argument("SyntheticSpec: samples (" + std::to_string(samples) +
                                ") must be a positive multiple of classes (" +
                                std::to_string(classes) + ")");
  }
}

std::size_t LabeledDataset::corrupted_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < size(); ++i) n += train_labels[i] != true_labels[i];
  return n;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.features = Matrix(indices.size(), features.cols());
  out.classes = classes;
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    if (i >= size()) throw std::out_of_range("LabeledDataset::subset: index out of range");
    std::copy_n(features.row(i).begin(), features.cols(), out.features.row(r).begin());
    out.true_labels.push_back(true_labels[i]);
    out.train_labels.push_back(train_labels[i]);
    out.label_mask.push_back(label_mask[i]);
    out.mode_ids.push_back(mode_ids[i]);
    out.sample_ids.push_back(sample_ids[i]);
  }
  return out;
}

LabeledDataset generate(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const Latents lat = sample_latents(spec, rng);
  const Matrix map = random_map(spec.ambient_dim, spec.latent_dim, rng);
  return make_dataset(embed_view(lat.points, map, spec.ambient_noise_std, rng), lat, spec.classes);
}

LabeledDataset inject_noise(const LabeledDataset& ds, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("inject_noise: rate must lie in [0, 1]");
  if (rate > 0.0 && ds.classes < 2) throw std::invalid_argument("inject_noise: needs >= 2 classes");
  LabeledDataset out = ds;
  out.train_labels = ds.true_labels;
  const std::size_t n = ds.size();
  const auto count = static_cast<std::size_t>(std::floor(rate * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(ds.classes) - 2);
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t i = order[r];
    int l = pick(rng);
    if (l >= ds.true_labels[i]) ++l;  // skip the true class
    out.train_labels[i] = l;
  }
  return out;
}

LabeledDataset mask_labels(const LabeledDataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("mask_labels: fraction must lie in [0, 1]");
  }
  LabeledDataset out = ds;
  out.label_mask.assign(ds.size(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < ds.classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.true_labels[i] == static_cast<int>(c)) members.push_back(i);
    }
    std::shuffle(members.begin(), members.end(), rng);
    const auto keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(members.size())));
    for (std::size_t r = 0; r < keep; ++r) out.label_mask[members[r]] = 1;
  }
  return out;
}

TrainTestSplit split_tail(const LabeledDataset& ds, double test_fraction, std::size_t block) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("split_tail: test_fraction must lie in [0, 1)");
  }
  if (block == 0) block = 1;
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(ds.size())));
  n_test -= n_test % block;
  const std::size_t n_train = ds.size() - n_test;
  std::vector<std::size_t> train_idx(n_train), test_idx(n_test);
  std::iota(train_idx.begin(), train_idx.end(), std::size_t{0});
  std::iota(test_idx.begin(), test_idx.end(), n_train);
  return {ds.subset(train_idx), ds.subset(test_idx)};
}

void AugmentPolicy::validate() const {
  if (jitter_std < 0.0 || drop_prob < 0.0 || drop_prob > 1.0 || scale_lo < 0.0 || scale_hi < scale_lo) {
    throw std::invalid_argument("AugmentPolicy: fields must be >= 0, drop_prob <= 1, scale_lo <= scale_hi");
  }
}

std::vector<double> augment(std::span<const double> x, const AugmentPolicy& policy,
                            std::mt19937_64& rng) {
  std::vector<double> out(x.begin(), x.end());
  if (policy.jitter_std > 0.0) {
    std::normal_distribution<double> normal(0.0, policy.jitter_std);
    for (auto& v : out) v += normal(rng);
  }
  if (policy.drop_prob > 0.0) {
    std::bernoulli_distribution drop(policy.drop_prob);
    for (auto& v : out) {
      if (drop(rng)) v = 0.0;
    }
  }
  if (policy.scale_hi > policy.scale_lo) {
    std::uniform_real_distribution<double> scale(policy.scale_lo, policy.scale_hi);
    const double s = scale(rng);
    for (auto& v : out) v *= s;
  } else if (policy.scale_lo != 1.0) {
    for (auto& v : out) v *= policy.scale_lo;
  }
  return out;
}

Matrix augment_rows(const Matrix& x, const AugmentPolicy& policy, std::mt19937_64& rng) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = augment(x.row(i), policy, rng);
    std::copy(row.begin(), row.end(), out.row(i).begin());
  }
  return out;
}

void PairSpec::validate() const {
  base.validate();
  if (dim_a < base.latent_dim || dim_b < base.latent_dim) {
    throw std::invalid_argument("PairSpec: view widths must be >= latent_dim");
  }
  if (noise_a < 0.0 || noise_b < 0.0) throw std::invalid_argument("PairSpec: noise levels must be >= 0");
}

PairedData generate_pair(const PairSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.base.seed);
  const Latents lat = sample_latents(spec.base, rng);
  const Matrix map_a = random_map(spec.dim_a, spec.base.latent_dim, rng);
  const Matrix map_b = random_map(spec.dim_b, spec.base.latent_dim, rng);
  Matrix view_a = embed_view(lat.points, map_a, spec.noise_a, rng);
  Matrix view_b = embed_view(lat.points, map_b, spec.noise_b, rng);
  PairedData out;
  out.labels = make_dataset(view_b, lat, spec.base.classes);
  out.views = ModalityPair{std::move(view_a), std::move(view_b)};
  return out;
}

LabeledDataset with_features(const LabeledDataset& ds, Matrix features) {
  if (features.rows() != ds.size()) {
    throw std::invalid_argument("with_features: row count does not match dataset size");
  }
  LabeledDataset out = ds;
  out.features = std::move(features);
  return out;
}

void write_dataset_csv(const std::filesystem::path& path, const LabeledDataset& ds) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "sample_id,true_label,train_label,labeled_flag";
  for (std::size_t j = 0; j < ds.features.cols(); ++j) os << ",f" << j;
  os << '\n';
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << ds.sample_ids[i] << ',' << ds.true_labels[i] << ',' << ds.train_labels[i] << ','
       << static_cast<int>(ds.label_mask[i]);
    for (double v : ds.features.row(i)) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      os << ',' << buf;
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

LabeledDataset read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path.string() + ": missing header");
  const auto header = split_csv_line(line);
  if (header.size() < 5 || header[0] != "sample_id" || header[1] != "true_label" ||
      header[2] != "train_label" || header[3] != "labeled_flag") {
    throw std::runtime_error(path.string() + ": unexpected dataset header");
  }
  const std::size_t dim = header.size() - 4;
  LabeledDataset ds;
  std::vector<double> values;
  int max_label = -1;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected " +
                               std::to_string(header.size()) + " fields");
    }
    ds.sample_ids.push_back(std::stoull(fields[0]));
    ds.true_labels.push_back(std::stoi(fields[1]));
    ds.train_labels.push_back(std::stoi(fields[2]));
    ds.label_mask.push_back(static_cast<char>(std::stoi(fields[3]) != 0));
    ds.mode_ids.push_back(-1);
    max_label = std::max({max_label, ds.true_labels.back(), ds.train_labels.back()});
    for (std::size_t j = 0; j < dim; ++j) values.push_back(std::stod(fields[4 + j]));
  }
  ds.features = Matrix(ds.sample_ids.size(), dim, std::move(values));
  ds.classes = static_cast<std::size_t>(max_label + 1);
  return ds;
}

}  // namespace cmsf
