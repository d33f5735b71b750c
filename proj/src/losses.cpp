#include "cmsf/losses.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "cmsf/ops.hpp"

namespace cmsf {
namespace {

double log_sum_exp(std::span<const double> xs) {
  const double mx = *std::max_element(xs.begin(), xs.end());
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

void require_temperature(double t) {
  if (!(t > 0.0)) throw std::invalid_argument("loss temperature must be > 0");
}

void require_label(int label, std::size_t classes, const char* what) {
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    throw std::invalid_argument(std::string(what) + ": label " + std::to_string(label) +
                                " out of range [0, " + std::to_string(classes) + ")");
  }
}

}  // namespace

std::string loss_name(const LossKind& kind) {
  switch (kind.index()) {
    case 0: return "cmsf";
    case 1: return "xent";
    case 2: return "supcon";
    case 3: return "protonw";
    default: return "frzproto";
  }
}

void validate_loss(const LossKind& kind) {
  if (const auto* c = std::get_if<Cmsf>(&kind); c && c->k == 0) {
    throw std::invalid_argument("cmsf loss: k must be >= 1");
  }
  if (const auto* s = std::get_if<SupCon>(&kind)) require_temperature(s->temperature);
  if (const auto* p = std::get_if<ProtoNW>(&kind)) require_temperature(p->temperature);
}

bool uses_bank(const LossKind& kind) {
  return std::holds_alternative<Cmsf>(kind) || std::holds_alternative<SupCon>(kind) ||
         std::holds_alternative<ProtoNW>(kind);
}

LossValue cmsf_loss(std::span<const double> v, const Matrix& neighbors) {
  if (neighbors.rows() == 0) throw std::invalid_argument("cmsf_loss: empty neighbor set");
  if (neighbors.cols() != v.size()) {
    throw std::invalid_argument("cmsf_loss: neighbor width " + std::to_string(neighbors.cols()) +
                                " but v has " + std::to_string(v.size()));
  }
  const double inv_k = 1.0 / static_cast<double>(neighbors.rows());
  LossValue out{0.0, std::vector<double>(v.size(), 0.0)};
  for (std::size_t i = 0; i < neighbors.rows(); ++i) {
    const auto z = neighbors.row(i);
    out.value += 2.0 - 2.0 * dot(v, z);
    for (std::size_t j = 0; j < v.size(); ++j) out.grad[j] -= 2.0 * z[j];
  }
  out.value *= inv_k;
  for (auto& g : out.grad) g *= inv_k;
  return out;
}

double xent_loss(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) {
    throw std::invalid_argument("xent_loss: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(logits.rows()) + " rows");
  }
  if (logits.rows() == 0) throw std::invalid_argument("xent_loss: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    require_label(labels[i], logits.cols(), "xent_loss");
    const auto row = logits.row(i);
    total += log_sum_exp(row) - row[static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(logits.rows());
}

Var xent_loss(Tape& tape, Var logits, std::span<const int> labels) {
  const Matrix& z = tape.value(logits);
  if (labels.size() != z.rows()) {
    throw std::invalid_argument("xent_loss: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(z.rows()) + " rows");
  }
  for (int l : labels) require_label(l, z.cols(), "xent_loss");
  return mean_row_loss(tape, logits,
                       [labels](std::size_t i, std::span<const double> row, std::span<double> grad) {
                         const double lse = log_sum_exp(row);
                         for (std::size_t j = 0; j < row.size(); ++j) grad[j] = std::exp(row[j] - lse);
                         const auto y = static_cast<std::size_t>(labels[i]);
                         grad[y] -= 1.0;
                         return lse - row[y];
                       });
}

LossValue supcon_loss(std::span<const double> v, const MemoryBank& bank, int query_label,
                      std::span<const double> u, double temperature, bool target_in_positives) {
  require_temperature(temperature);
  if (v.size() != bank.dim()) throw std::invalid_argument("supcon_loss: v width does not match bank");
  if (target_in_positives && u.size() != v.size()) {
    throw std::invalid_argument("supcon_loss: target embedding width does not match v");
  }
  const std::size_t extra = target_in_positives ? 1 : 0;
  const std::size_t count = bank.size() + extra;
  std::vector<double> logits(count);
  std::vector<char> positive(count, 0);
  std::size_t num_pos = 0;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    logits[i] = dot(v, bank.embedding(i)) / temperature;
    if (bank.label(i) == query_label) {
      positive[i] = 1;
      ++num_pos;
    }
  }
  if (target_in_positives) {
    logits[bank.size()] = dot(v, u) / temperature;
    positive[bank.size()] = 1;
    ++num_pos;
  }
  if (num_pos == 0) throw std::invalid_argument("supcon_loss: no positives for the query label");

  const double lse = log_sum_exp(logits);
  LossValue out{0.0, std::vector<double>(v.size(), 0.0)};
  double pos_sum = 0.0;
  const double inv_pos = 1.0 / static_cast<double>(num_pos);
  for (std::size_t i = 0; i < count; ++i) {
    const auto z = i < bank.size() ? bank.embedding(i) : u;
    double w = std::exp(logits[i] - lse);
    if (positive[i]) {
      pos_sum += logits[i];
      w -= inv_pos;
    }
    for (std::size_t j = 0; j < v.size(); ++j) out.grad[j] += w * z[j] / temperature;
  }
  out.value = lse - pos_sum * inv_pos;
  return out;
}

ClassPrototypes ClassPrototypes::from_bank(const MemoryBank& bank, std::size_t classes) {
  ClassPrototypes out{Matrix(classes, bank.dim()), std::vector<char>(classes, 0)};
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto l = bank.label(i);
    if (!l || *l < 0 || static_cast<std::size_t>(*l) >= classes) continue;
    auto row = out.prototypes.row(static_cast<std::size_t>(*l));
    const auto e = bank.embedding(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += e[j];
    out.present[static_cast<std::size_t>(*l)] = 1;
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (!out.present[c]) continue;
    auto row = out.prototypes.row(c);
    const double norm = std::sqrt(squared_norm(row));
    if (!(norm > kNormalizeEps)) {
      out.present[c] = 0;
      continue;
    }
    for (auto& x : row) x /= norm;
  }
  return out;
}

LossValue protonw_loss(std::span<const double> v, const ClassPrototypes& protos, int query_label,
                       double temperature) {
  require_temperature(temperature);
  const std::size_t classes = protos.prototypes.rows();
  require_label(query_label, classes, "protonw_loss");
  if (!protos.present[static_cast<std::size_t>(query_label)]) {
    throw std::invalid_argument("protonw_loss: query class " + std::to_string(query_label) +
                                " is absent from the bank");
  }
  std::vector<std::size_t> cls;
  std::vector<double> logits;
  for (std::size_t c = 0; c < classes; ++c) {
    if (!protos.present[c]) continue;
    cls.push_back(c);
    logits.push_back(dot(v, protos.prototypes.row(c)) / temperature);
  }
  const double lse = log_sum_exp(logits);
  LossValue out{0.0, std::vector<double>(v.size(), 0.0)};
  for (std::size_t i = 0; i < cls.size(); ++i) {
    double w = std::exp(logits[i] - lse);
    if (cls[i] == static_cast<std::size_t>(query_label)) {
      out.value = lse - logits[i];
      w -= 1.0;
    }
    const auto p = protos.prototypes.row(cls[i]);
    for (std::size_t j = 0; j < v.size(); ++j) out.grad[j] += w * p[j] / temperature;
  }
  return out;
}

LossValue protonw_loss(std::span<const double> v, const MemoryBank& bank, std::size_t classes,
                       int query_label, double temperature) {
  return protonw_loss(v, ClassPrototypes::from_bank(bank, classes), query_label, temperature);
}

FrozenPrototypes FrozenPrototypes::sample(std::size_t classes, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(classes, dim);
  for (auto& x : m.values()) x = normal(rng);
  FrozenPrototypes out;
  out.prototypes_ = l2_row_normalize(m);
  return out;
}

LossValue frzproto_loss(std::span<const double> v, const FrozenPrototypes& protos, int query_label) {
  require_label(query_label, protos.classes(), "frzproto_loss");
  const auto p = protos.matrix().row(static_cast<std::size_t>(query_label));
  LossValue out{1.0 - dot(v, p), std::vector<double>(v.size())};
  for (std::size_t j = 0; j < v.size(); ++j) out.grad[j] = -p[j];
  return out;
}

}  // namespace cmsf
