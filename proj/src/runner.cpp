#include "cmsf/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "cmsf/ops.hpp"

namespace cmsf {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

const std::set<std::string> kSweepEvaluations{"knn", "raw_knn", "linear_probe", "purity", "recall_at_1",
                                              "transfer"};
const std::set<std::string> kCrossModalEvaluations{"knn", "raw_knn", "linear_probe", "recall_at_1"};
constexpr std::uint64_t kNoiseSeedOffset = 100;
constexpr std::uint64_t kMaskSeedOffset = 200;
constexpr std::uint64_t kTransferSeedOffset = 7919;

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// Reads one JSON object, remembering which keys were consumed so that the
// rest can be rejected as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string sub(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* child(const std::string& key) {
    used_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (const json* v = child(key)) out = convert<T>(*v, sub(key));
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError(sub(key), "unknown field");
    }
  }

  template <class T>
  static T convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path, "expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(path, "expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(path, "expected a number");
      return v.get<double>();
    } else if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ConfigError(path, "expected a non-negative integer");
      }
      return v.get<T>();
    } else {
      if (!v.is_array()) throw ConfigError(path, "expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], path + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

AugmentPolicy parse_augment(const json& j, const std::string& path, AugmentPolicy out) {
  ObjectReader r(j, path);
  r.get("jitter_std", out.jitter_std);
  r.get("drop_prob", out.drop_prob);
  r.get("scale_lo", out.scale_lo);
  r.get("scale_hi", out.scale_hi);
  r.finish();
  try {
    out.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
  return out;
}

json augment_json(const AugmentPolicy& a) {
  return json{{"jitter_std", a.jitter_std}, {"drop_prob", a.drop_prob}, {"scale_lo", a.scale_lo},
              {"scale_hi", a.scale_hi}};
}

void parse_dataset(const json& j, ExperimentConfig& c) {
  ObjectReader r(j, "dataset");
  auto& d = c.dataset;
  r.get("classes", d.classes);
  r.get("modes_per_class", d.modes_per_class);
  r.get("latent_dim", d.latent_dim);
  r.get("ambient_dim", d.ambient_dim);
  r.get("within_mode_std", d.within_mode_std);
  r.get("ambient_noise_std", d.ambient_noise_std);
  r.get("samples", d.samples);
  r.get("test_fraction", c.test_fraction);
  r.finish();
  try {
    d.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("dataset", e.what());
  }
  if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) {
    throw ConfigError("dataset.test_fraction", "must lie in (0, 1)");
  }
}

void parse_train(const json& j, ExperimentConfig& c) {
  ObjectReader r(j, "train");
  auto& t = c.train;
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  r.get("bank_capacity", t.bank_capacity);
  r.get("lr0", t.lr0);
  r.get("sgd_momentum", t.sgd_momentum);
  r.get("weight_decay", t.weight_decay);
  r.get("momentum_m", t.momentum_m);
  r.get("warmup", t.warmup);
  r.get("warmup_epochs", t.warmup_epochs);
  r.get("trunk_hidden", t.trunk_hidden);
  r.get("predictor_hidden", t.predictor_hidden);
  r.get("supcon_temperature", c.supcon_temperature);
  r.get("protonw_temperature", c.protonw_temperature);
  r.get("supcon_momentum_m", c.supcon_momentum_m);
  if (const json* a = r.child("target_aug")) t.target_aug = parse_augment(*a, r.sub("target_aug"), t.target_aug);
  if (const json* a = r.child("online_aug")) t.online_aug = parse_augment(*a, r.sub("online_aug"), t.online_aug);
  r.finish();
}

void parse_probe(const json& j, ProbeConfig& p) {
  ObjectReader r(j, "probe");
  r.get("lr0", p.lr0);
  r.get("momentum", p.momentum);
  r.get("weight_decay", p.weight_decay);
  r.get("epochs", p.epochs);
  r.get("batch_size", p.batch_size);
  r.get("milestones", p.milestones);
  r.finish();
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("probe", e.what());
  }
}

void parse_crossmodal(const json& j, CrossModalConfig& x) {
  ObjectReader r(j, "crossmodal");
  r.get("dim_a", x.dim_a);
  r.get("dim_b", x.dim_b);
  r.get("noise_a", x.noise_a);
  r.get("noise_b", x.noise_b);
  r.get("pretrain_epochs", x.pretrain_epochs);
  r.get("continue_epochs", x.continue_epochs);
  r.get("pretrain_k", x.pretrain_k);
  r.get("k", x.k);
  r.get("n_values", x.n_values);
  r.get("rounds", x.rounds);
  r.finish();
  if (x.dim_a == 0 || x.dim_b == 0) throw ConfigError("crossmodal", "view widths must be >= 1");
  if (x.noise_a < 0.0 || x.noise_b < 0.0) throw ConfigError("crossmodal", "noise levels must be >= 0");
  if (x.k == 0) throw ConfigError("crossmodal.k", "must be >= 1");
  if (x.pretrain_k == 0) throw ConfigError("crossmodal.pretrain_k", "must be >= 1");
  if (x.rounds == 0) throw ConfigError("crossmodal.rounds", "must be >= 1");
  for (std::size_t i = 0; i < x.n_values.size(); ++i) {
    if (x.n_values[i] == 0) throw ConfigError("crossmodal.n_values[" + std::to_string(i) + "]", "must be >= 1");
  }
}

std::string run_id(const std::string& method, double noise, double fraction, std::uint64_t seed) {
  return method + "_n" + fmt_short(noise) + "_f" + fmt_short(fraction) + "_s" + std::to_string(seed);
}

std::string data_id(double noise, double fraction, std::uint64_t seed) {
  return "n" + fmt_short(noise) + "_f" + fmt_short(fraction) + "_s" + std::to_string(seed);
}

bool wants(const ExperimentConfig& c, const std::string& eval) {
  return std::find(c.evaluations.begin(), c.evaluations.end(), eval) != c.evaluations.end();
}

std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("CMSF_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

// Work unit whose rows are produced independently of every other cell.
struct Cell {
  std::string method;  // empty for a cross-modal repeat
  double noise = 0.0;
  double fraction = 1.0;
  std::uint64_t seed = 0;
};

struct CellResult {
  std::vector<MetricsRow> rows;
  std::string numeric_error;
  std::string error;
};

struct SweepData {
  LabeledDataset train;
  LabeledDataset test;
};

SweepData sweep_data(const ExperimentConfig& c, double noise, double fraction, std::uint64_t seed) {
  SyntheticSpec spec = c.dataset;
  spec.seed = seed;
  auto split = split_tail(generate(spec), c.test_fraction, spec.classes);
  LabeledDataset train = inject_noise(split.train, noise, seed + kNoiseSeedOffset);
  train = mask_labels(train, fraction, seed + kMaskSeedOffset);
  return {std::move(train), std::move(split.test)};
}

class RowSink {
 public:
  RowSink(std::vector<MetricsRow>& rows, std::string run, std::string method, double noise, double fraction,
          std::uint64_t seed)
      : rows_(rows), run_(std::move(run)), method_(std::move(method)), noise_(noise), fraction_(fraction),
        seed_(seed) {}
  void add(std::size_t epoch, const std::string& metric, double value) {
    rows_.push_back(MetricsRow{run_, method_, noise_, fraction_, epoch, metric, value, seed_});
  }
  const std::string& run() const { return run_; }

 private:
  std::vector<MetricsRow>& rows_;
  std::string run_, method_;
  double noise_, fraction_;
  std::uint64_t seed_;
};

Trainer::EpochCallback epoch_logger(RowSink& sink, const fs::path& ckpt_dir, std::size_t every,
                                    std::size_t epoch_offset = 0) {
  return [&sink, ckpt_dir, every, epoch_offset](const EpochStats& s, Trainer& t) {
    const std::size_t epoch = epoch_offset + s.epoch;
    sink.add(epoch, "train_loss", s.mean_loss);
    sink.add(epoch, "lr", s.lr);
    if (every > 0 && epoch % every == 0) {
      save_checkpoint(ckpt_dir / (sink.run() + "_e" + std::to_string(epoch) + ".ckpt"), t.encoder());
    }
  };
}

void evaluate_common(const ExperimentConfig& c, const EncoderPair& enc, const LabeledDataset& train,
                     const LabeledDataset& test, std::uint64_t seed, std::size_t epoch, RowSink& sink) {
  const bool need_embed = wants(c, "knn") || wants(c, "linear_probe") || wants(c, "recall_at_1");
  Matrix etr, ete;
  if (need_embed) {
    etr = enc.embed(train.features);
    ete = enc.embed(test.features);
  }
  if (wants(c, "knn")) sink.add(epoch, "knn_acc", knn_classify(etr, train.true_labels, ete, test.true_labels, c.knn_k));
  if (wants(c, "raw_knn")) {
    sink.add(epoch, "raw_knn_acc",
             knn_classify(l2_row_normalize(train.features), train.true_labels, l2_row_normalize(test.features),
                          test.true_labels, c.knn_k));
  }
  if (wants(c, "linear_probe")) {
    ProbeConfig p = c.probe;
    p.seed = seed;
    sink.add(epoch, "probe_acc",
             linear_probe(etr, train.true_labels, ete, test.true_labels, train.classes, p).test_accuracy);
  }
  if (wants(c, "recall_at_1")) {
    sink.add(epoch, "recall_at_1",
             recall_at_1(ete, test.true_labels, test.sample_ids, etr, train.true_labels, train.sample_ids));
  }
}

void check_finite(const std::vector<MetricsRow>& rows) {
  for (const auto& r : rows) {
    if (!std::isfinite(r.value)) throw NumericError(0, "non-finite metric " + r.metric + " in " + r.run_id);
  }
}

std::vector<MetricsRow> run_sweep_cell(const ExperimentConfig& c, const Cell& cell, const fs::path& ckpt_dir) {
  std::vector<MetricsRow> rows;
  const auto data = sweep_data(c, cell.noise, cell.fraction, cell.seed);
  const auto preset = method_preset(cell.method, c.constraint, c.supcon_temperature, c.protonw_temperature);
  TrainConfig tc = c.train;
  tc.loss = preset.loss;
  tc.mode = preset.mode;
  tc.include_target = preset.include_target;
  tc.seed = cell.seed;
  if (std::holds_alternative<SupCon>(tc.loss)) tc.momentum_m = c.supcon_momentum_m;

  RowSink sink(rows, run_id(cell.method, cell.noise, cell.fraction, cell.seed), cell.method, cell.noise,
               cell.fraction, cell.seed);
  Trainer trainer(tc, data.train.features.cols(), data.train.classes);
  trainer.train(data.train, epoch_logger(sink, ckpt_dir, c.checkpoint_every));
  save_checkpoint(ckpt_dir / (sink.run() + ".ckpt"), trainer.encoder());

  const std::size_t epoch = tc.epochs;
  const EncoderPair& enc = trainer.encoder();
  evaluate_common(c, enc, data.train, data.test, cell.seed, epoch, sink);
  if (wants(c, "purity")) {
    const auto rep = purity_report(enc, data.train, c.purity_k, cell.seed);
    for (const auto& r : rep.rows) {
      const std::string suffix = r.subset == "all" ? "" : "_" + r.subset;
      sink.add(epoch, "purity_topk" + suffix, r.topk);
      sink.add(epoch, "purity_random" + suffix, r.random);
    }
    sink.add(epoch, "purity_gap", rep.row("all").topk - rep.row("all").random);
  }
  if (wants(c, "transfer")) {
    SyntheticSpec spec = c.dataset;
    spec.seed = cell.seed + kTransferSeedOffset;
    const auto other = split_tail(generate(spec), c.test_fraction, spec.classes);
    ProbeConfig p = c.probe;
    p.seed = cell.seed;
    const auto res = linear_probe(enc.embed(other.train.features), other.train.true_labels,
                                  enc.embed(other.test.features), other.test.true_labels, spec.classes, p);
    sink.add(epoch, "transfer_probe_acc", res.test_accuracy);
  }
  check_finite(rows);
  return rows;
}

std::vector<MetricsRow> run_crossmodal_cell(const ExperimentConfig& c, const Cell& cell,
                                            const fs::path& ckpt_dir) {
  std::vector<MetricsRow> rows;
  const auto& x = c.crossmodal;
  PairSpec ps;
  ps.base = c.dataset;
  ps.base.seed = cell.seed;
  ps.dim_a = x.dim_a;
  ps.dim_b = x.dim_b;
  ps.noise_a = x.noise_a;
  ps.noise_b = x.noise_b;
  const auto pd = generate_pair(ps);
  const std::size_t classes = c.dataset.classes;
  const auto b = split_tail(pd.labels, c.test_fraction, classes);
  const auto a = split_tail(with_features(pd.labels, pd.views.view_a), c.test_fraction, classes);

  TrainConfig pre = c.train;
  pre.loss = Cmsf{x.pretrain_k};
  pre.mode = Unconstrained{};
  pre.include_target = true;
  pre.epochs = x.pretrain_epochs;

  auto pretrain = [&](const std::string& name, const SweepData& d, std::uint64_t seed) {
    pre.seed = seed;
    RowSink sink(rows, name + "_s" + std::to_string(cell.seed), name, 0.0, 0.0, cell.seed);
    Trainer t(pre, d.train.features.cols(), classes);
    t.train(d.train, epoch_logger(sink, ckpt_dir, c.checkpoint_every));
    save_checkpoint(ckpt_dir / (sink.run() + ".ckpt"), t.encoder());
    evaluate_common(c, t.encoder(), d.train, d.test, cell.seed, pre.epochs, sink);
    return EncoderPair(t.encoder());
  };
  const EncoderPair enc_a = pretrain("pretrain-a", {a.train, a.test}, cell.seed);
  const EncoderPair enc_b = pretrain("pretrain-b", {b.train, b.test}, cell.seed + 1);

  std::vector<std::size_t> variants{0};
  variants.insert(variants.end(), x.n_values.begin(), x.n_values.end());
  for (const std::size_t n : variants) {
    const std::string name =
        (n == 0 ? "msf" : "cross-n" + std::to_string(n)) + "-k" + std::to_string(x.k);
    TrainConfig tc = c.train;
    tc.loss = Cmsf{x.k};
    tc.mode = n == 0 ? ConstraintMode{Unconstrained{}} : ConstraintMode{CrossModal{n}};
    tc.include_target = true;
    tc.epochs = x.continue_epochs;
    RowSink sink(rows, name + "_s" + std::to_string(cell.seed), name, 0.0, 0.0, cell.seed);
    EncoderPair cur_a = enc_a;
    EncoderPair cur_b = enc_b;
    for (std::size_t round = 0; round < x.rounds; ++round) {
      if (round > 0 && n > 0) {
        TrainConfig ta = tc;
        ta.seed = cell.seed + 1 + 2 * round;
        Trainer ta_t(ta, cur_a, classes);
        ta_t.set_constraint(ConstraintSource{cur_b, b.train.features});
        ta_t.train(a.train);
        cur_a = ta_t.encoder();
      }
      tc.seed = cell.seed + 2 + 2 * round;
      Trainer t(tc, cur_b, classes);
      if (n > 0) t.set_constraint(ConstraintSource{cur_a, a.train.features});
      t.train(b.train, epoch_logger(sink, ckpt_dir, c.checkpoint_every, round * tc.epochs));
      cur_b = t.encoder();
    }
    save_checkpoint(ckpt_dir / (sink.run() + ".ckpt"), cur_b);
    evaluate_common(c, cur_b, b.train, b.test, cell.seed, x.rounds * tc.epochs, sink);
  }
  check_finite(rows);
  return rows;
}

std::vector<Cell> build_cells(const ExperimentConfig& c) {
  std::vector<Cell> cells;
  for (std::size_t r = 0; r < c.repeats; ++r) {
    const std::uint64_t seed = c.seed + r;
    if (c.kind == "crossmodal") {
      cells.push_back(Cell{"", 0.0, 0.0, seed});
      continue;
    }
    for (double noise : c.noise_rates) {
      for (double fraction : c.label_fractions) {
        for (const auto& m : c.methods) cells.push_back(Cell{m, noise, fraction, seed});
      }
    }
  }
  return cells;
}

}  // namespace

MethodPreset method_preset(const std::string& name, const std::string& constraint, double supcon_temperature,
                           double protonw_temperature) {
  ConstraintMode constrained;
  if (constraint == "label") {
    constrained = LabelConstrained{};
  } else if (constraint == "semi") {
    constrained = SemiSupervised{};
  } else {
    throw std::invalid_argument("unknown constraint '" + constraint + "' (expected label or semi)");
  }
  if (name == "xent") return {name, CrossEntropy{}, LabelConstrained{}, true, true};
  if (name == "supcon") return {name, SupCon{supcon_temperature, true}, LabelConstrained{}, true, true};
  if (name == "protonw") return {name, ProtoNW{protonw_temperature}, LabelConstrained{}, true, true};
  if (name == "frzproto") return {name, FrzProto{}, LabelConstrained{}, true, true};
  if (name == "msf") return {name, Cmsf{10}, Unconstrained{}, true, false};
  if (name == "byol") return {name, Cmsf{1}, Unconstrained{}, true, false};
  if (name == "cmsf-topall") return {name, Cmsf{kTopAll}, constrained, true, false};
  const std::string prefix = "cmsf-top";
  if (name.rfind(prefix, 0) == 0 && name.size() > prefix.size()) {
    const std::string digits = name.substr(prefix.size());
    if (std::all_of(digits.begin(), digits.end(), [](char ch) { return ch >= '0' && ch <= '9'; }) &&
        digits.size() < 10) {
      const std::size_t k = std::stoul(digits);
      if (k > 0) return {name, Cmsf{k}, constrained, true, false};
    }
  }
  throw std::invalid_argument("unknown method '" + name +
                              "' (expected xent, supcon, protonw, frzproto, msf, byol, cmsf-top<K>, cmsf-topall)");
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  ObjectReader r(j, "");
  r.get("kind", c.kind);
  if (c.kind != "sweep" && c.kind != "crossmodal") throw ConfigError("kind", "expected sweep or crossmodal");
  if (const json* d = r.child("dataset")) parse_dataset(*d, c);
  if (const json* t = r.child("train")) parse_train(*t, c);
  r.get("methods", c.methods);
  r.get("constraint", c.constraint);
  r.get("noise_rates", c.noise_rates);
  r.get("label_fractions", c.label_fractions);
  r.get("seed", c.seed);
  r.get("repeats", c.repeats);
  r.get("evaluations", c.evaluations);
  r.get("knn_k", c.knn_k);
  r.get("purity_k", c.purity_k);
  if (const json* p = r.child("probe")) parse_probe(*p, c.probe);
  if (const json* x = r.child("crossmodal")) parse_crossmodal(*x, c.crossmodal);
  r.get("output_dir", c.output_dir);
  r.get("checkpoint_every", c.checkpoint_every);
  r.get("dump_datasets", c.dump_datasets);
  r.finish();
  validate_config(c);
  return c;
}

void validate_config(const ExperimentConfig& c) {
  if (c.kind != "sweep" && c.kind != "crossmodal") throw ConfigError("kind", "expected sweep or crossmodal");
  if (c.constraint != "label" && c.constraint != "semi") throw ConfigError("constraint", "expected label or semi");
  if (c.repeats == 0) throw ConfigError("repeats", "must be >= 1");
  if (c.knn_k == 0) throw ConfigError("knn_k", "must be >= 1");
  if (c.purity_k == 0) throw ConfigError("purity_k", "must be >= 1");
  if (c.output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
  const auto& allowed = c.kind == "sweep" ? kSweepEvaluations : kCrossModalEvaluations;
  for (std::size_t i = 0; i < c.evaluations.size(); ++i) {
    if (!allowed.count(c.evaluations[i])) {
      throw ConfigError("evaluations[" + std::to_string(i) + "]",
                        "'" + c.evaluations[i] + "' is not available for kind " + c.kind);
    }
  }
  for (std::size_t i = 0; i < c.noise_rates.size(); ++i) {
    if (!(c.noise_rates[i] >= 0.0 && c.noise_rates[i] <= 1.0)) {
      throw ConfigError("noise_rates[" + std::to_string(i) + "]", "must lie in [0, 1]");
    }
    if (c.noise_rates[i] > 0.0 && c.dataset.classes < 2) {
      throw ConfigError("noise_rates[" + std::to_string(i) + "]", "label noise needs >= 2 classes");
    }
  }
  for (std::size_t i = 0; i < c.label_fractions.size(); ++i) {
    if (!(c.label_fractions[i] >= 0.0 && c.label_fractions[i] <= 1.0)) {
      throw ConfigError("label_fractions[" + std::to_string(i) + "]", "must lie in [0, 1]");
    }
  }
  const std::size_t test_rows = static_cast<std::size_t>(std::llround(c.test_fraction * static_cast<double>(c.dataset.samples))) /
                                c.dataset.classes * c.dataset.classes;
  const std::size_t train_rows = c.dataset.samples - test_rows;
  if (c.train.batch_size > train_rows) {
    throw ConfigError("train.batch_size", "exceeds the " + std::to_string(train_rows) + " training samples");
  }
  if (c.knn_k > train_rows) throw ConfigError("knn_k", "exceeds the training split");

  if (c.kind == "sweep") {
    if (c.methods.empty()) throw ConfigError("methods", "must not be empty");
    if (c.noise_rates.empty()) throw ConfigError("noise_rates", "must not be empty");
    if (c.label_fractions.empty()) throw ConfigError("label_fractions", "must not be empty");
    const bool partial = std::any_of(c.label_fractions.begin(), c.label_fractions.end(),
                                     [](double f) { return f < 1.0; });
    for (std::size_t i = 0; i < c.methods.size(); ++i) {
      const std::string path = "methods[" + std::to_string(i) + "]";
      MethodPreset preset;
      try {
        preset = method_preset(c.methods[i], c.constraint, c.supcon_temperature, c.protonw_temperature);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(path, e.what());
      }
      if (partial && preset.needs_labels) {
        throw ConfigError(path, "'" + c.methods[i] + "' needs every label; use label_fractions [1.0]");
      }
      if (partial && c.constraint != "semi" && std::holds_alternative<Cmsf>(preset.loss) &&
          std::holds_alternative<LabelConstrained>(preset.mode)) {
        throw ConfigError("constraint", "label fractions below 1 need constraint \"semi\"");
      }
      TrainConfig tc = c.train;
      tc.loss = preset.loss;
      tc.mode = preset.mode;
      tc.include_target = preset.include_target;
      try {
        tc.validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError("train", e.what());
      }
    }
  } else {
    TrainConfig tc = c.train;
    tc.loss = Cmsf{c.crossmodal.k};
    tc.mode = CrossModal{};
    try {
      tc.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("train", e.what());
    }
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot read " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  const auto& t = c.train;
  const auto& x = c.crossmodal;
  return json{
      {"kind", c.kind},
      {"dataset",
       {{"classes", d.classes},
        {"modes_per_class", d.modes_per_class},
        {"latent_dim", d.latent_dim},
        {"ambient_dim", d.ambient_dim},
        {"within_mode_std", d.within_mode_std},
        {"ambient_noise_std", d.ambient_noise_std},
        {"samples", d.samples},
        {"test_fraction", c.test_fraction}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"bank_capacity", t.bank_capacity},
        {"lr0", t.lr0},
        {"sgd_momentum", t.sgd_momentum},
        {"weight_decay", t.weight_decay},
        {"momentum_m", t.momentum_m},
        {"warmup", t.warmup},
        {"warmup_epochs", t.warmup_epochs},
        {"trunk_hidden", t.trunk_hidden},
        {"predictor_hidden", t.predictor_hidden},
        {"supcon_temperature", c.supcon_temperature},
        {"protonw_temperature", c.protonw_temperature},
        {"supcon_momentum_m", c.supcon_momentum_m},
        {"target_aug", augment_json(t.target_aug)},
        {"online_aug", augment_json(t.online_aug)}}},
      {"methods", c.methods},
      {"constraint", c.constraint},
      {"noise_rates", c.noise_rates},
      {"label_fractions", c.label_fractions},
      {"seed", c.seed},
      {"repeats", c.repeats},
      {"evaluations", c.evaluations},
      {"knn_k", c.knn_k},
      {"purity_k", c.purity_k},
      {"probe",
       {{"lr0", c.probe.lr0},
        {"momentum", c.probe.momentum},
        {"weight_decay", c.probe.weight_decay},
        {"epochs", c.probe.epochs},
        {"batch_size", c.probe.batch_size},
        {"milestones", c.probe.milestones}}},
      {"crossmodal",
       {{"dim_a", x.dim_a},
        {"dim_b", x.dim_b},
        {"noise_a", x.noise_a},
        {"noise_b", x.noise_b},
        {"pretrain_epochs", x.pretrain_epochs},
        {"continue_epochs", x.continue_epochs},
        {"pretrain_k", x.pretrain_k},
        {"k", x.k},
        {"n_values", x.n_values},
        {"rounds", x.rounds}}},
      {"output_dir", c.output_dir},
      {"checkpoint_every", c.checkpoint_every},
      {"dump_datasets", c.dump_datasets},
  };
}

void write_metrics_header(std::ostream& os) {
  os << "run_id,method,noise_rate,label_fraction,epoch,metric,value,seed\n";
}

void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  os << r.run_id << ',' << r.method << ',' << fmt17(r.noise_rate) << ',' << fmt17(r.label_fraction) << ','
     << r.epoch << ',' << r.metric << ',' << fmt17(r.value) << ',' << r.seed << '\n';
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "run_id,method,noise_rate,label_fraction,epoch,metric,value,seed") {
    throw std::runtime_error(path.string() + ": missing metrics header");
  }
  std::vector<MetricsRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected 8 fields");
    }
    try {
      rows.push_back(MetricsRow{f[0], f[1], std::stod(f[2]), std::stod(f[3]), std::stoul(f[4]), f[5],
                                std::stod(f[6]), std::stoull(f[7])});
    } catch (const std::logic_error&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  return rows;
}

RunOutcome run_experiment(const ExperimentConfig& config_in, const RunOptions& options) {
  ExperimentConfig config = config_in;
  if (options.seed) config.seed = *options.seed;
  if (options.output_dir) config.output_dir = options.output_dir->string();
  validate_config(config);

  const fs::path out(config.output_dir);
  const fs::path ckpt_dir = out / "checkpoints";
  fs::create_directories(ckpt_dir);
  {
    std::ofstream echo(out / "config-echo.json");
    echo << to_json(config).dump(2) << '\n';
  }

  const auto cells = build_cells(config);
  if (config.dump_datasets && config.kind == "sweep") {
    fs::create_directories(out / "datasets");
    std::set<std::tuple<double, double, std::uint64_t>> done;
    for (const auto& cell : cells) {
      if (!done.insert({cell.noise, cell.fraction, cell.seed}).second) continue;
      const auto d = sweep_data(config, cell.noise, cell.fraction, cell.seed);
      const std::string id = data_id(cell.noise, cell.fraction, cell.seed);
      write_dataset_csv(out / "datasets" / (id + "_train.csv"), d.train);
      write_dataset_csv(out / "datasets" / (id + "_test.csv"), d.test);
    }
  }

  std::vector<CellResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const Cell& cell = cells[i];
      try {
        results[i].rows = config.kind == "sweep" ? run_sweep_cell(config, cell, ckpt_dir)
                                                 : run_crossmodal_cell(config, cell, ckpt_dir);
      } catch (const NumericError& e) {
        results[i].numeric_error = e.what();
      } catch (const std::exception& e) {
        results[i].error = e.what();
      }
      if (options.log) {
        std::lock_guard lock(log_mutex);
        *options.log << "[" << (i + 1) << "/" << cells.size() << "] "
                     << (cell.method.empty() ? "crossmodal" : cell.method) << " noise=" << fmt_short(cell.noise)
                     << " labels=" << fmt_short(cell.fraction) << " seed=" << cell.seed
                     << (results[i].numeric_error.empty() && results[i].error.empty() ? " done" : " FAILED")
                     << std::endl;
      }
    }
  };
  const std::size_t threads = std::min(resolve_threads(options.threads), std::max<std::size_t>(cells.size(), 1));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  RunOutcome outcome;
  std::ofstream metrics(out / "metrics.csv");
  write_metrics_header(metrics);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (const auto& row : results[i].rows) write_metrics_row(metrics, row);
    outcome.rows.insert(outcome.rows.end(), results[i].rows.begin(), results[i].rows.end());
    if (outcome.exit_code != kExitOk) continue;
    if (!results[i].numeric_error.empty()) {
      outcome.exit_code = kExitNumeric;
      outcome.message = "numeric failure: " + results[i].numeric_error;
    } else if (!results[i].error.empty()) {
      throw std::runtime_error("cell " + std::to_string(i + 1) + " failed: " + results[i].error);
    }
  }
  return outcome;
}

RunOutcome run_experiment_file(const fs::path& path, const RunOptions& options) {
  try {
    return run_experiment(load_config(path), options);
  } catch (const ConfigError& e) {
    return RunOutcome{kExitConfig, std::string("config error at ") + e.what(), {}};
  }
}

namespace {

using CellKey = std::tuple<double, double, std::string>;                 // noise, fraction, method
using MetricKey = std::tuple<double, double, std::string, std::string>;  // + metric

struct Stat {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t n = 0;
};

struct RunTable {
  std::set<CellKey> cells;
  std::map<MetricKey, Stat> stats;
};

RunTable aggregate(const std::vector<MetricsRow>& rows) {
  // Last epoch per (run, metric).
  std::map<std::pair<std::string, std::string>, const MetricsRow*> last;
  RunTable t;
  for (const auto& r : rows) {
    t.cells.insert({r.noise_rate, r.label_fraction, r.method});
    if (r.metric == "train_loss" || r.metric == "lr") continue;
    auto& slot = last[{r.run_id, r.metric}];
    if (!slot || r.epoch >= slot->epoch) slot = &r;
  }
  std::map<MetricKey, std::vector<double>> values;
  for (const auto& [key, r] : last) values[{r->noise_rate, r->label_fraction, r->method, r->metric}].push_back(r->value);
  for (const auto& [key, vs] : values) {
    Stat s;
    s.n = vs.size();
    s.lo = *std::min_element(vs.begin(), vs.end());
    s.hi = *std::max_element(vs.begin(), vs.end());
    for (double v : vs) s.mean += v;
    s.mean /= static_cast<double>(vs.size());
    t.stats[key] = s;
  }
  return t;
}

std::string pct(double v) { return fmt_short(v * 100.0) + "%"; }

std::string fixed4(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string signed4(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%+.4f", v);
  return buf;
}

constexpr double kGainMargin = 0.02;
constexpr double kParityMargin = 0.05;
constexpr double kMonotoneSlack = 0.01;

void directional_verdicts(const RunTable& t, std::vector<Verdict>& out) {
  auto find = [&](double n, double f, const std::string& m, const std::string& metric) -> const Stat* {
    const auto it = t.stats.find({n, f, m, metric});
    return it == t.stats.end() ? nullptr : &it->second;
  };
  std::set<std::pair<double, double>> grid;
  std::set<std::string> methods;
  for (const auto& [n, f, m] : t.cells) {
    grid.insert({n, f});
    methods.insert(m);
  }
  for (const auto& [n, f] : grid) {
    const std::string where = " at " + pct(n) + " noise" + (f < 1.0 ? ", " + pct(f) + " labels" : "");
    const Stat* top = find(n, f, "cmsf-top10", "knn_acc");
    for (const std::string other : {"cmsf-topall", "xent"}) {
      const Stat* o = find(n, f, other, "knn_acc");
      if (!top || !o) continue;
      if (n == 0.0) {
        out.push_back({"cmsf-top10 within 5 points of " + other + where,
                       std::fabs(top->mean - o->mean) <= kParityMargin});
      } else {
        out.push_back({"cmsf-top10 > " + other + " by 2 points" + where, top->mean - o->mean > kGainMargin});
      }
    }
  }
  std::set<double> noises;
  for (const auto& [n, f] : grid) noises.insert(n);
  for (const auto& m : methods) {
    for (double n : noises) {
      std::vector<std::pair<double, double>> curve;
      for (const auto& [gn, f] : grid) {
        if (gn != n) continue;
        if (const Stat* s = find(n, f, m, "knn_acc")) curve.push_back({f, s->mean});
      }
      if (curve.size() < 2) continue;
      bool ok = true;
      for (std::size_t i = 1; i < curve.size(); ++i) ok = ok && curve[i].second >= curve[i - 1].second - kMonotoneSlack;
      out.push_back({m + " knn_acc non-decreasing over label fractions at " + pct(n) + " noise", ok});
    }
  }
  // Cross-modal variants.
  std::vector<std::pair<std::size_t, std::string>> cross;
  std::string msf;
  for (const auto& m : methods) {
    if (m.rfind("cross-n", 0) == 0) cross.push_back({std::stoul(m.substr(7)), m});
    if (m.rfind("msf-k", 0) == 0) msf = m;
  }
  std::sort(cross.rbegin(), cross.rend());
  for (const auto& [n, f] : grid) {
    for (const auto& [cn, cm] : cross) {
      const Stat* a = find(n, f, cm, "recall_at_1");
      const Stat* b = msf.empty() ? nullptr : find(n, f, msf, "recall_at_1");
      if (a && b) out.push_back({cm + " > " + msf + " recall_at_1 by 2 points", a->mean - b->mean > kGainMargin});
    }
    for (std::size_t i = 0; i + 1 < cross.size(); ++i) {
      const Stat* a = find(n, f, cross[i].second, "recall_at_1");
      const Stat* b = find(n, f, cross[i + 1].second, "recall_at_1");
      if (a && b) out.push_back({cross[i].second + " >= " + cross[i + 1].second + " recall_at_1", a->mean >= b->mean});
    }
  }
}

}  // namespace

CompareReport compare(const std::vector<fs::path>& paths) {
  if (paths.empty()) throw std::invalid_argument("compare: no inputs");
  std::vector<RunTable> tables;
  for (const auto& p : paths) {
    const fs::path file = fs::is_directory(p) ? p / "metrics.csv" : p;
    tables.push_back(aggregate(read_metrics_csv(file)));
  }
  std::ostringstream missing;
  for (std::size_t i = 1; i < tables.size(); ++i) {
    for (std::size_t side = 0; side < 2; ++side) {
      const auto& have = side == 0 ? tables[0].cells : tables[i].cells;
      const auto& other = side == 0 ? tables[i].cells : tables[0].cells;
      const auto& lacking = side == 0 ? paths[i] : paths[0];
      for (const auto& cell : have) {
        if (!other.count(cell)) {
          missing << "  " << lacking.string() << " lacks (noise " << fmt_short(std::get<0>(cell)) << ", labels "
                  << fmt_short(std::get<1>(cell)) << ", " << std::get<2>(cell) << ")\n";
        }
      }
    }
  }
  if (!missing.str().empty()) throw std::runtime_error("compare: sweep grids differ:\n" + missing.str());

  CompareReport report;
  std::ostringstream md;
  md << "| noise | labels | method | metric |";
  for (std::size_t i = 0; i < paths.size(); ++i) md << " run " << i + 1 << (i ? " (delta)" : "") << " |";
  md << "\n|---:|---:|---|---|";
  for (std::size_t i = 0; i < paths.size(); ++i) md << "---:|";
  md << '\n';
  for (const auto& [key, s0] : tables[0].stats) {
    md << "| " << pct(std::get<0>(key)) << " | " << pct(std::get<1>(key)) << " | " << std::get<2>(key) << " | "
       << std::get<3>(key) << " |";
    for (std::size_t i = 0; i < tables.size(); ++i) {
      const auto it = tables[i].stats.find(key);
      if (it == tables[i].stats.end()) {
        md << " - |";
        continue;
      }
      const Stat& s = it->second;
      md << ' ' << fixed4(s.mean) << " ± " << fixed4((s.hi - s.lo) / 2.0) << " (n=" << s.n << ")";
      if (i > 0) md << " (" << signed4(s.mean - s0.mean) << ")";
      md << " |";
    }
    md << '\n';
  }
  directional_verdicts(tables[0], report.verdicts);
  if (!report.verdicts.empty()) md << '\n';
  for (const auto& v : report.verdicts) md << v.description << ": " << (v.pass ? "PASS" : "FAIL") << '\n';
  report.markdown = md.str();
  return report;
}

}  // namespace cmsf
