#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmsf/datagen.hpp"
#include "cmsf/eval.hpp"
#include "cmsf/trainer.hpp"

namespace cmsf {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

// Invalid experiment configuration. path() is a JSON path such as
// "train.batch_size" or "noise_rates[2]".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::runtime_error(path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// Named training recipes. cmsf-top<K> and cmsf-topall use the sweep's
// constraint ("label" or "semi"); msf is unconstrained top-10, byol is k=1
// with the target included.
struct MethodPreset {
  std::string name;
  LossKind loss;
  ConstraintMode mode;
  bool include_target = true;
  bool needs_labels = false;  // every training sample must carry a label
};
MethodPreset method_preset(const std::string& name, const std::string& constraint = "label",
                           double supcon_temperature = 0.1, double protonw_temperature = 0.1);

struct CrossModalConfig {
  std::size_t dim_a = 32;
  std::size_t dim_b = 32;
  double noise_a = 0.3;
  double noise_b = 0.1;
  std::size_t pretrain_epochs = 20;
  std::size_t continue_epochs = 20;
  std::size_t pretrain_k = 10;
  std::size_t k = 5;
  std::vector<std::size_t> n_values{10, 5};
  std::size_t rounds = 1;  // B training phases; A is refreshed against B between them
};

struct ExperimentConfig {
  std::string kind = "sweep";  // sweep | crossmodal
  SyntheticSpec dataset;       // its seed is replaced by the cell seed
  double test_fraction = 0.25;
  TrainConfig train;           // loss, mode and include_target come from the method
  double supcon_temperature = 0.1;
  double protonw_temperature = 0.1;
  double supcon_momentum_m = 0.999;  // target EMA rate used by the supcon method
  std::vector<std::string> methods{"cmsf-top10"};
  std::string constraint = "label";  // label | semi
  std::vector<double> noise_rates{0.0};
  std::vector<double> label_fractions{1.0};
  std::uint64_t seed = 0;
  std::size_t repeats = 1;
  // knn, raw_knn, linear_probe, purity, recall_at_1, transfer
  std::vector<std::string> evaluations{"knn"};
  std::size_t knn_k = kDefaultKnnK;
  std::size_t purity_k = 10;
  ProbeConfig probe;
  CrossModalConfig crossmodal;
  std::string output_dir = "runs/default";
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  bool dump_datasets = false;
};

// Rejects unknown fields and out-of-range values with a ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
// Every field, defaults resolved. parse_config(to_json(c)) reproduces c.
nlohmann::json to_json(const ExperimentConfig& config);
// Pre-flight checks that need more than one field.
void validate_config(const ExperimentConfig& config);

struct MetricsRow {
  std::string run_id;
  std::string method;
  double noise_rate = 0.0;
  double label_fraction = 1.0;
  std::size_t epoch = 0;
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;
};

// Header: run_id,method,noise_rate,label_fraction,epoch,metric,value,seed.
void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const MetricsRow& row);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> output_dir;
  // Parallel sweep cells; 0 reads CMSF_THREADS (default 1).
  std::size_t threads = 0;
  std::ostream* log = nullptr;
};

struct RunOutcome {
  int exit_code = kExitOk;
  std::string message;
  std::vector<MetricsRow> rows;
};

// Runs every cell, then writes metrics.csv, config-echo.json and checkpoints
// under the output directory. Numeric failures yield kExitNumeric.
RunOutcome run_experiment(const ExperimentConfig& config, const RunOptions& options = {});
// Loads and runs a config file; configuration problems yield kExitConfig.
RunOutcome run_experiment_file(const std::filesystem::path& path, const RunOptions& options = {});

struct Verdict {
  std::string description;
  bool pass = false;
};

struct CompareReport {
  std::string markdown;
  std::vector<Verdict> verdicts;
};

// Joins runs by (noise_rate, label_fraction, method) on the last-epoch value
// of every evaluation metric and aggregates seeds as mean and half-range.
// Paths may name a metrics.csv or a run directory. Throws std::runtime_error
// listing missing cells when the inputs cover different grids.
CompareReport compare(const std::vector<std::filesystem::path>& paths);

}  // namespace cmsf
