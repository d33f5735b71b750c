// cmsf command-line driver: run experiments, compare metric files, report purity.

#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cmsf/datagen.hpp"
#include "cmsf/encoder.hpp"
#include "cmsf/eval.hpp"
#include "cmsf/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Constrained mean shift representation learning at desk scale"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run an experiment described by a JSON config");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "Override the config seed");
  run->add_option("--out", out_dir, "Override the output directory");
  run->add_flag("--quiet", quiet, "Suppress per-cell progress lines");

  std::vector<std::string> compare_paths;
  auto* cmp = app.add_subcommand("compare", "Compare metrics.csv files or run directories");
  cmp->add_option("paths", compare_paths, "metrics.csv files or run directories")->required();

  std::string checkpoint, dataset;
  std::size_t k = 10;
  std::uint64_t purity_seed = 0;
  auto* pur = app.add_subcommand("purity", "Top-k vs random-k purity inside the label-constrained set");
  pur->add_option("--checkpoint", checkpoint, "Encoder checkpoint")->required()->check(CLI::ExistingFile);
  pur->add_option("--dataset", dataset, "Dataset CSV")->required()->check(CLI::ExistingFile);
  pur->add_option("--k", k, "Neighbor count")->check(CLI::PositiveNumber);
  pur->add_option("--seed", purity_seed, "Seed for the random-k draw");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : cmsf::kExitConfig;
  }

  try {
    if (*run) {
      cmsf::RunOptions opts;
      opts.seed = seed;
      if (out_dir) opts.output_dir = std::filesystem::path(*out_dir);
      if (!quiet) opts.log = &std::cerr;
      const auto outcome = cmsf::run_experiment_file(config_path, opts);
      if (outcome.exit_code != cmsf::kExitOk) std::cerr << "cmsf: " << outcome.message << '\n';
      return outcome.exit_code;
    }
    if (*cmp) {
      std::vector<std::filesystem::path> paths(compare_paths.begin(), compare_paths.end());
      const auto report = cmsf::compare(paths);
      std::cout << report.markdown;
      return 0;
    }
    if (*pur) {
      const auto encoder = cmsf::load_checkpoint(checkpoint);
      const auto data = cmsf::read_dataset_csv(dataset);
      cmsf::purity_report(encoder, data, k, purity_seed).write_markdown(std::cout);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "cmsf: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
