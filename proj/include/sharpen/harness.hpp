#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sharpen/config.hpp"
#include "sharpen/metrics.hpp"
#include "sharpen/rewards.hpp"

namespace sharpen {

/// One row of metrics.csv. NaN marks a value not measured at that step.
struct MetricRecord {
  int step = 0;
  double wall_seconds = 0.0;  // written to timing.csv so metrics.csv stays reproducible
  double loss = 0.0;
  double mean_reward = 0.0;
  double selected_reward = 0.0;
  double reward_std = 0.0;
  double eval_reward = 0.0;
  double eval_mmd2 = 0.0;
  std::vector<double> eval_modes;  // one per mixture mean, then the outside share
  double eval_loss = 0.0;
  double nfe = 0.0;  // evaluation NFE per sample
};

struct EvalResult {
  Array samples;  // standardized coordinates
  std::vector<double> rewards;
  MeanStd reward;
  std::optional<double> mmd2;
  std::optional<ModeFractions> modes;
  double nfe_per_sample = 0.0;
};

struct AssertionOutcome {
  AssertionSpec spec;
  double actual = 0.0;
  bool passed = false;
};

struct FrontierPoint {
  std::string method;
  int n = 1;
  double nfe_per_sample = 0.0;
  double mean_reward = 0.0;
  double sem = 0.0;
};

struct RunResult {
  std::filesystem::path directory;
  std::vector<MetricRecord> records;
  std::map<std::string, double> summary;
  std::vector<FrontierPoint> frontier;
  std::vector<AssertionOutcome> assertions;

  bool passed() const;
};

/// Everything an experiment reads: datasets in standardized coordinates.
struct ExperimentData {
  Dataset train;
  Dataset heldout;
};

ExperimentData load_experiment_data(const ExperimentConfig& config);
std::unique_ptr<RewardModel> make_reward(const ExperimentConfig& config, const Dataset& data);
std::vector<Condition> make_prompts(PromptMode mode, std::size_t count, int num_classes);

EvalResult evaluate(const Denoiser& model, const Schedule& schedule, const ExperimentConfig& config,
                    const ExperimentData& data, RewardModel& reward, Rng& rng);

/// Held-out epsilon loss on a fixed probe of `count` (x0, t, eps) triples.
double heldout_epsilon_loss(const Denoiser& model, const Schedule& schedule, const Dataset& heldout,
                            std::size_t count, std::uint64_t seed);

/// Exponential smoothing started at the first value.
std::vector<double> smooth(std::span<const double> values, double factor);

/// Runs one experiment into config.output. Throws on any module error.
RunResult run_experiment(const ExperimentConfig& config);

/// Child runs with `key` set to each value under <output>/<key>=<value>,
/// plus <output>/summary.csv with one row per value.
std::vector<RunResult> ablate(const ExperimentConfig& config, const std::string& key,
                              const std::vector<std::string>& values);

std::vector<AssertionOutcome> check_assertions(std::span<const AssertionSpec> specs,
                                               const std::map<std::string, double>& summary);

/// Reads metrics.csv (and frontier.csv when present) and writes CSV series
/// plus SVG plots for loss, reward mean +- std and reward vs NFE.
std::vector<std::filesystem::path> plot_emit(const std::filesystem::path& run_dir);

}  // namespace sharpen
