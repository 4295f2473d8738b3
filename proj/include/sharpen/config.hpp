#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sharpen/data.hpp"
#include "sharpen/denoiser.hpp"
#include "sharpen/schedule.hpp"
#include "sharpen/trajectory.hpp"

namespace sharpen {

inline constexpr int kConfigVersion = 1;

enum class TrainerKind { pretrain, sft, rlhf, standard, dpo_vanilla, best_of_n, eval };
TrainerKind parse_trainer_kind(const std::string& name);
std::string to_string(TrainerKind kind);

/// Which conditions rollouts and evaluation use: all null, or class labels.
enum class PromptMode { null, labels };
PromptMode parse_prompt_mode(const std::string& name);
std::string to_string(PromptMode mode);

struct DatasetConfig {
  DatasetKind kind = DatasetKind::gmm2;
  std::size_t n = 20000;
  std::size_t heldout = 2000;
  std::uint64_t seed = 0;
};

struct ModelConfig {
  int hidden = 128;
  int depth = 3;
  int time_dim = 64;
  int cond_dim = 16;
  bool conditional = true;
  std::uint64_t init_seed = 0;
  std::string checkpoint;  // starting point for every trainer except pretrain
};

struct RewardConfig {
  std::string kind = "mode_distance";  // mode_distance | target_logpdf | classifier | external
  int mode = 0;                        // mixture component used when `target` is empty
  std::vector<double> target;          // raw coordinates
  std::string classifier;              // checkpoint; trained on the dataset when empty
  int target_class = -1;               // -1: use the condition
  std::string endpoint;
  int timeout_ms = 2000;
};

struct TrainerConfig {
  TrainerKind kind = TrainerKind::rlhf;
  TrainConfig train;
  PromptMode prompts = PromptMode::null;
  int dump_every = 100;  // trajectory dump interval in steps; 0 disables
};

struct EvalConfig {
  int every = 0;  // 0: evaluate only before and after training
  std::size_t samples = 2000;
  double guidance = 1.0;
  PromptMode prompts = PromptMode::null;
  bool mmd = true;
  double radius = 3.0;  // mode ball radius in component stds
  std::size_t loss_samples = 0;  // held-out epsilon-loss probe size; 0 disables
  int loss_every = 10;
  std::vector<int> best_of_n;  // frontier points evaluated on the starting model
  double smoothing = 0.99;
};

struct AssertionSpec {
  std::string metric;
  std::string op;  // one of < <= > >= ==
  double value = 0.0;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::string id = "run";
  std::uint64_t seed = 0;
  std::string output = "runs/run";
  DatasetConfig dataset;
  ScheduleKind schedule = ScheduleKind::cosine;
  int T = kDefaultSteps;
  ModelConfig model;
  PretrainConfig pretrain;
  TrainerConfig trainer;
  RewardConfig reward;
  EvalConfig eval;
  std::vector<AssertionSpec> assertions;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Strict parse: keys must exist in the schema, types must match.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& config, const std::filesystem::path& path);

/// Applies `dotted.key=value`. The value is read as JSON when it parses,
/// as a comma list for array-valued keys, otherwise as a string.
/// Unknown keys and type mismatches throw ConfigError naming the key.
void apply_override(nlohmann::json& config, const std::string& assignment);
void apply_override(nlohmann::json& config, const std::string& key, const std::string& value);

DenoiserConfig denoiser_config(const ExperimentConfig& config, int num_classes);

}  // namespace sharpen
