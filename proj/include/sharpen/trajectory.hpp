#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sharpen/denoiser.hpp"
#include "sharpen/rewards.hpp"
#include "sharpen/schedule.hpp"

namespace sharpen {

enum class SamplerKind { ddim, ancestral };
SamplerKind parse_sampler_kind(const std::string& name);
std::string to_string(SamplerKind kind);

/// m reverse steps taken from a noised start state x_t.
///
/// timesteps[k] is the grid index of states[k]; the step k departs from
/// states[k-1] (or `start` for k = 0). rewards[k] scores states[k].
struct Trajectory {
  int t_start = 0;
  Condition cond;
  SamplerKind sampler = SamplerKind::ddim;
  std::uint64_t seed = 0;  // drives the start noise and every step noise
  Array start;             // 1 x D
  std::vector<int> timesteps;
  std::vector<Array> states;  // each 1 x D
  std::vector<double> rewards;
  std::optional<std::vector<double>> log_probs;

  int steps() const { return static_cast<int>(states.size()); }
  /// Grid index the k-th step departs from.
  int source_index(int k) const { return k == 0 ? t_start : timesteps[static_cast<std::size_t>(k - 1)]; }
  const Array& source_state(int k) const { return k == 0 ? start : states[static_cast<std::size_t>(k - 1)]; }
};

struct RolloutSpec {
  SamplerKind sampler = SamplerKind::ddim;
  double guidance = 1.0;
  EstimatorMode estimator = EstimatorMode::tweedie();
  double eta = 1.0;  // ancestral variance scale
};

/// n independent rollouts of m steps from forward_noise(x_clean, t, eps_i).
/// Each trajectory owns a seed drawn from `rng`; its start noise and step
/// noises come from a generator seeded with it, so replay is exact.
std::vector<Trajectory> sample_trajectories(const Array& x_clean, Condition c, int t, int n, int m,
                                            const RolloutSpec& spec, const Denoiser& model,
                                            const Schedule& schedule, RewardModel& reward, Rng& rng);

/// Re-runs one rollout from its seed record.
Trajectory replay_trajectory(const Array& x_clean, const Trajectory& record, const RolloutSpec& spec,
                             const Denoiser& model, const Schedule& schedule, RewardModel& reward);

/// Plain sum of the step rewards.
double aggregate_reward(const Trajectory& trajectory);
std::vector<double> aggregate_rewards(std::span<const Trajectory> trajectories);

/// Argmax, ties to the lowest index.
std::size_t select_best(std::span<const double> aggregates);
std::size_t select_best(std::span<const Trajectory> trajectories);
/// (argmax, argmin); the worst index is the lowest index distinct from the
/// best among the minimizers, so the pair is always distinct for n >= 2.
std::pair<std::size_t, std::size_t> select_best_worst(std::span<const double> aggregates);
std::pair<std::size_t, std::size_t> select_best_worst(std::span<const Trajectory> trajectories);

// ---------------------------------------------------------------------------

enum class RewardModulation { inside, off };

struct TrainConfig {
  int n = 3;
  int m = 3;
  /// Start index t is uniform over {m + min_end_index, ..., max_start_index}
  /// (max_start_index <= 0 means T), so the last state is at least min_end_index.
  int min_end_index = 1;
  int max_start_index = 0;
  AdamConfig adam{1e-4, 0.0, 0.99, 1e-8, 0.0};
  double beta = 0.1;
  double lambda = 1.0;
  RewardModulation reward_modulation = RewardModulation::inside;
  double guidance = 5.0;
  EstimatorMode estimator = EstimatorMode::tweedie();
  SamplerKind sft_sampler = SamplerKind::ddim;
  SamplerKind rlhf_sampler = SamplerKind::ancestral;
  double eta = 1.0;
  std::uint64_t seed = 0;
  int batch_size = 8;
  int steps = 1000;
  int reference_refresh = 0;  // steps between reference refreshes; 0 keeps it frozen

  void validate(const Schedule& schedule) const;
  std::pair<int, int> start_range(const Schedule& schedule) const;
  double effective_lambda() const { return reward_modulation == RewardModulation::off ? 0.0 : lambda; }
};

/// Per-step diagnostics shared by all trainers.
struct StepStats {
  double loss = 0.0;
  double mean_aggregate = 0.0;      // over every candidate in the batch
  double selected_aggregate = 0.0;  // over the selected (best) trajectories
  double candidate_std = 0.0;       // std of aggregates across candidates, averaged over examples
  std::vector<std::vector<Trajectory>> candidates;  // per example
  std::vector<std::pair<std::size_t, std::size_t>> selections;  // (best, worst) per example
};

/// Supervised targets gathered from the selected trajectories: one row per
/// departure state of each selected trajectory.
struct SftBatch {
  Array states;
  std::vector<double> timesteps;
  std::vector<Condition> conds;
  Array targets;
  std::vector<double> weights;
  StepStats stats;
};

/// Rollouts (deterministic sampler) and best-trajectory selection per example.
/// The implied noise at every departure state x_k is (x_k - alpha_k x0) / sigma_k
/// for the example's clean x0.
SftBatch collect_sft(const Denoiser& model, const Schedule& schedule, const Array& x0, std::span<const Condition> conds,
                     const TrainConfig& config, RewardModel& reward, Rng& rng);
Var sft_loss(Tape& tape, std::span<const Var> params, const Denoiser& model, const SftBatch& batch);

StepStats sft_sharpen_step(Denoiser& model, OptimState& state, const Schedule& schedule, const Array& x0,
                           std::span<const Condition> conds, const TrainConfig& config, RewardModel& reward, Rng& rng);

struct PreferencePair {
  Trajectory winner;
  Trajectory loser;
  double reward_gap = 0.0;
};

struct RlhfBatch {
  std::vector<PreferencePair> pairs;
  StepStats stats;
};

/// Per prompt: generate a clean sample with the current model, noise it at a
/// random t into n candidates, roll each out with the stochastic sampler and
/// keep the best/worst pair.
RlhfBatch collect_rlhf(const Denoiser& model, const Schedule& schedule, std::span<const Condition> prompts,
                       const TrainConfig& config, RewardModel& reward, Rng& rng);

/// Summed transition log-ratio log p_model - log p_reference over the steps of
/// a trajectory (exact Gaussian transition densities).
double trajectory_log_ratio(const Denoiser& model, const Denoiser& reference, const Schedule& schedule,
                            const Trajectory& trajectory, double guidance, double eta);

/// Mean over pairs of -log sigmoid(beta (D_w - D_l) - lambda (R_w - R_l)).
Var rlhf_loss(Tape& tape, std::span<const Var> params, const Denoiser& model, const Denoiser& reference,
              const Schedule& schedule, const RlhfBatch& batch, const TrainConfig& config);

StepStats rlhf_sharpen_step(Denoiser& model, const Denoiser& reference, OptimState& state, const Schedule& schedule,
                            std::span<const Condition> prompts, const TrainConfig& config, RewardModel& reward,
                            Rng& rng);

/// Gradient of `loss` w.r.t. every bound parameter followed by one AdamW update.
void apply_update(Denoiser& model, OptimState& state, const AdamConfig& adam, const Tape& tape,
                  std::span<const Var> params, Var loss);

}  // namespace sharpen
