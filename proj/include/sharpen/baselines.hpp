#pragma once

#include <span>
#include <vector>

#include "sharpen/denoiser.hpp"
#include "sharpen/nfe.hpp"
#include "sharpen/rewards.hpp"
#include "sharpen/trajectory.hpp"

namespace sharpen {

/// Single-timestep epsilon-loss fine-tuning step on clean data. The start
/// index is drawn from the range the trajectory trainers use for m = 1, then
/// a seed whose generator supplies the noise, so on matched seeds this is the
/// n = 1, m = 1 case of sft_sharpen_step.
StepStats standard_finetune_step(Denoiser& model, OptimState& state, const Schedule& schedule, const Array& x0,
                                 std::span<const Condition> conds, const TrainConfig& config, Rng& rng);

/// Plain trajectory-level preference training: two candidates, no reward modulation.
TrainConfig vanilla_dpo_config(TrainConfig base);

struct BestOfN {
  Array sample;  // 1 x D
  std::size_t index = 0;
  std::vector<double> rewards;  // per candidate
  NfeLedger ledger;
};

/// n full samples from independent initial noises, scored on the final
/// sample, argmax returned (ties to the lowest index).
BestOfN best_of_n_inference(const Denoiser& model, Condition c, int n, RewardModel& reward, const Schedule& schedule,
                            Rng& rng, double guidance = 1.0);

/// Same for many prompts at once; noise for prompt p is drawn before prompt p+1.
std::vector<BestOfN> best_of_n_batch(const Denoiser& model, std::span<const Condition> prompts, int n,
                                     RewardModel& reward, const Schedule& schedule, Rng& rng, double guidance = 1.0);

}  // namespace sharpen
