#include "sharpen/baselines.hpp"

#include "sharpen/error.hpp"

namespace sharpen {

StepStats standard_finetune_step(Denoiser& model, OptimState& state, const Schedule& schedule, const Array& x0,
                                 std::span<const Condition> conds, const TrainConfig& config, Rng& rng) {
  TrainConfig single = config;
  single.n = 1;
  single.m = 1;
  single.validate(schedule);
  if (x0.rows() != conds.size()) throw ShapeError("standard_finetune_step: one condition per clean sample required");
  const auto [lo, hi] = single.start_range(schedule);
  const std::size_t rows = x0.rows(), d = x0.cols();
  Array states({rows, d});
  Array targets({rows, d});
  std::vector<double> ts(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const int t = uniform_int(rng, lo, hi);
    Rng stream(draw_seed(rng));
    const Array eps = standard_normal({1, d}, stream);
    const double a = schedule.alpha_at(t), s = schedule.sigma_at(t);
    for (std::size_t j = 0; j < d; ++j) {
      states(i, j) = a * x0(i, j) + s * eps[j];
      targets(i, j) = eps[j];
    }
    ts[i] = static_cast<double>(t);
  }
  Tape tape;
  const auto params = model.bind(tape, true);
  const Var loss = epsilon_loss(tape, params, model, states, ts, conds, targets);
  StepStats stats;
  stats.loss = loss.value().item();
  apply_update(model, state, config.adam, tape, params, loss);
  return stats;
}

TrainConfig vanilla_dpo_config(TrainConfig base) {
  base.n = 2;
  base.lambda = 0.0;
  base.reward_modulation = RewardModulation::off;
  return base;
}

std::vector<BestOfN> best_of_n_batch(const Denoiser& model, std::span<const Condition> prompts, int n,
                                     RewardModel& reward, const Schedule& schedule, Rng& rng, double guidance) {
  if (n < 1) throw ConfigError("best_of_n: n must be >= 1");
  const std::size_t count = static_cast<std::size_t>(n);
  const std::size_t d = static_cast<std::size_t>(model.config().data_dim);
  std::vector<Condition> conds;
  for (const auto& c : prompts) {
    model.validate_condition(c);
    conds.insert(conds.end(), count, c);
  }
  const Array noise = standard_normal({conds.size(), d}, rng);
  const Array samples = generate_from(model, schedule, noise, conds, guidance);
  const std::vector<double> scores = reward.score_rows(samples, conds);
  std::vector<BestOfN> out(prompts.size());
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    BestOfN& r = out[p];
    r.rewards.assign(scores.begin() + static_cast<std::ptrdiff_t>(p * count),
                     scores.begin() + static_cast<std::ptrdiff_t>((p + 1) * count));
    r.index = select_best(std::span<const double>(r.rewards));
    r.sample = Array::row(samples.row_span(p * count + r.index));
    // One chain is the sample itself; the other n - 1 are search overhead.
    const std::uint64_t chain =
        static_cast<std::uint64_t>(schedule.T) * static_cast<std::uint64_t>(guided_cost(prompts[p], guidance));
    r.ledger.generation = chain;
    r.ledger.search = chain * (count - 1);
    r.ledger.samples = 1;
  }
  return out;
}

BestOfN best_of_n_inference(const Denoiser& model, Condition c, int n, RewardModel& reward, const Schedule& schedule,
                            Rng& rng, double guidance) {
  const Condition prompts[] = {c};
  return std::move(best_of_n_batch(model, prompts, n, reward, schedule, rng, guidance).front());
}

}  // namespace sharpen
