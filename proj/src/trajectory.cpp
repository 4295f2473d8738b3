#include "sharpen/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "sharpen/error.hpp"

namespace sharpen {

SamplerKind parse_sampler_kind(const std::string& name) {
  if (name == "ddim") return SamplerKind::ddim;
  if (name == "ancestral") return SamplerKind::ancestral;
  throw ConfigError("unknown sampler '" + name + "' (expected ddim or ancestral)");
}

std::string to_string(SamplerKind kind) { return kind == SamplerKind::ddim ? "ddim" : "ancestral"; }

namespace {

Array take_row(const Array& a, std::size_t r) {
  const auto row = a.row_span(r);
  return Array::row(row);
}

// Reward of every row at grid index t. For the tweedie estimator the eps
// already computed for the next transition is reused.
std::vector<double> score_states(RewardModel& reward, const Array& x, const Array& eps, int t,
                                 std::span<const Condition> conds, const RolloutSpec& spec, const Denoiser& model,
                                 const Schedule& schedule) {
  if (spec.estimator.kind == EstimatorMode::Kind::tweedie || t == 0) {
    const EpsPredictor cached = [&](const Array&, int) { return eps; };
    return reward.score_rows(estimate_x0(x, t, cached, schedule, EstimatorMode::tweedie()), conds);
  }
  return reward_state(reward, x, t, conds, model, schedule, spec.estimator, spec.guidance);
}

std::vector<Trajectory> rollout(const Array& x_clean, Condition c, int t, int m, std::span<const std::uint64_t> seeds,
                                const RolloutSpec& spec, const Denoiser& model, const Schedule& schedule,
                                RewardModel& reward) {
  if (x_clean.rows() != 1) throw ShapeError("rollout: x_clean must be a single row");
  if (m < 1) throw ConfigError("rollout: m must be >= 1");
  if (t - m < 0 || t > schedule.T) {
    throw ConfigError("rollout: start index " + std::to_string(t) + " with m = " + std::to_string(m) +
                      " leaves the grid 0.." + std::to_string(schedule.T));
  }
  model.validate_condition(c);
  const std::size_t n = seeds.size();
  const std::size_t d = x_clean.cols();
  std::vector<Rng> streams;
  streams.reserve(n);
  std::vector<Array> starts;
  for (std::size_t i = 0; i < n; ++i) {
    streams.emplace_back(seeds[i]);
    const Array eps = standard_normal({1, d}, streams.back());
    starts.push_back(forward_noise(x_clean, t, eps, schedule));
  }
  std::vector<Trajectory> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].t_start = t;
    out[i].cond = c;
    out[i].sampler = spec.sampler;
    out[i].seed = seeds[i];
    out[i].start = starts[i];
    if (spec.sampler == SamplerKind::ancestral && spec.eta > 0.0) out[i].log_probs.emplace();
  }
  const std::vector<Condition> conds(n, c);
  Array x = stack_rows(starts);
  std::vector<double> ts(n, static_cast<double>(t));
  Array eps = model.predict_eps_guided(x, ts, conds, spec.guidance);
  for (int k = 0; k < m; ++k) {
    const int from = t - k, to = t - k - 1;
    SamplerStep step;
    if (spec.sampler == SamplerKind::ddim) {
      step = ddim_step(x, eps, from, to, schedule);
    } else {
      std::vector<Array> noise_rows;
      for (std::size_t i = 0; i < n; ++i) noise_rows.push_back(standard_normal({1, d}, streams[i]));
      step = ancestral_step(x, eps, from, to, schedule, stack_rows(noise_rows), spec.eta);
    }
    x = std::move(step.next);
    if (!x.all_finite()) throw NumericError("rollout: non-finite state at index " + std::to_string(to));
    std::fill(ts.begin(), ts.end(), static_cast<double>(to));
    eps = model.predict_eps_guided(x, ts, conds, spec.guidance);
    const std::vector<double> scores = score_states(reward, x, eps, to, conds, spec, model, schedule);
    for (std::size_t i = 0; i < n; ++i) {
      out[i].timesteps.push_back(to);
      out[i].states.push_back(take_row(x, i));
      out[i].rewards.push_back(scores[i]);
      if (out[i].log_probs && step.log_prob) out[i].log_probs->push_back((*step.log_prob)[i]);
    }
  }
  return out;
}

double population_std(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double mu = 0.0;
  for (double x : v) mu += x;
  mu /= static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - mu) * (x - mu);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

void record_candidates(StepStats& stats, std::vector<Trajectory> candidates, std::pair<std::size_t, std::size_t> pick) {
  const auto agg = aggregate_rewards(candidates);
  stats.candidates.push_back(std::move(candidates));
  stats.selections.push_back(pick);
  stats.candidate_std += population_std(agg);
  for (double a : agg) stats.mean_aggregate += a;
  stats.selected_aggregate += agg[pick.first];
}

void finish_stats(StepStats& stats) {
  const std::size_t examples = stats.candidates.size();
  if (examples == 0) return;
  std::size_t total = 0;
  for (const auto& c : stats.candidates) total += c.size();
  stats.mean_aggregate /= static_cast<double>(total);
  stats.selected_aggregate /= static_cast<double>(examples);
  stats.candidate_std /= static_cast<double>(examples);
}

}  // namespace

std::vector<Trajectory> sample_trajectories(const Array& x_clean, Condition c, int t, int n, int m,
                                            const RolloutSpec& spec, const Denoiser& model,
                                            const Schedule& schedule, RewardModel& reward, Rng& rng) {
  if (n < 1) throw ConfigError("sample_trajectories: n must be >= 1");
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n));
  for (auto& s : seeds) s = draw_seed(rng);
  return rollout(x_clean, c, t, m, seeds, spec, model, schedule, reward);
}

Trajectory replay_trajectory(const Array& x_clean, const Trajectory& record, const RolloutSpec& spec,
                             const Denoiser& model, const Schedule& schedule, RewardModel& reward) {
  const std::uint64_t seed = record.seed;
  return rollout(x_clean, record.cond, record.t_start, record.steps(), std::span(&seed, 1), spec, model, schedule,
                 reward)
      .front();
}

double aggregate_reward(const Trajectory& trajectory) {
  if (trajectory.rewards.empty()) throw ConfigError("aggregate_reward: trajectory has no rewards");
  double total = 0.0;
  for (double r : trajectory.rewards) total += r;
  return total;
}

std::vector<double> aggregate_rewards(std::span<const Trajectory> trajectories) {
  std::vector<double> out;
  out.reserve(trajectories.size());
  for (const auto& tr : trajectories) out.push_back(aggregate_reward(tr));
  return out;
}

std::size_t select_best(std::span<const double> aggregates) {
  if (aggregates.empty()) throw ConfigError("select_best: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < aggregates.size(); ++i)
    if (aggregates[i] > aggregates[best]) best = i;
  return best;
}

std::size_t select_best(std::span<const Trajectory> trajectories) {
  const auto agg = aggregate_rewards(trajectories);
  return select_best(agg);
}

std::pair<std::size_t, std::size_t> select_best_worst(std::span<const double> aggregates) {
  if (aggregates.size() < 2) throw ConfigError("select_best_worst: need at least two candidates");
  const std::size_t best = select_best(aggregates);
  std::size_t worst = best == 0 ? 1 : 0;
  for (std::size_t i = 0; i < aggregates.size(); ++i)
    if (i != best && aggregates[i] < aggregates[worst]) worst = i;
  return {best, worst};
}

std::pair<std::size_t, std::size_t> select_best_worst(std::span<const Trajectory> trajectories) {
  const auto agg = aggregate_rewards(trajectories);
  return select_best_worst(agg);
}

// ---------------------------------------------------------------------------

void TrainConfig::validate(const Schedule& schedule) const {
  if (n < 1) throw ConfigError("n must be >= 1");
  if (m < 1) throw ConfigError("m must be >= 1");
  if (min_end_index < 0) throw ConfigError("min_end_index must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (beta <= 0.0) throw ConfigError("beta must be positive");
  if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
  if (guidance < 0.0) throw ConfigError("guidance must be non-negative");
  if (eta < 0.0) throw ConfigError("eta must be non-negative");
  if (adam.lr <= 0.0) throw ConfigError("learning rate must be positive");
  const auto [lo, hi] = start_range(schedule);
  if (lo > hi) {
    throw ConfigError("m = " + std::to_string(m) + " does not fit in T = " + std::to_string(schedule.T) +
                      " (start range " + std::to_string(lo) + ".." + std::to_string(hi) + " is empty)");
  }
}

std::pair<int, int> TrainConfig::start_range(const Schedule& schedule) const {
  const int hi = max_start_index > 0 ? std::min(max_start_index, schedule.T) : schedule.T;
  return {m + min_end_index, hi};
}

// ---------------------------------------------------------------------------

SftBatch collect_sft(const Denoiser& model, const Schedule& schedule, const Array& x0, std::span<const Condition> conds,
                     const TrainConfig& config, RewardModel& reward, Rng& rng) {
  config.validate(schedule);
  if (x0.rows() != conds.size()) throw ShapeError("collect_sft: one condition per clean sample required");
  const RolloutSpec spec{config.sft_sampler, config.guidance, config.estimator, config.eta};
  const auto [lo, hi] = config.start_range(schedule);
  SftBatch batch;
  std::vector<Array> state_rows, target_rows;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < x0.rows(); ++i) {
    const Array clean = take_row(x0, i);
    const int t = uniform_int(rng, lo, hi);
    auto candidates = sample_trajectories(clean, conds[i], t, config.n, config.m, spec, model, schedule, reward, rng);
    const auto agg = aggregate_rewards(candidates);
    const auto pick = agg.size() > 1 ? select_best_worst(agg) : std::pair<std::size_t, std::size_t>{0, 0};
    const std::size_t best = pick.first;
    const Trajectory& chosen = candidates[best];
    for (int k = 0; k < chosen.steps(); ++k) {
      const int tk = chosen.source_index(k);
      const double a = schedule.alpha_at(tk), s = schedule.sigma_at(tk);
      if (s < 1e-6) {
        ++skipped;
        continue;
      }
      const Array& xk = chosen.source_state(k);
      Array target(xk.shape());
      for (std::size_t j = 0; j < xk.size(); ++j) target[j] = (xk[j] - a * clean[j]) / s;
      state_rows.push_back(xk);
      target_rows.push_back(std::move(target));
      batch.timesteps.push_back(static_cast<double>(tk));
      batch.conds.push_back(conds[i]);
    }
    record_candidates(batch.stats, std::move(candidates), pick);
  }
  if (skipped > 0) std::cerr << "warning: skipped " << skipped << " states with sigma below 1e-6\n";
  if (state_rows.empty()) throw NumericError("collect_sft: every selected state was skipped");
  batch.states = stack_rows(state_rows);
  batch.targets = stack_rows(target_rows);
  finish_stats(batch.stats);
  return batch;
}

Var sft_loss(Tape& tape, std::span<const Var> params, const Denoiser& model, const SftBatch& batch) {
  return epsilon_loss(tape, params, model, batch.states, batch.timesteps, batch.conds, batch.targets, batch.weights);
}

void apply_update(Denoiser& model, OptimState& state, const AdamConfig& adam, const Tape& tape,
                  std::span<const Var> params, Var loss) {
  if (!std::isfinite(loss.value().item())) throw NumericError("loss is not finite");
  const Gradients grads = tape.backward(loss);
  std::vector<Array> g;
  g.reserve(params.size());
  for (const Var& p : params) g.push_back(grads.of(p));
  adamw_step(model.parameters(), g, state, adam, model.parameter_names());
}

StepStats sft_sharpen_step(Denoiser& model, OptimState& state, const Schedule& schedule, const Array& x0,
                           std::span<const Condition> conds, const TrainConfig& config, RewardModel& reward, Rng& rng) {
  SftBatch batch = collect_sft(model, schedule, x0, conds, config, reward, rng);
  Tape tape;
  const auto params = model.bind(tape, true);
  const Var loss = sft_loss(tape, params, model, batch);
  batch.stats.loss = loss.value().item();
  apply_update(model, state, config.adam, tape, params, loss);
  return std::move(batch.stats);
}

// ---------------------------------------------------------------------------

RlhfBatch collect_rlhf(const Denoiser& model, const Schedule& schedule, std::span<const Condition> prompts,
                       const TrainConfig& config, RewardModel& reward, Rng& rng) {
  config.validate(schedule);
  if (config.n < 2) throw ConfigError("preference training needs n >= 2 candidates");
  if (config.eta <= 0.0) throw ConfigError("preference training needs a stochastic sampler (eta > 0)");
  if (prompts.empty()) throw ConfigError("collect_rlhf: no prompts");
  const RolloutSpec spec{SamplerKind::ancestral, config.guidance, config.estimator, config.eta};
  const auto [lo, hi] = config.start_range(schedule);
  const std::size_t d = static_cast<std::size_t>(model.config().data_dim);
  const Array noise = standard_normal({prompts.size(), d}, rng);
  const Array clean = generate_from(model, schedule, noise, prompts, config.guidance);
  RlhfBatch batch;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const int t = uniform_int(rng, lo, hi);
    auto candidates =
        sample_trajectories(take_row(clean, i), prompts[i], t, config.n, config.m, spec, model, schedule, reward, rng);
    const auto agg = aggregate_rewards(candidates);
    const auto pick = select_best_worst(agg);
    batch.pairs.push_back({candidates[pick.first], candidates[pick.second], agg[pick.first] - agg[pick.second]});
    record_candidates(batch.stats, std::move(candidates), pick);
  }
  finish_stats(batch.stats);
  return batch;
}

namespace {

// Rows of every step of every trajectory in the batch, winner steps first
// within each pair. sign is +1 for winner steps and -1 for loser steps.
struct StepRows {
  Array sources;
  Array targets;  // x_next - x_coef * x_src
  Array eps_coef;  // rows x 1
  std::vector<double> timesteps;
  std::vector<Condition> conds;
  std::vector<double> variance;
  std::vector<double> sign;
  std::vector<std::size_t> pair;
};

StepRows gather_steps(const RlhfBatch& batch, const Schedule& schedule, double eta) {
  StepRows rows;
  std::vector<Array> src, tgt;
  std::vector<double> coef;
  for (std::size_t p = 0; p < batch.pairs.size(); ++p) {
    for (int side = 0; side < 2; ++side) {
      const Trajectory& tr = side == 0 ? batch.pairs[p].winner : batch.pairs[p].loser;
      for (int k = 0; k < tr.steps(); ++k) {
        const TransitionCoefficients c = ancestral_coefficients(tr.source_index(k), tr.timesteps[k], schedule, eta);
        if (!(c.variance > 0.0)) throw NumericError("transition variance is zero; log-ratio undefined");
        const Array& xs = tr.source_state(k);
        const Array& xn = tr.states[static_cast<std::size_t>(k)];
        Array target(xs.shape());
        for (std::size_t j = 0; j < xs.size(); ++j) target[j] = xn[j] - c.x_coef * xs[j];
        src.push_back(xs);
        tgt.push_back(std::move(target));
        coef.push_back(c.eps_coef);
        rows.timesteps.push_back(static_cast<double>(tr.source_index(k)));
        rows.conds.push_back(tr.cond);
        rows.variance.push_back(c.variance);
        rows.sign.push_back(side == 0 ? 1.0 : -1.0);
        rows.pair.push_back(p);
      }
    }
  }
  rows.sources = stack_rows(src);
  rows.targets = stack_rows(tgt);
  rows.eps_coef = Array({coef.size(), 1}, coef);
  return rows;
}

// Per-row squared residual ||target - eps_coef * eps||^2 as an (R x 1) node.
Var squared_residual(Tape& tape, Var eps, const StepRows& rows) {
  const Var residual = tape.constant(rows.targets) - tape.constant(rows.eps_coef) * eps;
  return row_sum(residual * residual);
}

}  // namespace

double trajectory_log_ratio(const Denoiser& model, const Denoiser& reference, const Schedule& schedule,
                            const Trajectory& trajectory, double guidance, double eta) {
  RlhfBatch single;
  single.pairs.push_back({trajectory, trajectory, 0.0});
  StepRows rows = gather_steps(single, schedule, eta);
  const std::size_t half = rows.sign.size() / 2;
  Tape tape;
  const auto p_model = model.bind(tape, false);
  const auto p_ref = reference.bind(tape, false);
  const Var e_model = model.forward_guided(tape, p_model, rows.sources, rows.timesteps, rows.conds, guidance);
  const Var e_ref = reference.forward_guided(tape, p_ref, rows.sources, rows.timesteps, rows.conds, guidance);
  const Array q_model = squared_residual(tape, e_model, rows).value();
  const Array q_ref = squared_residual(tape, e_ref, rows).value();
  double total = 0.0;
  for (std::size_t r = 0; r < half; ++r) total += -(q_model[r] - q_ref[r]) / (2.0 * rows.variance[r]);
  return total;
}

Var rlhf_loss(Tape& tape, std::span<const Var> params, const Denoiser& model, const Denoiser& reference,
              const Schedule& schedule, const RlhfBatch& batch, const TrainConfig& config) {
  if (batch.pairs.empty()) throw ConfigError("rlhf_loss: empty batch");
  const StepRows rows = gather_steps(batch, schedule, config.eta);
  const std::size_t pairs = batch.pairs.size(), r = rows.sign.size();

  Tape ref_tape;
  const auto ref_params = reference.bind(ref_tape, false);
  const Var e_ref = reference.forward_guided(ref_tape, ref_params, rows.sources, rows.timesteps, rows.conds,
                                             config.guidance);
  const Array q_ref = squared_residual(ref_tape, e_ref, rows).value();

  // z_p = beta (D_w - D_l) - lambda gap, with D = sum over steps of
  // -(q_model - q_ref) / (2 var).
  Array mix({pairs, r}, 0.0);
  Array offset({pairs, 1}, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    const double g = -config.beta * rows.sign[i] / (2.0 * rows.variance[i]);
    mix(rows.pair[i], i) = g;
    offset[rows.pair[i]] -= g * q_ref[i];
  }
  const double lambda = config.effective_lambda();
  for (std::size_t p = 0; p < pairs; ++p) offset[p] -= lambda * batch.pairs[p].reward_gap;

  const Var eps = model.forward_guided(tape, params, rows.sources, rows.timesteps, rows.conds, config.guidance);
  const Var q = squared_residual(tape, eps, rows);
  const Var z = matmul(tape.constant(mix), q) + tape.constant(offset);
  const Var loss = mean(softplus(-z));
  if (!std::isfinite(loss.value().item())) throw NumericError("rlhf_loss: loss is not finite");
  return loss;
}

StepStats rlhf_sharpen_step(Denoiser& model, const Denoiser& reference, OptimState& state, const Schedule& schedule,
                            std::span<const Condition> prompts, const TrainConfig& config, RewardModel& reward,
                            Rng& rng) {
  RlhfBatch batch = collect_rlhf(model, schedule, prompts, config, reward, rng);
  Tape tape;
  const auto params = model.bind(tape, true);
  const Var loss = rlhf_loss(tape, params, model, reference, schedule, batch, config);
  batch.stats.loss = loss.value().item();
  apply_update(model, state, config.adam, tape, params, loss);
  return std::move(batch.stats);
}

}  // namespace sharpen
