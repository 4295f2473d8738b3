#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sharpen/baselines.hpp"
#include "sharpen/gradcheck.hpp"
#include "sharpen/trajectory.hpp"
#include "support.hpp"

using namespace sharpen;

namespace {

class ConstantReward final : public RewardModel {
 public:
  std::string kind() const override { return "constant"; }

 protected:
  double score_raw(std::span<const double>, Condition) override { return 0.0; }
};

Schedule grid() { return make_schedule(ScheduleKind::cosine, 50); }

// Log-ratio of one trajectory from per-step Gaussian densities.
double log_ratio_oracle(const Denoiser& model, const Denoiser& ref, const Schedule& s, const Trajectory& tr, double w) {
  double total = 0.0;
  for (int k = 0; k < tr.steps(); ++k) {
    const int from = tr.source_index(k), to = tr.timesteps[k];
    const Array& src = tr.source_state(k);
    const Array zero(src.shape(), 0.0);
    const double var = ancestral_variance(from, to, s);
    const Array mean_model = ancestral_step(src, model.predict_eps_guided(src, from, tr.cond, w), from, to, s, zero).next;
    const Array mean_ref = ancestral_step(src, ref.predict_eps_guided(src, from, tr.cond, w), from, to, s, zero).next;
    total += gaussian_log_prob(tr.states[k], mean_model, var)[0] - gaussian_log_prob(tr.states[k], mean_ref, var)[0];
  }
  return total;
}

Denoiser perturbed(const Denoiser& d, double amount, std::uint64_t seed) {
  Denoiser out = d;
  Rng rng(seed);
  for (auto& p : out.parameters())
    for (auto& v : p.values()) v += amount * standard_normal({1}, rng)[0];
  return out;
}

double softplus_plain(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

TEST_CASE("single-step rollout shape and exact replay") {
  const Denoiser model = testing_support::small_denoiser(2);
  const Schedule s = grid();
  ModeDistanceReward reward({1.0, 0.0});
  const Array x0 = Array::matrix(1, 2, {0.4, -0.2});
  for (SamplerKind kind : {SamplerKind::ddim, SamplerKind::ancestral}) {
    RolloutSpec spec{kind, 3.0, EstimatorMode::tweedie(), 1.0};
    Rng rng(11);
    const auto single = sample_trajectories(x0, 1, 20, 1, 1, spec, model, s, reward, rng);
    REQUIRE(single.size() == 1);
    CHECK(single[0].steps() == 1);
    CHECK(single[0].timesteps == std::vector<int>{19});
    CHECK(single[0].rewards.size() == 1);
    CHECK(single[0].log_probs.has_value() == (kind == SamplerKind::ancestral));

    const auto many = sample_trajectories(x0, 0, 30, 4, 5, spec, model, s, reward, rng);
    for (const Trajectory& tr : many) {
      CHECK(tr.timesteps == std::vector<int>{29, 28, 27, 26, 25});
      const Trajectory again = replay_trajectory(x0, tr, spec, model, s, reward);
      CHECK(again.start == tr.start);
      CHECK(again.states == tr.states);
      CHECK(again.rewards == tr.rewards);
      CHECK(again.log_probs == tr.log_probs);
    }
    CHECK(many[0].states != many[1].states);
  }
}

TEST_CASE("rollout rejects starts that leave the grid") {
  const Denoiser model = testing_support::small_denoiser(0);
  ModeDistanceReward reward({0.0, 0.0});
  Rng rng(1);
  const Array x0 = Array::matrix(1, 2, {0.0, 0.0});
  CHECK_THROWS_AS(sample_trajectories(x0, std::nullopt, 3, 2, 4, {}, model, grid(), reward, rng), ConfigError);
  CHECK_THROWS_AS(sample_trajectories(x0, std::nullopt, 51, 2, 1, {}, model, grid(), reward, rng), ConfigError);
  CHECK_THROWS_AS(sample_trajectories(x0, std::nullopt, 10, 0, 1, {}, model, grid(), reward, rng), ConfigError);
}

TEST_CASE("aggregation and selection examples") {
  Trajectory tr;
  tr.rewards = {1.0, -2.5, 4.0};
  CHECK(aggregate_reward(tr) == 2.5);
  tr.rewards.clear();
  CHECK_THROWS(aggregate_reward(tr));

  CHECK(select_best(std::vector<double>{1.0, 3.0, 3.0}) == 1);
  CHECK(select_best_worst(std::vector<double>{2.0, 2.0, 2.0}) == std::pair<std::size_t, std::size_t>{0, 1});
  CHECK(select_best_worst(std::vector<double>{3.0, 1.0, 1.0}) == std::pair<std::size_t, std::size_t>{0, 1});
  CHECK(select_best_worst(std::vector<double>{-1.0, 5.0, -4.0}) == std::pair<std::size_t, std::size_t>{1, 2});
  CHECK_THROWS_AS(select_best_worst(std::vector<double>{1.0}), ConfigError);
}

TEST_CASE("property: selection is invariant under positive affine maps") {
  std::mt19937_64 gen(2024);
  std::uniform_int_distribution<int> value(-5, 5), size(2, 9), shift(-20, 20), power(-3, 4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> a(static_cast<std::size_t>(size(gen)));
    for (double& v : a) v = value(gen);
    const double scale = std::ldexp(1.0, power(gen));
    const double b = shift(gen);
    std::vector<double> mapped(a.size());
    std::transform(a.begin(), a.end(), mapped.begin(), [&](double v) { return scale * v + b; });
    const auto pick = select_best_worst(a);
    CHECK(select_best_worst(mapped) == pick);
    CHECK(select_best(a) == pick.first);
    CHECK(pick.first != pick.second);
    for (double v : a) {
      CHECK(a[pick.first] >= v);
      CHECK(a[pick.second] <= v);
    }
  }
}

TEST_CASE("train config ranges and validation") {
  const Schedule s = grid();
  TrainConfig c;
  c.m = 3;
  CHECK(c.start_range(s) == std::pair<int, int>{4, 50});
  c.max_start_index = 20;
  CHECK(c.start_range(s) == std::pair<int, int>{4, 20});
  c.m = 50;
  c.max_start_index = 0;
  CHECK_THROWS_AS(c.validate(s), ConfigError);
  c.m = 3;
  c.adam.lr = 0.0;
  CHECK_THROWS_AS(c.validate(s), ConfigError);
  CHECK(vanilla_dpo_config(TrainConfig{}).effective_lambda() == 0.0);
  CHECK(vanilla_dpo_config(TrainConfig{}).n == 2);
}

TEST_CASE("SFT with one candidate and one step equals standard fine-tuning") {
  const Schedule s = grid();
  ModeDistanceReward reward({1.0, 0.0});
  Rng data_rng(5);
  const Array x0 = standard_normal({6, 2}, data_rng);
  const std::vector<Condition> conds{0, 1, std::nullopt, 1, 0, std::nullopt};
  TrainConfig c;
  c.n = 1;
  c.m = 1;
  c.adam.lr = 1e-3;

  Denoiser a = testing_support::small_denoiser(2);
  Denoiser b = a;
  OptimState sa = make_optim_state(a.parameters()), sb = make_optim_state(b.parameters());
  Rng ra(77), rb(77);
  for (int step = 0; step < 3; ++step) {
    const StepStats x = sft_sharpen_step(a, sa, s, x0, conds, c, reward, ra);
    const StepStats y = standard_finetune_step(b, sb, s, x0, conds, c, rb);
    CHECK(x.loss == doctest::Approx(y.loss).epsilon(1e-12));
  }
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    CHECK(max_abs_diff(a.parameters()[i], b.parameters()[i]) < 1e-12);
}

TEST_CASE("SFT batch invariants") {
  const Denoiser model = testing_support::small_denoiser(2);
  const Schedule s = grid();
  ModeDistanceReward reward({1.0, 0.0});
  Rng rng(8);
  const Array x0 = standard_normal({5, 2}, rng);
  const std::vector<Condition> conds{0, 1, 0, 1, std::nullopt};
  TrainConfig c;
  const SftBatch batch = collect_sft(model, s, x0, conds, c, reward, rng);
  CHECK(batch.states.rows() == 15);
  CHECK(batch.stats.candidates.size() == 5);
  for (std::size_t e = 0; e < 5; ++e) {
    const auto agg = aggregate_rewards(batch.stats.candidates[e]);
    CHECK(batch.stats.candidates[e].size() == 3);
    CHECK(agg[batch.stats.selections[e].first] == *std::max_element(agg.begin(), agg.end()));
  }
  // Departure targets reconstruct the departure states.
  for (std::size_t r = 0; r < batch.states.rows(); ++r) {
    const int t = static_cast<int>(batch.timesteps[r]);
    const std::size_t example = r / 3;
    for (std::size_t j = 0; j < 2; ++j) {
      const double rebuilt = s.alpha_at(t) * x0(example, j) + s.sigma_at(t) * batch.targets(r, j);
      CHECK(rebuilt == doctest::Approx(batch.states(r, j)).epsilon(1e-12));
    }
  }
  CHECK(batch.stats.selected_aggregate >= batch.stats.mean_aggregate);
}

TEST_CASE("trajectory log-ratio matches per-step Gaussian densities") {
  const Schedule s = grid();
  const Denoiser ref = testing_support::small_denoiser(2);
  const Denoiser model = perturbed(ref, 0.05, 9);
  ModeDistanceReward reward({1.0, 0.0});
  Rng rng(3);
  const RolloutSpec spec{SamplerKind::ancestral, 2.0, EstimatorMode::tweedie(), 1.0};
  const auto trs = sample_trajectories(Array::matrix(1, 2, {0.5, 0.5}), 1, 25, 3, 4, spec, model, s, reward, rng);
  for (const Trajectory& tr : trs) {
    CHECK(trajectory_log_ratio(model, ref, s, tr, 2.0, 1.0) ==
          doctest::Approx(log_ratio_oracle(model, ref, s, tr, 2.0)).epsilon(1e-9));
    CHECK(trajectory_log_ratio(ref, ref, s, tr, 2.0, 1.0) == 0.0);
  }
}

TEST_CASE("preference loss at the reference with equal rewards is log 2") {
  const Schedule s = grid();
  const Denoiser model = testing_support::small_denoiser(2);
  ConstantReward reward;
  Rng rng(4);
  TrainConfig c;
  const std::vector<Condition> prompts{0, 1, std::nullopt};
  const RlhfBatch batch = collect_rlhf(model, s, prompts, c, reward, rng);
  Tape tape;
  const auto params = model.bind(tape);
  CHECK(rlhf_loss(tape, params, model, model, s, batch, c).value().item() ==
        doctest::Approx(std::numbers::ln2).epsilon(1e-12));
}

TEST_CASE("preference loss matches its closed form and grows with lambda") {
  const Schedule s = grid();
  const Denoiser ref = testing_support::small_denoiser(2);
  const Denoiser model = perturbed(ref, 0.05, 12);
  ModeDistanceReward reward({1.0, 0.0});
  Rng rng(6);
  TrainConfig c;
  c.beta = 0.7;
  const std::vector<Condition> prompts{0, 1, 0, 1};
  const RlhfBatch batch = collect_rlhf(model, s, prompts, c, reward, rng);
  double previous = -1.0;
  for (double lambda : {0.0, 0.5, 1.0, 2.0}) {
    c.lambda = lambda;
    double expected = 0.0;
    for (const PreferencePair& p : batch.pairs) {
      CHECK(p.reward_gap >= 0.0);
      const double dw = log_ratio_oracle(model, ref, s, p.winner, c.guidance);
      const double dl = log_ratio_oracle(model, ref, s, p.loser, c.guidance);
      expected += softplus_plain(-(c.beta * (dw - dl) - lambda * p.reward_gap));
    }
    expected /= static_cast<double>(batch.pairs.size());
    Tape tape;
    const auto params = model.bind(tape);
    const double loss = rlhf_loss(tape, params, model, ref, s, batch, c).value().item();
    CHECK(loss == doctest::Approx(expected).epsilon(1e-9));
    CHECK(loss >= previous);
    previous = loss;
  }
  c.reward_modulation = RewardModulation::off;
  Tape tape;
  const auto params = model.bind(tape);
  c.lambda = 0.0;
  const double at_zero = rlhf_loss(tape, params, model, ref, s, batch, c).value().item();
  c.lambda = 5.0;
  CHECK(rlhf_loss(tape, params, model, ref, s, batch, c).value().item() == at_zero);
}

TEST_CASE("a preference step raises the winner's log-ratio margin") {
  const Schedule s = grid();
  const Denoiser ref = testing_support::small_denoiser(2);
  Denoiser model = ref;
  ModeDistanceReward reward({1.0, 0.0});
  Rng rng(21);
  TrainConfig c;
  c.lambda = 0.0;
  c.adam.lr = 1e-4;
  const std::vector<Condition> prompts{0, 1, 0, 1};
  const RlhfBatch batch = collect_rlhf(model, s, prompts, c, reward, rng);
  OptimState state = make_optim_state(model.parameters());
  Tape tape;
  const auto params = model.bind(tape);
  apply_update(model, state, c.adam, tape, params, rlhf_loss(tape, params, model, ref, s, batch, c));
  double margin = 0.0;
  for (const PreferencePair& p : batch.pairs)
    margin += trajectory_log_ratio(model, ref, s, p.winner, c.guidance, c.eta) -
              trajectory_log_ratio(model, ref, s, p.loser, c.guidance, c.eta);
  CHECK(margin > 0.0);
}

TEST_CASE("gradcheck of both trainer losses on a parameter slice") {
  const Schedule s = grid();
  const Denoiser ref = testing_support::small_denoiser(2);
  const Denoiser model = perturbed(ref, 0.05, 30);
  ModeDistanceReward reward({1.0, 0.0});
  Rng rng(31);
  TrainConfig c;
  const Array x0 = standard_normal({3, 2}, rng);
  const std::vector<Condition> conds{0, 1, std::nullopt};
  const SftBatch sft = collect_sft(model, s, x0, conds, c, reward, rng);
  const RlhfBatch rlhf = collect_rlhf(model, s, conds, c, reward, rng);

  // Slot 0 is the condition table (3 x 4), slot 2 a trunk bias (16 entries).
  for (std::size_t slot : {std::size_t{0}, std::size_t{2}}) {
    REQUIRE(model.parameters()[slot].size() >= 10);
    const auto with_slot = [&](Tape& tape, Var v) {
      auto params = model.bind(tape, false);
      params[slot] = v;
      return params;
    };
    const TapeFunction f_sft = [&](Tape& tape, Var v) { return sft_loss(tape, with_slot(tape, v), model, sft); };
    const TapeFunction f_rlhf = [&](Tape& tape, Var v) {
      return rlhf_loss(tape, with_slot(tape, v), model, ref, s, rlhf, c);
    };
    CHECK(gradcheck(f_sft, model.parameters()[slot], 1e-5) < 1e-4);
    CHECK(gradcheck(f_rlhf, model.parameters()[slot], 1e-5) < 1e-4);
  }
}

TEST_CASE("preference training configuration errors") {
  const Schedule s = grid();
  const Denoiser model = testing_support::small_denoiser(2);
  ModeDistanceReward reward({1.0, 0.0});
  Rng rng(1);
  const std::vector<Condition> prompts{0};
  TrainConfig c;
  c.n = 1;
  CHECK_THROWS_AS(collect_rlhf(model, s, prompts, c, reward, rng), ConfigError);
  c.n = 2;
  c.eta = 0.0;
  CHECK_THROWS_AS(collect_rlhf(model, s, prompts, c, reward, rng), ConfigError);
  c.eta = 1.0;
  const std::vector<Condition> bad{5};
  CHECK_THROWS(collect_rlhf(model, s, bad, c, reward, rng));
}
