#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "sharpen/harness.hpp"
#include "support.hpp"

using namespace sharpen;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const fs::path& p) {
  const std::string s = read_file(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

// Direct double-sum unbiased MMD^2 with a fixed kernel width.
double mmd2_oracle(const Array& a, const Array& b, double h) {
  const auto k = [h](std::span<const double> x, std::span<const double> y) {
    double d2 = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) d2 += (x[j] - y[j]) * (x[j] - y[j]);
    return std::exp(-d2 / (2.0 * h * h));
  };
  const double n = static_cast<double>(a.rows()), m = static_cast<double>(b.rows());
  double xx = 0.0, yy = 0.0, xy = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.rows(); ++j)
      if (i != j) xx += k(a.row_span(i), a.row_span(j));
  for (std::size_t i = 0; i < b.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j)
      if (i != j) yy += k(b.row_span(i), b.row_span(j));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) xy += k(a.row_span(i), b.row_span(j));
  return xx / (n * (n - 1)) + yy / (m * (m - 1)) - 2.0 * xy / (n * m);
}

ExperimentConfig tiny_pretrain(const fs::path& out) {
  ExperimentConfig c;
  c.output = out.string();
  c.T = 20;
  c.dataset.n = 400;
  c.dataset.heldout = 200;
  c.model.hidden = 16;
  c.model.depth = 2;
  c.model.time_dim = 8;
  c.model.cond_dim = 4;
  c.pretrain.steps = 30;
  c.pretrain.batch_size = 32;
  c.trainer.kind = TrainerKind::pretrain;
  c.eval.samples = 100;
  c.eval.smoothing = 0.5;
  return c;
}

// A pretrained checkpoint shared by the trainer runs below.
const fs::path& tiny_checkpoint() {
  static const fs::path path = [] {
    const fs::path dir = testing_support::scratch_dir("harness_pretrain");
    run_experiment(tiny_pretrain(dir));
    return dir / "model.json";
  }();
  return path;
}

ExperimentConfig tiny_trainer(const fs::path& out, TrainerKind kind) {
  ExperimentConfig c = tiny_pretrain(out);
  c.trainer.kind = kind;
  c.model.checkpoint = tiny_checkpoint().string();
  c.trainer.train.steps = 3;
  c.trainer.train.batch_size = 2;
  c.trainer.train.m = 2;
  c.trainer.dump_every = 2;
  return c;
}

}  // namespace

TEST_CASE("mmd2 matches the direct double sum") {
  Rng rng(1);
  const Array a = standard_normal({30, 2}, rng);
  Array b = standard_normal({25, 2}, rng);
  for (auto& v : b.values()) v += 0.5;
  CHECK(mmd2(a, b, Bandwidth::fixed(0.8)) == doctest::Approx(mmd2_oracle(a, b, 0.8)).epsilon(1e-12));
  const double h = median_distance(a, b);
  CHECK(mmd2(a, b) == doctest::Approx(mmd2_oracle(a, b, h)).epsilon(1e-12));
}

TEST_CASE("mmd2 of two samples of one distribution is near zero") {
  const Dataset x = make_dataset(DatasetKind::gmm8, 2000, 1);
  const Dataset y = make_dataset(DatasetKind::gmm8, 2000, 2);
  CHECK(std::abs(mmd2(x.samples, y.samples)) < 1e-3);
}

TEST_CASE("mmd2 separates distinct distributions") {
  const Dataset x = make_dataset(DatasetKind::gmm2, 500, 1);
  Array y = x.samples;
  for (std::size_t r = 0; r < y.rows(); ++r) y(r, 1) += 10.0;
  CHECK(mmd2(x.samples, y) > 0.5);
}

TEST_CASE("property: mmd2 is invariant to row permutations") {
  std::mt19937_64 gen(3);
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Array a = standard_normal({40, 2}, rng);
    const Array b = standard_normal({30, 2}, rng);
    std::vector<std::size_t> order(40);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), gen);
    Array shuffled(a.shape());
    for (std::size_t r = 0; r < 40; ++r)
      for (std::size_t j = 0; j < 2; ++j) shuffled(r, j) = a(order[r], j);
    CHECK(mmd2(shuffled, b) == doctest::Approx(mmd2(a, b)).epsilon(1e-12));
    CHECK(mmd2(a, b) == doctest::Approx(mmd2(b, a)).epsilon(1e-12));
  }
}

TEST_CASE("mmd2 argument errors") {
  const Array one = Array::matrix(1, 2, {0.0, 0.0});
  const Array two = Array::matrix(2, 2, {0.0, 0.0, 1.0, 1.0});
  const Array three_d(Shape{3, 3}, 0.0);
  CHECK_THROWS(mmd2(one, two));
  CHECK_THROWS_AS(mmd2(two, three_d), ShapeError);
}

TEST_CASE("mode fractions count balls and the remainder") {
  const MixtureSpec m{{{2.0, 0.0}, {-2.0, 0.0}}, 0.2, {0.5, 0.5}};
  const Array x = Array::matrix(5, 2, {2.0, 0.0, 2.3, 0.3, -2.0, 0.5, -2.1, 0.0, 0.0, 0.0});
  const ModeFractions f = mode_fractions(x, m, 3.0);
  // Radius 0.6: (2.3, 0.3) is 0.42 from the first mean, (-2, 0.5) is 0.5 from the second.
  CHECK(f.fractions[0] == doctest::Approx(0.4));
  CHECK(f.fractions[1] == doctest::Approx(0.4));
  CHECK(f.outside == doctest::Approx(0.2));
  CHECK_THROWS_AS(mode_fractions(x, m, 0.0), ConfigError);
  CHECK_THROWS_AS(mode_fractions(x, m, 11.0), ConfigError);
}

TEST_CASE("mean and standard error") {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const MeanStd s = mean_std(v);
  CHECK(s.mean == 2.5);
  CHECK(s.std_dev == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(s.sem() == doctest::Approx(std::sqrt(5.0 / 3.0) / 2.0));
}

TEST_CASE("smoothing starts at the first value") {
  const std::vector<double> v{4.0, 0.0, 0.0};
  const auto s = smooth(v, 0.5);
  CHECK(s == std::vector<double>{4.0, 2.0, 1.0});
}

TEST_CASE("config round trip, strictness and overrides") {
  ExperimentConfig c;
  c.trainer.train.n = 5;
  c.reward.target = {1.0, 2.0};
  c.assertions.push_back({"eval_reward", ">", -3.0});
  const auto j = to_json(c);
  CHECK(to_json(config_from_json(j)) == j);

  auto unknown = j;
  unknown["trainer"]["nn"] = 3;
  CHECK_THROWS_AS(config_from_json(unknown), ConfigError);
  auto wrong_type = j;
  wrong_type["trainer"]["n"] = "three";
  CHECK_THROWS_AS(config_from_json(wrong_type), ConfigError);
  auto version = j;
  version["version"] = 99;
  CHECK_THROWS_AS(config_from_json(version), ConfigError);
  auto invalid = j;
  invalid["trainer"]["m"] = 60;
  CHECK_THROWS_AS(config_from_json(invalid), ConfigError);

  auto o = j;
  apply_override(o, "trainer.lambda=0.25");
  apply_override(o, "dataset.kind=gmm8");
  apply_override(o, "reward.target=3,4");
  apply_override(o, "trainer.estimator", "ode(4)");
  const ExperimentConfig parsed = config_from_json(o);
  CHECK(parsed.trainer.train.lambda == 0.25);
  CHECK(parsed.dataset.kind == DatasetKind::gmm8);
  CHECK(parsed.reward.target == std::vector<double>{3.0, 4.0});
  CHECK(parsed.trainer.train.estimator.substeps == 4);
  CHECK_THROWS_AS(apply_override(o, "trainer.missing=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(o, "noequals"), ConfigError);

  const fs::path dir = testing_support::scratch_dir("config");
  save_config(parsed, dir / "c.json");
  CHECK(to_json(load_config(dir / "c.json")) == to_json(parsed));
  CHECK_THROWS(load_config(dir / "missing.json"));
}

TEST_CASE("assertions are checked against the summary") {
  const std::map<std::string, double> summary{{"eval_reward", -1.0}};
  const std::vector<AssertionSpec> specs{{"eval_reward", ">", -2.0}, {"eval_reward", "<", -2.0}};
  const auto out = check_assertions(specs, summary);
  CHECK(out[0].passed);
  CHECK_FALSE(out[1].passed);
  const std::vector<AssertionSpec> missing{{"nope", ">", 0.0}};
  CHECK_THROWS_AS(check_assertions(missing, summary), ConfigError);
}

TEST_CASE("pretrain run writes its artifacts") {
  const fs::path ckpt = tiny_checkpoint();
  const fs::path dir = ckpt.parent_path();
  for (const char* f : {"config.json", "metrics.csv", "timing.csv", "summary.json", "model.json", "loss_curve.svg"})
    CHECK(fs::exists(dir / f));
  CHECK(count_lines(dir / "metrics.csv") == 1 + 30);
}

TEST_CASE("trainer runs are reproducible to the bit") {
  for (TrainerKind kind : {TrainerKind::sft, TrainerKind::rlhf, TrainerKind::standard, TrainerKind::dpo_vanilla}) {
    const fs::path a = testing_support::scratch_dir("repro_a_" + to_string(kind));
    const fs::path b = testing_support::scratch_dir("repro_b_" + to_string(kind));
    const RunResult ra = run_experiment(tiny_trainer(a, kind));
    run_experiment(tiny_trainer(b, kind));
    CHECK(read_file(a / "metrics.csv") == read_file(b / "metrics.csv"));
    CHECK(read_file(a / "model.json") == read_file(b / "model.json"));
    CHECK(ra.summary.count("eval_reward") == 1);
    CHECK(fs::exists(a / "trajectories.jsonl"));
  }
}

TEST_CASE("best-of-n frontier and plots") {
  const fs::path dir = testing_support::scratch_dir("frontier");
  ExperimentConfig c = tiny_trainer(dir, TrainerKind::best_of_n);
  c.eval.best_of_n = {1, 2, 4};
  c.eval.samples = 20;
  const RunResult r = run_experiment(c);
  REQUIRE(r.frontier.size() >= 3);
  CHECK(fs::exists(dir / "frontier.csv"));
  CHECK(fs::exists(dir / "reward_vs_nfe.svg"));
  CHECK(count_lines(dir / "reward_vs_nfe.csv") == 1 + r.frontier.size());
}

TEST_CASE("plot_emit row counts and errors") {
  const fs::path dir = testing_support::scratch_dir("plot");
  {
    std::ofstream m(dir / "metrics.csv");
    m << "step,loss,mean_reward,reward_std\n0,,,\n1,0.5,-2,0.5\n2,0.4,-1.5,0.25\n3,0.3,,\n";
  }
  plot_emit(dir);
  CHECK(count_lines(dir / "loss_curve.csv") == 1 + 3);
  CHECK(count_lines(dir / "reward_curve.csv") == 1 + 2);
  CHECK(fs::exists(dir / "loss_curve.svg"));
  CHECK(read_file(dir / "reward_curve.svg").find("<svg") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "reward_vs_nfe.svg"));

  {
    std::ofstream m(dir / "metrics.csv");
    m << "step,loss\n1,0.5\n";
  }
  try {
    plot_emit(dir);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("mean_reward") != std::string::npos);
    CHECK(std::string(e.what()).find("reward_std") != std::string::npos);
  }
  {
    std::ofstream m(dir / "metrics.csv");
    m << "step,loss,mean_reward,reward_std\n";
  }
  CHECK_THROWS_AS(plot_emit(dir), Error);
  CHECK_THROWS_AS(plot_emit(dir / "absent"), Error);
}

TEST_CASE("ablation writes one run per value and a summary") {
  const fs::path dir = testing_support::scratch_dir("ablate");
  ExperimentConfig c = tiny_trainer(dir, TrainerKind::rlhf);
  c.trainer.train.steps = 1;
  c.eval.samples = 20;
  const std::vector<std::string> values{"0", "0.5", "1", "2", "4"};
  const auto runs = ablate(c, "trainer.lambda", values);
  CHECK(runs.size() == 5);
  for (const auto& v : values) CHECK(fs::exists(dir / ("trainer.lambda=" + v) / "metrics.csv"));
  CHECK(count_lines(dir / "summary.csv") == 6);
}

TEST_CASE("trainer runs need a matching checkpoint") {
  const fs::path dir = testing_support::scratch_dir("no_ckpt");
  ExperimentConfig c = tiny_trainer(dir, TrainerKind::sft);
  c.model.checkpoint.clear();
  CHECK_THROWS_AS(run_experiment(c), ConfigError);
  c = tiny_trainer(dir, TrainerKind::sft);
  c.T = 30;
  CHECK_THROWS_AS(run_experiment(c), ConfigError);
}
