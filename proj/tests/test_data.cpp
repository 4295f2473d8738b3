#include <doctest.h>

#include <cmath>
#include <numbers>

#include "sharpen/data.hpp"
#include "sharpen/error.hpp"
#include "support.hpp"

using namespace sharpen;

namespace {

// Two-sided quantile bounds of Binomial(n, p) by summing the exact pmf.
std::pair<int, int> binomial_bounds(int n, double p, double level) {
  std::vector<double> pmf(static_cast<std::size_t>(n) + 1);
  for (int k = 0; k <= n; ++k)
    pmf[static_cast<std::size_t>(k)] = std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) +
                                                k * std::log(p) + (n - k) * std::log1p(-p));
  const double tail = (1.0 - level) / 2.0;
  double acc = 0.0;
  int lo = 0;
  while (acc + pmf[static_cast<std::size_t>(lo)] <= tail) acc += pmf[static_cast<std::size_t>(lo++)];
  acc = 0.0;
  int hi = n;
  while (acc + pmf[static_cast<std::size_t>(hi)] <= tail) acc += pmf[static_cast<std::size_t>(hi--)];
  return {lo, hi};
}

}  // namespace

TEST_CASE("gmm2 label counts fall inside binomial 99% bounds") {
  const Dataset d = make_dataset(DatasetKind::gmm2, 1000, 7);
  REQUIRE(d.samples.rows() == 1000);
  REQUIRE(d.labels.has_value());
  int ones = 0;
  for (int l : *d.labels) ones += l;
  const auto [lo, hi] = binomial_bounds(1000, 0.5, 0.99);
  CHECK(lo > 450);
  CHECK(hi < 550);
  CHECK(ones >= lo);
  CHECK(ones <= hi);
}

TEST_CASE("mixture geometry") {
  const MixtureGeometry g2 = mixture_geometry(DatasetKind::gmm2);
  CHECK(g2.means[0] == std::vector<double>{2.0, 0.0});
  CHECK(g2.means[1] == std::vector<double>{-2.0, 0.0});
  CHECK(g2.std_dev == 0.2);
  const MixtureGeometry g8 = mixture_geometry(DatasetKind::gmm8);
  REQUIRE(g8.means.size() == 8);
  CHECK(g8.means[0][0] == doctest::Approx(4.0));
  CHECK(g8.means[1][0] == doctest::Approx(2.828427).epsilon(1e-6));
  CHECK(g8.means[1][1] == doctest::Approx(2.828427).epsilon(1e-6));
  for (const auto& m : g8.means) CHECK(std::hypot(m[0], m[1]) == doctest::Approx(4.0));
  CHECK(g8.std_dev == 0.3);
}

TEST_CASE("datasets are deterministic and standardized") {
  for (auto kind : {DatasetKind::gmm2, DatasetKind::gmm8, DatasetKind::swissroll, DatasetKind::checkerboard}) {
    CAPTURE(to_string(kind));
    const Dataset a = make_dataset(kind, 20000, 3);
    const Dataset b = make_dataset(kind, 20000, 3);
    CHECK(a.samples == b.samples);
    CHECK(a.labels == b.labels);
    for (std::size_t j = 0; j < 2; ++j) {
      double mu = 0.0, sq = 0.0;
      for (std::size_t r = 0; r < a.samples.rows(); ++r) mu += a.samples(r, j);
      mu /= 20000.0;
      for (std::size_t r = 0; r < a.samples.rows(); ++r) sq += (a.samples(r, j) - mu) * (a.samples(r, j) - mu);
      CHECK(std::abs(mu) < 0.05);
      CHECK(sq / 20000.0 == doctest::Approx(1.0).epsilon(0.05));
    }
    // Raw samples stay within the documented range.
    const Array raw = a.standardizer.to_raw(a.samples);
    double max_norm = 0.0;
    for (std::size_t r = 0; r < raw.rows(); ++r) max_norm = std::max(max_norm, std::hypot(raw(r, 0), raw(r, 1)));
    CHECK(max_norm < 6.0);
    const bool labeled = kind == DatasetKind::gmm2 || kind == DatasetKind::gmm8;
    CHECK(a.labels.has_value() == labeled);
  }
  CHECK_THROWS_AS(parse_dataset_kind("moons"), ConfigError);
  CHECK_THROWS_AS(make_dataset(DatasetKind::gmm2, 0, 1), ConfigError);
}

TEST_CASE("standardization round trip") {
  const Dataset d = make_dataset(DatasetKind::swissroll, 500, 2);
  const Array raw = d.standardizer.to_raw(d.samples);
  CHECK(max_abs_diff(d.standardizer.to_standard(raw), d.samples) < 1e-12);
}

TEST_CASE("gmm2 samples lie near their labeled means") {
  const Dataset d = make_dataset(DatasetKind::gmm2, 20000, 5);
  const Array raw = d.standardizer.to_raw(d.samples);
  const auto g = mixture_geometry(DatasetKind::gmm2);
  int inside = 0;
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    const auto& m = g.means[static_cast<std::size_t>((*d.labels)[r])];
    if (std::hypot(raw(r, 0) - m[0], raw(r, 1) - m[1]) <= 5 * g.std_dev) ++inside;
  }
  CHECK(inside >= 0.999 * 20000);
}

TEST_CASE("export and import preserve samples, labels and spec") {
  const auto dir = testing_support::scratch_dir("data");
  const Dataset d = make_dataset(DatasetKind::gmm8, 300, 4);
  export_dataset(d, dir / "g.csv");
  const Dataset back = import_dataset(dir / "g.csv");
  CHECK(back.samples == d.samples);
  CHECK(back.labels == d.labels);
  CHECK(back.spec.kind == DatasetKind::gmm8);
  CHECK(back.spec.seed == 4);
}

TEST_CASE("classifier training") {
  ClassifierConfig cfg;
  cfg.steps = 600;
  const Dataset d = make_dataset(DatasetKind::gmm2, 4000, 1);
  const TrainedClassifier tc = train_classifier(d, cfg);
  CHECK(tc.holdout_accuracy >= 0.99);
  const Array lp = tc.model.log_probs(d.samples);
  for (std::size_t r = 0; r < 50; ++r) CHECK(std::exp(lp(r, 0)) + std::exp(lp(r, 1)) == doctest::Approx(1.0).epsilon(1e-9));

  const Dataset unlabeled = make_dataset(DatasetKind::checkerboard, 100, 1);
  CHECK_THROWS_AS(train_classifier(unlabeled, cfg), ConfigError);

  const auto dir = testing_support::scratch_dir("clf");
  tc.model.save(dir / "c.json");
  const Classifier back = Classifier::load(dir / "c.json");
  CHECK(back.log_probs(d.samples) == lp);
  CHECK_THROWS(Classifier::load(dir / "nope.json"));
}

TEST_CASE("gmm8 classifier reaches 98% held-out accuracy") {
  ClassifierConfig cfg;
  const Dataset d = make_dataset(DatasetKind::gmm8, 8000, 2);
  CHECK(train_classifier(d, cfg).holdout_accuracy >= 0.98);
}
