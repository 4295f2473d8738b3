#include "sharpen/data.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "sharpen/autodiff.hpp"
#include "sharpen/error.hpp"
#include "sharpen/rng.hpp"

namespace sharpen {

using nlohmann::json;

namespace {

constexpr double kSwissNoise = 0.1;
constexpr double kSwissScale = 0.28;
constexpr double kCheckerHalfWidth = 4.0;

// Swiss roll parameter: s = 1.5 pi (1 + 2 u), u ~ U(0,1); point 0.28 s (cos s, sin s) + N(0, 0.1^2).
std::pair<double, double> swissroll_point(double u) {
  const double s = 1.5 * std::numbers::pi * (1.0 + 2.0 * u);
  return {kSwissScale * s * std::cos(s), kSwissScale * s * std::sin(s)};
}

// Composite Simpson moments of the noiseless roll over u in [0, 1].
Standardizer swissroll_standardizer() {
  const int n = 20000;
  double m[2] = {0, 0}, m2[2] = {0, 0};
  const double h = 1.0 / n;
  for (int i = 0; i <= n; ++i) {
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    auto [x, y] = swissroll_point(i * h);
    m[0] += w * x;
    m[1] += w * y;
    m2[0] += w * x * x;
    m2[1] += w * y * y;
  }
  Standardizer s;
  for (int k = 0; k < 2; ++k) {
    const double mean = m[k] * h / 3.0;
    const double second = m2[k] * h / 3.0;
    s.shift.push_back(mean);
    s.scale.push_back(std::sqrt(second - mean * mean + kSwissNoise * kSwissNoise));
  }
  return s;
}

}  // namespace

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "gmm2") return DatasetKind::gmm2;
  if (name == "gmm8") return DatasetKind::gmm8;
  if (name == "swissroll") return DatasetKind::swissroll;
  if (name == "checkerboard") return DatasetKind::checkerboard;
  throw ConfigError("unknown dataset kind '" + name + "'");
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::gmm2: return "gmm2";
    case DatasetKind::gmm8: return "gmm8";
    case DatasetKind::swissroll: return "swissroll";
    case DatasetKind::checkerboard: return "checkerboard";
  }
  return "?";
}

Array Standardizer::to_standard(const Array& raw) const {
  Array out(raw.shape());
  const std::size_t d = raw.cols();
  if (d != shift.size()) throw ShapeError("standardizer dimension mismatch");
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - shift[i % d]) / scale[i % d];
  return out;
}

Array Standardizer::to_raw(const Array& standardized) const {
  Array out(standardized.shape());
  const std::size_t d = standardized.cols();
  if (d != shift.size()) throw ShapeError("standardizer dimension mismatch");
  for (std::size_t i = 0; i < standardized.size(); ++i) out[i] = standardized[i] * scale[i % d] + shift[i % d];
  return out;
}

MixtureGeometry mixture_geometry(DatasetKind kind) {
  MixtureGeometry g;
  if (kind == DatasetKind::gmm2) {
    g.means = {{2.0, 0.0}, {-2.0, 0.0}};
    g.std_dev = 0.2;
  } else if (kind == DatasetKind::gmm8) {
    for (int k = 0; k < 8; ++k) {
      const double a = 2.0 * std::numbers::pi * k / 8.0;
      g.means.push_back({4.0 * std::cos(a), 4.0 * std::sin(a)});
    }
    g.std_dev = 0.3;
  } else {
    throw ConfigError(to_string(kind) + " is not a mixture dataset");
  }
  return g;
}

Standardizer standardizer_for(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::gmm2:
      return {{0.0, 0.0}, {std::sqrt(4.0 + 0.04), 0.2}};
    case DatasetKind::gmm8: {
      const double s = std::sqrt(8.0 + 0.09);
      return {{0.0, 0.0}, {s, s}};
    }
    case DatasetKind::swissroll:
      return swissroll_standardizer();
    case DatasetKind::checkerboard: {
      // Marginals are uniform on [-4, 4].
      const double s = 2.0 * kCheckerHalfWidth / std::sqrt(12.0);
      return {{0.0, 0.0}, {s, s}};
    }
  }
  throw ConfigError("unknown dataset kind");
}

Dataset make_dataset(DatasetKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("dataset needs n >= 1");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Array raw({n, 2});
  Dataset ds;
  ds.spec = {kind, n, seed};
  ds.standardizer = standardizer_for(kind);
  if (kind == DatasetKind::gmm2 || kind == DatasetKind::gmm8) {
    const MixtureGeometry g = mixture_geometry(kind);
    const int k = static_cast<int>(g.means.size());
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int c = uniform_int(rng, 0, k - 1);
      labels[i] = c;
      raw(i, 0) = g.means[static_cast<std::size_t>(c)][0] + g.std_dev * normal(rng);
      raw(i, 1) = g.means[static_cast<std::size_t>(c)][1] + g.std_dev * normal(rng);
    }
    ds.labels = std::move(labels);
    ds.num_classes = k;
  } else if (kind == DatasetKind::swissroll) {
    for (std::size_t i = 0; i < n; ++i) {
      auto [x, y] = swissroll_point(uniform_real(rng));
      raw(i, 0) = x + kSwissNoise * normal(rng);
      raw(i, 1) = y + kSwissNoise * normal(rng);
    }
  } else {
    // 4 x 4 board of side-2 cells on [-4, 4]^2; points land on cells with even (col + row).
    for (std::size_t i = 0; i < n; ++i) {
      const int col = uniform_int(rng, 0, 3);
      const int row = 2 * uniform_int(rng, 0, 1) + (col % 2);
      raw(i, 0) = -kCheckerHalfWidth + 2.0 * (col + uniform_real(rng));
      raw(i, 1) = -kCheckerHalfWidth + 2.0 * (row + uniform_real(rng));
    }
  }
  ds.samples = ds.standardizer.to_standard(raw);
  return ds;
}

void export_dataset(const Dataset& data, const std::filesystem::path& csv_path) {
  if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
  std::ofstream out(csv_path);
  if (!out) throw Error("cannot write " + csv_path.string());
  out.precision(17);
  out << (data.labels ? "x0,x1,label\n" : "x0,x1\n");
  for (std::size_t i = 0; i < data.samples.rows(); ++i) {
    out << data.samples(i, 0) << ',' << data.samples(i, 1);
    if (data.labels) out << ',' << (*data.labels)[i];
    out << '\n';
  }
  const json sidecar{{"kind", to_string(data.spec.kind)},
                     {"n", data.spec.n},
                     {"seed", data.spec.seed},
                     {"num_classes", data.num_classes},
                     {"standardizer", {{"shift", data.standardizer.shift}, {"scale", data.standardizer.scale}}}};
  std::ofstream side(csv_path.string() + ".json");
  side << sidecar.dump(2) << '\n';
}

Dataset import_dataset(const std::filesystem::path& csv_path) {
  std::ifstream side(csv_path.string() + ".json");
  if (!side) throw Error("missing dataset sidecar " + csv_path.string() + ".json");
  const json meta = json::parse(side);
  Dataset ds;
  ds.spec = {parse_dataset_kind(meta.at("kind")), meta.at("n").get<std::size_t>(), meta.at("seed").get<std::uint64_t>()};
  ds.num_classes = meta.at("num_classes");
  ds.standardizer.shift = meta.at("standardizer").at("shift").get<std::vector<double>>();
  ds.standardizer.scale = meta.at("standardizer").at("scale").get<std::vector<double>>();

  std::ifstream in(csv_path);
  if (!in) throw Error("cannot open " + csv_path.string());
  std::string line;
  std::getline(in, line);
  const bool labeled = line == "x0,x1,label";
  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != (labeled ? 3u : 2u)) throw Error("malformed dataset row: " + line);
    values.push_back(std::stod(cells[0]));
    values.push_back(std::stod(cells[1]));
    if (labeled) labels.push_back(std::stoi(cells[2]));
  }
  const std::size_t rows = values.size() / 2;
  ds.samples = Array({rows, 2}, std::move(values));
  if (labeled) ds.labels = std::move(labels);
  return ds;
}

// ---------------------------------------------------------------------------

Classifier::Classifier(int input_dim, int num_classes, int hidden, std::uint64_t seed)
    : input_dim_(input_dim), num_classes_(num_classes), hidden_(hidden), seed_(seed) {
  if (num_classes < 2) throw ConfigError("classifier needs at least two classes");
  layout_.activation = Activation::tanh;
  layout_.widths = {static_cast<std::size_t>(input_dim), static_cast<std::size_t>(hidden),
                    static_cast<std::size_t>(hidden), static_cast<std::size_t>(num_classes)};
  append_mlp_parameters(layout_, seed, "", params_, names_);
}

Var Classifier::logits(Tape& tape, std::span<const Var> params, const Array& x) const {
  if (x.cols() != static_cast<std::size_t>(input_dim_)) throw ShapeError("classifier: input dimension mismatch");
  return mlp_forward(layout_, params, tape.constant(Array({x.rows(), x.cols()}, x.storage())));
}

Array Classifier::log_probs(const Array& x) const {
  Tape tape;
  std::vector<Var> params;
  for (const auto& p : params_) params.push_back(tape.constant(p));
  return log_softmax(logits(tape, params, x)).value();
}

double Classifier::accuracy(const Array& x, std::span<const int> labels) const {
  const Array lp = log_probs(x);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < lp.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < lp.cols(); ++c)
      if (lp(r, c) > lp(r, best)) best = c;
    correct += static_cast<int>(best) == labels[r];
  }
  return static_cast<double>(correct) / static_cast<double>(lp.rows());
}

void Classifier::save(const std::filesystem::path& path) const {
  json params = json::array();
  for (std::size_t i = 0; i < params_.size(); ++i)
    params.push_back({{"name", names_[i]}, {"shape", params_[i].shape()}, {"values", params_[i].storage()}});
  const json doc{{"format", "sharpen-classifier"}, {"version", 1},     {"input_dim", input_dim_},
                 {"num_classes", num_classes_},     {"hidden", hidden_}, {"seed", seed_},
                 {"parameters", params}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write classifier checkpoint " + path.string());
  out << doc.dump() << '\n';
}

Classifier Classifier::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("classifier checkpoint missing: " + path.string());
  const json doc = json::parse(in);
  if (doc.value("format", "") != "sharpen-classifier") throw Error("not a classifier checkpoint: " + path.string());
  Classifier c(doc.at("input_dim"), doc.at("num_classes"), doc.at("hidden"), doc.at("seed"));
  const json& params = doc.at("parameters");
  if (params.size() != c.params_.size()) throw Error("classifier checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Array p(params[i].at("shape").get<Shape>(), params[i].at("values").get<std::vector<double>>());
    if (p.shape() != c.params_[i].shape()) throw Error("classifier checkpoint shape mismatch");
    c.params_[i] = std::move(p);
  }
  return c;
}

TrainedClassifier train_classifier(const Dataset& data, const ClassifierConfig& config) {
  if (!data.labels) throw ConfigError("train_classifier: dataset has no labels");
  const std::size_t n = data.samples.rows();
  const std::size_t holdout = std::max<std::size_t>(1, static_cast<std::size_t>(config.holdout_fraction * n));
  if (holdout >= n) throw ConfigError("train_classifier: dataset too small for a held-out split");
  const std::size_t train_n = n - holdout;
  const auto& labels = *data.labels;

  Classifier model(static_cast<int>(data.samples.cols()), data.num_classes, config.hidden, config.seed);
  OptimState state = make_optim_state(model.parameters());
  Rng rng(config.seed);
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t d = data.samples.cols();
  for (int step = 0; step < config.steps; ++step) {
    Array x({batch, d});
    Array onehot({batch, static_cast<std::size_t>(data.num_classes)});
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t idx = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(train_n) - 1));
      std::copy_n(data.samples.data() + idx * d, d, x.data() + b * d);
      onehot(b, static_cast<std::size_t>(labels[idx])) = 1.0;
    }
    Tape tape;
    std::vector<Var> params;
    for (const auto& p : model.parameters()) params.push_back(tape.leaf(p));
    Var nll = scale(sum(log_softmax(model.logits(tape, params, x)) * tape.constant(std::move(onehot))),
                    -1.0 / static_cast<double>(batch));
    const Gradients grads = tape.backward(nll);
    std::vector<Array> g;
    for (const Var& p : params) g.push_back(grads.of(p));
    adamw_step(model.parameters(), g, state, config.adam, model.parameter_names());
  }

  Array held({holdout, d});
  std::copy_n(data.samples.data() + train_n * d, holdout * d, held.data());
  const std::vector<int> held_labels(labels.begin() + static_cast<std::ptrdiff_t>(train_n), labels.end());
  const double acc = model.accuracy(held, held_labels);
  if (acc < config.min_accuracy)
    throw NumericError("classifier held-out accuracy " + std::to_string(acc) + " below " +
                       std::to_string(config.min_accuracy));
  return {std::move(model), acc};
}

}  // namespace sharpen
