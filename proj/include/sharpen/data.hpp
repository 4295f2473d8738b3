#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sharpen/array.hpp"
#include "sharpen/mlp.hpp"
#include "sharpen/optim.hpp"

namespace sharpen {

enum class DatasetKind { gmm2, gmm8, swissroll, checkerboard };

DatasetKind parse_dataset_kind(const std::string& name);
std::string to_string(DatasetKind kind);

/// Per-axis affine map between raw and standardized coordinates:
/// standardized = (raw - shift) / scale.
struct Standardizer {
  std::vector<double> shift;
  std::vector<double> scale;

  Array to_standard(const Array& raw) const;
  Array to_raw(const Array& standardized) const;
};

struct DatasetSpec {
  DatasetKind kind = DatasetKind::gmm2;
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

/// Synthetic 2-D dataset in standardized coordinates.
struct Dataset {
  DatasetSpec spec;
  Array samples;                     // n x 2, standardized
  std::optional<std::vector<int>> labels;
  int num_classes = 0;               // 0 when unlabeled
  Standardizer standardizer;
};

/// Raw-coordinate mixture geometry of the labeled kinds.
/// gmm2: means (+2, 0) [label 0] and (-2, 0) [label 1], std 0.2.
/// gmm8: eight means on the radius-4 circle at angles 2 pi k / 8, std 0.3.
struct MixtureGeometry {
  std::vector<std::vector<double>> means;
  double std_dev = 0.0;
};
MixtureGeometry mixture_geometry(DatasetKind kind);

/// Population standardization constants of a kind (independent of n and seed).
Standardizer standardizer_for(DatasetKind kind);

Dataset make_dataset(DatasetKind kind, std::size_t n, std::uint64_t seed);

/// CSV (x0,x1[,label]) with a JSON sidecar `<path>.json` holding the generator spec.
void export_dataset(const Dataset& data, const std::filesystem::path& csv_path);
Dataset import_dataset(const std::filesystem::path& csv_path);

// ---------------------------------------------------------------------------
// Classifier backing the classifier reward.

struct ClassifierConfig {
  int hidden = 64;
  int steps = 2000;
  int batch_size = 128;
  AdamConfig adam{1e-2, 0.9, 0.999, 1e-8, 0.0};
  std::uint64_t seed = 0;
  double holdout_fraction = 0.2;
  double min_accuracy = 0.9;
};

class Classifier {
 public:
  Classifier(int input_dim, int num_classes, int hidden, std::uint64_t seed);

  int num_classes() const { return num_classes_; }
  int input_dim() const { return input_dim_; }
  int hidden() const { return hidden_; }
  std::vector<Array>& parameters() { return params_; }
  const std::vector<Array>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }

  Var logits(Tape& tape, std::span<const Var> params, const Array& x) const;
  /// Row-wise class log-probabilities.
  Array log_probs(const Array& x) const;
  double accuracy(const Array& x, std::span<const int> labels) const;

  void save(const std::filesystem::path& path) const;
  static Classifier load(const std::filesystem::path& path);

 private:
  int input_dim_, num_classes_, hidden_;
  std::uint64_t seed_;
  MlpLayout layout_;
  std::vector<Array> params_;
  std::vector<std::string> names_;
};

struct TrainedClassifier {
  Classifier model;
  double holdout_accuracy = 0.0;
};

/// Cross-entropy training on a labeled dataset; throws when held-out
/// accuracy falls below `min_accuracy`.
TrainedClassifier train_classifier(const Dataset& data, const ClassifierConfig& config);

}  // namespace sharpen
