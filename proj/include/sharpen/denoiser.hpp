#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sharpen/autodiff.hpp"
#include "sharpen/mlp.hpp"
#include "sharpen/nfe.hpp"
#include "sharpen/optim.hpp"
#include "sharpen/rng.hpp"
#include "sharpen/schedule.hpp"

namespace sharpen {

/// Class label, or std::nullopt for the unconditional (null) row.
using Condition = std::optional<int>;

struct DenoiserConfig {
  int data_dim = 2;
  int num_classes = 0;
  int time_dim = 64;
  int cond_dim = 16;
  int hidden = 128;
  int depth = 3;
  std::uint64_t init_seed = 0;
};

/// Sinusoidal embedding of (possibly fractional) timesteps: sin/cos pairs on
/// frequencies spaced geometrically from 1 down to 1e-4.
Array time_embedding(std::span<const double> t, int dim);

/// Noise-prediction network eps(x_t, c, t).
class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig config);

  const DenoiserConfig& config() const { return config_; }
  std::vector<Array>& parameters() { return params_; }
  const std::vector<Array>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  std::size_t parameter_count() const;

  /// Records the parameters on `tape` (as differentiable leaves or constants).
  std::vector<Var> bind(Tape& tape, bool differentiable = true) const;

  /// Differentiable prediction; one timestep and condition per row.
  Var forward(Tape& tape, std::span<const Var> params, const Array& x_t, std::span<const double> t,
              std::span<const Condition> conds) const;
  /// eps_null + w (eps_c - eps_null) per row; rows with a null condition get eps_null.
  /// w = 0 and w = 1 return the unconditional and conditional predictions exactly.
  Var forward_guided(Tape& tape, std::span<const Var> params, const Array& x_t, std::span<const double> t,
                     std::span<const Condition> conds, double w) const;

  Array predict_eps(const Array& x_t, std::span<const double> t, std::span<const Condition> conds) const;
  Array predict_eps(const Array& x_t, int t, Condition c) const;
  Array predict_eps_guided(const Array& x_t, std::span<const double> t, std::span<const Condition> conds,
                           double w) const;
  Array predict_eps_guided(const Array& x_t, int t, Condition c, double w) const;

  void validate_condition(Condition c) const;

 private:
  DenoiserConfig config_;
  MlpLayout trunk_;
  std::vector<Array> params_;  // [cond_table, trunk...]
  std::vector<std::string> names_;
};

/// Forward evaluations one guided prediction costs for a row: two when a
/// condition is combined with the unconditional branch, otherwise one.
inline int guided_cost(Condition c, double w) { return c && w != 0.0 && w != 1.0 ? 2 : 1; }

/// Full T-step DDIM generation from x_T ~ N(0, I), one row per condition.
Array generate_samples(const Denoiser& model, const Schedule& schedule, std::span<const Condition> conds, double w,
                       Rng& rng, NfeLedger* ledger = nullptr);
/// Same, starting from the given x_T.
Array generate_from(const Denoiser& model, const Schedule& schedule, Array x_T, std::span<const Condition> conds,
                    double w, NfeLedger* ledger = nullptr);

/// Mean over rows of ||eps_model(x, c, t) - target||^2 weighted per row.
/// `row_weights` empty means uniform 1/rows.
Var epsilon_loss(Tape& tape, std::span<const Var> params, const Denoiser& model, const Array& states,
                 std::span<const double> t, std::span<const Condition> conds, const Array& targets,
                 std::span<const double> row_weights = {});

struct PretrainConfig {
  int steps = 20000;
  int batch_size = 128;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, 0.0};
  double final_lr_fraction = 0.1;  // cosine decay to this fraction of adam.lr
  std::uint64_t seed = 0;
  double null_drop = 0.1;
  double smoothing = 0.99;
  double loss_threshold = 1.0;
  double divergence_limit = 1e6;
};

struct PretrainResult {
  std::vector<double> loss_history;
  double smoothed_loss = 0.0;
  bool warned = false;
};

/// Called after every update with the 1-based step count and that step's loss.
using ProgressFn = std::function<void(int step, double loss)>;

/// Epsilon-prediction training (uniform weighting, t uniform on 1..T).
/// `labels` may be empty for unconditional data.
PretrainResult pretrain(Denoiser& model, const Array& data, std::span<const int> labels, const Schedule& schedule,
                        const PretrainConfig& config, const ProgressFn& progress = {});

/// JSON checkpoint with shapes, parameter values, schedule and an integrity hash.
void save_checkpoint(const Denoiser& model, const Schedule& schedule, const std::filesystem::path& path);
struct LoadedDenoiser {
  Denoiser model;
  Schedule schedule;
};
LoadedDenoiser load_checkpoint(const std::filesystem::path& path);

/// FNV-1a 64-bit digest, hex encoded.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace sharpen
