#include "sharpen/denoiser.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numbers>

#include <json.hpp>

#include "sharpen/error.hpp"

namespace sharpen {

using nlohmann::json;

Array time_embedding(std::span<const double> t, int dim) {
  if (dim < 2 || dim % 2) throw ConfigError("time embedding dimension must be even and >= 2");
  const std::size_t half = static_cast<std::size_t>(dim / 2);
  Array out({t.size(), static_cast<std::size_t>(dim)});
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        half == 1 ? 1.0 : std::pow(10.0, -4.0 * static_cast<double>(i) / static_cast<double>(half - 1));
    for (std::size_t r = 0; r < t.size(); ++r) {
      out(r, i) = std::sin(t[r] * freq);
      out(r, half + i) = std::cos(t[r] * freq);
    }
  }
  return out;
}

Denoiser::Denoiser(DenoiserConfig config) : config_(config) {
  if (config_.data_dim < 1 || config_.num_classes < 0 || config_.hidden < 1 || config_.depth < 1)
    throw ConfigError("invalid denoiser configuration");
  std::uint64_t state = config_.init_seed ^ 0x9e3779b97f4a7c15ULL;
  params_.push_back(glorot_uniform(static_cast<std::size_t>(config_.num_classes + 1),
                                   static_cast<std::size_t>(config_.cond_dim), state));
  names_.push_back("cond_table");
  trunk_.activation = Activation::silu;
  trunk_.widths.push_back(static_cast<std::size_t>(config_.data_dim + config_.time_dim + config_.cond_dim));
  for (int i = 0; i < config_.depth; ++i) trunk_.widths.push_back(static_cast<std::size_t>(config_.hidden));
  trunk_.widths.push_back(static_cast<std::size_t>(config_.data_dim));
  append_mlp_parameters(trunk_, state, "trunk.", params_, names_);
}

std::size_t Denoiser::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

void Denoiser::validate_condition(Condition c) const {
  if (c && (*c < 0 || *c >= config_.num_classes))
    throw ConfigError("condition " + std::to_string(*c) + " outside [0, " + std::to_string(config_.num_classes) +
                      ")");
}

std::vector<Var> Denoiser::bind(Tape& tape, bool differentiable) const {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(differentiable ? tape.leaf(p) : tape.constant(p));
  return vars;
}

Var Denoiser::forward(Tape& tape, std::span<const Var> params, const Array& x_t, std::span<const double> t,
                      std::span<const Condition> conds) const {
  const std::size_t rows = x_t.rows();
  if (x_t.cols() != static_cast<std::size_t>(config_.data_dim))
    throw ShapeError("denoiser: expected " + std::to_string(config_.data_dim) + " columns, got " +
                     shape_string(x_t.shape()));
  if (t.size() != rows || conds.size() != rows) throw ShapeError("denoiser: per-row timesteps/conditions mismatch");
  const std::size_t table_rows = static_cast<std::size_t>(config_.num_classes + 1);
  Array onehot({rows, table_rows});
  for (std::size_t r = 0; r < rows; ++r) {
    validate_condition(conds[r]);
    onehot(r, conds[r] ? static_cast<std::size_t>(*conds[r]) : table_rows - 1) = 1.0;
  }
  Var cond_emb = matmul(tape.constant(std::move(onehot)), params[0]);
  const Var parts[] = {tape.constant(Array({rows, x_t.cols()}, x_t.storage())),
                       tape.constant(time_embedding(t, config_.time_dim)), cond_emb};
  return mlp_forward(trunk_, params.subspan(1), concat_cols(parts));
}

Var Denoiser::forward_guided(Tape& tape, std::span<const Var> params, const Array& x_t, std::span<const double> t,
                             std::span<const Condition> conds, double w) const {
  if (w < 0.0) throw ConfigError("guidance scale must be non-negative");
  bool any_cond = false;
  for (const auto& c : conds) any_cond = any_cond || c.has_value();
  if (!any_cond) return forward(tape, params, x_t, t, conds);
  if (w == 1.0) return forward(tape, params, x_t, t, conds);
  const std::vector<Condition> nulls(conds.size());
  Var uncond = forward(tape, params, x_t, t, nulls);
  if (w == 0.0) return uncond;
  Var cond = forward(tape, params, x_t, t, conds);
  return uncond + scale(cond - uncond, w);
}

Array Denoiser::predict_eps(const Array& x_t, std::span<const double> t, std::span<const Condition> conds) const {
  Tape tape;
  auto params = bind(tape, false);
  return forward(tape, params, x_t, t, conds).value();
}

Array Denoiser::predict_eps(const Array& x_t, int t, Condition c) const {
  const std::vector<double> ts(x_t.rows(), static_cast<double>(t));
  const std::vector<Condition> cs(x_t.rows(), c);
  return predict_eps(x_t, ts, cs);
}

Array Denoiser::predict_eps_guided(const Array& x_t, std::span<const double> t, std::span<const Condition> conds,
                                   double w) const {
  Tape tape;
  auto params = bind(tape, false);
  return forward_guided(tape, params, x_t, t, conds, w).value();
}

Array Denoiser::predict_eps_guided(const Array& x_t, int t, Condition c, double w) const {
  const std::vector<double> ts(x_t.rows(), static_cast<double>(t));
  const std::vector<Condition> cs(x_t.rows(), c);
  return predict_eps_guided(x_t, ts, cs, w);
}

Array generate_from(const Denoiser& model, const Schedule& schedule, Array x, std::span<const Condition> conds,
                    double w, NfeLedger* ledger) {
  if (x.rows() != conds.size()) throw ShapeError("generate: one condition per row required");
  std::uint64_t per_step = 0;
  for (const auto& c : conds) per_step += static_cast<std::uint64_t>(guided_cost(c, w));
  std::vector<double> ts(conds.size());
  for (int t = schedule.T; t >= 1; --t) {
    std::fill(ts.begin(), ts.end(), static_cast<double>(t));
    const Array eps = model.predict_eps_guided(x, ts, conds, w);
    x = ddim_step(x, eps, t, t - 1, schedule).next;
    if (ledger) ledger->generation += per_step;
  }
  if (ledger) ledger->samples += conds.size();
  return x;
}

Array generate_samples(const Denoiser& model, const Schedule& schedule, std::span<const Condition> conds, double w,
                       Rng& rng, NfeLedger* ledger) {
  Array x_T = standard_normal({conds.size(), static_cast<std::size_t>(model.config().data_dim)}, rng);
  return generate_from(model, schedule, std::move(x_T), conds, w, ledger);
}

Var epsilon_loss(Tape& tape, std::span<const Var> params, const Denoiser& model, const Array& states,
                 std::span<const double> t, std::span<const Condition> conds, const Array& targets,
                 std::span<const double> row_weights) {
  if (targets.shape() != states.shape()) throw ShapeError("epsilon_loss: target shape mismatch");
  Var pred = model.forward(tape, params, states, t, conds);
  Var diff = pred - tape.constant(targets);
  const std::size_t rows = states.rows();
  if (row_weights.empty()) return scale(sq_norm(diff), 1.0 / static_cast<double>(rows));
  if (row_weights.size() != rows) throw ShapeError("epsilon_loss: one weight per row required");
  Array w({rows, 1}, std::vector<double>(row_weights.begin(), row_weights.end()));
  return sum(row_sum(diff * diff) * tape.constant(std::move(w)));
}

PretrainResult pretrain(Denoiser& model, const Array& data, std::span<const int> labels, const Schedule& schedule,
                        const PretrainConfig& config, const ProgressFn& progress) {
  if (data.rows() == 0 || data.size() == 0) throw ConfigError("pretrain: empty dataset");
  if (!labels.empty() && labels.size() != data.rows()) throw ShapeError("pretrain: label count mismatch");
  if (config.steps < 1 || config.batch_size < 1) throw ConfigError("pretrain: steps and batch size must be positive");

  Rng rng(config.seed);
  OptimState state = make_optim_state(model.parameters());
  PretrainResult result;
  result.loss_history.reserve(static_cast<std::size_t>(config.steps));
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t d = data.cols();
  double smoothed = 0.0;
  for (int step = 0; step < config.steps; ++step) {
    Array x0({batch, d});
    std::vector<double> ts(batch);
    std::vector<Condition> conds(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t idx = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(data.rows()) - 1));
      std::copy_n(data.data() + idx * d, d, x0.data() + b * d);
      ts[b] = uniform_int(rng, 1, schedule.T);
      if (!labels.empty() && uniform_real(rng) >= config.null_drop) conds[b] = labels[idx];
    }
    const Array eps = standard_normal({batch, d}, rng);
    Array x_t(x0.shape());
    for (std::size_t b = 0; b < batch; ++b) {
      const int t = static_cast<int>(ts[b]);
      const double a = schedule.alpha_at(t), s = schedule.sigma_at(t);
      for (std::size_t j = 0; j < d; ++j) x_t(b, j) = a * x0(b, j) + s * eps(b, j);
    }

    Tape tape;
    auto params = model.bind(tape);
    Var loss = epsilon_loss(tape, params, model, x_t, ts, conds, eps);
    const double value = loss.value().item();
    if (!std::isfinite(value) || value > config.divergence_limit)
      throw NumericError("pretrain diverged at step " + std::to_string(step) + " (loss " + std::to_string(value) +
                         ")");
    const Gradients grads = tape.backward(loss);
    std::vector<Array> g;
    g.reserve(params.size());
    for (const Var& p : params) g.push_back(grads.of(p));

    AdamConfig adam = config.adam;
    const double progress_frac = config.steps > 1 ? static_cast<double>(step) / (config.steps - 1) : 1.0;
    adam.lr = config.adam.lr * (config.final_lr_fraction +
                                (1.0 - config.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress_frac)));
    adamw_step(model.parameters(), g, state, adam, model.parameter_names());

    result.loss_history.push_back(value);
    smoothed = step == 0 ? value : config.smoothing * smoothed + (1.0 - config.smoothing) * value;
    if (progress) progress(step + 1, value);
  }
  result.smoothed_loss = smoothed;
  if (smoothed > config.loss_threshold) {
    result.warned = true;
    std::cerr << "warning: pretraining smoothed loss " << smoothed << " above threshold " << config.loss_threshold
              << '\n';
  }
  return result;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

json config_json(const DenoiserConfig& c) {
  return json{{"data_dim", c.data_dim},     {"num_classes", c.num_classes}, {"time_dim", c.time_dim},
              {"cond_dim", c.cond_dim},     {"hidden", c.hidden},           {"depth", c.depth},
              {"init_seed", c.init_seed}};
}

std::string checkpoint_digest(const json& config, const json& schedule, const std::vector<Array>& params) {
  std::string bytes = config.dump() + schedule.dump();
  for (const auto& p : params) {
    bytes.append(reinterpret_cast<const char*>(p.data()), p.size() * sizeof(double));
  }
  return fnv1a_hex(bytes);
}

}  // namespace

void save_checkpoint(const Denoiser& model, const Schedule& schedule, const std::filesystem::path& path) {
  const json cfg = config_json(model.config());
  const json sched{{"kind", to_string(schedule.kind)}, {"T", schedule.T}};
  json params = json::array();
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const Array& p = model.parameters()[i];
    params.push_back({{"name", model.parameter_names()[i]}, {"shape", p.shape()}, {"values", p.storage()}});
  }
  const json doc{{"format", "sharpen-denoiser"},
                 {"version", 1},
                 {"config", cfg},
                 {"schedule", sched},
                 {"parameters", params},
                 {"hash", checkpoint_digest(cfg, sched, model.parameters())}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << doc.dump() << '\n';
}

LoadedDenoiser load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("malformed checkpoint " + path.string() + ": " + e.what());
  }
  if (doc.value("format", "") != "sharpen-denoiser") throw Error("not a denoiser checkpoint: " + path.string());
  const json& c = doc.at("config");
  DenoiserConfig cfg;
  cfg.data_dim = c.at("data_dim");
  cfg.num_classes = c.at("num_classes");
  cfg.time_dim = c.at("time_dim");
  cfg.cond_dim = c.at("cond_dim");
  cfg.hidden = c.at("hidden");
  cfg.depth = c.at("depth");
  cfg.init_seed = c.at("init_seed");
  Denoiser model(cfg);
  const json& params = doc.at("parameters");
  if (params.size() != model.parameters().size()) throw Error("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Array p(params[i].at("shape").get<Shape>(), params[i].at("values").get<std::vector<double>>());
    if (p.shape() != model.parameters()[i].shape())
      throw Error("checkpoint parameter " + model.parameter_names()[i] + " has shape " + shape_string(p.shape()));
    model.parameters()[i] = std::move(p);
  }
  const json& sched = doc.at("schedule");
  Schedule schedule = make_schedule(parse_schedule_kind(sched.at("kind")), sched.at("T"));
  if (checkpoint_digest(config_json(cfg), sched, model.parameters()) != doc.at("hash").get<std::string>())
    throw Error("checkpoint hash mismatch: " + path.string());
  return {std::move(model), std::move(schedule)};
}

}  // namespace sharpen
