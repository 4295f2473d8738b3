#include "sharpen/harness.hpp"

#include <chrono>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>

#include "sharpen/baselines.hpp"
#include "sharpen/error.hpp"

namespace sharpen {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::uint64_t kHeldoutSalt = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kEvalSalt = 0xd1b54a32d192ed03ULL;

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

bool is_mixture(DatasetKind kind) { return kind == DatasetKind::gmm2 || kind == DatasetKind::gmm8; }

std::size_t mode_count(const ExperimentConfig& config) {
  return is_mixture(config.dataset.kind) ? mixture_geometry(config.dataset.kind).means.size() : 0;
}

MetricRecord blank_record(int step, std::size_t modes) {
  MetricRecord r;
  r.step = step;
  r.loss = r.mean_reward = r.selected_reward = r.reward_std = kNaN;
  r.eval_reward = r.eval_mmd2 = r.eval_loss = r.nfe = kNaN;
  r.eval_modes.assign(modes == 0 ? 0 : modes + 1, kNaN);
  return r;
}

void fill_eval(MetricRecord& r, const EvalResult& e) {
  r.eval_reward = e.reward.mean;
  r.eval_mmd2 = e.mmd2.value_or(kNaN);
  if (e.modes) {
    for (std::size_t k = 0; k < e.modes->fractions.size(); ++k) r.eval_modes[k] = e.modes->fractions[k];
    r.eval_modes.back() = e.modes->outside;
  }
  r.nfe = e.nfe_per_sample;
}

class MetricsWriter {
 public:
  MetricsWriter(const fs::path& dir, std::size_t modes) : metrics_(dir / "metrics.csv"), timing_(dir / "timing.csv") {
    if (!metrics_ || !timing_) throw Error("cannot write metrics in " + dir.string());
    metrics_ << "step,loss,mean_reward,selected_reward,reward_std,eval_reward,eval_mmd2";
    for (std::size_t k = 0; k < modes; ++k) metrics_ << ",eval_mode_" << k;
    if (modes > 0) metrics_ << ",eval_outside";
    metrics_ << ",eval_loss,nfe\n";
    timing_ << "step,wall_seconds\n";
  }

  void write(const MetricRecord& r) {
    metrics_ << r.step << ',' << fmt(r.loss) << ',' << fmt(r.mean_reward) << ',' << fmt(r.selected_reward) << ','
             << fmt(r.reward_std) << ',' << fmt(r.eval_reward) << ',' << fmt(r.eval_mmd2);
    for (double v : r.eval_modes) metrics_ << ',' << fmt(v);
    metrics_ << ',' << fmt(r.eval_loss) << ',' << fmt(r.nfe) << '\n';
    timing_ << r.step << ',' << fmt(r.wall_seconds) << '\n';
  }

  void flush() {
    metrics_.flush();
    timing_.flush();
  }

 private:
  std::ofstream metrics_;
  std::ofstream timing_;
};

void dump_samples(const fs::path& path, const EvalResult& e, const Standardizer& standardizer,
                  std::span<const Condition> prompts) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  const Array raw = standardizer.to_raw(e.samples);
  out << "x0,x1,cond,reward\n";
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    out << fmt(raw(r, 0)) << ',' << fmt(raw(r, 1)) << ',' << (prompts[r] ? std::to_string(*prompts[r]) : "") << ','
        << fmt(e.rewards[r]) << '\n';
  }
}

void dump_trajectories(std::ofstream& out, int step, const StepStats& stats) {
  for (std::size_t ex = 0; ex < stats.candidates.size(); ++ex) {
    const auto& cands = stats.candidates[ex];
    const auto pick = stats.selections[ex];
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const Trajectory& tr = cands[i];
      json line = {{"step", step},
                   {"example", ex},
                   {"candidate", i},
                   {"t", tr.t_start},
                   {"seed", tr.seed},
                   {"cond", tr.cond ? json(*tr.cond) : json(nullptr)},
                   {"sampler", to_string(tr.sampler)},
                   {"timesteps", tr.timesteps},
                   {"rewards", tr.rewards},
                   {"aggregate", aggregate_reward(tr)},
                   {"best", i == pick.first},
                   {"worst", cands.size() > 1 && i == pick.second}};
      if (tr.log_probs) line["log_probs"] = *tr.log_probs;
      out << line.dump() << '\n';
    }
  }
}

double decile_mean(const std::vector<double>& v, bool last) {
  const std::size_t k = std::max<std::size_t>(1, v.size() / 10);
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) acc += last ? v[v.size() - 1 - i] : v[i];
  return acc / static_cast<double>(k);
}

void summarize_series(std::map<std::string, double>& summary, const std::string& name, const std::vector<double>& v) {
  if (v.empty()) return;
  const double first = decile_mean(v, false), last = decile_mean(v, true);
  summary[name + "_first_decile"] = first;
  summary[name + "_last_decile"] = last;
  summary[name + "_trend"] = last - first;
  if (first != 0.0) summary[name + "_ratio"] = last / first;
}

void summarize_eval(std::map<std::string, double>& summary, const std::string& prefix, const EvalResult& e) {
  summary[prefix + "eval_reward"] = e.reward.mean;
  summary[prefix + "eval_reward_sem"] = e.reward.sem();
  summary[prefix + "nfe_per_sample"] = e.nfe_per_sample;
  if (e.mmd2) summary[prefix + "eval_mmd2"] = *e.mmd2;
  if (e.modes) {
    for (std::size_t k = 0; k < e.modes->fractions.size(); ++k)
      summary[prefix + "mode_fraction_" + std::to_string(k)] = e.modes->fractions[k];
    summary[prefix + "outside_fraction"] = e.modes->outside;
  }
}

Array gather_rows(const Array& a, std::span<const std::size_t> idx) {
  Array out({idx.size(), a.cols()});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < a.cols(); ++j) out(r, j) = a(idx[r], j);
  return out;
}

bool compare(double actual, const std::string& op, double value) {
  if (op == "<") return actual < value;
  if (op == "<=") return actual <= value;
  if (op == ">") return actual > value;
  if (op == ">=") return actual >= value;
  return actual == value;
}

}  // namespace

bool RunResult::passed() const {
  for (const auto& a : assertions)
    if (!a.passed) return false;
  return true;
}

ExperimentData load_experiment_data(const ExperimentConfig& config) {
  ExperimentData data;
  data.train = make_dataset(config.dataset.kind, config.dataset.n, config.dataset.seed);
  if (config.dataset.heldout > 0)
    data.heldout = make_dataset(config.dataset.kind, config.dataset.heldout, config.dataset.seed ^ kHeldoutSalt);
  return data;
}

std::unique_ptr<RewardModel> make_reward(const ExperimentConfig& config, const Dataset& data) {
  const RewardConfig& rc = config.reward;
  std::unique_ptr<RewardModel> reward;
  if (rc.kind == "mode_distance") {
    std::vector<double> target = rc.target;
    if (target.empty()) {
      if (!is_mixture(config.dataset.kind))
        throw ConfigError("reward.target is required for mode_distance on " + to_string(config.dataset.kind));
      const auto means = mixture_geometry(config.dataset.kind).means;
      if (rc.mode < 0 || static_cast<std::size_t>(rc.mode) >= means.size())
        throw ConfigError("reward.mode " + std::to_string(rc.mode) + " out of range");
      target = means[static_cast<std::size_t>(rc.mode)];
    }
    reward = std::make_unique<ModeDistanceReward>(target);
    reward->set_input_transform(data.standardizer);
  } else if (rc.kind == "target_logpdf") {
    reward = std::make_unique<TargetLogpdfReward>(mixture_for(config.dataset.kind));
    reward->set_input_transform(data.standardizer);
  } else if (rc.kind == "classifier") {
    const std::optional<int> target = rc.target_class >= 0 ? std::optional<int>(rc.target_class) : std::nullopt;
    if (rc.classifier.empty()) {
      ClassifierConfig cc;
      cc.seed = config.seed;
      reward = std::make_unique<ClassifierReward>(train_classifier(data, cc).model, target);
    } else {
      reward = ClassifierReward::from_checkpoint(rc.classifier, target);
    }
  } else if (rc.kind == "external") {
    if (rc.endpoint.empty()) throw ConfigError("reward.endpoint is required for the external reward");
    reward = std::make_unique<ExternalReward>(Endpoint::parse(rc.endpoint, std::chrono::milliseconds(rc.timeout_ms)));
    reward->set_input_transform(data.standardizer);
  } else {
    throw ConfigError("unknown reward kind '" + rc.kind +
                      "' (expected mode_distance, target_logpdf, classifier or external)");
  }
  return reward;
}

std::vector<Condition> make_prompts(PromptMode mode, std::size_t count, int num_classes) {
  std::vector<Condition> out(count);
  if (mode == PromptMode::null) return out;
  if (num_classes <= 0) throw ConfigError("label prompts need a conditional model");
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<int>(i % static_cast<std::size_t>(num_classes));
  return out;
}

EvalResult evaluate(const Denoiser& model, const Schedule& schedule, const ExperimentConfig& config,
                    const ExperimentData& data, RewardModel& reward, Rng& rng) {
  const auto prompts = make_prompts(config.eval.prompts, config.eval.samples, model.config().num_classes);
  EvalResult e;
  NfeLedger ledger;
  e.samples = generate_samples(model, schedule, prompts, config.eval.guidance, rng, &ledger);
  e.nfe_per_sample = ledger.per_sample();
  e.rewards = reward.score_rows(e.samples, prompts);
  e.reward = mean_std(e.rewards);
  if (config.eval.mmd && data.heldout.samples.rows() >= 2) {
    const std::size_t n = std::min(e.samples.rows(), data.heldout.samples.rows());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    e.mmd2 = mmd2(gather_rows(e.samples, idx), gather_rows(data.heldout.samples, idx));
  }
  if (is_mixture(config.dataset.kind))
    e.modes = mode_fractions(data.train.standardizer.to_raw(e.samples), mixture_for(config.dataset.kind),
                             config.eval.radius);
  return e;
}

double heldout_epsilon_loss(const Denoiser& model, const Schedule& schedule, const Dataset& heldout,
                            std::size_t count, std::uint64_t seed) {
  if (heldout.samples.rows() == 0) throw ConfigError("held-out loss needs held-out data");
  Rng rng(seed);
  const std::size_t d = heldout.samples.cols();
  Array x({count, d});
  std::vector<double> ts(count);
  std::vector<Condition> conds(count);
  const Array eps = standard_normal({count, d}, rng);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t src = i % heldout.samples.rows();
    const int t = uniform_int(rng, 1, schedule.T);
    ts[i] = static_cast<double>(t);
    for (std::size_t j = 0; j < d; ++j)
      x(i, j) = schedule.alpha_at(t) * heldout.samples(src, j) + schedule.sigma_at(t) * eps(i, j);
    if (model.config().num_classes > 0 && heldout.labels) conds[i] = (*heldout.labels)[src];
  }
  const Array pred = model.predict_eps(x, ts, conds);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - eps[i]) * (pred[i] - eps[i]);
  return acc / static_cast<double>(count);
}

std::vector<double> smooth(std::span<const double> values, double factor) {
  std::vector<double> out;
  out.reserve(values.size());
  double s = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    s = i == 0 ? values[0] : factor * s + (1.0 - factor) * values[i];
    out.push_back(s);
  }
  return out;
}

std::vector<AssertionOutcome> check_assertions(std::span<const AssertionSpec> specs,
                                               const std::map<std::string, double>& summary) {
  std::vector<AssertionOutcome> out;
  for (const auto& spec : specs) {
    const auto it = summary.find(spec.metric);
    if (it == summary.end()) throw ConfigError("assertion names unknown metric '" + spec.metric + "'");
    out.push_back({spec, it->second, compare(it->second, spec.op, spec.value)});
  }
  return out;
}

RunResult run_experiment(const ExperimentConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  const auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };
  RunResult result;
  result.directory = config.output;
  fs::create_directories(result.directory);
  save_config(config, result.directory / "config.json");

  const ExperimentData data = load_experiment_data(config);
  const Schedule schedule = make_schedule(config.schedule, config.T);
  auto reward = make_reward(config, data.train);
  const std::size_t modes = mode_count(config);
  const TrainerKind kind = config.trainer.kind;
  const std::uint64_t eval_seed = config.seed ^ kEvalSalt;

  std::optional<Denoiser> model;
  if (kind == TrainerKind::pretrain) {
    model.emplace(denoiser_config(config, data.train.num_classes));
  } else {
    if (config.model.checkpoint.empty())
      throw ConfigError("model.checkpoint is required for trainer '" + to_string(kind) + "'");
    LoadedDenoiser loaded = load_checkpoint(config.model.checkpoint);
    if (loaded.schedule.kind != schedule.kind || loaded.schedule.T != schedule.T) {
      throw ConfigError("checkpoint schedule (" + to_string(loaded.schedule.kind) + ", T=" +
                        std::to_string(loaded.schedule.T) + ") does not match the config");
    }
    model.emplace(std::move(loaded.model));
  }
  const Denoiser base = *model;

  MetricsWriter writer(result.directory, modes);
  std::ofstream trajectories;
  std::optional<EvalResult> last_eval;

  const auto run_eval = [&](MetricRecord& r) {
    Rng rng(eval_seed);
    last_eval = evaluate(*model, schedule, config, data, *reward, rng);
    fill_eval(r, *last_eval);
    const auto prompts = make_prompts(config.eval.prompts, config.eval.samples, model->config().num_classes);
    dump_samples(result.directory / "samples" / ("step_" + std::to_string(r.step) + ".csv"), *last_eval,
                 data.train.standardizer, prompts);
  };
  const auto eval_due = [&](int step, int total) {
    return step == total || (config.eval.every > 0 && step % config.eval.every == 0);
  };
  const auto loss_due = [&](int step, int total) {
    return config.eval.loss_samples > 0 &&
           (step == total || (config.eval.loss_every > 0 && step % config.eval.loss_every == 0));
  };
  const auto push = [&](MetricRecord r) {
    r.wall_seconds = elapsed();
    writer.write(r);
    result.records.push_back(std::move(r));
  };

  // Step 0 is the starting model.
  if (kind != TrainerKind::pretrain) {
    MetricRecord r = blank_record(0, modes);
    run_eval(r);
    summarize_eval(result.summary, "initial_", *last_eval);
    if (config.eval.loss_samples > 0) {
      r.eval_loss = heldout_epsilon_loss(*model, schedule, data.heldout, config.eval.loss_samples, eval_seed);
      result.summary["initial_eval_loss"] = r.eval_loss;
    }
    push(std::move(r));
  }

  if (kind == TrainerKind::pretrain) {
    PretrainConfig pc = config.pretrain;
    pc.seed = config.seed;
    std::vector<int> labels;
    if (model->config().num_classes > 0 && data.train.labels) labels = *data.train.labels;
    const int total = pc.steps;
    const ProgressFn progress = [&](int step, double loss) {
      MetricRecord r = blank_record(step, modes);
      r.loss = loss;
      if (loss_due(step, total))
        r.eval_loss = heldout_epsilon_loss(*model, schedule, data.heldout, config.eval.loss_samples, eval_seed);
      if (eval_due(step, total)) run_eval(r);
      push(std::move(r));
    };
    const PretrainResult pr = pretrain(*model, data.train.samples, labels, schedule, pc, progress);
    result.summary["pretrain_smoothed_loss"] = pr.smoothed_loss;
    result.summary["pretrain_warned"] = pr.warned ? 1.0 : 0.0;
  } else if (kind == TrainerKind::sft || kind == TrainerKind::standard || kind == TrainerKind::rlhf ||
             kind == TrainerKind::dpo_vanilla) {
    const TrainConfig tc =
        kind == TrainerKind::dpo_vanilla ? vanilla_dpo_config(config.trainer.train) : config.trainer.train;
    tc.validate(schedule);
    if (config.trainer.dump_every > 0) trajectories.open(result.directory / "trajectories.jsonl");
    Rng rng(config.seed);
    OptimState state = make_optim_state(model->parameters());
    Denoiser reference = *model;
    const int classes = model->config().num_classes;
    const bool use_labels = config.trainer.prompts == PromptMode::labels;
    if (use_labels && classes <= 0) throw ConfigError("trainer.prompts = labels needs a conditional model");
    const std::size_t batch = static_cast<std::size_t>(tc.batch_size);
    for (int step = 1; step <= tc.steps; ++step) {
      StepStats stats;
      if (kind == TrainerKind::sft || kind == TrainerKind::standard) {
        std::vector<std::size_t> idx(batch);
        std::vector<Condition> conds(batch);
        for (std::size_t i = 0; i < batch; ++i) {
          idx[i] = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(data.train.samples.rows()) - 1));
          if (use_labels) {
            if (!data.train.labels) throw ConfigError("label prompts need a labeled dataset");
            conds[i] = (*data.train.labels)[idx[i]];
          }
        }
        const Array x0 = gather_rows(data.train.samples, idx);
        stats = kind == TrainerKind::sft ? sft_sharpen_step(*model, state, schedule, x0, conds, tc, *reward, rng)
                                         : standard_finetune_step(*model, state, schedule, x0, conds, tc, rng);
      } else {
        std::vector<Condition> prompts(batch);
        if (use_labels)
          for (auto& p : prompts) p = uniform_int(rng, 0, classes - 1);
        stats = rlhf_sharpen_step(*model, reference, state, schedule, prompts, tc, *reward, rng);
        if (tc.reference_refresh > 0 && step % tc.reference_refresh == 0) reference = *model;
      }
      MetricRecord r = blank_record(step, modes);
      r.loss = stats.loss;
      if (!stats.candidates.empty()) {
        r.mean_reward = stats.mean_aggregate;
        r.selected_reward = stats.selected_aggregate;
        r.reward_std = stats.candidate_std;
      }
      if (loss_due(step, tc.steps))
        r.eval_loss = heldout_epsilon_loss(*model, schedule, data.heldout, config.eval.loss_samples, eval_seed);
      if (eval_due(step, tc.steps)) run_eval(r);
      if (trajectories.is_open() && !stats.candidates.empty() &&
          (step == 1 || step % config.trainer.dump_every == 0))
        dump_trajectories(trajectories, step, stats);
      push(std::move(r));
    }
  }

  writer.flush();
  summarize_eval(result.summary, "", *last_eval);

  // Summary statistics over the training curve.
  std::vector<double> losses, mean_rewards, selected, stds, eval_losses;
  for (const auto& r : result.records) {
    if (!std::isnan(r.loss)) losses.push_back(r.loss);
    if (!std::isnan(r.mean_reward)) mean_rewards.push_back(r.mean_reward);
    if (!std::isnan(r.selected_reward)) selected.push_back(r.selected_reward);
    if (!std::isnan(r.reward_std)) stds.push_back(r.reward_std);
    if (!std::isnan(r.eval_loss)) eval_losses.push_back(r.eval_loss);
  }
  result.summary["steps"] = static_cast<double>(
      std::count_if(result.records.begin(), result.records.end(), [](const MetricRecord& r) { return r.step > 0; }));
  if (!losses.empty()) {
    result.summary["final_loss"] = losses.back();
    result.summary["final_smoothed_loss"] = smooth(losses, config.eval.smoothing).back();
  }
  if (!eval_losses.empty()) result.summary["final_eval_loss"] = eval_losses.back();
  summarize_series(result.summary, "mean_reward", mean_rewards);
  summarize_series(result.summary, "selected_reward", selected);
  summarize_series(result.summary, "reward_std", stds);

  // Reward vs NFE: best-of-n on the starting model plus the final model.
  for (int n : config.eval.best_of_n) {
    Rng rng(eval_seed + static_cast<std::uint64_t>(n));
    const auto prompts = make_prompts(config.eval.prompts, config.eval.samples, base.config().num_classes);
    const auto picks = best_of_n_batch(base, prompts, n, *reward, schedule, rng, config.eval.guidance);
    std::vector<double> best;
    double nfe = 0.0;
    for (const auto& p : picks) {
      best.push_back(p.rewards[p.index]);
      nfe += static_cast<double>(p.ledger.total());
    }
    const MeanStd ms = mean_std(best);
    result.frontier.push_back({"best-of-n", n, nfe / static_cast<double>(picks.size()), ms.mean, ms.sem()});
    result.summary["best_of_" + std::to_string(n) + "_reward"] = ms.mean;
  }
  if (!config.eval.best_of_n.empty()) {
    result.frontier.push_back(
        {to_string(kind), 1, last_eval->nfe_per_sample, last_eval->reward.mean, last_eval->reward.sem()});
    std::ofstream out(result.directory / "frontier.csv");
    out << "method,n,nfe,mean_reward,sem\n";
    for (const auto& p : result.frontier)
      out << p.method << ',' << p.n << ',' << fmt(p.nfe_per_sample) << ',' << fmt(p.mean_reward) << ','
          << fmt(p.sem) << '\n';
  }

  save_checkpoint(*model, schedule, result.directory / "model.json");
  result.assertions = check_assertions(config.assertions, result.summary);

  json summary = result.summary;
  json checks = json::array();
  for (const auto& a : result.assertions)
    checks.push_back({{"metric", a.spec.metric}, {"op", a.spec.op}, {"value", a.spec.value}, {"actual", a.actual},
                      {"passed", a.passed}});
  std::ofstream(result.directory / "summary.json") << json{{"summary", summary}, {"assertions", checks}}.dump(2)
                                                   << '\n';
  if (!result.records.empty()) plot_emit(result.directory);
  return result;
}

std::vector<RunResult> ablate(const ExperimentConfig& config, const std::string& key,
                              const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("ablate: no values given");
  const fs::path root = config.output;
  fs::create_directories(root);
  const json base = to_json(config);
  std::vector<RunResult> runs;
  for (const auto& value : values) {
    json child = base;
    apply_override(child, key, value);
    ExperimentConfig cfg = config_from_json(child);
    cfg.output = (root / (key + "=" + value)).string();
    cfg.id = config.id + "/" + key + "=" + value;
    std::cout << "ablate: " << key << " = " << value << " -> " << cfg.output << std::endl;
    runs.push_back(run_experiment(cfg));
  }
  std::vector<std::string> columns;
  for (const auto& run : runs)
    for (const auto& [name, v] : run.summary)
      if (std::find(columns.begin(), columns.end(), name) == columns.end()) columns.push_back(name);
  std::ofstream out(root / "summary.csv");
  out << key;
  for (const auto& c : columns) out << ',' << c;
  out << '\n';
  for (std::size_t i = 0; i < runs.size(); ++i) {
    out << values[i];
    for (const auto& c : columns) {
      const auto it = runs[i].summary.find(c);
      out << ',' << (it == runs[i].summary.end() ? "" : fmt(it->second));
    }
    out << '\n';
  }
  return runs;
}

}  // namespace sharpen
