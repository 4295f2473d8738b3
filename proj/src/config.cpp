#include "sharpen/config.hpp"

#include <fstream>
#include <sstream>

#include "sharpen/error.hpp"

namespace sharpen {

using nlohmann::json;

TrainerKind parse_trainer_kind(const std::string& name) {
  if (name == "pretrain") return TrainerKind::pretrain;
  if (name == "sft") return TrainerKind::sft;
  if (name == "rlhf") return TrainerKind::rlhf;
  if (name == "standard") return TrainerKind::standard;
  if (name == "dpo-vanilla") return TrainerKind::dpo_vanilla;
  if (name == "best-of-n") return TrainerKind::best_of_n;
  if (name == "eval") return TrainerKind::eval;
  throw ConfigError("unknown trainer kind '" + name +
                    "' (expected pretrain, sft, rlhf, standard, dpo-vanilla, best-of-n or eval)");
}

std::string to_string(TrainerKind kind) {
  switch (kind) {
    case TrainerKind::pretrain: return "pretrain";
    case TrainerKind::sft: return "sft";
    case TrainerKind::rlhf: return "rlhf";
    case TrainerKind::standard: return "standard";
    case TrainerKind::dpo_vanilla: return "dpo-vanilla";
    case TrainerKind::best_of_n: return "best-of-n";
    case TrainerKind::eval: return "eval";
  }
  return "?";
}

PromptMode parse_prompt_mode(const std::string& name) {
  if (name == "null") return PromptMode::null;
  if (name == "labels") return PromptMode::labels;
  throw ConfigError("unknown prompt mode '" + name + "' (expected null or labels)");
}

std::string to_string(PromptMode mode) { return mode == PromptMode::null ? "null" : "labels"; }

namespace {

json adam_json(const AdamConfig& a) {
  return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"epsilon", a.epsilon}, {"weight_decay", a.weight_decay}};
}

AdamConfig adam_from(const json& j) {
  return {j.at("lr").get<double>(), j.at("beta1").get<double>(), j.at("beta2").get<double>(),
          j.at("epsilon").get<double>(), j.at("weight_decay").get<double>()};
}

const char* type_label(const json& j) {
  if (j.is_number()) return "number";
  if (j.is_boolean()) return "boolean";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

bool same_type(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

// Overlays `user` onto `base`, which holds the full schema with defaults.
void overlay(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (!same_type(slot, it.value())) {
      throw ConfigError("config key '" + key + "' expects " + type_label(slot) + ", got " + type_label(it.value()));
    }
    if (slot.is_object()) {
      overlay(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

void check_positive(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  const TrainConfig& t = c.trainer.train;
  json assertions = json::array();
  for (const auto& a : c.assertions) assertions.push_back({{"metric", a.metric}, {"op", a.op}, {"value", a.value}});
  return {
      {"version", c.version},
      {"id", c.id},
      {"seed", c.seed},
      {"output", c.output},
      {"dataset", {{"kind", to_string(c.dataset.kind)}, {"n", c.dataset.n}, {"heldout", c.dataset.heldout},
                   {"seed", c.dataset.seed}}},
      {"schedule", {{"kind", to_string(c.schedule)}, {"T", c.T}}},
      {"model", {{"hidden", c.model.hidden}, {"depth", c.model.depth}, {"time_dim", c.model.time_dim},
                 {"cond_dim", c.model.cond_dim}, {"conditional", c.model.conditional},
                 {"init_seed", c.model.init_seed}, {"checkpoint", c.model.checkpoint}}},
      {"pretrain", {{"steps", c.pretrain.steps}, {"batch_size", c.pretrain.batch_size},
                    {"adam", adam_json(c.pretrain.adam)}, {"final_lr_fraction", c.pretrain.final_lr_fraction},
                    {"null_drop", c.pretrain.null_drop}, {"smoothing", c.pretrain.smoothing},
                    {"loss_threshold", c.pretrain.loss_threshold}}},
      {"trainer", {{"kind", to_string(c.trainer.kind)},
                   {"n", t.n},
                   {"m", t.m},
                   {"min_end_index", t.min_end_index},
                   {"max_start_index", t.max_start_index},
                   {"adam", adam_json(t.adam)},
                   {"beta", t.beta},
                   {"lambda", t.lambda},
                   {"reward_modulation", t.reward_modulation == RewardModulation::inside ? "inside" : "off"},
                   {"guidance", t.guidance},
                   {"estimator", t.estimator.describe()},
                   {"sft_sampler", to_string(t.sft_sampler)},
                   {"eta", t.eta},
                   {"batch_size", t.batch_size},
                   {"steps", t.steps},
                   {"reference_refresh", t.reference_refresh},
                   {"prompts", to_string(c.trainer.prompts)},
                   {"dump_every", c.trainer.dump_every}}},
      {"reward", {{"kind", c.reward.kind}, {"mode", c.reward.mode}, {"target", c.reward.target},
                  {"classifier", c.reward.classifier}, {"target_class", c.reward.target_class},
                  {"endpoint", c.reward.endpoint}, {"timeout_ms", c.reward.timeout_ms}}},
      {"eval", {{"every", c.eval.every}, {"samples", c.eval.samples}, {"guidance", c.eval.guidance},
                {"prompts", to_string(c.eval.prompts)}, {"mmd", c.eval.mmd}, {"radius", c.eval.radius},
                {"loss_samples", c.eval.loss_samples}, {"loss_every", c.eval.loss_every},
                {"best_of_n", c.eval.best_of_n}, {"smoothing", c.eval.smoothing}}},
      {"assertions", assertions},
  };
}

ExperimentConfig config_from_json(const json& user) {
  json j = to_json(ExperimentConfig{});
  overlay(j, user, "");
  ExperimentConfig c;
  try {
    c.version = j.at("version").get<int>();
    if (c.version != kConfigVersion) {
      throw ConfigError("unsupported config version " + std::to_string(c.version) + " (expected " +
                        std::to_string(kConfigVersion) + ")");
    }
    c.id = j.at("id").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output = j.at("output").get<std::string>();

    const json& d = j.at("dataset");
    c.dataset.kind = parse_dataset_kind(d.at("kind").get<std::string>());
    c.dataset.n = d.at("n").get<std::size_t>();
    c.dataset.heldout = d.at("heldout").get<std::size_t>();
    c.dataset.seed = d.at("seed").get<std::uint64_t>();

    c.schedule = parse_schedule_kind(j.at("schedule").at("kind").get<std::string>());
    c.T = j.at("schedule").at("T").get<int>();

    const json& m = j.at("model");
    c.model.hidden = m.at("hidden").get<int>();
    c.model.depth = m.at("depth").get<int>();
    c.model.time_dim = m.at("time_dim").get<int>();
    c.model.cond_dim = m.at("cond_dim").get<int>();
    c.model.conditional = m.at("conditional").get<bool>();
    c.model.init_seed = m.at("init_seed").get<std::uint64_t>();
    c.model.checkpoint = m.at("checkpoint").get<std::string>();

    const json& p = j.at("pretrain");
    c.pretrain.steps = p.at("steps").get<int>();
    c.pretrain.batch_size = p.at("batch_size").get<int>();
    c.pretrain.adam = adam_from(p.at("adam"));
    c.pretrain.final_lr_fraction = p.at("final_lr_fraction").get<double>();
    c.pretrain.null_drop = p.at("null_drop").get<double>();
    c.pretrain.smoothing = p.at("smoothing").get<double>();
    c.pretrain.loss_threshold = p.at("loss_threshold").get<double>();

    const json& t = j.at("trainer");
    TrainConfig& tc = c.trainer.train;
    c.trainer.kind = parse_trainer_kind(t.at("kind").get<std::string>());
    tc.n = t.at("n").get<int>();
    tc.m = t.at("m").get<int>();
    tc.min_end_index = t.at("min_end_index").get<int>();
    tc.max_start_index = t.at("max_start_index").get<int>();
    tc.adam = adam_from(t.at("adam"));
    tc.beta = t.at("beta").get<double>();
    tc.lambda = t.at("lambda").get<double>();
    const std::string modulation = t.at("reward_modulation").get<std::string>();
    if (modulation == "inside") {
      tc.reward_modulation = RewardModulation::inside;
    } else if (modulation == "off") {
      tc.reward_modulation = RewardModulation::off;
    } else {
      throw ConfigError("trainer.reward_modulation must be inside or off, got '" + modulation + "'");
    }
    tc.guidance = t.at("guidance").get<double>();
    tc.estimator = parse_estimator(t.at("estimator").get<std::string>());
    tc.sft_sampler = parse_sampler_kind(t.at("sft_sampler").get<std::string>());
    tc.eta = t.at("eta").get<double>();
    tc.batch_size = t.at("batch_size").get<int>();
    tc.steps = t.at("steps").get<int>();
    tc.reference_refresh = t.at("reference_refresh").get<int>();
    c.trainer.prompts = parse_prompt_mode(t.at("prompts").get<std::string>());
    c.trainer.dump_every = t.at("dump_every").get<int>();

    const json& r = j.at("reward");
    c.reward.kind = r.at("kind").get<std::string>();
    c.reward.mode = r.at("mode").get<int>();
    c.reward.target = r.at("target").get<std::vector<double>>();
    c.reward.classifier = r.at("classifier").get<std::string>();
    c.reward.target_class = r.at("target_class").get<int>();
    c.reward.endpoint = r.at("endpoint").get<std::string>();
    c.reward.timeout_ms = r.at("timeout_ms").get<int>();

    const json& e = j.at("eval");
    c.eval.every = e.at("every").get<int>();
    c.eval.samples = e.at("samples").get<std::size_t>();
    c.eval.guidance = e.at("guidance").get<double>();
    c.eval.prompts = parse_prompt_mode(e.at("prompts").get<std::string>());
    c.eval.mmd = e.at("mmd").get<bool>();
    c.eval.radius = e.at("radius").get<double>();
    c.eval.loss_samples = e.at("loss_samples").get<std::size_t>();
    c.eval.loss_every = e.at("loss_every").get<int>();
    c.eval.best_of_n = e.at("best_of_n").get<std::vector<int>>();
    c.eval.smoothing = e.at("smoothing").get<double>();

    for (const json& a : j.at("assertions")) {
      for (auto it = a.begin(); it != a.end(); ++it) {
        if (it.key() != "metric" && it.key() != "op" && it.key() != "value")
          throw ConfigError("unknown config key 'assertions[]." + it.key() + "'");
      }
      AssertionSpec spec{a.at("metric").get<std::string>(), a.at("op").get<std::string>(), a.at("value").get<double>()};
      if (spec.op != "<" && spec.op != "<=" && spec.op != ">" && spec.op != ">=" && spec.op != "==")
        throw ConfigError("assertion on '" + spec.metric + "' has unknown operator '" + spec.op + "'");
      c.assertions.push_back(spec);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }

  check_positive(c.dataset.n >= 1, "dataset.n must be >= 1");
  check_positive(c.T >= 2, "schedule.T must be >= 2");
  check_positive(c.model.hidden >= 1 && c.model.depth >= 1, "model.hidden and model.depth must be >= 1");
  check_positive(c.model.time_dim >= 2 && c.model.time_dim % 2 == 0, "model.time_dim must be even and >= 2");
  check_positive(c.pretrain.steps >= 0, "pretrain.steps must be >= 0");
  check_positive(c.pretrain.batch_size >= 1, "pretrain.batch_size must be >= 1");
  check_positive(c.pretrain.null_drop >= 0.0 && c.pretrain.null_drop <= 1.0, "pretrain.null_drop must lie in [0, 1]");
  check_positive(c.eval.samples >= 2, "eval.samples must be >= 2");
  check_positive(c.eval.radius > 0.0, "eval.radius must be positive");
  check_positive(c.eval.guidance >= 0.0, "eval.guidance must be non-negative");
  check_positive(c.eval.smoothing >= 0.0 && c.eval.smoothing < 1.0, "eval.smoothing must lie in [0, 1)");
  for (int n : c.eval.best_of_n) check_positive(n >= 1, "eval.best_of_n entries must be >= 1");
  c.trainer.train.validate(make_schedule(c.schedule, c.T));
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void save_config(const ExperimentConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json(config).dump(2) << '\n';
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  apply_override(config, assignment.substr(0, eq), assignment.substr(eq + 1));
}

void apply_override(json& config, const std::string& key, const std::string& value) {
  const json schema = to_json(ExperimentConfig{});
  const json* expected = &schema;
  json* slot = &config;
  std::stringstream parts(key);
  std::string part;
  while (std::getline(parts, part, '.')) {
    if (!expected->is_object() || !expected->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    expected = &(*expected)[part];
    if (!slot->is_object()) *slot = json::object();
    slot = &(*slot)[part];
  }
  if (expected->is_object()) throw ConfigError("config key '" + key + "' names a section, not a value");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;
  }
  if (expected->is_array() && !parsed.is_array()) {
    json list = json::array();
    std::stringstream items(value);
    std::string item;
    while (std::getline(items, item, ',')) {
      try {
        list.push_back(json::parse(item));
      } catch (const json::parse_error&) {
        throw ConfigError("config key '" + key + "' expects a comma list of numbers, got '" + value + "'");
      }
    }
    parsed = std::move(list);
  }
  if (expected->is_string() && !parsed.is_string()) parsed = value;
  if (!same_type(*expected, parsed)) {
    throw ConfigError("config key '" + key + "' expects " + type_label(*expected) + ", got '" + value + "'");
  }
  *slot = std::move(parsed);
}

DenoiserConfig denoiser_config(const ExperimentConfig& config, int num_classes) {
  DenoiserConfig d;
  d.data_dim = 2;
  d.num_classes = config.model.conditional ? num_classes : 0;
  d.time_dim = config.model.time_dim;
  d.cond_dim = config.model.cond_dim;
  d.hidden = config.model.hidden;
  d.depth = config.model.depth;
  d.init_seed = config.model.init_seed;
  return d;
}

}  // namespace sharpen
