// Command-line entry point: sharpen <subcommand> [--config FILE] [--seed N] [--out DIR] [--assert] [key=value ...]
//
// Exit status: 0 success, 1 failed assertion, 2 usage or config error, 3 runtime failure.

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sharpen/config.hpp"
#include "sharpen/error.hpp"
#include "sharpen/harness.hpp"
#include "sharpen/rewards.hpp"

namespace {

using nlohmann::json;
using namespace sharpen;

constexpr int kOk = 0;
constexpr int kAssertFailed = 1;
constexpr int kUsage = 2;
constexpr int kRuntime = 3;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool check = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config_path, "experiment config (JSON)");
  sub->add_option("--seed", args.seed, "master seed (overrides config 'seed')");
  sub->add_option("--out", args.out, "run directory (overrides config 'output')");
  sub->add_flag("--assert", args.check, "exit 1 when any configured assertion fails");
  sub->add_option("overrides", args.overrides, "dotted-path overrides, e.g. trainer.n=3");
}

// Raw config JSON with overrides applied; validated by config_from_json.
json resolve_json(const CommonArgs& args, std::vector<std::string> overrides) {
  json j = json::object();
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in) throw ConfigError("cannot open config " + args.config_path);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + args.config_path + " is not valid JSON: " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  if (args.seed) j["seed"] = *args.seed;
  if (!args.out.empty()) j["output"] = args.out;
  return j;
}

int report(const RunResult& run, bool check) {
  std::cout << "run directory: " << run.directory.string() << '\n';
  for (const auto& [k, v] : run.summary) std::cout << "  " << k << " = " << v << '\n';
  for (const auto& a : run.assertions)
    std::cout << (a.passed ? "PASS " : "FAIL ") << a.spec.metric << ' ' << a.spec.op << ' ' << a.spec.value
              << " (actual " << a.actual << ")\n";
  return check && !run.passed() ? kAssertFailed : kOk;
}

int reward_server_check(const std::string& endpoint, int requests, int timeout_ms, bool echo, std::uint64_t seed) {
  ExternalRewardClient client(Endpoint::parse(endpoint, std::chrono::milliseconds(timeout_ms)));
  Rng rng(seed);
  int ok = 0, mismatched = 0, failed = 0;
  for (int i = 0; i < requests; ++i) {
    const std::vector<double> x{uniform_real(rng) * 8.0 - 4.0, uniform_real(rng) * 8.0 - 4.0};
    const Condition c = i % 2 ? Condition{i % 8} : std::nullopt;
    try {
      const double r = client.request(x, c);
      if (echo && r != x[0]) {
        ++mismatched;
        std::cerr << "request " << i << ": reward " << r << " != first coordinate " << x[0] << '\n';
      } else {
        ++ok;
      }
    } catch (const ExternalRewardError& e) {
      ++failed;
      std::cerr << "request " << i << ": " << e.what() << " (raw: " << e.raw_response() << ")\n";
    }
  }
  std::cout << "requests " << requests << " ok " << ok << " mismatched " << mismatched << " errors " << failed << '\n';
  return ok == requests ? kOk : kAssertFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trajectory sharpening for 2-D diffusion models"};
  app.require_subcommand(1);

  struct Entry {
    CLI::App* sub;
    std::optional<TrainerKind> kind;
  };
  CommonArgs args;
  std::vector<Entry> runs;
  runs.push_back({app.add_subcommand("pretrain", "train a denoiser from scratch"), TrainerKind::pretrain});
  runs.push_back({app.add_subcommand("sharpen-sft", "supervised trajectory sharpening"), TrainerKind::sft});
  runs.push_back({app.add_subcommand("sharpen-rlhf", "preference-based trajectory sharpening"), TrainerKind::rlhf});
  runs.push_back({app.add_subcommand("eval", "evaluate a checkpoint"), TrainerKind::eval});
  CLI::App* baseline = app.add_subcommand("baseline", "standard fine-tuning, vanilla DPO or best-of-n search");
  runs.push_back({baseline, std::nullopt});
  std::string method = "standard";
  baseline->add_option("--method", method, "standard | dpo-vanilla | best-of-n")
      ->check(CLI::IsMember({"standard", "dpo-vanilla", "best-of-n"}));
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "sweep one config key: over=KEY values=A,B,...");
  runs.push_back({ablate_cmd, std::nullopt});
  for (auto& e : runs) add_common(e.sub, args);

  CLI::App* check = app.add_subcommand("reward-server-check", "soak-test an external reward endpoint");
  std::string endpoint;
  int requests = 1000, timeout_ms = 2000;
  bool echo = false;
  std::uint64_t check_seed = 0;
  check->add_option("--endpoint", endpoint, "command line, cmd:COMMAND or http://host:port/path")->required();
  check->add_option("--requests", requests, "number of sequential requests")->check(CLI::PositiveNumber);
  check->add_option("--timeout-ms", timeout_ms, "per-request timeout")->check(CLI::PositiveNumber);
  check->add_flag("--echo", echo, "require reward == first sample coordinate");
  check->add_option("--seed", check_seed, "seed for the probe samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kUsage;
  }

  if (check->parsed()) {
    try {
      return reward_server_check(endpoint, requests, timeout_ms, echo, check_seed);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kRuntime;
    }
  }

  // Resolve and validate the configuration before any work starts.
  ExperimentConfig config;
  std::string ablate_key;
  std::vector<std::string> ablate_values;
  try {
    std::vector<std::string> overrides;
    for (const auto& o : args.overrides) {
      if (ablate_cmd->parsed() && o.rfind("over=", 0) == 0) {
        ablate_key = o.substr(5);
      } else if (ablate_cmd->parsed() && o.rfind("values=", 0) == 0) {
        std::stringstream ss(o.substr(7));
        std::string v;
        while (std::getline(ss, v, ',')) ablate_values.push_back(v);
      } else {
        overrides.push_back(o);
      }
    }
    json j = resolve_json(args, overrides);
    for (const auto& e : runs) {
      if (!e.sub->parsed()) continue;
      if (e.kind) j["trainer"]["kind"] = to_string(*e.kind);
      if (e.sub == baseline) j["trainer"]["kind"] = method;
    }
    config = config_from_json(j);
    if (ablate_cmd->parsed()) {
      if (ablate_key.empty() || ablate_values.empty()) throw ConfigError("ablate needs over=KEY and values=A,B,...");
      json probe = to_json(config);
      apply_override(probe, ablate_key, ablate_values.front());
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }

  std::cout << to_json(config).dump(2) << std::endl;
  try {
    if (ablate_cmd->parsed()) {
      const auto results = ablate(config, ablate_key, ablate_values);
      int status = kOk;
      for (const auto& r : results) status = std::max(status, report(r, args.check));
      std::cout << "summary: " << (std::filesystem::path(config.output) / "summary.csv").string() << '\n';
      return status;
    }
    return report(run_experiment(config), args.check);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
}
