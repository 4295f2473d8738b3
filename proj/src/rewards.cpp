#include "sharpen/rewards.hpp"

#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <numbers>

#include <httplib.h>
#include <json.hpp>

namespace sharpen {

using nlohmann::json;

void MixtureSpec::validate() const {
  if (means.empty()) throw ConfigError("mixture needs at least one component");
  if (!(std_dev > 0.0)) throw ConfigError("mixture std must be positive");
  if (weights.size() != means.size()) throw ConfigError("mixture weights/means count mismatch");
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw ConfigError("mixture weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("mixture weights must sum to 1");
  for (const auto& m : means)
    if (m.size() != means.front().size()) throw ConfigError("mixture means differ in dimension");
}

double MixtureSpec::log_pdf(std::span<const double> x) const {
  const std::size_t d = means.front().size();
  if (x.size() != d) throw ShapeError("mixture log_pdf: dimension mismatch");
  const double var = std_dev * std_dev;
  const double norm = -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * var);
  std::vector<double> terms;
  terms.reserve(means.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < means.size(); ++k) {
    if (weights[k] == 0.0) continue;
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += (x[j] - means[k][j]) * (x[j] - means[k][j]);
    const double term = std::log(weights[k]) + norm - 0.5 * sq / var;
    terms.push_back(term);
    mx = std::max(mx, term);
  }
  double s = 0.0;
  for (double t : terms) s += std::exp(t - mx);
  return mx + std::log(s);
}

MixtureSpec mixture_for(DatasetKind kind) {
  const MixtureGeometry g = mixture_geometry(kind);
  MixtureSpec m{g.means, g.std_dev, std::vector<double>(g.means.size(), 1.0 / static_cast<double>(g.means.size()))};
  m.validate();
  return m;
}

double RewardModel::score(std::span<const double> x0_hat, Condition c) {
  for (double v : x0_hat)
    if (!std::isfinite(v)) throw NumericError("reward: non-finite clean-sample estimate");
  if (!transform_) return score_raw(x0_hat, c);
  const Array raw = transform_->to_raw(Array::row(x0_hat));
  return score_raw(raw.values(), c);
}

std::vector<double> RewardModel::score_rows(const Array& x0_hat, std::span<const Condition> conds) {
  if (conds.size() != x0_hat.rows()) throw ShapeError("reward: one condition per row required");
  std::vector<double> out(x0_hat.rows());
  for (std::size_t r = 0; r < x0_hat.rows(); ++r) out[r] = score(x0_hat.row_span(r), conds[r]);
  return out;
}

double ModeDistanceReward::score_raw(std::span<const double> x, Condition) {
  if (x.size() != target_.size()) throw ShapeError("mode_distance: dimension mismatch");
  double sq = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) sq += (x[j] - target_[j]) * (x[j] - target_[j]);
  return -sq;
}

TargetLogpdfReward::TargetLogpdfReward(MixtureSpec mixture) : mixture_(std::move(mixture)) { mixture_.validate(); }

double TargetLogpdfReward::score_raw(std::span<const double> x, Condition) { return mixture_.log_pdf(x); }

ClassifierReward::ClassifierReward(Classifier classifier, std::optional<int> target_class)
    : classifier_(std::move(classifier)), target_(target_class) {
  if (target_ && (*target_ < 0 || *target_ >= classifier_.num_classes()))
    throw ConfigError("classifier reward: target class out of range");
}

std::unique_ptr<ClassifierReward> ClassifierReward::from_checkpoint(const std::filesystem::path& path,
                                                                    std::optional<int> target_class) {
  if (!std::filesystem::exists(path)) throw Error("classifier checkpoint missing: " + path.string());
  return std::make_unique<ClassifierReward>(Classifier::load(path), target_class);
}

double ClassifierReward::score_raw(std::span<const double> x, Condition c) {
  const std::optional<int> cls = target_ ? target_ : c;
  if (!cls) throw ConfigError("classifier reward needs a target class or a condition");
  if (*cls < 0 || *cls >= classifier_.num_classes()) throw ConfigError("classifier reward: class out of range");
  const Array lp = classifier_.log_probs(Array::row(x));
  return lp(0, static_cast<std::size_t>(*cls));
}

// ---------------------------------------------------------------------------

Endpoint Endpoint::parse(const std::string& text, std::chrono::milliseconds timeout) {
  Endpoint e;
  e.timeout = timeout;
  if (text.rfind("http://", 0) == 0) {
    e.kind = Kind::http;
    e.target = text;
  } else {
    e.kind = Kind::command;
    e.target = text.rfind("cmd:", 0) == 0 ? text.substr(4) : text;
  }
  if (e.target.empty()) throw ConfigError("empty reward endpoint");
  return e;
}

namespace {

class CommandTransport final : public Transport {
 public:
  CommandTransport(std::string command, std::chrono::milliseconds timeout)
      : command_(std::move(command)), timeout_(timeout) {}
  ~CommandTransport() override { stop(); }

  std::string exchange(const std::string& request) override {
    if (pid_ <= 0) start();
    std::string line = request + "\n";
    const char* p = line.data();
    std::size_t left = line.size();
    while (left > 0) {
      const ssize_t n = ::write(to_child_, p, left);
      if (n < 0) {
        if (errno == EINTR) continue;
        stop();
        throw RewardTransportError("reward process write failed: " + std::string(std::strerror(errno)), "");
      }
      p += n;
      left -= static_cast<std::size_t>(n);
    }
    return read_line();
  }

  void reset() override { stop(); }

 private:
  void start() {
    ::signal(SIGPIPE, SIG_IGN);
    int in_pipe[2], out_pipe[2];
    if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0)
      throw RewardTransportError("cannot create pipes for reward process", "");
    const pid_t pid = ::fork();
    if (pid < 0) throw RewardTransportError("cannot fork reward process", "");
    if (pid == 0) {
      ::dup2(in_pipe[0], STDIN_FILENO);
      ::dup2(out_pipe[1], STDOUT_FILENO);
      ::close(in_pipe[0]);
      ::close(in_pipe[1]);
      ::close(out_pipe[0]);
      ::close(out_pipe[1]);
      ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    pid_ = pid;
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    buffer_.clear();
  }

  void stop() {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    to_child_ = from_child_ = -1;
    if (pid_ > 0) {
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, nullptr, 0);
    }
    pid_ = -1;
    buffer_.clear();
  }

  std::string read_line() {
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      const auto now = std::chrono::steady_clock::now();
      if (now >= deadline) {
        std::string partial = buffer_;
        stop();
        throw RewardTimeoutError("reward process timed out after " + std::to_string(timeout_.count()) + " ms",
                                 partial);
      }
      pollfd fd{from_child_, POLLIN, 0};
      const auto remaining = std::chrono::ceil<std::chrono::milliseconds>(deadline - now);
      const int ready = ::poll(&fd, 1, static_cast<int>(remaining.count()));
      if (ready < 0 && errno == EINTR) continue;
      if (ready <= 0) continue;
      char chunk[4096];
      const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
      if (n <= 0) {
        std::string partial = buffer_;
        stop();
        throw RewardTransportError("reward process closed its output", partial);
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  std::string command_;
  std::chrono::milliseconds timeout_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
};

class HttpTransport final : public Transport {
 public:
  HttpTransport(const std::string& url, std::chrono::milliseconds timeout) {
    const std::string rest = url.substr(std::string("http://").size());
    const auto slash = rest.find('/');
    host_ = "http://" + rest.substr(0, slash);
    path_ = slash == std::string::npos ? "/" : rest.substr(slash);
    timeout_ = timeout;
    reset();
  }

  std::string exchange(const std::string& request) override {
    auto res = client_->Post(path_, request, "application/json");
    if (!res) {
      const auto err = res.error();
      if (err == httplib::Error::Read || err == httplib::Error::Write || err == httplib::Error::ConnectionTimeout)
        throw RewardTimeoutError("reward endpoint timed out (" + httplib::to_string(err) + ")", "");
      throw RewardTransportError("reward endpoint unreachable (" + httplib::to_string(err) + ")", "");
    }
    if (res->status != 200)
      throw RewardProtocolError("reward endpoint returned HTTP " + std::to_string(res->status), res->body);
    return res->body;
  }

  void reset() override {
    client_ = std::make_unique<httplib::Client>(host_);
    const auto secs = timeout_.count() / 1000;
    const auto usecs = (timeout_.count() % 1000) * 1000;
    client_->set_connection_timeout(secs, usecs);
    client_->set_read_timeout(secs, usecs);
    client_->set_write_timeout(secs, usecs);
    client_->set_keep_alive(true);
  }

 private:
  std::string host_, path_;
  std::chrono::milliseconds timeout_{};
  std::unique_ptr<httplib::Client> client_;
};

}  // namespace

std::unique_ptr<Transport> make_transport(const Endpoint& endpoint) {
  if (endpoint.kind == Endpoint::Kind::http) return std::make_unique<HttpTransport>(endpoint.target, endpoint.timeout);
  return std::make_unique<CommandTransport>(endpoint.target, endpoint.timeout);
}

std::string encode_reward_request(std::span<const double> sample, Condition c, const std::string& request_id) {
  json req{{"sample", std::vector<double>(sample.begin(), sample.end())}, {"request_id", request_id}};
  req["condition"] = c ? json(*c) : json(nullptr);
  return req.dump();
}

double decode_reward_response(const std::string& raw, const std::string& expected_id) {
  json resp;
  try {
    resp = json::parse(raw);
  } catch (const json::exception&) {
    throw RewardProtocolError("reward response is not valid JSON", raw);
  }
  if (!resp.is_object()) throw RewardProtocolError("reward response is not a JSON object", raw);
  if (!resp.contains("request_id") || !resp["request_id"].is_string())
    throw RewardProtocolError("reward response lacks a request_id", raw);
  if (resp["request_id"].get<std::string>() != expected_id)
    throw RewardProtocolError("reward response id mismatch (expected " + expected_id + ")", raw);
  if (!resp.contains("reward") || !resp["reward"].is_number())
    throw RewardProtocolError("reward response has a non-numeric reward", raw);
  const double r = resp["reward"].get<double>();
  if (!std::isfinite(r)) throw RewardProtocolError("reward response is not finite", raw);
  return r;
}

ExternalRewardClient::ExternalRewardClient(Endpoint endpoint)
    : endpoint_(std::move(endpoint)), transport_(make_transport(endpoint_)) {}

ExternalRewardClient::~ExternalRewardClient() = default;

double ExternalRewardClient::request(std::span<const double> sample, Condition c) {
  const std::string id = "req-" + std::to_string(++counter_);
  const std::string body = encode_reward_request(sample, c, id);
  std::string raw;
  try {
    raw = transport_->exchange(body);
  } catch (const RewardTimeoutError&) {
    transport_->reset();
    raw = transport_->exchange(body);
  } catch (const RewardTransportError&) {
    transport_->reset();
    raw = transport_->exchange(body);
  }
  return decode_reward_response(raw, id);
}

double external_reward(const Endpoint& endpoint, std::span<const double> x0_hat, Condition c) {
  ExternalRewardClient client(endpoint);
  return client.request(x0_hat, c);
}

// ---------------------------------------------------------------------------

std::vector<double> reward_state(RewardModel& reward, const Array& x_t, int t, std::span<const Condition> conds,
                                 const Denoiser& model, const Schedule& schedule, EstimatorMode mode, double guidance,
                                 NfeLedger* ledger) {
  if (conds.size() != x_t.rows()) throw ShapeError("reward_state: one condition per row required");
  if (mode.kind == EstimatorMode::Kind::ode && t > 0) mode.substeps = std::min(mode.substeps, t);
  std::uint64_t cost = 0;
  for (const auto& c : conds) cost += static_cast<std::uint64_t>(guided_cost(c, guidance));
  std::uint64_t evaluations = 0;
  const EpsPredictor predictor = [&](const Array& x, int tt) {
    evaluations += cost;
    const std::vector<double> ts(x.rows(), static_cast<double>(tt));
    return model.predict_eps_guided(x, ts, conds, guidance);
  };
  const Array x0 = estimate_x0(x_t, t, predictor, schedule, mode);
  if (ledger) ledger->reward += evaluations;
  return reward.score_rows(x0, conds);
}

std::vector<double> reward_state(RewardModel& reward, const Array& x_t, int t, std::span<const Condition> conds,
                                 const EpsPredictor& predictor, const Schedule& schedule, EstimatorMode mode) {
  if (conds.size() != x_t.rows()) throw ShapeError("reward_state: one condition per row required");
  if (mode.kind == EstimatorMode::Kind::ode && t > 0) mode.substeps = std::min(mode.substeps, t);
  return reward.score_rows(estimate_x0(x_t, t, predictor, schedule, mode), conds);
}

}  // namespace sharpen
