#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sharpen/data.hpp"
#include "sharpen/denoiser.hpp"
#include "sharpen/error.hpp"
#include "sharpen/schedule.hpp"

namespace sharpen {

/// Isotropic Gaussian mixture in scoring coordinates.
struct MixtureSpec {
  std::vector<std::vector<double>> means;
  double std_dev = 1.0;
  std::vector<double> weights;

  void validate() const;
  double log_pdf(std::span<const double> x) const;
};

/// Mixture matching a labeled dataset kind in raw coordinates, equal weights.
MixtureSpec mixture_for(DatasetKind kind);

/// Scalar scorer of an estimated clean sample; higher is better.
///
/// An optional input transform maps model-space samples to the coordinates the
/// reward is defined in (e.g. a dataset's raw coordinates).
class RewardModel {
 public:
  virtual ~RewardModel() = default;

  virtual std::string kind() const = 0;
  double score(std::span<const double> x0_hat, Condition c);
  std::vector<double> score_rows(const Array& x0_hat, std::span<const Condition> conds);

  void set_input_transform(Standardizer to_raw) { transform_ = std::move(to_raw); }
  const std::optional<Standardizer>& input_transform() const { return transform_; }

 protected:
  virtual double score_raw(std::span<const double> x, Condition c) = 0;

 private:
  std::optional<Standardizer> transform_;
};

/// -||x - target||^2.
class ModeDistanceReward final : public RewardModel {
 public:
  explicit ModeDistanceReward(std::vector<double> target) : target_(std::move(target)) {}
  std::string kind() const override { return "mode_distance"; }
  const std::vector<double>& target() const { return target_; }

 protected:
  double score_raw(std::span<const double> x, Condition c) override;

 private:
  std::vector<double> target_;
};

/// log of the mixture density.
class TargetLogpdfReward final : public RewardModel {
 public:
  explicit TargetLogpdfReward(MixtureSpec mixture);
  std::string kind() const override { return "target_logpdf"; }

 protected:
  double score_raw(std::span<const double> x, Condition c) override;

 private:
  MixtureSpec mixture_;
};

/// Classifier log-probability of the target class (fixed, or the condition
/// when no fixed target is given). Scores model-space inputs directly.
class ClassifierReward final : public RewardModel {
 public:
  ClassifierReward(Classifier classifier, std::optional<int> target_class);
  static std::unique_ptr<ClassifierReward> from_checkpoint(const std::filesystem::path& path,
                                                           std::optional<int> target_class);
  std::string kind() const override { return "classifier"; }

 protected:
  double score_raw(std::span<const double> x, Condition c) override;

 private:
  Classifier classifier_;
  std::optional<int> target_;
};

// ---------------------------------------------------------------------------
// External reward protocol: one JSON object per request,
//   {"sample": [reals], "condition": int|null, "request_id": "..."}
// answered by {"reward": real, "request_id": "..."}. Over a subprocess the
// messages are single lines on stdin/stdout; over HTTP the request is the
// body of POST <url>.

class ExternalRewardError : public Error {
 public:
  ExternalRewardError(const std::string& what, std::string raw) : Error(what), raw_(std::move(raw)) {}
  const std::string& raw_response() const { return raw_; }

 private:
  std::string raw_;
};

class RewardTimeoutError : public ExternalRewardError {
 public:
  using ExternalRewardError::ExternalRewardError;
};

class RewardProtocolError : public ExternalRewardError {
 public:
  using ExternalRewardError::ExternalRewardError;
};

class RewardTransportError : public ExternalRewardError {
 public:
  using ExternalRewardError::ExternalRewardError;
};

struct Endpoint {
  enum class Kind { command, http } kind = Kind::command;
  std::string target;  // shell command line, or http://host:port/path
  std::chrono::milliseconds timeout{2000};

  /// "cmd:<command>" or "http://..."; a bare string is treated as a command.
  static Endpoint parse(const std::string& text, std::chrono::milliseconds timeout = std::chrono::milliseconds{2000});
};

/// Line/body transport; implementations throw RewardTimeoutError or
/// RewardTransportError.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string exchange(const std::string& request) = 0;
  virtual void reset() = 0;
};

std::unique_ptr<Transport> make_transport(const Endpoint& endpoint);

/// Client for the external protocol. One in-flight request per instance.
class ExternalRewardClient {
 public:
  explicit ExternalRewardClient(Endpoint endpoint);
  ~ExternalRewardClient();
  ExternalRewardClient(const ExternalRewardClient&) = delete;
  ExternalRewardClient& operator=(const ExternalRewardClient&) = delete;

  /// Sends one request; retries once on transport failure or timeout.
  double request(std::span<const double> sample, Condition c);
  std::uint64_t requests_sent() const { return counter_; }

 private:
  Endpoint endpoint_;
  std::unique_ptr<Transport> transport_;
  std::uint64_t counter_ = 0;
};

/// Builds and parses protocol messages (exposed for conformance tests).
std::string encode_reward_request(std::span<const double> sample, Condition c, const std::string& request_id);
double decode_reward_response(const std::string& raw, const std::string& expected_id);

class ExternalReward final : public RewardModel {
 public:
  explicit ExternalReward(Endpoint endpoint) : client_(std::move(endpoint)) {}
  std::string kind() const override { return "external"; }
  ExternalRewardClient& client() { return client_; }

 protected:
  double score_raw(std::span<const double> x, Condition c) override { return client_.request(x, c); }

 private:
  ExternalRewardClient client_;
};

/// external_reward(endpoint, x0_hat, c) with a short-lived connection.
double external_reward(const Endpoint& endpoint, std::span<const double> x0_hat, Condition c);

// ---------------------------------------------------------------------------

/// reward_clean at estimate_x0(x_t, t) for every row, using the model's
/// guided prediction. ode(k) is clamped to min(k, t) substeps so that every
/// grid position can be scored. Adds one evaluation per substep to `ledger`.
std::vector<double> reward_state(RewardModel& reward, const Array& x_t, int t, std::span<const Condition> conds,
                                 const Denoiser& model, const Schedule& schedule, EstimatorMode mode,
                                 double guidance = 1.0, NfeLedger* ledger = nullptr);
/// Same with an arbitrary noise predictor (no NFE accounting).
std::vector<double> reward_state(RewardModel& reward, const Array& x_t, int t, std::span<const Condition> conds,
                                 const EpsPredictor& predictor, const Schedule& schedule, EstimatorMode mode);

}  // namespace sharpen
