// Conformance double for the external reward protocol.
//
// stdio mode reads one JSON request per line and writes one response per line.
// --http PORT serves POST /reward instead (port 0 picks a free port and prints it).

#include <atomic>
#include <chrono>
#include <iostream>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

using nlohmann::json;

namespace {

struct Behavior {
  std::string mode = "echo";
  int delay_ms = 0;
  int fail_every = 0;  // slow mode: only every k-th request is delayed (0 = all)
};

std::string respond(const std::string& line, const Behavior& b, long long index) {
  json req;
  try {
    req = json::parse(line);
  } catch (const json::exception&) {
    return R"({"error":"bad request"})";
  }
  const std::string id = req.value("request_id", "");
  double reward = 0.0;
  if (req.contains("sample") && req["sample"].is_array() && !req["sample"].empty() && req["sample"][0].is_number())
    reward = req["sample"][0].get<double>();
  if (b.mode == "slow" && (b.fail_every == 0 || index % b.fail_every == 0))
    std::this_thread::sleep_for(std::chrono::milliseconds(b.delay_ms));
  if (b.mode == "nonnumeric") return json{{"reward", "high"}, {"request_id", id}}.dump();
  if (b.mode == "wrong-id") return json{{"reward", reward}, {"request_id", id + "-stale"}}.dump();
  if (b.mode == "malformed") return "{\"reward\": " + std::to_string(reward) + ", \"request_id\": ";
  return json{{"reward", reward}, {"request_id", id}}.dump();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reward protocol test server"};
  Behavior b;
  int port = -1;
  app.add_option("--mode", b.mode, "echo | nonnumeric | wrong-id | malformed | slow")
      ->check(CLI::IsMember({"echo", "nonnumeric", "wrong-id", "malformed", "slow"}));
  app.add_option("--delay-ms", b.delay_ms, "delay applied in slow mode")->check(CLI::NonNegativeNumber);
  app.add_option("--every", b.fail_every, "slow mode delays only every k-th request (1-based)");
  app.add_option("--http", port, "serve HTTP on this port instead of stdio (0 = any free port)");
  CLI11_PARSE(app, argc, argv);

  if (port < 0) {
    std::ios::sync_with_stdio(false);
    std::string line;
    long long index = 0;
    while (std::getline(std::cin, line)) {
      ++index;
      std::cout << respond(line, b, index) << '\n' << std::flush;
    }
    return 0;
  }

  httplib::Server server;
  std::atomic<long long> index{0};
  server.Post("/reward", [&](const httplib::Request& req, httplib::Response& res) {
    res.set_content(respond(req.body, b, ++index), "application/json");
  });
  const int bound = port == 0 ? server.bind_to_any_port("127.0.0.1") : (server.bind_to_port("127.0.0.1", port) ? port : -1);
  if (bound < 0) {
    std::cerr << "cannot bind port " << port << '\n';
    return 2;
  }
  std::cout << "listening on " << bound << std::endl;
  return server.listen_after_bind() ? 0 : 2;
}
