#pragma once

#include <csignal>
#include <stdexcept>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

namespace testing_support {

/// Runs the bundled reward server in HTTP mode on a free port.
class HttpServerProcess {
 public:
  explicit HttpServerProcess(const std::string& binary, const std::string& extra_args = "") {
    int out[2];
    if (::pipe(out) != 0) throw std::runtime_error("pipe failed");
    pid_ = ::fork();
    if (pid_ < 0) throw std::runtime_error("fork failed");
    if (pid_ == 0) {
      ::dup2(out[1], STDOUT_FILENO);
      ::close(out[0]);
      ::close(out[1]);
      const std::string cmd = "exec " + binary + " --http 0 " + extra_args;
      ::execl("/bin/sh", "sh", "-c", cmd.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(out[1]);
    std::string line;
    char ch;
    while (::read(out[0], &ch, 1) == 1 && ch != '\n') line += ch;
    ::close(out[0]);
    const auto pos = line.rfind(' ');
    if (line.rfind("listening on", 0) != 0 || pos == std::string::npos) {
      stop();
      throw std::runtime_error("reward server did not start: " + line);
    }
    port_ = std::stoi(line.substr(pos + 1));
  }
  ~HttpServerProcess() { stop(); }
  HttpServerProcess(const HttpServerProcess&) = delete;
  HttpServerProcess& operator=(const HttpServerProcess&) = delete;

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/reward"; }

 private:
  void stop() {
    if (pid_ > 0) {
      ::kill(pid_, SIGTERM);
      ::waitpid(pid_, nullptr, 0);
      pid_ = -1;
    }
  }
  pid_t pid_ = -1;
  int port_ = 0;
};

}  // namespace testing_support
