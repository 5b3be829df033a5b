#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "evade/corpus.hpp"

namespace evade::testing {

// Loopback HTTP server answering POST / with a scripted handler. Records
// every request body.
class StubServer {
 public:
  using Handler = std::function<void(const nlohmann::json& request, int call, httplib::Response& res)>;

  explicit StubServer(Handler handler) : handler_(std::move(handler)) {
    server_.Post("/", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mu_);
      const int call = ++calls_;
      bodies_.push_back(req.body);
      headers_.push_back(req.get_header_value("Authorization"));
      handler_(nlohmann::json::parse(req.body), call, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~StubServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/"; }
  int calls() const {
    std::lock_guard lock(mu_);
    return calls_;
  }
  std::vector<std::string> bodies() const {
    std::lock_guard lock(mu_);
    return bodies_;
  }
  std::vector<std::string> auth_headers() const {
    std::lock_guard lock(mu_);
    return headers_;
  }

  static void reply(httplib::Response& res, const nlohmann::json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

 private:
  Handler handler_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  mutable std::mutex mu_;
  int calls_ = 0;
  std::vector<std::string> bodies_;
  std::vector<std::string> headers_;
};

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("evade-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline std::string repeat_words(std::size_t n, const std::string& word = "word") {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) s.push_back(' ');
    s += word;
  }
  return s;
}

inline TextSample ai_sample(std::string id, std::string text) { return {std::move(id), Label::ai, std::move(text), {}}; }
inline TextSample human_sample(std::string id, std::string text) {
  return {std::move(id), Label::human, std::move(text), {}};
}

}  // namespace evade::testing
