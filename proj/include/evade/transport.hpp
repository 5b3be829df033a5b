#pragma once

// JSON-over-HTTP POST client shared by every remote dependency (detector,
// paraphraser, embedder, judge). Non-2xx answers and connection failures are
// retried with capped exponential backoff; a counting semaphore bounds the
// number of requests in flight.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <memory>
#include <semaphore>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "evade/error.hpp"

namespace evade {

struct TransportLimits {
  double timeout_seconds = 30.0;
  int max_inflight = 4;
  int retries = 3;  // extra attempts after the first
  double backoff_initial_seconds = 0.1;
  double backoff_max_seconds = 5.0;
};

// Process-wide counters; `connections` counts every outbound attempt.
struct TransportStats {
  std::atomic<std::uint64_t> connections{0};
  std::atomic<std::uint64_t> failures{0};
  std::atomic<bool> offline{false};
};

inline TransportStats& transport_stats() {
  static TransportStats stats;
  return stats;
}

inline void set_offline(bool offline) { transport_stats().offline.store(offline); }
inline bool is_offline() { return transport_stats().offline.load(); }

struct Endpoint {
  std::string base;  // scheme://host[:port]
  std::string path;  // begins with '/'

  static Endpoint parse(const std::string& url) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) throw ValidationError("endpoint URL lacks a scheme: " + url);
    const auto slash = url.find('/', scheme + 3);
    if (slash == std::string::npos) return {url, "/"};
    return {url.substr(0, slash), url.substr(slash)};
  }
};

struct PostResult {
  nlohmann::json body;
  int attempts = 0;
};

class HttpTransport {
 public:
  HttpTransport(std::string url, TransportLimits limits, std::string auth_env = {})
      : url_(std::move(url)),
        endpoint_(Endpoint::parse(url_)),
        limits_(limits),
        inflight_(std::make_unique<std::counting_semaphore<1024>>(std::clamp(limits.max_inflight, 1, 1024))) {
    if (limits_.retries < 0) throw ValidationError("retries must be >= 0");
    if (!auth_env.empty()) {
      const char* v = std::getenv(auth_env.c_str());
      if (!v) throw ValidationError("auth secret environment variable not set: " + auth_env);
      bearer_ = v;
    }
  }

  const std::string& url() const noexcept { return url_; }
  const TransportLimits& limits() const noexcept { return limits_; }

  PostResult post(const nlohmann::json& request) const {
    if (is_offline()) throw TransportError("offline mode: refusing to contact " + url_, 0);
    const std::string payload = request.dump();
    std::string last_error;
    const int max_attempts = limits_.retries + 1;
    for (int attempt = 1; attempt <= max_attempts; ++attempt) {
      if (attempt > 1) std::this_thread::sleep_for(backoff(attempt - 1));
      transport_stats().connections.fetch_add(1);
      httplib::Result res = send(payload);
      if (!res) {
        last_error = "connection error: " + httplib::to_string(res.error());
      } else if (res->status < 200 || res->status >= 300) {
        last_error = "HTTP status " + std::to_string(res->status);
      } else {
        try {
          return {nlohmann::json::parse(res->body), attempt};
        } catch (const nlohmann::json::parse_error&) {
          throw ProtocolError("response from " + url_ + " is not valid JSON");
        }
      }
      transport_stats().failures.fetch_add(1);
    }
    throw TransportError(url_ + ": giving up after " + std::to_string(max_attempts) + " attempt(s): " + last_error,
                         max_attempts);
  }

 private:
  std::chrono::milliseconds backoff(int retry_index) const {
    double s = limits_.backoff_initial_seconds;
    for (int i = 1; i < retry_index; ++i) s *= 2.0;
    s = std::min(s, limits_.backoff_max_seconds);
    return std::chrono::milliseconds(static_cast<long long>(s * 1000.0));
  }

  httplib::Result send(const std::string& payload) const {
    struct Slot {
      std::counting_semaphore<1024>& sem;
      explicit Slot(std::counting_semaphore<1024>& s) : sem(s) { sem.acquire(); }
      ~Slot() { sem.release(); }
    } slot(*inflight_);
    httplib::Client client(endpoint_.base);
    const auto t = std::chrono::duration<double>(limits_.timeout_seconds);
    const auto secs = static_cast<time_t>(t.count());
    const auto usecs = static_cast<time_t>((t.count() - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!bearer_.empty()) headers.emplace("Authorization", "Bearer " + bearer_);
    return client.Post(endpoint_.path, headers, payload, "application/json");
  }

  std::string url_;
  Endpoint endpoint_;
  TransportLimits limits_;
  std::string bearer_;
  std::unique_ptr<std::counting_semaphore<1024>> inflight_;
};

}  // namespace evade
