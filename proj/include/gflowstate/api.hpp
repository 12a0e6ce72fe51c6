#pragma once

#include "gflowstate/store.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>

namespace gflowstate {

// Serializes with every floating-point number printed to 17 significant
// digits; non-finite numbers become null.
std::string dump_json(const nlohmann::json &j);

struct HttpRequest {
  std::string method = "GET";
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
};

struct HttpResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

struct ApiOptions {
  std::chrono::seconds session_ttl{30 * 60};
  // Injectable for tests; defaults to steady_clock::now.
  std::function<std::chrono::steady_clock::time_point()> clock;
};

/// JSON API over one run database, opened read-only.
///
///   GET  /api/run
///   GET  /api/samples              limit, order=asc|desc
///   GET  /api/ranking              metric=reward|loss, n
///   GET  /api/projection           mode=binned|scatter, resolution, method, correlation
///   GET  /api/projection/bin/{q}/{r}
///   GET  /api/dag/children/{key}   session (optional)
///   GET  /api/dag/session/{id}
///   POST /api/dag/session/{id}/expand    {"node", "child"}
///   POST /api/dag/session/{id}/collapse  {"node"}
///   GET  /api/dag/through/{key}
///   GET  /api/transitions          metric=probability|variance|frequency, direction, top
///   GET  /api/transitions/history  src, dst
///   POST /api/selection/resolve    {"kind": samples|bin|node|edges, "ids": [...]}
///   GET  /api/render/state/{key}
///   POST /api/render/states        {"keys": [...]}
///
/// Every data endpoint takes an iteration range as `from` and `to`
/// (inclusive), defaulting to the whole run. DAG endpoints answer 409 until
/// the analyze pass has stored the DAG.
class Api {
public:
  explicit Api(const std::string &db_path, ApiOptions options = {});
  ~Api();
  Api(const Api &) = delete;
  Api &operator=(const Api &) = delete;

  // Thread-safe; requests are serialized.
  HttpResponse handle(const HttpRequest &request);

  std::size_t session_count() const;

private:
  struct Impl;
  std::unique_ptr<Impl> state_;
};

/// Serves `api` over HTTP with CORS enabled. Returns once `stop` becomes
/// true, or never when it is null. `on_ready` runs once the socket listens.
void serve(Api &api, const std::string &host, int port, const std::atomic<bool> *stop = nullptr,
           const std::function<void()> &on_ready = {});

struct AnalyzeOptions {
  int estimator_samples = 1000;
  std::uint64_t seed = 0;
};

/// Post-training pass: fills log_ptx for every distinct terminal state and
/// validation object (exact when the state space is enumerable, importance
/// sampling otherwise), loads the full validation set if none was supplied,
/// and stores the truncated DAG of the whole run. Refuses unless the run is
/// complete. Re-running rewrites identical content.
nlohmann::json analyze(const std::string &db_path, const AnalyzeOptions &options = {});

// Headless summary of ranking, projection and transitions for a range.
nlohmann::json build_report(Api &api, IterationRange range = IterationRange::all());
std::string report_svg(const nlohmann::json &report);

} // namespace gflowstate
