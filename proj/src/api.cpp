#include "gflowstate/api.hpp"

#include "gflowstate/analytics.hpp"
#include "gflowstate/dag.hpp"
#include "gflowstate/errors.hpp"
#include "gflowstate/gflownet.hpp"

#include <httplib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <deque>
#include <mutex>
#include <numbers>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

namespace gflowstate {

using nlohmann::json;

// ---------------------------------------------------------------------- JSON

namespace {

void dump_to(const json &j, std::string &out) {
  switch (j.type()) {
  case json::value_t::object: {
    out += '{';
    bool first = true;
    for (const auto &[k, v] : j.items()) {
      if (!first)
        out += ',';
      first = false;
      out += json(k).dump();
      out += ':';
      dump_to(v, out);
    }
    out += '}';
    break;
  }
  case json::value_t::array: {
    out += '[';
    for (std::size_t i = 0; i < j.size(); ++i) {
      if (i)
        out += ',';
      dump_to(j[i], out);
    }
    out += ']';
    break;
  }
  case json::value_t::number_float: {
    const double v = j.get<double>();
    if (!std::isfinite(v)) {
      out += "null";
      break;
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out += buf;
    // Keep floats recognizable as floats.
    if (std::string_view(buf).find_first_of(".eEn") == std::string_view::npos)
      out += ".0";
    break;
  }
  default:
    out += j.dump();
  }
}

} // namespace

std::string dump_json(const json &j) {
  std::string out;
  dump_to(j, out);
  return out;
}

// ------------------------------------------------------------------- helpers

namespace {

struct HttpError : std::runtime_error {
  int status;
  json extra;
  HttpError(int s, const std::string &msg, json x = json::object())
      : std::runtime_error(msg), status(s), extra(std::move(x)) {}
};

std::string url_decode(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '%' && i + 2 < s.size()) {
      int v = 0;
      const auto r = std::from_chars(s.data() + i + 1, s.data() + i + 3, v, 16);
      if (r.ec == std::errc() && r.ptr == s.data() + i + 3) {
        out += static_cast<char>(v);
        i += 2;
        continue;
      }
    }
    out += s[i] == '+' ? ' ' : s[i];
  }
  return out;
}

std::vector<std::string> split_path(const std::string &path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '/') {
      if (!cur.empty())
        parts.push_back(url_decode(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty())
    parts.push_back(url_decode(cur));
  return parts;
}

template <typename T> T parse_number(const std::string &name, const std::string &text) {
  T v{};
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size())
    throw DomainError("query parameter '" + name + "' is not a valid number: '" + text + "'");
  return v;
}

struct Query {
  const std::map<std::string, std::string> &params;

  std::string text(const std::string &name, const std::string &fallback) const {
    const auto it = params.find(name);
    return it == params.end() ? fallback : it->second;
  }
  template <typename T> T number(const std::string &name, T fallback) const {
    const auto it = params.find(name);
    return it == params.end() ? fallback : parse_number<T>(name, it->second);
  }
  std::optional<std::string> optional(const std::string &name) const {
    const auto it = params.find(name);
    return it == params.end() ? std::nullopt : std::optional<std::string>(it->second);
  }
  IterationRange range() const {
    IterationRange r;
    r.lo = number<std::int64_t>("from", r.lo);
    r.hi = number<std::int64_t>("to", r.hi);
    r.validate();
    return r;
  }
};

json optional_json(const std::optional<double> &v) { return v ? json(*v) : json(nullptr); }

json sample_json(const Sample &s) {
  return {{"trajectory_id", s.trajectory_id}, {"terminal_key", s.terminal_key}, {"reward", s.reward},
          {"loss", s.loss},                   {"iteration", s.iteration},       {"log_ptx", optional_json(s.log_ptx)}};
}

json trajectory_json(const Environment &env, const Trajectory &tau) {
  json steps = json::array();
  for (const auto &s : tau.steps)
    steps.push_back({{"state", env.state_key(s.state)},
                     {"action", action_name(s.action)},
                     {"p_forward", s.p_forward},
                     {"p_backward", s.p_backward}});
  return {{"trajectory_id", tau.trajectory_id},
          {"iteration", tau.iteration},
          {"terminal_key", env.state_key(tau.terminal)},
          {"steps", std::move(steps)}};
}

using Points = Eigen::Matrix<double, Eigen::Dynamic, 2>;

struct Projected {
  std::vector<Sample> samples;
  std::vector<ValidationObject> validation;
  Points sample_points;
  Points validation_points;
  ProjectionMethod method;
};

} // namespace

// ------------------------------------------------------------------- the API

struct Api::Impl {
  Store store;
  ApiOptions options;
  std::unique_ptr<Environment> env;
  std::mutex mutex;

  struct Session {
    DagViewState view;
    std::chrono::steady_clock::time_point last_used;
  };
  std::map<std::string, Session> sessions;
  std::map<IterationRange, std::shared_ptr<const TrajectoryDag>> raw_cache, truncated_cache;

  Impl(const std::string &path, ApiOptions opts) : store(path, Store::Mode::ReadOnly), options(std::move(opts)) {
    if (!options.clock)
      options.clock = [] { return std::chrono::steady_clock::now(); };
    if (const auto run = store.run(); run && run->config.contains("env"))
      env = make_environment(run->config.at("env"));
  }

  const Environment &environment() const {
    if (!env)
      throw HttpError(409, "the database holds no run; train one first");
    return *env;
  }

  void require_analyzed() const {
    if (!store.load_dag_edges(IterationRange::all()))
      throw HttpError(409, "DAG artifacts are missing; run `gflowstate analyze --db <path>` first");
  }

  const TrajectoryDag &raw_dag(IterationRange range) {
    auto &slot = raw_cache[range];
    if (!slot)
      slot = std::make_shared<const TrajectoryDag>(
          build_dag(store.query_edges(range), environment().state_key(environment().source()), range));
    return *slot;
  }

  const TrajectoryDag &truncated_dag(IterationRange range) {
    require_analyzed();
    auto &slot = truncated_cache[range];
    if (!slot) {
      const std::string root = environment().state_key(environment().source());
      if (const auto rows = store.load_dag_edges(range))
        slot = std::make_shared<const TrajectoryDag>(from_rows(*rows, root, range));
      else
        slot = std::make_shared<const TrajectoryDag>(truncate_chains(raw_dag(range)));
    }
    return *slot;
  }

  void expire_sessions() {
    const auto now = options.clock();
    for (auto it = sessions.begin(); it != sessions.end();)
      it = now - it->second.last_used > options.session_ttl ? sessions.erase(it) : std::next(it);
  }

  // Pins absent from the DAG of the requested range are dropped along with
  // whatever they made reachable.
  DagViewState &session(const std::string &id, const TrajectoryDag &dag) {
    auto [it, fresh] = sessions.try_emplace(id);
    if (fresh)
      it->second.view = initial_view(dag, id);
    it->second.last_used = options.clock();
    auto &view = it->second.view;
    std::set<std::string> reached{dag.root};
    std::deque<std::string> queue{dag.root};
    while (!queue.empty()) {
      const std::string k = queue.front();
      queue.pop_front();
      for (const auto &c : dag.children(k))
        if (view.pinned.count(c) && reached.insert(c).second)
          queue.push_back(c);
    }
    view.pinned = std::move(reached);
    return view;
  }

  // ------------------------------------------------------------ endpoints

  json run_info() {
    json out = json::object();
    const auto run = store.run();
    if (run) {
      if (run->config.contains("env"))
        for (const auto &[k, v] : run->config.at("env").items())
          out[k] = v;
      if (run->config.contains("train"))
        for (const auto &[k, v] : run->config.at("train").items())
          out[k] = v;
      out["status"] = std::string(run_status_name(run->status));
      out["summary"] = run->summary;
      out["message"] = run->message;
    } else {
      out["status"] = nullptr;
    }
    out["schema_version"] = kSchemaVersion;
    const auto bounds = store.iteration_bounds();
    out["iteration_bounds"] = bounds ? json{bounds->first, bounds->second} : json(nullptr);
    out["analyzed"] = store.load_dag_edges(IterationRange::all()).has_value();
    out["counts"] = {{"samples", store.count_samples(IterationRange::all())},
                     {"edges", store.count_edges(IterationRange::all())},
                     {"nodes", store.count_nodes()},
                     {"validation", store.query_validation().size()}};
    return out;
  }

  json samples(const Query &q) {
    const auto range = q.range();
    const auto limit = q.number<std::int64_t>("limit", -1);
    const auto order_text = q.text("order", "asc");
    if (order_text != "asc" && order_text != "desc")
      throw DomainError("order must be asc or desc");
    json rows = json::array();
    for (const auto &s :
         store.query_samples(range, limit, order_text == "asc" ? SampleOrder::Ascending : SampleOrder::Descending))
      rows.push_back(sample_json(s));
    return {{"total", store.count_samples(range)}, {"samples", std::move(rows)}};
  }

  json ranking_frames(const Query &q) {
    const auto metric_text = q.text("metric", "reward");
    const auto metric = parse_rank_metric(metric_text);
    const auto n = q.number<std::int64_t>("n", 20);
    if (n < 1)
      throw DomainError("n must be at least 1");
    json frames = json::array();
    for (const auto &f : ranking(store.query_samples(q.range()), metric, static_cast<std::size_t>(n)))
      frames.push_back(to_json(f));
    return {{"metric", metric_text}, {"n", n}, {"frames", std::move(frames)}};
  }

  Projected projected(const Query &q) {
    const auto &e = environment();
    Projected p;
    p.samples = store.query_samples(q.range());
    p.validation = store.query_validation();
    p.method = parse_projection_method(q.text("method", e.feature_dim() == 2 ? "identity" : "pca"));
    const Eigen::Index d = e.feature_dim();
    Eigen::MatrixXd all(static_cast<Eigen::Index>(p.samples.size() + p.validation.size()), d);
    Eigen::Index row = 0;
    for (const auto &s : p.samples)
      all.row(row++) = e.features(e.parse_key(s.terminal_key)).transpose();
    for (const auto &v : p.validation) {
      if (static_cast<Eigen::Index>(v.features.size()) != d)
        throw DomainError("validation object " + v.state_key + " has " + std::to_string(v.features.size()) +
                          " features, expected " + std::to_string(d));
      all.row(row++) = Eigen::Map<const Eigen::VectorXd>(v.features.data(), d).transpose();
    }
    const Points pts = project<double>(all, p.method);
    const auto ns = static_cast<Eigen::Index>(p.samples.size());
    p.sample_points = pts.topRows(ns);
    p.validation_points = pts.bottomRows(pts.rows() - ns);
    return p;
  }

  BinnedProjection binned(const Projected &p, const Query &q) {
    const auto mode_text = q.text("correlation", "pearson");
    if (mode_text != "pearson" && mode_text != "spearman")
      throw DomainError("correlation must be pearson or spearman");
    return bin_projection(p.samples, p.sample_points, p.validation, p.validation_points,
                          q.number<int>("resolution", 20),
                          mode_text == "pearson" ? CorrelationMode::Pearson : CorrelationMode::Spearman);
  }

  json projection(const Query &q) {
    const auto mode = q.text("mode", "binned");
    const auto p = projected(q);
    if (mode == "scatter") {
      json points = json::array(), validation = json::array();
      for (std::size_t i = 0; i < p.samples.size(); ++i) {
        const auto &s = p.samples[i];
        points.push_back({{"id", s.trajectory_id},
                          {"terminal_key", s.terminal_key},
                          {"x", p.sample_points(static_cast<Eigen::Index>(i), 0)},
                          {"y", p.sample_points(static_cast<Eigen::Index>(i), 1)},
                          {"iteration", s.iteration},
                          {"reward", s.reward},
                          {"loss", s.loss},
                          {"log_ptx", optional_json(s.log_ptx)}});
      }
      for (std::size_t i = 0; i < p.validation.size(); ++i) {
        const auto &v = p.validation[i];
        validation.push_back({{"key", v.state_key},
                              {"x", p.validation_points(static_cast<Eigen::Index>(i), 0)},
                              {"y", p.validation_points(static_cast<Eigen::Index>(i), 1)},
                              {"reward", v.reward},
                              {"log_ptx", optional_json(v.log_ptx)}});
      }
      return {{"mode", "scatter"},
              {"method", projection_method_name(p.method)},
              {"points", std::move(points)},
              {"validation", std::move(validation)}};
    }
    if (mode != "binned")
      throw DomainError("mode must be binned or scatter");
    const auto b = binned(p, q);
    json bins = json::array();
    for (const auto &bin : b.bins)
      bins.push_back(to_json(bin, false));
    return {{"mode", "binned"},
            {"method", projection_method_name(p.method)},
            {"resolution", q.number<int>("resolution", 20)},
            {"grid", {{"origin", {b.grid.origin.x(), b.grid.origin.y()}}, {"radius", b.grid.radius}}},
            {"total_samples", b.total_samples},
            {"total_validation", b.total_validation},
            {"bins", std::move(bins)}};
  }

  const HexBin &find_bin(const BinnedProjection &b, Hex h) {
    for (const auto &bin : b.bins)
      if (bin.hex == h)
        return bin;
    throw HttpError(404, "no bin at (" + std::to_string(h.q) + ", " + std::to_string(h.r) + ")");
  }

  json bin_detail(const Query &q, Hex h) {
    const auto b = binned(projected(q), q);
    return to_json(find_bin(b, h), true);
  }

  json children(const Query &q, const std::string &node) {
    const auto &dag = truncated_dag(q.range());
    if (!dag.contains(node))
      throw HttpError(404, "state " + node + " is not in the DAG");
    DagViewState view;
    if (const auto id = q.optional("session"))
      view = session(*id, dag);
    else
      view.pinned.insert(node);
    json rows = json::array();
    for (const auto &r : children_table(dag, environment(), view, node))
      rows.push_back({{"state_key", r.state_key},
                      {"render", r.render},
                      {"frequency", r.frequency},
                      {"mean_p_forward", r.mean_p_forward},
                      {"max_p_forward", r.max_p_forward},
                      {"first_iteration", r.first_iteration},
                      {"samples_through", r.samples_through},
                      {"contracted_path", r.contracted_path}});
    return {{"node", node}, {"rows", std::move(rows)}};
  }

  json session_json(const TrajectoryDag &dag, const DagViewState &view) {
    const auto depth = depth_hints(dag);
    json nodes = json::array(), edges = json::array(), placeholders = json::object();
    for (const auto &k : view.pinned) {
      const auto &n = dag.nodes.at(k);
      nodes.push_back({{"key", k},
                       {"depth", depth.at(k)},
                       {"visit_count", n.visit_count},
                       {"terminal", n.terminal_for_some_sample()},
                       {"first_iteration", n.first_iteration},
                       {"render", to_json(environment().render_state(environment().parse_key(k)))}});
    }
    for (const auto &e : visible_edges(dag, view)) {
      const auto &stats = dag.edges.at(e);
      edges.push_back({{"src", e.first},
                       {"dst", e.second},
                       {"frequency", stats.frequency()},
                       {"contracted_path", stats.contracted_path}});
    }
    for (const auto &[k, n] : placeholder_counts(dag, view))
      placeholders[k] = n;
    return {{"session_id", view.session_id},
            {"root", dag.root},
            {"pinned", view.pinned},
            {"placeholders", std::move(placeholders)},
            {"nodes", std::move(nodes)},
            {"edges", std::move(edges)}};
  }

  json session_get(const Query &q, const std::string &id) {
    const auto &dag = truncated_dag(q.range());
    return session_json(dag, session(id, dag));
  }

  json session_update(const Query &q, const std::string &id, const std::string &op, const json &body) {
    const auto &dag = truncated_dag(q.range());
    auto &view = session(id, dag);
    const auto node = body.at("node").get<std::string>();
    if (op == "expand")
      view = expand(dag, view, node, body.at("child").get<std::string>());
    else
      view = collapse(dag, view, node);
    view.session_id = id;
    return session_json(dag, view);
  }

  json through(const Query &q, const std::string &node) {
    truncated_dag(q.range());
    json out = json::array();
    for (const auto &tau : trajectories_through(raw_dag(q.range()), store, environment(), node))
      out.push_back(trajectory_json(environment(), tau));
    return {{"node", node}, {"trajectories", std::move(out)}};
  }

  json transitions(const Query &q) {
    const auto metric = q.text("metric", "probability");
    const auto direction = q.text("direction", "forward");
    const auto top = q.number<std::int64_t>("top", 50);
    if (top < 0)
      throw DomainError("top must be nonnegative");
    json rows = json::array();
    for (const auto &r : transition_heatmap(raw_dag(q.range()), parse_heat_metric(metric),
                                            parse_direction(direction), static_cast<std::size_t>(top)))
      rows.push_back(to_json(r));
    return {{"metric", metric}, {"direction", direction}, {"top", top}, {"rows", std::move(rows)}};
  }

  json history(const Query &q) {
    const auto src = q.optional("src"), dst = q.optional("dst");
    if (!src || !dst)
      throw DomainError("src and dst are required");
    json points = json::array();
    for (const auto &p : transition_history(raw_dag(q.range()), {*src, *dst}))
      points.push_back(to_json(p));
    return {{"src", *src}, {"dst", *dst}, {"points", std::move(points)}};
  }

  // Cross-view payload for a set of trajectory ids.
  json samples_payload(std::vector<std::int64_t> ids, IterationRange range) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    json out = {{"trajectory_ids", ids},
                {"ranking_keys", json::array()},
                {"projection_ids", ids},
                {"dag_pins", json::object()}};
    if (ids.empty())
      return out;
    std::set<std::string> keys;
    for (const auto &s : store.samples_by_id(ids))
      keys.insert(s.terminal_key);
    out["ranking_keys"] = keys;
    const TrajectoryDag *dag = store.load_dag_edges(IterationRange::all()) ? &truncated_dag(range) : nullptr;
    for (const auto &tau : reconstruct_trajectories(environment(), store.edges_for(ids))) {
      json pins = json::array();
      for (const auto &step : tau.steps) {
        const auto k = environment().state_key(step.state);
        if (!dag || dag->contains(k))
          pins.push_back(k);
      }
      out["dag_pins"][std::to_string(tau.trajectory_id)] = std::move(pins);
    }
    return out;
  }

  json resolve(const Query &q, const json &body) {
    const auto range = q.range();
    const auto kind = body.at("kind").get<std::string>();
    const json ids = body.value("ids", json::array());
    json missing = json::array();
    std::vector<std::int64_t> trajectories;

    if (kind == "samples") {
      std::vector<std::int64_t> wanted = ids.get<std::vector<std::int64_t>>();
      std::set<std::int64_t> found;
      for (const auto &s : store.samples_by_id(wanted))
        found.insert(s.trajectory_id);
      for (auto id : wanted)
        if (!found.count(id))
          missing.push_back(id);
      trajectories = wanted;
    } else if (kind == "bin") {
      if (!ids.empty()) {
        const auto b = binned(projected(q), q);
        for (const auto &h : ids) {
          const Hex hex{h.at(0).get<int>(), h.at(1).get<int>()};
          const auto it = std::find_if(b.bins.begin(), b.bins.end(), [&](const HexBin &x) { return x.hex == hex; });
          if (it == b.bins.end())
            missing.push_back(h);
          else
            trajectories.insert(trajectories.end(), it->sample_ids.begin(), it->sample_ids.end());
        }
      }
    } else if (kind == "node") {
      for (const auto &k : ids) {
        const auto key = k.get<std::string>();
        const auto &raw = raw_dag(range);
        if (!raw.contains(key) || raw.node_trajectories.at(key).empty())
          missing.push_back(key);
        else
          for (auto id : raw.node_trajectories.at(key))
            trajectories.push_back(id);
      }
    } else if (kind == "edges") {
      const auto &raw = raw_dag(range);
      const TrajectoryDag *trunc = store.load_dag_edges(IterationRange::all()) ? &truncated_dag(range) : nullptr;
      for (const auto &e : ids) {
        const EdgeKey key{e.at(0).get<std::string>(), e.at(1).get<std::string>()};
        const std::vector<Traversal> *ts = nullptr;
        if (key.first == key.second) {
          if (raw.contains(key.first) && raw.nodes.at(key.first).terminal_for_some_sample())
            ts = &raw.nodes.at(key.first).stops;
        } else if (trunc && trunc->edges.count(key)) {
          ts = &trunc->edges.at(key).traversals;
        } else if (raw.edges.count(key)) {
          ts = &raw.edges.at(key).traversals;
        }
        if (!ts)
          missing.push_back(e);
        else
          for (const auto &t : *ts)
            trajectories.push_back(t.trajectory_id);
      }
    } else {
      throw DomainError("unknown selection kind '" + kind + "'");
    }
    if (!missing.empty())
      throw HttpError(404, "selection ids could not be resolved", {{"missing", missing}});
    return samples_payload(std::move(trajectories), range);
  }

  json render_one(const std::string &key) { return to_json(environment().render_state(environment().parse_key(key))); }

  json render_many(const json &body) {
    std::vector<State> states;
    for (const auto &k : body.at("keys"))
      states.push_back(environment().parse_key(k.get<std::string>()));
    return to_json(environment().render_states(states));
  }

  json route(const HttpRequest &req) {
    const auto parts = split_path(req.path);
    const Query q{req.query};
    const bool get = req.method == "GET", post = req.method == "POST";
    const auto body = [&req] {
      if (req.body.empty())
        return json::object();
      const auto j = json::parse(req.body, nullptr, false);
      if (j.is_discarded())
        throw DomainError("request body is not valid JSON");
      return j;
    };
    const auto n = parts.size();
    if (n < 2 || parts[0] != "api")
      throw HttpError(404, "no such endpoint: " + req.path);
    const auto &p1 = parts[1];

    if (get && n == 2 && p1 == "run")
      return run_info();
    if (get && n == 2 && p1 == "samples")
      return samples(q);
    if (get && n == 2 && p1 == "ranking")
      return ranking_frames(q);
    if (get && n == 2 && p1 == "projection")
      return projection(q);
    if (get && n == 5 && p1 == "projection" && parts[2] == "bin")
      return bin_detail(q, {parse_number<int>("q", parts[3]), parse_number<int>("r", parts[4])});
    if (p1 == "dag") {
      if (get && n == 4 && parts[2] == "children")
        return children(q, parts[3]);
      if (get && n == 4 && parts[2] == "session")
        return session_get(q, parts[3]);
      if (post && n == 5 && parts[2] == "session" && (parts[4] == "expand" || parts[4] == "collapse"))
        return session_update(q, parts[3], parts[4], body());
      if (get && n == 4 && parts[2] == "through")
        return through(q, parts[3]);
    }
    if (get && n == 2 && p1 == "transitions")
      return transitions(q);
    if (get && n == 3 && p1 == "transitions" && parts[2] == "history")
      return history(q);
    if (post && n == 3 && p1 == "selection" && parts[2] == "resolve")
      return resolve(q, body());
    if (get && n == 4 && p1 == "render" && parts[2] == "state")
      return render_one(parts[3]);
    if (post && n == 3 && p1 == "render" && parts[2] == "states")
      return render_many(body());
    throw HttpError(404, "no such endpoint: " + req.method + " " + req.path);
  }
};

Api::Api(const std::string &db_path, ApiOptions options)
    : state_(std::make_unique<Impl>(db_path, std::move(options))) {}

Api::~Api() = default;

std::size_t Api::session_count() const {
  std::lock_guard lock(state_->mutex);
  state_->expire_sessions();
  return state_->sessions.size();
}

HttpResponse Api::handle(const HttpRequest &request) {
  std::lock_guard lock(state_->mutex);
  state_->expire_sessions();
  const auto error = [](int status, const std::string &message, json extra = json::object()) {
    extra["error"] = message;
    return HttpResponse{status, dump_json(extra)};
  };
  try {
    return {200, dump_json(state_->route(request))};
  } catch (const HttpError &e) {
    return error(e.status, e.what(), e.extra);
  } catch (const DomainError &e) {
    return error(400, e.what());
  } catch (const json::exception &e) {
    return error(400, std::string("malformed request: ") + e.what());
  } catch (const CapabilityError &e) {
    return error(422, e.what());
  } catch (const std::exception &e) {
    return error(500, e.what());
  }
}

void serve(Api &api, const std::string &host, int port, const std::atomic<bool> *stop,
           const std::function<void()> &on_ready) {
  httplib::Server server;
  const auto forward = [&api](const httplib::Request &req, httplib::Response &res) {
    HttpRequest r;
    r.method = req.method;
    r.path = req.path;
    for (const auto &[k, v] : req.params)
      r.query[k] = v;
    r.body = req.body;
    const auto out = api.handle(r);
    res.status = out.status;
    res.set_content(out.body, out.content_type);
  };
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Get(R"(/api/.*)", forward);
  server.Post(R"(/api/.*)", forward);
  server.Options(R"(/api/.*)", [](const httplib::Request &, httplib::Response &res) { res.status = 204; });
  if (!server.bind_to_port(host, port))
    throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
  std::thread watcher;
  if (stop)
    watcher = std::thread([&server, stop] {
      while (!stop->load())
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
      server.stop();
    });
  if (on_ready)
    on_ready();
  server.listen_after_bind();
  if (watcher.joinable())
    watcher.join();
}

// ------------------------------------------------------------------ analyze

json analyze(const std::string &db_path, const AnalyzeOptions &options) {
  Store store(db_path);
  const auto run = store.run();
  if (!run)
    throw DomainError("the database holds no run");
  if (run->status != RunStatus::Complete)
    throw DomainError(std::string("refusing to analyze a run that is ") + std::string(run_status_name(run->status)));
  const auto env = make_environment(run->config.at("env"));
  const auto net = net_from_json(run->model);

  if (store.query_validation().empty() && env->enumerate_states())
    store.load_validation_set(full_validation_set(*env));

  std::set<std::string> keys;
  for (const auto &s : store.query_samples(IterationRange::all()))
    keys.insert(s.terminal_key);
  const auto validation = store.query_validation();
  for (const auto &v : validation)
    keys.insert(v.state_key);

  std::map<std::string, double> log_ptx;
  const bool exact = env->enumerate_states().has_value();
  if (exact) {
    const auto dist = exact_terminal_distribution(net, *env);
    for (const auto &k : keys)
      log_ptx[k] = std::log(dist.at(k));
  } else {
    EstimatorConfig cfg{options.estimator_samples, options.seed};
    for (const auto &k : keys)
      log_ptx[k] = estimate_log_ptx(net, *env, env->parse_key(k), cfg);
  }
  store.set_sample_log_ptx(log_ptx);
  store.set_validation_log_ptx(log_ptx);

  const auto dag = build_dag(store, *env, IterationRange::all());
  const auto truncated = truncate_chains(dag);
  return {{"method", exact ? "exact" : "importance_sampling"},
          {"objects", keys.size()},
          {"validation", validation.size()},
          {"dag_nodes", truncated.nodes.size()},
          {"dag_edges", truncated.edges.size()},
          {"raw_dag_edges", dag.edges.size()}};
}

// ------------------------------------------------------------------- report

json build_report(Api &api, IterationRange range) {
  std::map<std::string, std::string> base{{"from", std::to_string(range.lo)}, {"to", std::to_string(range.hi)}};
  const auto get = [&api, &base](const std::string &path, std::map<std::string, std::string> extra) {
    extra.insert(base.begin(), base.end());
    const auto res = api.handle({"GET", path, extra, ""});
    auto j = json::parse(res.body);
    if (res.status != 200)
      throw std::runtime_error(path + ": " + j.value("error", std::string("request failed")));
    return j;
  };
  json report;
  report["run"] = get("/api/run", {});
  auto ranking = get("/api/ranking", {{"metric", "reward"}, {"n", "20"}});
  report["ranking"] = {{"frames", ranking["frames"].size()},
                       {"final", ranking["frames"].empty() ? json(nullptr) : ranking["frames"].back()}};
  report["projection"] = get("/api/projection", {{"mode", "binned"}, {"resolution", "20"}});
  report["transitions"] = get("/api/transitions", {{"metric", "frequency"}, {"top", "20"}});
  return report;
}

namespace {

std::string color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(68 + t * (253 - 68)), g = static_cast<int>(1 + t * (231 - 1)),
            b = static_cast<int>(84 + t * (37 - 84));
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

} // namespace

std::string report_svg(const json &report) {
  std::ostringstream svg;
  constexpr double panel = 400.0;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"820\" height=\"460\" font-family=\"sans-serif\" "
         "font-size=\"11\">\n";
  svg << "<text x=\"10\" y=\"16\">projection (bins colored by mean reward)</text>\n";
  svg << "<text x=\"420\" y=\"16\">top transitions by frequency</text>\n";

  const auto &proj = report.at("projection");
  const auto &bins = proj.at("bins");
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300, rmax = 0.0;
  for (const auto &b : bins) {
    xmin = std::min(xmin, b["center"][0].get<double>());
    xmax = std::max(xmax, b["center"][0].get<double>());
    ymin = std::min(ymin, b["center"][1].get<double>());
    ymax = std::max(ymax, b["center"][1].get<double>());
    if (b["mean_reward"].is_number())
      rmax = std::max(rmax, b["mean_reward"].get<double>());
  }
  const double radius = proj.at("grid").at("radius").get<double>();
  const double span = std::max({xmax - xmin, ymax - ymin, 1e-12}) + 2 * radius;
  const double scale = (panel - 20) / span;
  for (const auto &b : bins) {
    const double cx = 10 + (b["center"][0].get<double>() - xmin + radius) * scale;
    const double cy = 30 + (panel - 20) - (b["center"][1].get<double>() - ymin + radius) * scale;
    const double rr = radius * scale;
    std::ostringstream pts;
    for (int k = 0; k < 6; ++k) {
      const double a = std::numbers::pi / 180.0 * (60 * k - 30);
      pts << cx + rr * std::cos(a) << ',' << cy + rr * std::sin(a) << ' ';
    }
    const std::string fill =
        b["mean_reward"].is_number() && rmax > 0 ? color(b["mean_reward"].get<double>() / rmax) : "#dddddd";
    svg << "<polygon points=\"" << pts.str() << "\" fill=\"" << fill << "\" stroke=\"white\" stroke-width=\"0.5\"/>\n";
  }

  const auto &rows = report.at("transitions").at("rows");
  double fmax = 1.0;
  for (const auto &r : rows)
    fmax = std::max(fmax, r["value"].get<double>());
  double y = 30;
  for (const auto &r : rows) {
    const double w = 250 * r["value"].get<double>() / fmax;
    svg << "<rect x=\"560\" y=\"" << y << "\" width=\"" << w << "\" height=\"14\" fill=\"" << color(w / 250)
        << "\"/>\n";
    svg << "<text x=\"420\" y=\"" << y + 11 << "\">" << r["src"].get<std::string>() << " &#8594; "
        << (r["stop"].get<bool>() ? std::string("stop") : r["dst"].get<std::string>()) << "</text>\n";
    y += 20;
  }
  svg << "</svg>\n";
  return svg.str();
}

} // namespace gflowstate
