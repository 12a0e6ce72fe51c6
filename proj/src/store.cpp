#include "gflowstate/store.hpp"

#include "sqlite.hpp"

#include <cstdio>
#include <sstream>

namespace gflowstate {

namespace {

constexpr const char *kSchema = R"sql(
CREATE TABLE IF NOT EXISTS meta(key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS runs(
  id INTEGER PRIMARY KEY,
  config_json TEXT NOT NULL,
  status TEXT NOT NULL,
  summary_json TEXT,
  model_json TEXT,
  message TEXT);
CREATE TABLE IF NOT EXISTS nodes(
  state_key TEXT PRIMARY KEY,
  features_json TEXT NOT NULL) WITHOUT ROWID;
CREATE TABLE IF NOT EXISTS samples(
  trajectory_id INTEGER PRIMARY KEY,
  terminal_key TEXT NOT NULL REFERENCES nodes(state_key),
  reward REAL NOT NULL,
  loss REAL NOT NULL,
  iteration INTEGER NOT NULL,
  log_ptx REAL);
CREATE INDEX IF NOT EXISTS samples_by_iteration ON samples(iteration, trajectory_id);
CREATE INDEX IF NOT EXISTS samples_by_terminal ON samples(terminal_key);
CREATE TABLE IF NOT EXISTS edges(
  trajectory_id INTEGER NOT NULL REFERENCES samples(trajectory_id),
  step_index INTEGER NOT NULL,
  src_key TEXT NOT NULL REFERENCES nodes(state_key),
  dst_key TEXT NOT NULL REFERENCES nodes(state_key),
  iteration INTEGER NOT NULL,
  p_forward REAL NOT NULL,
  p_backward REAL NOT NULL,
  action TEXT NOT NULL,
  terminal INTEGER NOT NULL,
  PRIMARY KEY(trajectory_id, step_index)) WITHOUT ROWID;
CREATE INDEX IF NOT EXISTS edges_by_iteration ON edges(iteration);
CREATE TABLE IF NOT EXISTS validation(
  state_key TEXT PRIMARY KEY,
  reward REAL NOT NULL,
  features_json TEXT NOT NULL,
  log_ptx REAL) WITHOUT ROWID;
CREATE TABLE IF NOT EXISTS dag_edges(
  range_lo INTEGER NOT NULL,
  range_hi INTEGER NOT NULL,
  src_key TEXT NOT NULL,
  dst_key TEXT NOT NULL,
  contracted_path_json TEXT NOT NULL,
  traversals_json TEXT NOT NULL,
  PRIMARY KEY(range_lo, range_hi, src_key, dst_key)) WITHOUT ROWID;
)sql";

RunStatus parse_status(const std::string &s) {
  if (s == "running")
    return RunStatus::Running;
  if (s == "complete")
    return RunStatus::Complete;
  if (s == "partial")
    return RunStatus::Partial;
  throw StoreError("unknown run status '" + s + "'");
}

EdgeRecord read_edge(const sql::Statement &q) {
  EdgeRecord e;
  e.trajectory_id = q.integer(0);
  e.step_index = static_cast<int>(q.integer(1));
  e.src_key = q.text(2);
  e.dst_key = q.text(3);
  e.iteration = q.integer(4);
  e.p_forward = q.real(5);
  e.p_backward = q.real(6);
  e.action = parse_action(q.text(7));
  e.terminal = q.integer(8) != 0;
  return e;
}

Sample read_sample(const sql::Statement &q) {
  return {q.integer(0), q.text(1), q.real(2), q.real(3), q.integer(4), q.optional_real(5)};
}

constexpr const char *kEdgeColumns =
    "trajectory_id, step_index, src_key, dst_key, iteration, p_forward, p_backward, action, terminal";
constexpr const char *kSampleColumns = "trajectory_id, terminal_key, reward, loss, iteration, log_ptx";

std::string id_list(const std::vector<std::int64_t> &ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i)
      out += ',';
    out += std::to_string(ids[i]);
  }
  return out;
}

} // namespace

struct Store::Handle {
  sql::DbHandle db;
};

void IterationRange::validate() const {
  if (lo > hi)
    throw DomainError("inverted iteration range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
}

std::string_view run_status_name(RunStatus s) {
  switch (s) {
  case RunStatus::Running:
    return "running";
  case RunStatus::Complete:
    return "complete";
  case RunStatus::Partial:
    return "partial";
  }
  return "partial";
}

Store::Store(const std::string &path, Mode mode) : path_(path), mode_(mode), db_(std::make_unique<Handle>()) {
  db_->db = sql::open(path, mode == Mode::ReadOnly);
  sqlite3 *db = db_->db.get();
  if (mode == Mode::ReadWrite) {
    sql::exec(db, "PRAGMA foreign_keys = ON");
    sql::exec(db, "PRAGMA synchronous = NORMAL");
    sql::exec(db, kSchema);
    sql::Statement get(db, "SELECT value FROM meta WHERE key = 'schema_version'");
    if (!get.step()) {
      sql::Statement put(db, "INSERT INTO meta(key, value) VALUES('schema_version', ?)");
      put.bind(1, std::to_string(kSchemaVersion)).run();
      return;
    }
    if (get.text(0) != std::to_string(kSchemaVersion))
      throw StoreError("unsupported schema version " + get.text(0));
    return;
  }
  try {
    sql::Statement get(db, "SELECT value FROM meta WHERE key = 'schema_version'");
    if (!get.step() || get.text(0) != std::to_string(kSchemaVersion))
      throw StoreError("unsupported or missing schema version in '" + path + "'");
  } catch (const StoreError &) {
    throw;
  }
}

Store::~Store() = default;
Store::Store(Store &&) noexcept = default;
Store &Store::operator=(Store &&) noexcept = default;

void Store::require_writable() const {
  if (mode_ == Mode::ReadOnly)
    throw StoreError("store opened read-only");
}

void Store::begin_run(const nlohmann::json &config) {
  require_writable();
  if (run())
    throw StoreError("database already holds a run");
  sql::Statement q(db_->db.get(), "INSERT INTO runs(id, config_json, status) VALUES(1, ?, 'running')");
  q.bind(1, config.dump()).run();
}

void Store::finish_run(const nlohmann::json &summary, const nlohmann::json &model) {
  require_writable();
  sql::Statement q(db_->db.get(),
                   "UPDATE runs SET status = 'complete', summary_json = ?, model_json = ? WHERE id = 1");
  q.bind(1, summary.dump()).bind(2, model.dump()).run();
}

void Store::mark_partial(const std::string &message) {
  require_writable();
  sql::Statement q(db_->db.get(), "UPDATE runs SET status = 'partial', message = ? WHERE id = 1");
  q.bind(1, message).run();
}

std::optional<RunInfo> Store::run() const {
  sql::Statement q(db_->db.get(),
                   "SELECT id, config_json, status, summary_json, model_json, message FROM runs WHERE id = 1");
  if (!q.step())
    return std::nullopt;
  RunInfo info;
  info.id = q.integer(0);
  info.config = nlohmann::json::parse(q.text(1));
  info.status = parse_status(q.text(2));
  if (!q.is_null(3))
    info.summary = nlohmann::json::parse(q.text(3));
  if (!q.is_null(4))
    info.model = nlohmann::json::parse(q.text(4));
  info.message = q.text(5);
  return info;
}

void Store::insert_trajectory(const Environment &env, const Trajectory &tau, double reward, double loss) {
  sqlite3 *db = db_->db.get();
  sql::Statement node(db, "INSERT OR IGNORE INTO nodes(state_key, features_json) VALUES(?, ?)");
  sql::Statement sample(db, "INSERT INTO samples(trajectory_id, terminal_key, reward, loss, iteration) "
                            "VALUES(?, ?, ?, ?, ?)");
  sql::Statement edge(db, "INSERT INTO edges(trajectory_id, step_index, src_key, dst_key, iteration, "
                          "p_forward, p_backward, action, terminal) VALUES(?, ?, ?, ?, ?, ?, ?, ?, ?)");

  auto upsert_node = [&](const State &s, const std::string &key) {
    const Eigen::VectorXd f = env.features(s);
    node.bind(1, key).bind(2, nlohmann::json(std::vector<double>(f.data(), f.data() + f.size())).dump()).run();
  };

  const std::string terminal_key = env.state_key(tau.terminal);
  upsert_node(tau.terminal, terminal_key);
  sample.bind(1, tau.trajectory_id)
      .bind(2, terminal_key)
      .bind(3, reward)
      .bind(4, loss)
      .bind(5, tau.iteration)
      .run();
  for (std::size_t i = 0; i < tau.steps.size(); ++i) {
    const auto &step = tau.steps[i];
    const auto src = env.state_key(step.state);
    const auto next = env.apply_action(step.state, step.action);
    const auto dst = env.state_key(next.state);
    upsert_node(step.state, src);
    upsert_node(next.state, dst);
    edge.bind(1, tau.trajectory_id)
        .bind(2, static_cast<std::int64_t>(i))
        .bind(3, src)
        .bind(4, dst)
        .bind(5, tau.iteration)
        .bind(6, step.p_forward)
        .bind(7, step.p_backward)
        .bind(8, action_name(step.action))
        .bind(9, static_cast<std::int64_t>(next.terminal))
        .run();
  }
}

void Store::log_trajectory(const Environment &env, const Trajectory &tau, double reward, double loss) {
  require_writable();
  sql::Transaction tx(db_->db.get());
  insert_trajectory(env, tau, reward, loss);
  tx.commit();
}

void Store::log_batch(const Environment &env, const std::vector<LoggedSample> &batch) {
  require_writable();
  sql::Transaction tx(db_->db.get());
  for (const auto &s : batch)
    insert_trajectory(env, s.trajectory, s.reward, s.loss);
  tx.commit();
}

std::vector<Sample> Store::query_samples(IterationRange range, std::size_t limit, SampleOrder order) const {
  range.validate();
  std::string sql = std::string("SELECT ") + kSampleColumns +
                    " FROM samples WHERE iteration BETWEEN ? AND ? ORDER BY iteration " +
                    (order == SampleOrder::Ascending ? "ASC, trajectory_id ASC" : "DESC, trajectory_id DESC");
  if (limit > 0)
    sql += " LIMIT " + std::to_string(limit);
  sql::Statement q(db_->db.get(), sql);
  q.bind(1, range.lo).bind(2, range.hi);
  std::vector<Sample> out;
  while (q.step())
    out.push_back(read_sample(q));
  return out;
}

std::vector<Sample> Store::samples_by_id(const std::vector<std::int64_t> &ids) const {
  if (ids.empty())
    return {};
  sql::Statement q(db_->db.get(), std::string("SELECT ") + kSampleColumns +
                                      " FROM samples WHERE trajectory_id IN (" + id_list(ids) +
                                      ") ORDER BY trajectory_id");
  std::vector<Sample> out;
  while (q.step())
    out.push_back(read_sample(q));
  return out;
}

std::vector<EdgeRecord> Store::query_edges(IterationRange range) const {
  range.validate();
  sql::Statement q(db_->db.get(), std::string("SELECT ") + kEdgeColumns +
                                      " FROM edges WHERE iteration BETWEEN ? AND ? "
                                      "ORDER BY trajectory_id, step_index");
  q.bind(1, range.lo).bind(2, range.hi);
  std::vector<EdgeRecord> out;
  while (q.step())
    out.push_back(read_edge(q));
  return out;
}

std::vector<EdgeRecord> Store::edges_for(const std::vector<std::int64_t> &trajectory_ids) const {
  if (trajectory_ids.empty())
    return {};
  sql::Statement q(db_->db.get(), std::string("SELECT ") + kEdgeColumns +
                                      " FROM edges WHERE trajectory_id IN (" + id_list(trajectory_ids) +
                                      ") ORDER BY trajectory_id, step_index");
  std::vector<EdgeRecord> out;
  while (q.step())
    out.push_back(read_edge(q));
  return out;
}

std::optional<std::pair<std::int64_t, std::int64_t>> Store::iteration_bounds() const {
  sql::Statement q(db_->db.get(), "SELECT MIN(iteration), MAX(iteration) FROM samples");
  if (!q.step() || q.is_null(0))
    return std::nullopt;
  return std::pair{q.integer(0), q.integer(1)};
}

std::int64_t Store::count_samples(IterationRange range) const {
  range.validate();
  sql::Statement q(db_->db.get(), "SELECT COUNT(*) FROM samples WHERE iteration BETWEEN ? AND ?");
  q.bind(1, range.lo).bind(2, range.hi);
  q.step();
  return q.integer(0);
}

std::int64_t Store::count_edges(IterationRange range) const {
  range.validate();
  sql::Statement q(db_->db.get(), "SELECT COUNT(*) FROM edges WHERE iteration BETWEEN ? AND ?");
  q.bind(1, range.lo).bind(2, range.hi);
  q.step();
  return q.integer(0);
}

std::int64_t Store::count_nodes() const {
  sql::Statement q(db_->db.get(), "SELECT COUNT(*) FROM nodes");
  q.step();
  return q.integer(0);
}

void Store::load_validation_set(const std::vector<ValidationObject> &records) {
  require_writable();
  sql::Transaction tx(db_->db.get());
  sql::Statement q(db_->db.get(),
                   "INSERT OR REPLACE INTO validation(state_key, reward, features_json, log_ptx) VALUES(?, ?, ?, ?)");
  for (const auto &v : records) {
    if (!(v.reward > 0.0))
      throw DomainError("validation object '" + v.state_key + "' has a non-positive reward");
    q.bind(1, v.state_key).bind(2, v.reward).bind(3, nlohmann::json(v.features).dump()).bind(4, v.log_ptx).run();
  }
  tx.commit();
}

std::vector<ValidationObject> Store::query_validation() const {
  sql::Statement q(db_->db.get(),
                   "SELECT state_key, reward, features_json, log_ptx FROM validation ORDER BY state_key");
  std::vector<ValidationObject> out;
  while (q.step())
    out.push_back({q.text(0), q.real(1), nlohmann::json::parse(q.text(2)).get<std::vector<double>>(),
                   q.optional_real(3)});
  return out;
}

void Store::set_sample_log_ptx(const std::map<std::string, double> &by_key) {
  require_writable();
  sql::Transaction tx(db_->db.get());
  sql::Statement q(db_->db.get(), "UPDATE samples SET log_ptx = ? WHERE terminal_key = ?");
  for (const auto &[key, v] : by_key)
    q.bind(1, v).bind(2, key).run();
  tx.commit();
}

void Store::set_validation_log_ptx(const std::map<std::string, double> &by_key) {
  require_writable();
  sql::Transaction tx(db_->db.get());
  sql::Statement q(db_->db.get(), "UPDATE validation SET log_ptx = ? WHERE state_key = ?");
  for (const auto &[key, v] : by_key)
    q.bind(1, v).bind(2, key).run();
  tx.commit();
}

void Store::save_dag_edges(IterationRange range, const std::vector<DagEdgeRow> &rows) {
  require_writable();
  range.validate();
  sql::Transaction tx(db_->db.get());
  sql::Statement clear(db_->db.get(), "DELETE FROM dag_edges WHERE range_lo = ? AND range_hi = ?");
  clear.bind(1, range.lo).bind(2, range.hi).run();
  sql::Statement q(db_->db.get(), "INSERT INTO dag_edges(range_lo, range_hi, src_key, dst_key, "
                                  "contracted_path_json, traversals_json) VALUES(?, ?, ?, ?, ?, ?)");
  for (const auto &r : rows)
    q.bind(1, range.lo)
        .bind(2, range.hi)
        .bind(3, r.src_key)
        .bind(4, r.dst_key)
        .bind(5, r.contracted_path_json)
        .bind(6, r.traversals_json)
        .run();
  // An empty DAG still records that the range was computed.
  if (rows.empty())
    q.bind(1, range.lo).bind(2, range.hi).bind(3, "").bind(4, "").bind(5, "[]").bind(6, "[]").run();
  tx.commit();
}

std::optional<std::vector<DagEdgeRow>> Store::load_dag_edges(IterationRange range) const {
  sql::Statement q(db_->db.get(), "SELECT src_key, dst_key, contracted_path_json, traversals_json "
                                  "FROM dag_edges WHERE range_lo = ? AND range_hi = ? ORDER BY src_key, dst_key");
  q.bind(1, range.lo).bind(2, range.hi);
  std::vector<DagEdgeRow> rows;
  bool any = false;
  while (q.step()) {
    any = true;
    DagEdgeRow r{q.text(0), q.text(1), q.text(2), q.text(3)};
    if (!r.src_key.empty())
      rows.push_back(std::move(r));
  }
  if (!any)
    return std::nullopt;
  return rows;
}

std::string Store::canonical_dump() const {
  static const std::vector<std::pair<std::string, std::string>> tables{
      {"meta", "key"},
      {"runs", "id"},
      {"nodes", "state_key"},
      {"samples", "trajectory_id"},
      {"edges", "trajectory_id, step_index"},
      {"validation", "state_key"},
      {"dag_edges", "range_lo, range_hi, src_key, dst_key"}};
  std::ostringstream out;
  char buf[64];
  for (const auto &[table, order] : tables) {
    out << "## " << table << '\n';
    sql::Statement q(db_->db.get(), "SELECT * FROM " + table + " ORDER BY " + order);
    while (q.step()) {
      for (int c = 0; c < q.columns(); ++c) {
        if (c)
          out << '|';
        switch (q.type(c)) {
        case SQLITE_NULL:
          out << "NULL";
          break;
        case SQLITE_INTEGER:
          out << q.integer(c);
          break;
        case SQLITE_FLOAT:
          std::snprintf(buf, sizeof buf, "%.17g", q.real(c));
          out << buf;
          break;
        default:
          out << q.text(c);
        }
      }
      out << '\n';
    }
  }
  return out.str();
}

std::vector<ValidationObject> full_validation_set(const Environment &env) {
  const auto states = env.enumerate_states();
  if (!states)
    throw CapabilityError("environment cannot enumerate a full validation set");
  std::vector<ValidationObject> out;
  out.reserve(states->size());
  for (const auto &s : *states) {
    const Eigen::VectorXd f = env.features(s);
    out.push_back({env.state_key(s), env.reward(s), std::vector<double>(f.data(), f.data() + f.size()), {}});
  }
  return out;
}

std::vector<ValidationObject> parse_validation_jsonl(std::istream &in) {
  std::vector<ValidationObject> out;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos)
      continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ValidationObject v;
      v.state_key = j.at("state_key").get<std::string>();
      v.reward = j.at("reward").get<double>();
      v.features = j.at("features").get<std::vector<double>>();
      if (!(v.reward > 0.0))
        throw DomainError("reward must be positive");
      out.push_back(std::move(v));
    } catch (const std::exception &e) {
      throw DomainError("validation set line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<Trajectory> reconstruct_trajectories(const Environment &env, const std::vector<EdgeRecord> &edges) {
  std::vector<Trajectory> out;
  for (const auto &e : edges) {
    if (out.empty() || out.back().trajectory_id != e.trajectory_id) {
      out.emplace_back();
      out.back().trajectory_id = e.trajectory_id;
      out.back().iteration = e.iteration;
    }
    auto &tau = out.back();
    if (e.step_index != static_cast<int>(tau.steps.size()))
      throw StoreError("edge rows of trajectory " + std::to_string(e.trajectory_id) + " are not contiguous");
    const State s = env.parse_key(e.src_key);
    tau.steps.push_back({s, e.action, e.p_forward, e.p_backward});
    if (e.terminal)
      tau.terminal = s;
  }
  return out;
}

} // namespace gflowstate
