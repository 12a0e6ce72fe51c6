#pragma once

#include "gflowstate/env.hpp"
#include "gflowstate/gflownet.hpp"

#include <json.hpp>

#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

struct sqlite3;

namespace gflowstate {

inline constexpr int kSchemaVersion = 1;

// Inclusive range of training iterations.
struct IterationRange {
  std::int64_t lo = 0;
  std::int64_t hi = std::numeric_limits<std::int64_t>::max();

  static IterationRange all() { return {}; }
  bool contains(std::int64_t it) const { return it >= lo && it <= hi; }
  void validate() const; // DomainError when lo > hi
  auto operator<=>(const IterationRange &) const = default;
};

struct Sample {
  std::int64_t trajectory_id = 0;
  std::string terminal_key;
  double reward = 0.0;
  double loss = 0.0;
  std::int64_t iteration = 0;
  std::optional<double> log_ptx;

  bool operator==(const Sample &) const = default;
};

struct EdgeRecord {
  std::string src_key;
  std::string dst_key;
  std::int64_t trajectory_id = 0;
  int step_index = 0;
  std::int64_t iteration = 0;
  double p_forward = 1.0;
  double p_backward = 1.0;
  Action action = Action::Stop;
  // Stop self-edge.
  bool terminal = false;

  bool operator==(const EdgeRecord &) const = default;
};

struct ValidationObject {
  std::string state_key;
  double reward = 0.0;
  std::vector<double> features;
  std::optional<double> log_ptx;

  bool operator==(const ValidationObject &) const = default;
};

enum class RunStatus { Running, Complete, Partial };

struct RunInfo {
  std::int64_t id = 0;
  nlohmann::json config;  // {"env": ..., "train": ...}
  RunStatus status = RunStatus::Running;
  nlohmann::json summary; // null until finished
  nlohmann::json model;   // null until finished
  std::string message;    // failure reason for partial runs
};

struct DagEdgeRow {
  std::string src_key;
  std::string dst_key;
  std::string contracted_path_json;
  std::string traversals_json;

  bool operator==(const DagEdgeRow &) const = default;
};

enum class SampleOrder { Ascending, Descending };

/// Embedded relational store for one training run and its analytics.
///
/// Tables: meta(schema_version), runs, nodes, edges, samples, validation,
/// dag_edges. Writers go through one connection; readers may open the same
/// file read-only.
class Store {
public:
  enum class Mode { ReadWrite, ReadOnly };

  explicit Store(const std::string &path, Mode mode = Mode::ReadWrite);
  ~Store();
  Store(Store &&) noexcept;
  Store &operator=(Store &&) noexcept;

  const std::string &path() const { return path_; }
  bool read_only() const { return mode_ == Mode::ReadOnly; }

  // Run lifecycle. begin_run refuses when a run already exists.
  void begin_run(const nlohmann::json &config);
  void finish_run(const nlohmann::json &summary, const nlohmann::json &model);
  void mark_partial(const std::string &message);
  std::optional<RunInfo> run() const;

  // One transaction per call. Throws StoreError on duplicate trajectory ids.
  void log_trajectory(const Environment &env, const Trajectory &tau, double reward, double loss);
  void log_batch(const Environment &env, const std::vector<LoggedSample> &batch);

  std::vector<Sample> query_samples(IterationRange range, std::size_t limit = 0,
                                    SampleOrder order = SampleOrder::Ascending) const;
  std::vector<Sample> samples_by_id(const std::vector<std::int64_t> &ids) const;
  // Edges in range, ordered by (trajectory_id, step_index).
  std::vector<EdgeRecord> query_edges(IterationRange range) const;
  std::vector<EdgeRecord> edges_for(const std::vector<std::int64_t> &trajectory_ids) const;
  std::optional<std::pair<std::int64_t, std::int64_t>> iteration_bounds() const;
  std::int64_t count_samples(IterationRange range) const;
  std::int64_t count_edges(IterationRange range) const;
  std::int64_t count_nodes() const;

  void load_validation_set(const std::vector<ValidationObject> &records);
  std::vector<ValidationObject> query_validation() const;

  // Keyed by state key; samples are matched on terminal_key.
  void set_sample_log_ptx(const std::map<std::string, double> &by_key);
  void set_validation_log_ptx(const std::map<std::string, double> &by_key);

  void save_dag_edges(IterationRange range, const std::vector<DagEdgeRow> &rows);
  std::optional<std::vector<DagEdgeRow>> load_dag_edges(IterationRange range) const;

  // Every table's rows in primary-key order, one line per row.
  std::string canonical_dump() const;

private:
  void require_writable() const;
  void insert_trajectory(const Environment &env, const Trajectory &tau, double reward, double loss);

  std::string path_;
  Mode mode_;
  struct Handle;
  std::unique_ptr<Handle> db_;
};

std::string_view run_status_name(RunStatus s);

// Every state of an enumerable environment with its reward and features.
std::vector<ValidationObject> full_validation_set(const Environment &env);

// One JSON object per line: {state_key, reward, features:[...]}. Blank lines
// are skipped. Throws DomainError naming the offending line.
std::vector<ValidationObject> parse_validation_jsonl(std::istream &in);

// Groups edge rows (ordered by trajectory and step) back into trajectories.
std::vector<Trajectory> reconstruct_trajectories(const Environment &env,
                                                 const std::vector<EdgeRecord> &edges);

} // namespace gflowstate
