#pragma once

#include "gflowstate/env.hpp"
#include "gflowstate/store.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace gflowstate {

// One pass of one trajectory over a (possibly contracted) transition. For
// contracted transitions the probabilities are products over the chain.
struct Traversal {
  std::int64_t trajectory_id = 0;
  std::int64_t iteration = 0;
  int step_index = 0; // index of the first underlying step
  double p_forward = 1.0;
  double p_backward = 1.0;

  bool operator==(const Traversal &) const = default;
};

struct TransitionStats {
  // Sorted by trajectory id.
  std::vector<Traversal> traversals;
  // Interior states removed by chain truncation, in path order.
  std::vector<std::string> contracted_path;

  std::size_t frequency() const { return traversals.size(); }
  bool operator==(const TransitionStats &) const = default;
};

struct NodeStats {
  std::int64_t visit_count = 0;
  std::int64_t first_iteration = 0;
  // Stop transitions taken at this node, sorted by trajectory id.
  std::vector<Traversal> stops;

  bool terminal_for_some_sample() const { return !stops.empty(); }
  bool operator==(const NodeStats &) const = default;
};

using EdgeKey = std::pair<std::string, std::string>;

/// Merged transition graph of the logged trajectories in one iteration range.
/// Stop transitions are not edges; they live on NodeStats::stops.
struct TrajectoryDag {
  std::string root;
  IterationRange range;
  bool truncated = false;
  std::map<std::string, NodeStats> nodes;
  std::map<EdgeKey, TransitionStats> edges;
  // Trajectory ids passing through each node, sorted.
  std::map<std::string, std::vector<std::int64_t>> node_trajectories;

  std::vector<std::string> children(const std::string &key) const;
  std::vector<std::string> parents(const std::string &key) const;
  std::size_t in_degree(const std::string &key) const;
  std::size_t out_degree(const std::string &key) const;
  bool contains(const std::string &key) const { return nodes.count(key) != 0; }

  bool operator==(const TrajectoryDag &) const = default;
};

// Merges edge rows (any order) into a raw, untruncated DAG.
TrajectoryDag build_dag(const std::vector<EdgeRecord> &edges, const std::string &root, IterationRange range);

/// Builds the raw DAG for `range` from the store. When the store is writable
/// the truncated DAG is persisted to dag_edges for reuse.
TrajectoryDag build_dag(Store &store, const Environment &env, IterationRange range);

/// Contracts every maximal chain of interior nodes (in- and out-degree one,
/// not the root, no sample stopping there) into a single transition. Chains
/// whose contraction would duplicate an existing (src, dst) pair are kept.
TrajectoryDag truncate_chains(const TrajectoryDag &dag);

// Persisted form of a truncated DAG. Stop annotations are written as
// self-edge rows.
std::vector<DagEdgeRow> to_rows(const TrajectoryDag &dag);
TrajectoryDag from_rows(const std::vector<DagEdgeRow> &rows, const std::string &root, IterationRange range);

// Each trajectory's state sequence as it appears in the (truncated) DAG.
std::map<std::int64_t, std::vector<std::string>> truncated_paths(const TrajectoryDag &dag);

/// Pinned-node exploration state of one DAG view session.
struct DagViewState {
  std::string session_id;
  std::set<std::string> pinned;

  bool operator==(const DagViewState &) const = default;
};

struct ChildRow {
  std::string state_key;
  nlohmann::json render;
  std::size_t frequency = 0;
  double mean_p_forward = 0.0;
  double max_p_forward = 0.0;
  std::int64_t first_iteration = 0;
  std::int64_t samples_through = 0;
  std::vector<std::string> contracted_path;
};

DagViewState initial_view(const TrajectoryDag &dag, std::string session_id);

// Sorted by frequency descending, then state key.
std::vector<ChildRow> children_table(const TrajectoryDag &dag, const Environment &env, const DagViewState &view,
                                     const std::string &node);

DagViewState expand(const TrajectoryDag &dag, const DagViewState &view, const std::string &node,
                    const std::string &child);

// Unpins `node`, then everything no longer reachable from the root through
// pinned nodes.
DagViewState collapse(const TrajectoryDag &dag, const DagViewState &view, const std::string &node);

// Number of unpinned children per pinned node.
std::map<std::string, std::size_t> placeholder_counts(const TrajectoryDag &dag, const DagViewState &view);

// Edges whose endpoints are both pinned.
std::vector<EdgeKey> visible_edges(const TrajectoryDag &dag, const DagViewState &view);

// Throws DomainError if the root is missing or a pinned node is unreachable.
void check_view(const TrajectoryDag &dag, const DagViewState &view);

/// Complete trajectories containing `node`, reconstructed from the store.
/// Unknown nodes yield an empty list.
std::vector<Trajectory> trajectories_through(const TrajectoryDag &dag, const Store &store, const Environment &env,
                                             const std::string &node);

// Longest-path depth from the root, a layering hint for layout.
std::map<std::string, int> depth_hints(const TrajectoryDag &dag);

} // namespace gflowstate
