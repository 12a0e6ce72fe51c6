#include "gflowstate/dag.hpp"

#include "gflowstate/errors.hpp"

#include <algorithm>
#include <deque>
#include <stdexcept>

namespace gflowstate {

using nlohmann::json;

namespace {

bool by_trajectory(const Traversal &a, const Traversal &b) {
  return std::tie(a.trajectory_id, a.step_index) < std::tie(b.trajectory_id, b.step_index);
}

Traversal traversal_of(const EdgeRecord &e) {
  return {e.trajectory_id, e.iteration, e.step_index, e.p_forward, e.p_backward};
}

json traversals_to_json(const std::vector<Traversal> &ts) {
  json out = json::array();
  for (const auto &t : ts)
    out.push_back({t.trajectory_id, t.iteration, t.step_index, t.p_forward, t.p_backward});
  return out;
}

std::vector<Traversal> traversals_from_json(const json &j) {
  std::vector<Traversal> out;
  out.reserve(j.size());
  for (const auto &t : j)
    out.push_back({t.at(0).get<std::int64_t>(), t.at(1).get<std::int64_t>(), t.at(2).get<int>(),
                   t.at(3).get<double>(), t.at(4).get<double>()});
  return out;
}

void add_ids(std::vector<std::int64_t> &ids, const std::vector<Traversal> &ts) {
  for (const auto &t : ts)
    ids.push_back(t.trajectory_id);
}

// Recomputes node statistics and the node index from edges and stop annotations.
void finalize_nodes(TrajectoryDag &dag) {
  dag.nodes[dag.root];
  dag.node_trajectories.clear();
  for (const auto &[key, stats] : dag.edges) {
    add_ids(dag.node_trajectories[key.first], stats.traversals);
    add_ids(dag.node_trajectories[key.second], stats.traversals);
    dag.nodes[key.first];
    dag.nodes[key.second];
  }
  for (auto &[key, node] : dag.nodes) {
    std::sort(node.stops.begin(), node.stops.end(), by_trajectory);
    add_ids(dag.node_trajectories[key], node.stops);
  }
  for (auto &[key, ids] : dag.node_trajectories) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    dag.nodes[key].visit_count = static_cast<std::int64_t>(ids.size());
  }
  // First iteration is the earliest traversal touching the node.
  std::map<std::string, std::int64_t> first;
  auto touch = [&first](const std::string &k, std::int64_t it) {
    auto [pos, fresh] = first.emplace(k, it);
    if (!fresh)
      pos->second = std::min(pos->second, it);
  };
  for (const auto &[key, stats] : dag.edges)
    for (const auto &t : stats.traversals) {
      touch(key.first, t.iteration);
      touch(key.second, t.iteration);
    }
  for (const auto &[key, node] : dag.nodes)
    for (const auto &t : node.stops)
      touch(key, t.iteration);
  for (auto &[key, node] : dag.nodes)
    node.first_iteration = first.count(key) ? first[key] : 0;
  dag.node_trajectories.emplace(dag.root, std::vector<std::int64_t>{});
}

} // namespace

std::vector<std::string> TrajectoryDag::children(const std::string &key) const {
  std::vector<std::string> out;
  for (auto it = edges.lower_bound({key, std::string()}); it != edges.end() && it->first.first == key; ++it)
    out.push_back(it->first.second);
  return out;
}

std::vector<std::string> TrajectoryDag::parents(const std::string &key) const {
  std::vector<std::string> out;
  for (const auto &[k, stats] : edges)
    if (k.second == key)
      out.push_back(k.first);
  return out;
}

std::size_t TrajectoryDag::out_degree(const std::string &key) const { return children(key).size(); }
std::size_t TrajectoryDag::in_degree(const std::string &key) const { return parents(key).size(); }

TrajectoryDag build_dag(const std::vector<EdgeRecord> &edges, const std::string &root, IterationRange range) {
  range.validate();
  TrajectoryDag dag;
  dag.root = root;
  dag.range = range;
  for (const auto &e : edges) {
    if (!range.contains(e.iteration))
      continue;
    if (e.terminal)
      dag.nodes[e.src_key].stops.push_back(traversal_of(e));
    else
      dag.edges[{e.src_key, e.dst_key}].traversals.push_back(traversal_of(e));
  }
  for (auto &[key, stats] : dag.edges) {
    if (key.second == root)
      throw DomainError("edge into the root state " + root);
    std::sort(stats.traversals.begin(), stats.traversals.end(), by_trajectory);
  }
  finalize_nodes(dag);
  return dag;
}

TrajectoryDag build_dag(Store &store, const Environment &env, IterationRange range) {
  auto dag = build_dag(store.query_edges(range), env.state_key(env.source()), range);
  if (!store.read_only())
    store.save_dag_edges(range, to_rows(truncate_chains(dag)));
  return dag;
}

TrajectoryDag truncate_chains(const TrajectoryDag &dag) {
  std::map<std::string, std::size_t> indeg, outdeg;
  for (const auto &[key, stats] : dag.edges) {
    ++outdeg[key.first];
    ++indeg[key.second];
  }
  auto interior = [&](const std::string &k) {
    return k != dag.root && !dag.nodes.at(k).terminal_for_some_sample() && indeg[k] == 1 && outdeg[k] == 1;
  };

  struct Chain {
    EdgeKey head; // first underlying edge
    std::string end;
    std::vector<std::string> path;
  };
  std::map<EdgeKey, std::vector<Chain>> candidates;
  for (const auto &[key, stats] : dag.edges) {
    if (interior(key.first))
      continue;
    Chain c{key, key.second, {}};
    while (interior(c.end)) {
      c.path.push_back(c.end);
      c.end = dag.children(c.end).front();
    }
    candidates[{key.first, c.end}].push_back(std::move(c));
  }

  TrajectoryDag out;
  out.root = dag.root;
  out.range = dag.range;
  out.truncated = true;
  for (const auto &[target, chains] : candidates) {
    if (chains.size() == 1) {
      const Chain &c = chains.front();
      TransitionStats stats = dag.edges.at(c.head);
      stats.contracted_path = c.path;
      std::string prev = c.head.second;
      for (std::size_t i = 0; i < c.path.size(); ++i) {
        const std::string &next = i + 1 < c.path.size() ? c.path[i + 1] : c.end;
        const auto &step = dag.edges.at({prev, next}).traversals;
        // Every trajectory entering an interior node leaves by its only edge.
        if (step.size() != stats.traversals.size())
          throw std::logic_error("chain traversal counts differ at " + prev);
        for (std::size_t t = 0; t < step.size(); ++t) {
          if (step[t].trajectory_id != stats.traversals[t].trajectory_id)
            throw std::logic_error("chain traversals diverge at " + prev);
          stats.traversals[t].p_forward *= step[t].p_forward;
          stats.traversals[t].p_backward *= step[t].p_backward;
        }
        prev = next;
      }
      out.edges.emplace(target, std::move(stats));
    } else {
      // Contracting would merge distinct routes into one (src, dst) pair.
      for (const auto &c : chains) {
        std::string prev = c.head.first;
        for (const auto &k : c.path) {
          out.edges.emplace(EdgeKey{prev, k}, dag.edges.at({prev, k}));
          prev = k;
        }
        out.edges.emplace(EdgeKey{prev, c.end}, dag.edges.at({prev, c.end}));
      }
    }
  }
  // Interior nodes never carry stops; the rest reappear as edge endpoints.
  for (const auto &[key, node] : dag.nodes)
    if (node.terminal_for_some_sample())
      out.nodes[key].stops = node.stops;
  finalize_nodes(out);
  return out;
}

std::vector<DagEdgeRow> to_rows(const TrajectoryDag &dag) {
  std::vector<DagEdgeRow> rows;
  for (const auto &[key, stats] : dag.edges)
    rows.push_back({key.first, key.second, json(stats.contracted_path).dump(),
                    traversals_to_json(stats.traversals).dump()});
  for (const auto &[key, node] : dag.nodes)
    if (node.terminal_for_some_sample())
      rows.push_back({key, key, "[]", traversals_to_json(node.stops).dump()});
  std::sort(rows.begin(), rows.end(), [](const DagEdgeRow &a, const DagEdgeRow &b) {
    return std::tie(a.src_key, a.dst_key) < std::tie(b.src_key, b.dst_key);
  });
  return rows;
}

TrajectoryDag from_rows(const std::vector<DagEdgeRow> &rows, const std::string &root, IterationRange range) {
  TrajectoryDag dag;
  dag.root = root;
  dag.range = range;
  dag.truncated = true;
  for (const auto &r : rows) {
    const auto traversals = traversals_from_json(json::parse(r.traversals_json));
    if (r.src_key == r.dst_key) {
      dag.nodes[r.src_key].stops = traversals;
    } else {
      auto &stats = dag.edges[{r.src_key, r.dst_key}];
      stats.traversals = traversals;
      stats.contracted_path = json::parse(r.contracted_path_json).get<std::vector<std::string>>();
    }
  }
  finalize_nodes(dag);
  return dag;
}

std::map<std::int64_t, std::vector<std::string>> truncated_paths(const TrajectoryDag &dag) {
  // (step index, dst) per trajectory, then ordered by step index.
  std::map<std::int64_t, std::vector<std::pair<int, const EdgeKey *>>> hops;
  for (const auto &[key, stats] : dag.edges)
    for (const auto &t : stats.traversals)
      hops[t.trajectory_id].emplace_back(t.step_index, &key);
  std::map<std::int64_t, std::vector<std::string>> out;
  for (auto &[id, list] : hops) {
    std::sort(list.begin(), list.end());
    auto &path = out[id];
    path.push_back(list.front().second->first);
    for (const auto &h : list)
      path.push_back(h.second->second);
  }
  for (const auto &[key, node] : dag.nodes)
    for (const auto &t : node.stops)
      if (!out.count(t.trajectory_id))
        out[t.trajectory_id] = {key};
  return out;
}

DagViewState initial_view(const TrajectoryDag &dag, std::string session_id) {
  return {std::move(session_id), {dag.root}};
}

std::vector<ChildRow> children_table(const TrajectoryDag &dag, const Environment &env, const DagViewState &view,
                                     const std::string &node) {
  if (!view.pinned.count(node))
    throw DomainError("node " + node + " is not pinned");
  std::vector<ChildRow> rows;
  for (const auto &child : dag.children(node)) {
    const auto &stats = dag.edges.at({node, child});
    ChildRow row;
    row.state_key = child;
    row.render = to_json(env.render_state(env.parse_key(child)));
    row.frequency = stats.frequency();
    double sum = 0.0;
    row.first_iteration = stats.traversals.front().iteration;
    for (const auto &t : stats.traversals) {
      sum += t.p_forward;
      row.max_p_forward = std::max(row.max_p_forward, t.p_forward);
      row.first_iteration = std::min(row.first_iteration, t.iteration);
    }
    row.mean_p_forward = sum / static_cast<double>(stats.frequency());
    row.samples_through = dag.nodes.at(child).visit_count;
    row.contracted_path = stats.contracted_path;
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const ChildRow &a, const ChildRow &b) {
    if (a.frequency != b.frequency)
      return a.frequency > b.frequency;
    return a.state_key < b.state_key;
  });
  return rows;
}

DagViewState expand(const TrajectoryDag &dag, const DagViewState &view, const std::string &node,
                    const std::string &child) {
  if (!view.pinned.count(node))
    throw DomainError("node " + node + " is not pinned");
  if (!dag.edges.count({node, child}))
    throw DomainError(child + " is not a child of " + node);
  DagViewState out = view;
  out.pinned.insert(child);
  return out;
}

DagViewState collapse(const TrajectoryDag &dag, const DagViewState &view, const std::string &node) {
  if (node == dag.root)
    throw DomainError("the root cannot be collapsed");
  if (!view.pinned.count(node))
    throw DomainError("node " + node + " is not pinned");
  DagViewState out = view;
  out.pinned.erase(node);
  std::set<std::string> reached{dag.root};
  std::deque<std::string> queue{dag.root};
  while (!queue.empty()) {
    const std::string k = queue.front();
    queue.pop_front();
    for (const auto &c : dag.children(k))
      if (out.pinned.count(c) && reached.insert(c).second)
        queue.push_back(c);
  }
  out.pinned = std::move(reached);
  return out;
}

std::map<std::string, std::size_t> placeholder_counts(const TrajectoryDag &dag, const DagViewState &view) {
  std::map<std::string, std::size_t> out;
  for (const auto &p : view.pinned) {
    std::size_t n = 0;
    for (const auto &c : dag.children(p))
      n += view.pinned.count(c) ? 0 : 1;
    out[p] = n;
  }
  return out;
}

std::vector<EdgeKey> visible_edges(const TrajectoryDag &dag, const DagViewState &view) {
  std::vector<EdgeKey> out;
  for (const auto &p : view.pinned)
    for (const auto &c : dag.children(p))
      if (view.pinned.count(c))
        out.emplace_back(p, c);
  return out;
}

void check_view(const TrajectoryDag &dag, const DagViewState &view) {
  if (!view.pinned.count(dag.root))
    throw DomainError("view does not contain the root");
  std::set<std::string> reached{dag.root};
  std::deque<std::string> queue{dag.root};
  while (!queue.empty()) {
    const std::string k = queue.front();
    queue.pop_front();
    for (const auto &c : dag.children(k))
      if (view.pinned.count(c) && reached.insert(c).second)
        queue.push_back(c);
  }
  if (reached != view.pinned)
    throw DomainError("view contains pinned nodes unreachable from the root");
}

std::vector<Trajectory> trajectories_through(const TrajectoryDag &dag, const Store &store, const Environment &env,
                                             const std::string &node) {
  const auto it = dag.node_trajectories.find(node);
  if (it == dag.node_trajectories.end() || it->second.empty())
    return {};
  return reconstruct_trajectories(env, store.edges_for(it->second));
}

std::map<std::string, int> depth_hints(const TrajectoryDag &dag) {
  std::map<std::string, std::size_t> indeg;
  for (const auto &[key, stats] : dag.edges)
    ++indeg[key.second];
  std::map<std::string, int> depth;
  std::deque<std::string> queue;
  for (const auto &[key, node] : dag.nodes)
    if (!indeg[key]) {
      depth[key] = 0;
      queue.push_back(key);
    }
  while (!queue.empty()) {
    const std::string k = queue.front();
    queue.pop_front();
    for (const auto &c : dag.children(k)) {
      depth[c] = std::max(depth[c], depth[k] + 1);
      if (--indeg[c] == 0)
        queue.push_back(c);
    }
  }
  return depth;
}

} // namespace gflowstate
