#include "gflowstate/dag.hpp"

#include "fixtures.hpp"
#include "temp_path.hpp"

#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

using namespace gflowstate;
using fixture::grid;
using fixture::path;

namespace {

constexpr Action X = Action::IncX;
constexpr Action Y = Action::IncY;
constexpr Action S = Action::Stop;

TrajectoryDag dag_of(const Environment &env, std::initializer_list<Trajectory> taus) {
  TempPath p;
  Store store(p.str());
  for (const auto &t : taus)
    store.log_trajectory(env, t, env.reward(t.terminal), 0.0);
  return build_dag(store, env, IterationRange::all());
}

std::vector<std::string> state_keys(const Environment &env, const Trajectory &tau) {
  std::vector<std::string> out;
  for (const auto &s : tau.steps)
    out.push_back(env.state_key(s.state));
  return out;
}

// Re-inserts each edge's contracted interior states.
std::vector<std::string> splice(const TrajectoryDag &dag, const std::vector<std::string> &truncated) {
  std::vector<std::string> out{truncated.front()};
  for (std::size_t i = 1; i < truncated.size(); ++i) {
    const auto &mid = dag.edges.at({truncated[i - 1], truncated[i]}).contracted_path;
    out.insert(out.end(), mid.begin(), mid.end());
    out.push_back(truncated[i]);
  }
  return out;
}

void check_structure(const TrajectoryDag &dag) {
  CHECK(dag.contains(dag.root));
  CHECK(dag.parents(dag.root).empty());
  for (const auto &[key, stats] : dag.edges) {
    CHECK(dag.contains(key.first));
    CHECK(dag.contains(key.second));
    CHECK(stats.frequency() == stats.traversals.size());
  }
  // Acyclic: depth strictly increases along every edge.
  const auto depth = depth_hints(dag);
  CHECK(depth.size() == dag.nodes.size());
  for (const auto &[key, stats] : dag.edges)
    CHECK(depth.at(key.first) < depth.at(key.second));
}

} // namespace

TEST_CASE("merging edges") {
  const auto env = grid(4);
  SUBCASE("shared edge has frequency two") {
    const auto dag = dag_of(env, {path(0, 0, {X, S}), path(1, 0, {X, Y, S})});
    CHECK(dag.edges.at({"0,0", "1,0"}).frequency() == 2);
    CHECK(dag.edges.at({"1,0", "1,1"}).frequency() == 1);
    CHECK(dag.nodes.at("1,0").terminal_for_some_sample());
    CHECK(dag.nodes.at("1,0").visit_count == 2);
    check_structure(dag);
  }
  SUBCASE("single trajectory of length L has L edges") {
    const auto dag = dag_of(env, {path(0, 0, {X, Y, Y, X, X, S})});
    CHECK(dag.edges.size() == 5);
    CHECK(dag.nodes.size() == 6);
  }
  SUBCASE("empty range gives a lone root") {
    TempPath p;
    Store store(p.str());
    store.log_trajectory(env, path(0, 3, {X, S}), 1.0, 0.0);
    const auto dag = build_dag(store, env, {10, 20});
    CHECK(dag.edges.empty());
    REQUIRE(dag.nodes.size() == 1);
    CHECK(dag.nodes.count("0,0") == 1);
    CHECK(truncate_chains(dag).nodes.size() == 1);
    REQUIRE(store.load_dag_edges({10, 20}).has_value());
    CHECK(store.load_dag_edges({10, 20})->empty());
  }
  SUBCASE("deterministic") {
    CHECK(dag_of(env, {path(4, 0, {X, S}), path(2, 1, {Y, S})}) ==
          dag_of(env, {path(4, 0, {X, S}), path(2, 1, {Y, S})}));
  }
}

TEST_CASE("chain truncation examples") {
  const auto env = grid(4);
  SUBCASE("sole trajectory contracts its middle state") {
    const auto t = truncate_chains(dag_of(env, {path(0, 0, {X, Y, S}, 0.5, 0.25)}));
    REQUIRE(t.edges.size() == 1);
    const auto &e = t.edges.at({"0,0", "1,1"});
    CHECK(e.contracted_path == std::vector<std::string>{"1,0"});
    REQUIRE(e.frequency() == 1);
    CHECK(e.traversals[0].p_forward == 0.25);
    CHECK(e.traversals[0].p_backward == 0.0625);
    CHECK_FALSE(t.contains("1,0"));
  }
  SUBCASE("a sample stopping at the middle state blocks contraction") {
    const auto t = truncate_chains(dag_of(env, {path(0, 0, {X, Y, S}), path(1, 0, {X, S})}));
    CHECK(t.edges.size() == 2);
    CHECK(t.edges.at({"0,0", "1,0"}).contracted_path.empty());
  }
  SUBCASE("diamond stays intact") {
    const auto raw = dag_of(env, {path(0, 0, {X, Y, S}), path(1, 0, {Y, X, S})});
    const auto t = truncate_chains(raw);
    CHECK(t.edges.size() == 4);
    CHECK(t.nodes.size() == 4);
    for (const auto &[key, stats] : t.edges)
      CHECK(stats.contracted_path.empty());
  }
  SUBCASE("long chain past a branch") {
    // (0,0)->(1,0) branches; (1,0)->(2,0)->(3,0)->(3,1) is a chain.
    const auto t = truncate_chains(dag_of(env, {path(0, 0, {X, X, X, Y, S}), path(1, 0, {X, Y, S})}));
    CHECK(t.edges.at({"1,0", "3,1"}).contracted_path == std::vector<std::string>{"2,0", "3,0"});
    CHECK(t.edges.at({"0,0", "1,0"}).frequency() == 2);
    CHECK(t.contains("1,1"));
  }
  SUBCASE("root is never contracted") {
    const auto t = truncate_chains(dag_of(env, {path(0, 0, {Y, S})}));
    CHECK(t.contains("0,0"));
    CHECK(t.edges.count({"0,0", "0,1"}) == 1);
  }
}

TEST_CASE("truncation properties on seeded runs") {
  const auto env = grid(6);
  std::size_t contracted = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    CAPTURE(seed);
    TempPath p;
    Store store(p.str());
    fixture::mini_run(store, env, 40, 8, seed);
    const auto raw = build_dag(store, env, IterationRange::all());
    const auto t = truncate_chains(raw);
    check_structure(raw);
    check_structure(t);

    const auto originals = reconstruct_trajectories(env, store.query_edges(IterationRange::all()));
    const auto paths = truncated_paths(t);
    REQUIRE(paths.size() == originals.size());
    std::size_t truncated_length = 0;
    for (const auto &tau : originals) {
      const auto &tp = paths.at(tau.trajectory_id);
      truncated_length += tp.size() - 1;
      CHECK(splice(t, tp) == state_keys(env, tau));
    }

    // Contracted products against the raw per-step probabilities.
    std::map<std::int64_t, const Trajectory *> by_id;
    for (const auto &tau : originals)
      by_id[tau.trajectory_id] = &tau;
    std::size_t frequency_sum = 0;
    for (const auto &[key, stats] : t.edges) {
      frequency_sum += stats.frequency();
      contracted += !stats.contracted_path.empty();
      for (const auto &tr : stats.traversals) {
        const auto &steps = by_id.at(tr.trajectory_id)->steps;
        double pf = 1.0, pb = 1.0;
        for (std::size_t k = 0; k <= stats.contracted_path.size(); ++k) {
          pf *= steps[tr.step_index + k].p_forward;
          pb *= steps[tr.step_index + k].p_backward;
        }
        CHECK(std::abs(tr.p_forward - pf) <= 1e-12);
        CHECK(std::abs(tr.p_backward - pb) <= 1e-12);
      }
    }
    CHECK(frequency_sum == truncated_length);

    const auto persisted = store.load_dag_edges(IterationRange::all());
    REQUIRE(persisted.has_value());
    CHECK(from_rows(*persisted, t.root, t.range) == t);
  }
  // Small runs leave sparse regions, so the properties above cover real chains.
  CHECK(contracted > 0);
}

TEST_CASE("children tables") {
  const auto env = grid(4);
  SUBCASE("only IncX first moves give one row") {
    const auto t = truncate_chains(dag_of(env, {path(0, 0, {X, Y, S}), path(1, 1, {X, S}), path(2, 2, {X, X, S})}));
    const auto view = initial_view(t, "s");
    const auto rows = children_table(t, env, view, t.root);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].state_key == "1,0");
    CHECK(rows[0].frequency == 3);
    CHECK(rows[0].samples_through == 3);
    CHECK(rows[0].first_iteration == 0);
    CHECK(rows[0].mean_p_forward == doctest::Approx(0.5));
    CHECK(rows[0].render["kind"] == "GridHighlight");
  }
  SUBCASE("sorting, conservation and leaves") {
    const auto t = truncate_chains(dag_of(env, {path(0, 4, {Y, S}), path(1, 2, {X, S}), path(2, 3, {Y, X, S}),
                                                path(3, 1, {X, Y, S}), path(4, 0, {Y, Y, S})}));
    auto view = initial_view(t, "s");
    const auto rows = children_table(t, env, view, t.root);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].state_key == "0,1");
    CHECK(rows[0].frequency == 3);
    CHECK(rows[1].state_key == "1,0");
    CHECK(rows[1].first_iteration == 1);
    std::size_t sum = 0;
    for (const auto &r : rows)
      sum += r.frequency;
    std::size_t outgoing = 0;
    for (const auto &c : t.children(t.root))
      outgoing += t.edges.at({t.root, c}).frequency();
    CHECK(sum == outgoing);

    view = expand(t, view, t.root, "0,1");
    view = expand(t, view, "0,1", "0,2");
    CHECK(children_table(t, env, view, "0,2").empty());
    CHECK_THROWS_AS(children_table(t, env, view, "1,0"), DomainError);
  }
}

TEST_CASE("view expansion and collapse") {
  const auto env = grid(4);
  SUBCASE("linear chain") {
    // A stop at every state keeps the chain uncontracted.
    const auto t = truncate_chains(dag_of(env, {path(0, 0, {X, X, S}), path(1, 0, {X, S}), path(2, 0, {S})}));
    auto v = initial_view(t, "a");
    v = expand(t, v, "0,0", "1,0");
    CHECK(v.pinned == std::set<std::string>{"0,0", "1,0"});
    CHECK(expand(t, v, "0,0", "1,0") == v);
    v = expand(t, v, "1,0", "2,0");
    check_view(t, v);
    CHECK(collapse(t, v, "1,0").pinned == std::set<std::string>{"0,0"});
    CHECK(collapse(t, v, "2,0").pinned == std::set<std::string>{"0,0", "1,0"});
    CHECK_THROWS_AS(collapse(t, v, "0,0"), DomainError);
    CHECK_THROWS_AS(expand(t, v, "0,0", "3,3"), DomainError);
    CHECK_THROWS_AS(expand(t, initial_view(t, "b"), "1,0", "2,0"), DomainError);
  }
  SUBCASE("diamond") {
    const auto t = truncate_chains(dag_of(env, {path(0, 0, {X, Y, S}), path(1, 0, {Y, X, S})}));
    auto v = initial_view(t, "d");
    CHECK(placeholder_counts(t, v).at("0,0") == 2);
    v = expand(t, v, "0,0", "1,0");
    v = expand(t, v, "0,0", "0,1");
    v = expand(t, v, "1,0", "1,1");
    check_view(t, v);
    const auto visible = visible_edges(t, v);
    CHECK(std::count(visible.begin(), visible.end(), EdgeKey{"1,0", "1,1"}) == 1);
    CHECK(std::count(visible.begin(), visible.end(), EdgeKey{"0,1", "1,1"}) == 1);
    CHECK(placeholder_counts(t, v).at("0,0") == 0);

    const auto after = collapse(t, v, "1,0");
    CHECK(after.pinned == std::set<std::string>{"0,0", "0,1", "1,1"});
    check_view(t, after);
    const auto both = collapse(t, after, "0,1");
    CHECK(both.pinned == std::set<std::string>{"0,0"});
  }
}

TEST_CASE("random view operations keep the invariants") {
  const auto env = grid(6);
  TempPath p;
  Store store(p.str());
  fixture::mini_run(store, env, 30, 8, 11);
  const auto t = truncate_chains(build_dag(store, env, IterationRange::all()));
  std::mt19937_64 rng(5);
  auto v = initial_view(t, "r");
  int roundtrips = 0;
  for (int op = 0; op < 400; ++op) {
    std::vector<std::string> pinned(v.pinned.begin(), v.pinned.end());
    const auto &node = pinned[rng() % pinned.size()];
    const auto kids = t.children(node);
    if (rng() % 3 != 0 && !kids.empty()) {
      const auto &child = kids[rng() % kids.size()];
      const bool fresh = !v.pinned.count(child);
      const auto next = expand(t, v, node, child);
      check_view(t, next);
      // Expand then collapse restores the prior set when the child has no
      // other route from the root.
      if (fresh && t.children(child).empty()) {
        bool other_parent = false;
        for (const auto &par : t.parents(child))
          other_parent |= par != node && v.pinned.count(par);
        if (!other_parent) {
          CHECK(collapse(t, next, child) == v);
          ++roundtrips;
        }
      }
      v = next;
    } else if (node != t.root) {
      v = collapse(t, v, node);
      check_view(t, v);
      CHECK_FALSE(v.pinned.count(node));
    }
    for (const auto &[k, n] : placeholder_counts(t, v)) {
      std::size_t expect = 0;
      for (const auto &c : t.children(k))
        expect += v.pinned.count(c) ? 0 : 1;
      CHECK(n == expect);
    }
  }
  CHECK(roundtrips > 0);
}

TEST_CASE("trajectories through a node") {
  const auto env = grid(6);
  TempPath p;
  Store store(p.str());
  fixture::mini_run(store, env, 25, 6, 9);
  const auto raw = build_dag(store, env, IterationRange::all());
  const auto all = reconstruct_trajectories(env, store.query_edges(IterationRange::all()));

  CHECK(trajectories_through(raw, store, env, raw.root) == all);
  CHECK(trajectories_through(raw, store, env, "99,99").empty());

  const auto states = *env.enumerate_states();
  for (const auto &s : states) {
    const auto key = env.state_key(s);
    std::vector<Trajectory> expect;
    for (const auto &tau : all)
      for (const auto &step : tau.steps)
        if (step.state == s) {
          expect.push_back(tau);
          break;
        }
    CHECK(trajectories_through(raw, store, env, key) == expect);
  }

  const auto ranged = build_dag(store, env, {10, 12});
  for (const auto &tau : trajectories_through(ranged, store, env, ranged.root))
    CHECK((tau.iteration >= 10 && tau.iteration <= 12));
  CHECK(trajectories_through(ranged, store, env, ranged.root).size() == 18);
}
