#pragma once

#include "gflowstate/gflownet.hpp"
#include "gflowstate/store.hpp"

#include <initializer_list>
#include <utility>

namespace fixture {

inline gflowstate::GridEnvironment grid(int h) {
  gflowstate::GridConfig cfg;
  cfg.height = h;
  return gflowstate::GridEnvironment(cfg);
}

// Trains a small network and logs every batch into `store`.
inline gflowstate::RunSummary mini_run(gflowstate::Store &store, const gflowstate::Environment &env, int iterations,
                                       int batch_size, std::uint64_t seed, int width = 16) {
  gflowstate::TrainConfig cfg;
  cfg.iterations = iterations;
  cfg.batch_size = batch_size;
  cfg.seed = seed;
  cfg.hidden_width = width;
  gflowstate::PolicyNet<double> net;
  store.begin_run({{"env", env.describe()}, {"train", cfg.to_json()}});
  const auto summary = gflowstate::train(env, cfg, net, [&](std::int64_t, const auto &batch) {
    store.log_batch(env, batch);
  });
  store.finish_run(summary.to_json(), gflowstate::net_to_json(net));
  return summary;
}

// Hand-built trajectory from a start state and a list of actions ending in Stop.
inline gflowstate::Trajectory path(std::int64_t id, std::int64_t iteration,
                                   std::initializer_list<gflowstate::Action> actions, double pf = 0.5,
                                   double pb = 0.5) {
  using gflowstate::Action;
  gflowstate::Trajectory tau;
  tau.trajectory_id = id;
  tau.iteration = iteration;
  gflowstate::State s{0, 0};
  for (Action a : actions) {
    tau.steps.push_back({s, a, pf, a == Action::Stop ? 1.0 : pb});
    if (a == Action::IncX)
      ++s.x;
    else if (a == Action::IncY)
      ++s.y;
  }
  tau.terminal = s;
  return tau;
}

} // namespace fixture
