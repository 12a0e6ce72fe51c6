#include "gflowstate/gflownet.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace gflowstate;

namespace {

GridEnvironment grid(int h) {
  GridConfig cfg;
  cfg.height = h;
  return GridEnvironment(cfg);
}

PolicyNet<double> zero_head_net(Eigen::Index width = 16, std::uint64_t seed = 1) {
  Rng rng(seed);
  return PolicyNet<double>::initialize(2, width, rng);
}

PolicyNet<double> random_net(Eigen::Index width, std::uint64_t seed, double scale = 0.8) {
  Rng rng(seed);
  auto net = PolicyNet<double>::zeros(2, width);
  net.randomize(scale, rng);
  return net;
}

double probability_of(const std::vector<ActionProbability> &dist, Action a) {
  for (const auto &ap : dist)
    if (ap.action == a)
      return ap.p;
  return 0.0;
}

} // namespace

TEST_CASE("zero-initialized heads give uniform forward policies") {
  const auto env = grid(20);
  const auto net = zero_head_net();
  const auto source = forward_policy(net, env, {0, 0});
  REQUIRE(source.size() == 3);
  for (const auto &ap : source)
    CHECK(ap.p == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  const auto corner = forward_policy(net, env, {19, 19});
  REQUIRE(corner.size() == 1);
  CHECK(corner[0].action == Action::Stop);
  CHECK(corner[0].p == 1.0);

  const auto edge = forward_policy(net, env, {19, 4});
  REQUIRE(edge.size() == 2);
  CHECK(probability_of(edge, Action::IncY) == doctest::Approx(0.5));
  CHECK(probability_of(edge, Action::Stop) == doctest::Approx(0.5));
}

TEST_CASE("backward policy over parents") {
  const auto env = grid(20);
  const auto net = zero_head_net();
  const auto both = backward_policy(net, env, {1, 1});
  REQUIRE(both.size() == 2);
  CHECK(both[0].p == doctest::Approx(0.5));
  CHECK(both[1].p == doctest::Approx(0.5));
  const auto single = backward_policy(net, env, {0, 5});
  REQUIRE(single.size() == 1);
  CHECK(single[0].p == 1.0);
  CHECK(single[0].parent == State{0, 4});
  CHECK(backward_policy(net, env, {0, 0}).empty());
}

TEST_CASE("policies are proper distributions for random parameters") {
  const auto env = grid(6);
  const auto states = *env.enumerate_states();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto net = random_net(8, seed, 3.0);
    for (const auto &s : states) {
      double fwd = 0.0, bwd = 0.0;
      for (const auto &ap : forward_policy(net, env, s))
        fwd += ap.p;
      const auto b = backward_policy(net, env, s);
      for (const auto &pp : b)
        bwd += pp.p;
      CHECK(std::abs(fwd - 1.0) <= 1e-9);
      if (!b.empty())
        CHECK(std::abs(bwd - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("sample_trajectory") {
  SUBCASE("degenerate stop policy") {
    const auto env = grid(2);
    auto net = zero_head_net(4);
    net.bf[static_cast<int>(Action::Stop)] = 50.0;
    Rng rng(3);
    const auto tau = sample_trajectory(net, env, 0.0, rng);
    REQUIRE(tau.steps.size() == 1);
    CHECK(tau.steps[0].state == State{0, 0});
    CHECK(tau.steps[0].action == Action::Stop);
    CHECK(tau.terminal == State{0, 0});
  }

  SUBCASE("trajectory invariants hold for random policies") {
    const auto env = grid(8);
    Rng rng(11);
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const auto net = random_net(8, seed, 1.5);
      for (int i = 0; i < 200; ++i) {
        const auto tau = sample_trajectory(net, env, 0.1, rng);
        CHECK_NOTHROW(validate_trajectory(env, tau));
        CHECK(static_cast<int>(tau.steps.size()) <= 2 * (env.height() - 1) + 1);
        // Recorded probabilities come from the unmixed policies.
        for (std::size_t t = 0; t < tau.steps.size(); ++t) {
          const auto &step = tau.steps[t];
          CHECK(step.p_forward ==
                doctest::Approx(oracle::naive_forward(net, env, step.state).at(step.action)).epsilon(1e-12));
          if (step.action != Action::Stop) {
            const auto next = env.apply_action(step.state, step.action).state;
            const auto b = backward_policy(net, env, next);
            const auto it = std::find_if(b.begin(), b.end(), [&](const auto &pp) { return pp.parent == step.state; });
            REQUIRE(it != b.end());
            CHECK(step.p_backward == doctest::Approx(it->p).epsilon(1e-12));
          }
        }
      }
    }
  }

  SUBCASE("seeded sampling is bit-reproducible") {
    const auto env = grid(10);
    const auto net = random_net(8, 5);
    Rng a(42), b(42);
    for (int i = 0; i < 50; ++i)
      CHECK(sample_trajectory(net, env, 0.05, a) == sample_trajectory(net, env, 0.05, b));
  }

  SUBCASE("uniform policy on H=2 stops at the source one third of the time") {
    const auto env = grid(2);
    const auto net = PolicyNet<double>::zeros(2, 4);
    Rng rng(2024);
    const int n = 100000;
    int at_source = 0;
    for (int i = 0; i < n; ++i)
      at_source += sample_trajectory(net, env, 0.0, rng).terminal == State{0, 0};
    CHECK(std::abs(static_cast<double>(at_source) / n - 1.0 / 3.0) <= 0.01);
  }
}

TEST_CASE("trajectory-balance loss closed forms") {
  const auto env = grid(20);
  const auto net0 = zero_head_net();
  Trajectory tau;
  tau.steps.push_back({{0, 0}, Action::Stop, 1.0 / 3.0, 1.0});
  tau.terminal = {0, 0};
  const double r = env.reward({0, 0});

  auto net = net0;
  net.log_z = std::log(r) - std::log(1.0 / 3.0);
  CHECK(std::abs(tb_loss<double>(net, env, tau, r)) <= 1e-24);

  net.log_z = std::log(r);
  CHECK(tb_loss<double>(net, env, tau, r) == doctest::Approx(std::pow(std::log(1.0 / 3.0), 2)).epsilon(1e-12));
  CHECK(tb_loss<double>(net, env, tau, r) == doctest::Approx(1.2069).epsilon(1e-4));

  SUBCASE("d loss / d log_z is twice the residual") {
    auto grad = PolicyNet<double>::zeros(2, net.hidden_width());
    tb_loss<double>(net, env, tau, r, &grad);
    CHECK(grad.log_z == doctest::Approx(2.0 * std::log(1.0 / 3.0)).epsilon(1e-12));
  }

  CHECK_THROWS_AS(tb_loss<double>(net, env, tau, 0.0), DomainError);
  CHECK_THROWS_AS(tb_loss<double>(net, env, tau, -1.0), DomainError);
}

TEST_CASE("tb_loss gradient matches central finite differences") {
  const auto env = grid(6);
  Rng traj_rng(99);
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto net = random_net(6, 100 + seed);
    const auto tau = sample_trajectory(net, env, 0.3, traj_rng);
    const double r = env.reward(tau.terminal);

    auto grad = PolicyNet<double>::zeros(2, 6);
    tb_loss<double>(net, env, tau, r, &grad);
    const Eigen::VectorXd analytic = grad.flatten();
    const Eigen::VectorXd numeric = oracle::finite_difference_gradient<double>(net, env, tau, r, 1e-5);
    CHECK((analytic - numeric).lpNorm<Eigen::Infinity>() <= 1e-4 * numeric.lpNorm<Eigen::Infinity>());

    // Component-wise in extended precision, through the same templated loss.
    const auto wide = net.cast<long double>();
    auto wide_grad = PolicyNet<long double>::zeros(2, 6);
    tb_loss<long double>(wide, env, tau, r, &wide_grad);
    const auto wide_analytic = wide_grad.flatten();
    const auto wide_numeric = oracle::finite_difference_gradient<long double>(wide, env, tau, r, 1e-5L);
    for (Eigen::Index i = 0; i < wide_numeric.size(); ++i) {
      const long double scale = std::max(std::abs(wide_analytic[i]), std::abs(wide_numeric[i]));
      if (scale > 1e-7L)
        CHECK(static_cast<double>(std::abs(wide_analytic[i] - wide_numeric[i]) / scale) <= 1e-4);
    }
  }
}

TEST_CASE("exact terminal distribution") {
  SUBCASE("uniform policy on H=2") {
    const auto env = grid(2);
    const auto p = exact_terminal_distribution(PolicyNet<double>::zeros(2, 4), env);
    CHECK(p.at("0,0") == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(p.at("1,0") == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
    CHECK(p.at("0,1") == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
    CHECK(p.at("1,1") == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }

  SUBCASE("matches path enumeration and sums to one for random policies") {
    const auto env = grid(5);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto net = random_net(8, seed, 2.0);
      const auto dp = exact_terminal_distribution(net, env);
      const auto brute = oracle::enumerate_terminal_distribution(net, env);
      double total = 0.0;
      for (const auto &[k, p] : dp) {
        total += p;
        CHECK(p == doctest::Approx(brute.at(k)).epsilon(1e-10));
      }
      CHECK(std::abs(total - 1.0) <= 1e-9);
    }
  }

  SUBCASE("certain stop at the source") {
    const auto env = grid(4);
    auto net = PolicyNet<double>::zeros(2, 4);
    net.bf[static_cast<int>(Action::Stop)] = 800.0;
    const auto p = exact_terminal_distribution(net, env);
    CHECK(p.at("0,0") == 1.0);
    for (const auto &[k, v] : p)
      if (k != "0,0")
        CHECK(v == 0.0);
  }

  SUBCASE("too large to enumerate") {
    GridConfig cfg;
    cfg.height = 1001;
    const GridEnvironment env(cfg);
    CHECK_THROWS_AS(exact_terminal_distribution(PolicyNet<double>::zeros(2, 4), env), CapabilityError);
  }
}

TEST_CASE("analytically balanced network has zero loss on every trajectory") {
  const auto env = grid(3);
  const auto net = oracle::perfect_net(env, 32, 0.3, 17);
  const auto dist = exact_terminal_distribution(net, env);
  const auto states = *env.enumerate_states();
  double total_reward = 0.0;
  for (const auto &s : states)
    total_reward += env.reward(s);
  for (const auto &s : states)
    CHECK(dist.at(env.state_key(s)) == doctest::Approx(env.reward(s) / total_reward).epsilon(1e-6));
  for (const auto &path : oracle::all_trajectories(env)) {
    const auto tau = oracle::make_trajectory(env, path);
    CHECK(tb_loss<double>(net, env, tau, env.reward(tau.terminal)) <= 1e-6);
  }
}

TEST_CASE("importance-sampling estimate of log P_T") {
  const auto env = grid(5);
  const auto net = random_net(8, 21, 1.0);
  const auto exact = exact_terminal_distribution(net, env);

  SUBCASE("source state is exact") {
    const double est = estimate_log_ptx(net, env, {0, 0}, {50, 1});
    CHECK(est == doctest::Approx(std::log(probability_of(forward_policy(net, env, {0, 0}), Action::Stop)))
                     .epsilon(1e-12));
  }

  SUBCASE("single-path states are exact at K=1") {
    for (State s : {State{3, 0}, State{0, 4}})
      CHECK(estimate_log_ptx(net, env, s, {1, 9}) == doctest::Approx(std::log(exact.at(env.state_key(s)))).epsilon(1e-10));
  }

  SUBCASE("K=1 gives a finite single weight") {
    CHECK(std::isfinite(estimate_log_ptx(net, env, {2, 3}, {1, 5})));
  }

  SUBCASE("error shrinks as K grows") {
    double err_small = 0.0, err_large = 0.0;
    const auto states = *env.enumerate_states();
    for (const auto &s : states) {
      const double truth = std::log(exact.at(env.state_key(s)));
      err_small += std::abs(estimate_log_ptx(net, env, s, {100, 3}) - truth);
      err_large += std::abs(estimate_log_ptx(net, env, s, {10000, 3}) - truth);
    }
    CHECK(err_large < err_small);
    CHECK(err_large / 25.0 < 0.02);
  }

  SUBCASE("rejects K < 1") {
    CHECK_THROWS_AS(estimate_log_ptx(net, env, {1, 1}, {0, 1}), DomainError);
  }

  SUBCASE("deterministic for a fixed seed") {
    CHECK(estimate_log_ptx(net, env, {3, 2}, {200, 4}) == estimate_log_ptx(net, env, {3, 2}, {200, 4}));
  }
}

TEST_CASE("training") {
  SUBCASE("zero iterations logs nothing") {
    const auto env = grid(4);
    TrainConfig cfg;
    cfg.iterations = 0;
    cfg.seed = 3;
    PolicyNet<double> net;
    int calls = 0;
    train(env, cfg, net, [&](std::int64_t, const std::vector<LoggedSample> &) { ++calls; });
    CHECK(calls == 0);
    Rng rng(3);
    const auto fresh = PolicyNet<double>::initialize(2, cfg.hidden_width, rng);
    CHECK(net.flatten() == fresh.flatten());
  }

  SUBCASE("deterministic and logs valid batches") {
    const auto env = grid(5);
    TrainConfig cfg;
    cfg.iterations = 20;
    cfg.batch_size = 4;
    cfg.seed = 7;
    cfg.hidden_width = 16;
    std::vector<LoggedSample> first, second;
    PolicyNet<double> a, b;
    train(env, cfg, a, [&](std::int64_t it, const std::vector<LoggedSample> &batch) {
      for (const auto &s : batch) {
        CHECK(s.trajectory.iteration == it);
        CHECK_NOTHROW(validate_trajectory(env, s.trajectory));
        CHECK(s.reward == env.reward(s.trajectory.terminal));
        CHECK(s.loss >= 0.0);
        first.push_back(s);
      }
    });
    train(env, cfg, b, [&](std::int64_t, const std::vector<LoggedSample> &batch) {
      second.insert(second.end(), batch.begin(), batch.end());
    });
    CHECK(a.flatten() == b.flatten());
    REQUIRE(first.size() == second.size());
    for (std::size_t i = 0; i < first.size(); ++i) {
      CHECK(first[i].trajectory == second[i].trajectory);
      CHECK(first[i].loss == second[i].loss);
      CHECK(first[i].trajectory.trajectory_id == static_cast<std::int64_t>(i));
    }
  }

  SUBCASE("rejects bad configs") {
    const auto env = grid(4);
    PolicyNet<double> net;
    TrainConfig cfg;
    cfg.epsilon = 1.0;
    CHECK_THROWS_AS(train(env, cfg, net), DomainError);
    cfg = {};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train(env, cfg, net), DomainError);
  }

  SUBCASE("network serialization round trip") {
    const auto net = random_net(5, 8);
    CHECK(net_from_json(nlohmann::json::parse(net_to_json(net).dump())).flatten() == net.flatten());
  }
}
