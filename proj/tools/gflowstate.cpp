// Command-line entry point: train, analyze, serve, report.

#include "gflowstate/api.hpp"
#include "gflowstate/errors.hpp"
#include "gflowstate/gflownet.hpp"
#include "gflowstate/store.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

using namespace gflowstate;

namespace {

struct TrainArgs {
  std::string env = "grid";
  GridConfig grid;
  TrainConfig train;
  std::string db;
  std::string validation;
};

int run_train(const TrainArgs &a) {
  if (a.env != "grid")
    throw DomainError("unknown environment '" + a.env + "'");
  a.grid.validate();
  a.train.validate();
  const GridEnvironment env(a.grid);

  Store store(a.db);
  if (!a.validation.empty()) {
    std::ifstream in(a.validation);
    if (!in)
      throw DomainError("cannot read validation file " + a.validation);
    store.load_validation_set(parse_validation_jsonl(in));
  }
  store.begin_run({{"env", env.describe()}, {"train", a.train.to_json()}});
  PolicyNet<double> net;
  try {
    const auto summary = train(env, a.train, net, [&](std::int64_t, const std::vector<LoggedSample> &batch) {
      store.log_batch(env, batch);
    });
    store.finish_run(summary.to_json(), net_to_json(net));
    auto printed = summary.to_json();
    printed["wall_seconds"] = summary.wall_seconds;
    std::cout << dump_json(printed) << '\n';
  } catch (const std::exception &e) {
    store.mark_partial(e.what());
    throw;
  }
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"GFlowNet training and diagnostics workbench"};
  app.require_subcommand(1);

  TrainArgs targs;
  auto *train_cmd = app.add_subcommand("train", "Train a policy and log every sampled trajectory");
  train_cmd->add_option("--env", targs.env, "Environment")->check(CLI::IsMember({"grid"}));
  train_cmd->add_option("--height", targs.grid.height, "Grid side length H");
  train_cmd->add_option("--r0", targs.grid.r0, "Base reward");
  train_cmd->add_option("--r1", targs.grid.r1, "Outer band bonus");
  train_cmd->add_option("--r2", targs.grid.r2, "Inner band bonus");
  train_cmd->add_option("--iterations", targs.train.iterations, "Training iterations");
  train_cmd->add_option("--batch-size", targs.train.batch_size, "Trajectories per iteration");
  train_cmd->add_option("--lr", targs.train.learning_rate, "Network learning rate");
  train_cmd->add_option("--logz-lr", targs.train.log_z_learning_rate, "log Z learning rate");
  train_cmd->add_option("--epsilon", targs.train.epsilon, "Uniform exploration mixture weight");
  train_cmd->add_option("--hidden-width", targs.train.hidden_width, "Hidden layer width");
  train_cmd->add_option("--input-scale", targs.train.input_scale, "First-layer init scale");
  train_cmd->add_option("--seed", targs.train.seed, "Random seed");
  train_cmd->add_option("--validation", targs.validation, "Validation set (JSON lines)");
  train_cmd->add_option("--db", targs.db, "Run database")->required()->envname("GFLOWSTATE_DB");

  std::string analyze_db;
  AnalyzeOptions aopts;
  auto *analyze_cmd = app.add_subcommand("analyze", "Compute log P_T(x) and the truncated DAG after training");
  analyze_cmd->add_option("--db", analyze_db, "Run database")->required()->envname("GFLOWSTATE_DB");
  analyze_cmd->add_option("--samples", aopts.estimator_samples, "Backward trajectories per estimate");
  analyze_cmd->add_option("--seed", aopts.seed, "Estimator seed");

  std::string serve_db, host = "127.0.0.1";
  int port = 8080;
  auto *serve_cmd = app.add_subcommand("serve", "Serve the JSON API");
  serve_cmd->add_option("--db", serve_db, "Run database")->required()->envname("GFLOWSTATE_DB");
  serve_cmd->add_option("--port", port, "Port")->envname("GFLOWSTATE_PORT");
  serve_cmd->add_option("--host", host, "Bind address")->envname("GFLOWSTATE_HOST");

  std::string report_db, out_dir = ".";
  IterationRange range;
  auto *report_cmd = app.add_subcommand("report", "Write report.json and report.svg");
  report_cmd->add_option("--db", report_db, "Run database")->required()->envname("GFLOWSTATE_DB");
  report_cmd->add_option("--out", out_dir, "Output directory");
  report_cmd->add_option("--from", range.lo, "First iteration");
  report_cmd->add_option("--to", range.hi, "Last iteration");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd)
      return run_train(targs);
    if (*analyze_cmd) {
      std::cout << dump_json(analyze(analyze_db, aopts)) << '\n';
      return 0;
    }
    if (*serve_cmd) {
      Api api(serve_db);
      std::cerr << "serving " << serve_db << " on http://" << host << ':' << port << '\n';
      serve(api, host, port);
      return 0;
    }
    if (*report_cmd) {
      range.validate();
      Api api(report_db);
      const auto report = build_report(api, range);
      std::filesystem::create_directories(out_dir);
      std::ofstream(std::filesystem::path(out_dir) / "report.json") << dump_json(report) << '\n';
      std::ofstream(std::filesystem::path(out_dir) / "report.svg") << report_svg(report);
      std::cout << (std::filesystem::path(out_dir) / "report.json").string() << '\n';
      return 0;
    }
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
