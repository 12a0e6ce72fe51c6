#pragma once

#include "gflowstate/dag.hpp"
#include "gflowstate/errors.hpp"
#include "gflowstate/store.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace gflowstate {

// ---------------------------------------------------------------- projection

enum class ProjectionMethod { Identity2D, PCA2, Precomputed };

std::string_view projection_method_name(ProjectionMethod m);
ProjectionMethod parse_projection_method(std::string_view s);

/// Projects the rows of `points` (n x d) to the plane (n x 2).
///
/// PCA2 centers the data and projects onto the two leading principal
/// directions; each direction's largest-magnitude loading is made positive
/// (the first such loading on ties). Precomputed expects d == 2 coordinates
/// supplied by the caller and passes them through.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 2> project(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> &points,
                                                 ProjectionMethod method) {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Eigen::Index n = points.rows(), d = points.cols();
  switch (method) {
  case ProjectionMethod::Identity2D:
  case ProjectionMethod::Precomputed:
    if (d != 2)
      throw DomainError("projection expects 2-dimensional points, got " + std::to_string(d));
    return points;
  case ProjectionMethod::PCA2:
    break;
  }
  if (d < 2)
    throw DomainError("PCA2 expects at least 2 dimensions");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 2> out(n, 2);
  if (n == 0)
    return out;
  const Matrix centered = points.rowwise() - points.colwise().mean();
  const Matrix cov = centered.transpose() * centered / Scalar(n);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  // Eigenvalues come in increasing order.
  Eigen::Matrix<Scalar, Eigen::Dynamic, 2> basis(d, 2);
  for (int k = 0; k < 2; ++k) {
    auto v = solver.eigenvectors().col(d - 1 - k).eval();
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < d; ++i)
      if (std::abs(v[i]) > std::abs(v[arg]) * (Scalar(1) + Scalar(1e-12)))
        arg = i;
    if (v[arg] < Scalar(0))
      v = -v;
    basis.col(k) = v;
  }
  out = centered * basis;
  return out;
}

// ------------------------------------------------------------------- hexbins

struct Hex {
  int q = 0;
  int r = 0;
  auto operator<=>(const Hex &) const = default;
};

/// Pointy-top hexagonal grid in axial coordinates.
struct HexGrid {
  Eigen::Vector2d origin = Eigen::Vector2d::Zero();
  double radius = 1.0;

  Hex assign(const Eigen::Vector2d &p) const;
  Eigen::Vector2d center(Hex h) const;

  /// Grid whose hex width is the x-extent of `points` divided by
  /// `resolution`, anchored at the lower-left corner of the points.
  static HexGrid fit(const Eigen::Matrix<double, Eigen::Dynamic, 2> &points, int resolution = 20);
};

Hex hexbin_assign(const Eigen::Vector2d &p, const Eigen::Vector2d &origin, double radius);

// ------------------------------------------------------------------- metrics

enum class CorrelationMode { Pearson, Spearman };

// Absent with fewer than 3 points or a zero variance.
std::optional<double> correlation(const std::vector<double> &x, const std::vector<double> &y,
                                  CorrelationMode mode = CorrelationMode::Pearson);

/// (v*S - s*V) / (v*S + s*V): +1 for validation-only, -1 for samples-only,
/// 0 at the global ratio. Absent when V or S is zero or the bin is empty.
std::optional<double> odds_score(std::int64_t v, std::int64_t s, std::int64_t V, std::int64_t S);

struct RewardHistogram {
  std::vector<double> log_edges; // 21 edges in log-reward space
  std::vector<std::int64_t> counts;
};

RewardHistogram reward_histogram(const std::vector<double> &rewards, int bins = 20);

struct LossPoint {
  std::int64_t iteration = 0;
  double mean_loss = 0.0;
  std::int64_t count = 0;
};

struct HexBin {
  Hex hex;
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  std::vector<std::int64_t> sample_ids;
  std::vector<std::string> validation_keys;
  std::optional<double> mean_reward;
  std::optional<double> mean_loss;
  std::optional<double> correlation;
  std::optional<double> odds_score;
  std::vector<LossPoint> loss_series;
  RewardHistogram reward_histogram;

  std::int64_t count_samples() const { return static_cast<std::int64_t>(sample_ids.size()); }
  std::int64_t count_validation() const { return static_cast<std::int64_t>(validation_keys.size()); }
};

// Aggregates over one bin's members. Validation objects count towards
// correlation and odds only.
void compute_bin_metrics(HexBin &bin, const std::vector<const Sample *> &samples,
                         const std::vector<const ValidationObject *> &validation, std::int64_t total_samples,
                         std::int64_t total_validation, CorrelationMode mode = CorrelationMode::Pearson);

struct BinnedProjection {
  HexGrid grid;
  std::vector<HexBin> bins; // sorted by (q, r)
  std::int64_t total_samples = 0;
  std::int64_t total_validation = 0;
};

// Sample points are rows of `sample_points` aligned with `samples`, likewise
// for validation.
BinnedProjection bin_projection(const std::vector<Sample> &samples,
                                const Eigen::Matrix<double, Eigen::Dynamic, 2> &sample_points,
                                const std::vector<ValidationObject> &validation,
                                const Eigen::Matrix<double, Eigen::Dynamic, 2> &validation_points, int resolution = 20,
                                CorrelationMode mode = CorrelationMode::Pearson);

// ------------------------------------------------------------------- ranking

enum class RankMetric { Reward, Loss };

RankMetric parse_rank_metric(std::string_view s);

struct RankEntry {
  std::string terminal_key;
  int rank = 0;
  double value = 0.0;
  std::int64_t iteration = 0; // iteration at which the best value was reached
  std::int64_t first_ranked_iteration = 0;
};

struct RankingFrame {
  std::int64_t iteration = 0;
  std::vector<RankEntry> entries;
};

/// One frame per iteration present in `samples`, each ranking the distinct
/// terminal objects seen so far by their best value.
std::vector<RankingFrame> ranking(const std::vector<Sample> &samples, RankMetric metric, std::size_t n);

// ------------------------------------------------------------- transitions

enum class HeatMetric { Probability, Variance, Frequency };
enum class Direction { Forward, Backward };

HeatMetric parse_heat_metric(std::string_view s);
Direction parse_direction(std::string_view s);

struct HeatmapRow {
  EdgeKey edge;
  bool stop = false; // Stop annotation, edge is (x, x)
  int rank = 0;
  double value = 0.0;
  std::int64_t frequency = 0;
  std::vector<std::int64_t> active_iterations;
};

/// Top `top_m` transitions of a raw DAG by `metric`, descending, ties by edge.
std::vector<HeatmapRow> transition_heatmap(const TrajectoryDag &dag, HeatMetric metric, Direction direction,
                                           std::size_t top_m);

struct HistoryPoint {
  std::int64_t iteration = 0;
  double p_forward = 0.0;
  double p_backward = 0.0;
  std::int64_t count = 0;
};

// Per-iteration means over the traversals of one edge; (x, x) reads the
// Stop annotation of x. Unknown edges give an empty series.
std::vector<HistoryPoint> transition_history(const TrajectoryDag &dag, const EdgeKey &edge);

// ---------------------------------------------------------------------- JSON

nlohmann::json to_json(const RankingFrame &f);
nlohmann::json to_json(const HexBin &b, bool detail);
nlohmann::json to_json(const HeatmapRow &r);
nlohmann::json to_json(const HistoryPoint &p);

} // namespace gflowstate
