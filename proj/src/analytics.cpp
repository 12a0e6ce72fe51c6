#include "gflowstate/analytics.hpp"

#include <algorithm>
#include <map>
#include <numeric>

namespace gflowstate {

using nlohmann::json;

std::string_view projection_method_name(ProjectionMethod m) {
  switch (m) {
  case ProjectionMethod::Identity2D:
    return "identity";
  case ProjectionMethod::PCA2:
    return "pca";
  case ProjectionMethod::Precomputed:
    return "precomputed";
  }
  return "?";
}

ProjectionMethod parse_projection_method(std::string_view s) {
  for (auto m : {ProjectionMethod::Identity2D, ProjectionMethod::PCA2, ProjectionMethod::Precomputed})
    if (projection_method_name(m) == s)
      return m;
  throw DomainError("unknown projection method '" + std::string(s) + "'");
}

// ------------------------------------------------------------------- hexbins

Hex hexbin_assign(const Eigen::Vector2d &p, const Eigen::Vector2d &origin, double radius) {
  if (!(radius > 0.0))
    throw DomainError("hex radius must be positive");
  const Eigen::Vector2d d = p - origin;
  const double qf = (std::sqrt(3.0) / 3.0 * d.x() - d.y() / 3.0) / radius;
  const double rf = (2.0 / 3.0 * d.y()) / radius;
  const double sf = -qf - rf;
  double q = std::round(qf), r = std::round(rf), s = std::round(sf);
  const double dq = std::abs(q - qf), dr = std::abs(r - rf), ds = std::abs(s - sf);
  if (dq > dr && dq > ds)
    q = -r - s;
  else if (dr > ds)
    r = -q - s;
  return {static_cast<int>(q), static_cast<int>(r)};
}

Hex HexGrid::assign(const Eigen::Vector2d &p) const { return hexbin_assign(p, origin, radius); }

Eigen::Vector2d HexGrid::center(Hex h) const {
  return origin + radius * Eigen::Vector2d(std::sqrt(3.0) * (h.q + h.r / 2.0), 1.5 * h.r);
}

HexGrid HexGrid::fit(const Eigen::Matrix<double, Eigen::Dynamic, 2> &points, int resolution) {
  if (resolution < 1)
    throw DomainError("hexbin resolution must be at least 1");
  HexGrid g;
  double extent = 1.0;
  if (points.rows() > 0) {
    g.origin = points.colwise().minCoeff().transpose();
    const double x_extent = points.col(0).maxCoeff() - points.col(0).minCoeff();
    if (x_extent > 0.0)
      extent = x_extent;
  }
  g.radius = extent / resolution / std::sqrt(3.0);
  return g;
}

// ------------------------------------------------------------------- metrics

namespace {

std::vector<double> average_ranks(const std::vector<double> &v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]])
      ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

} // namespace

std::optional<double> correlation(const std::vector<double> &x, const std::vector<double> &y, CorrelationMode mode) {
  if (x.size() != y.size())
    throw DomainError("correlation inputs differ in length");
  if (x.size() < 3)
    return std::nullopt;
  if (mode == CorrelationMode::Spearman)
    return correlation(average_ranks(x), average_ranks(y), CorrelationMode::Pearson);
  const Eigen::Map<const Eigen::VectorXd> a(x.data(), static_cast<Eigen::Index>(x.size()));
  const Eigen::Map<const Eigen::VectorXd> b(y.data(), static_cast<Eigen::Index>(y.size()));
  const Eigen::VectorXd ca = a.array() - a.mean();
  const Eigen::VectorXd cb = b.array() - b.mean();
  const double saa = ca.squaredNorm(), sbb = cb.squaredNorm();
  if (!(saa > 0.0) || !(sbb > 0.0))
    return std::nullopt;
  return std::clamp(ca.dot(cb) / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::optional<double> odds_score(std::int64_t v, std::int64_t s, std::int64_t V, std::int64_t S) {
  if (v < 0 || s < 0 || v > V || s > S)
    throw DomainError("odds counts out of range");
  if (V <= 0 || S <= 0 || v + s == 0)
    return std::nullopt;
  // Integer products are exact well beyond realistic counts.
  const long double vS = static_cast<long double>(v) * S, sV = static_cast<long double>(s) * V;
  return static_cast<double>((vS - sV) / (vS + sV));
}

RewardHistogram reward_histogram(const std::vector<double> &rewards, int bins) {
  RewardHistogram h;
  if (rewards.empty() || bins < 1)
    return h;
  std::vector<double> logs;
  logs.reserve(rewards.size());
  for (double r : rewards)
    logs.push_back(std::log(r));
  const double lo = *std::min_element(logs.begin(), logs.end());
  double hi = *std::max_element(logs.begin(), logs.end());
  if (hi == lo)
    hi = lo + 1.0;
  const double width = (hi - lo) / bins;
  for (int i = 0; i <= bins; ++i)
    h.log_edges.push_back(i == bins ? hi : lo + width * i);
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (double l : logs)
    ++h.counts[static_cast<std::size_t>(std::clamp(static_cast<int>((l - lo) / width), 0, bins - 1))];
  return h;
}

void compute_bin_metrics(HexBin &bin, const std::vector<const Sample *> &samples,
                         const std::vector<const ValidationObject *> &validation, std::int64_t total_samples,
                         std::int64_t total_validation, CorrelationMode mode) {
  bin.sample_ids.clear();
  bin.validation_keys.clear();
  std::vector<double> rewards, log_p, log_r;
  std::map<std::int64_t, std::pair<double, std::int64_t>> by_iteration;
  double loss_sum = 0.0;
  for (const Sample *s : samples) {
    bin.sample_ids.push_back(s->trajectory_id);
    rewards.push_back(s->reward);
    loss_sum += s->loss;
    auto &slot = by_iteration[s->iteration];
    slot.first += s->loss;
    ++slot.second;
    if (s->log_ptx) {
      log_p.push_back(*s->log_ptx);
      log_r.push_back(std::log(s->reward));
    }
  }
  for (const ValidationObject *v : validation) {
    bin.validation_keys.push_back(v->state_key);
    if (v->log_ptx) {
      log_p.push_back(*v->log_ptx);
      log_r.push_back(std::log(v->reward));
    }
  }
  bin.mean_reward.reset();
  bin.mean_loss.reset();
  if (!samples.empty()) {
    bin.mean_reward = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(samples.size());
    bin.mean_loss = loss_sum / static_cast<double>(samples.size());
  }
  bin.correlation = correlation(log_p, log_r, mode);
  bin.odds_score = odds_score(bin.count_validation(), bin.count_samples(), total_validation, total_samples);
  bin.loss_series.clear();
  for (const auto &[it, acc] : by_iteration)
    bin.loss_series.push_back({it, acc.first / static_cast<double>(acc.second), acc.second});
  bin.reward_histogram = reward_histogram(rewards);
}

BinnedProjection bin_projection(const std::vector<Sample> &samples,
                                const Eigen::Matrix<double, Eigen::Dynamic, 2> &sample_points,
                                const std::vector<ValidationObject> &validation,
                                const Eigen::Matrix<double, Eigen::Dynamic, 2> &validation_points, int resolution,
                                CorrelationMode mode) {
  if (static_cast<std::size_t>(sample_points.rows()) != samples.size() ||
      static_cast<std::size_t>(validation_points.rows()) != validation.size())
    throw DomainError("projected points do not match their objects");
  Eigen::Matrix<double, Eigen::Dynamic, 2> all(sample_points.rows() + validation_points.rows(), 2);
  all << sample_points, validation_points;

  BinnedProjection out;
  out.grid = HexGrid::fit(all, resolution);
  out.total_samples = static_cast<std::int64_t>(samples.size());
  out.total_validation = static_cast<std::int64_t>(validation.size());

  std::map<Hex, std::pair<std::vector<const Sample *>, std::vector<const ValidationObject *>>> members;
  for (std::size_t i = 0; i < samples.size(); ++i)
    members[out.grid.assign(sample_points.row(static_cast<Eigen::Index>(i)).transpose())].first.push_back(
        &samples[i]);
  for (std::size_t i = 0; i < validation.size(); ++i)
    members[out.grid.assign(validation_points.row(static_cast<Eigen::Index>(i)).transpose())].second.push_back(
        &validation[i]);
  for (const auto &[hex, m] : members) {
    HexBin bin;
    bin.hex = hex;
    bin.center = out.grid.center(hex);
    compute_bin_metrics(bin, m.first, m.second, out.total_samples, out.total_validation, mode);
    out.bins.push_back(std::move(bin));
  }
  return out;
}

// ------------------------------------------------------------------- ranking

RankMetric parse_rank_metric(std::string_view s) {
  if (s == "reward")
    return RankMetric::Reward;
  if (s == "loss")
    return RankMetric::Loss;
  throw DomainError("unknown ranking metric '" + std::string(s) + "'");
}

std::vector<RankingFrame> ranking(const std::vector<Sample> &samples, RankMetric metric, std::size_t n) {
  if (n < 1)
    throw DomainError("ranking size must be at least 1");
  std::vector<const Sample *> order;
  for (const auto &s : samples)
    order.push_back(&s);
  std::sort(order.begin(), order.end(), [](const Sample *a, const Sample *b) {
    return std::tie(a->iteration, a->trajectory_id) < std::tie(b->iteration, b->trajectory_id);
  });
  const auto better = [metric](double a, double b) { return metric == RankMetric::Reward ? a > b : a < b; };

  struct Best {
    double value;
    std::int64_t iteration;
  };
  std::map<std::string, Best> best;
  std::map<std::string, std::int64_t> first_ranked;
  std::vector<RankingFrame> frames;
  for (std::size_t i = 0; i < order.size();) {
    const std::int64_t it = order[i]->iteration;
    for (; i < order.size() && order[i]->iteration == it; ++i) {
      const Sample &s = *order[i];
      const double v = metric == RankMetric::Reward ? s.reward : s.loss;
      auto [pos, fresh] = best.emplace(s.terminal_key, Best{v, it});
      if (!fresh && better(v, pos->second.value))
        pos->second = {v, it};
    }
    std::vector<std::map<std::string, Best>::const_iterator> pool;
    pool.reserve(best.size());
    for (auto p = best.cbegin(); p != best.cend(); ++p)
      pool.push_back(p);
    const std::size_t k = std::min(n, pool.size());
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k), pool.end(),
                      [&better](auto a, auto b) {
                        if (a->second.value != b->second.value)
                          return better(a->second.value, b->second.value);
                        if (a->second.iteration != b->second.iteration)
                          return a->second.iteration < b->second.iteration;
                        return a->first < b->first;
                      });
    RankingFrame frame;
    frame.iteration = it;
    for (std::size_t r = 0; r < k; ++r) {
      const auto &[key, b] = *pool[r];
      const auto fr = first_ranked.emplace(key, it).first->second;
      frame.entries.push_back({key, static_cast<int>(r + 1), b.value, b.iteration, fr});
    }
    frames.push_back(std::move(frame));
  }
  return frames;
}

// ------------------------------------------------------------- transitions

HeatMetric parse_heat_metric(std::string_view s) {
  if (s == "probability")
    return HeatMetric::Probability;
  if (s == "variance")
    return HeatMetric::Variance;
  if (s == "frequency")
    return HeatMetric::Frequency;
  throw DomainError("unknown transition metric '" + std::string(s) + "'");
}

Direction parse_direction(std::string_view s) {
  if (s == "forward")
    return Direction::Forward;
  if (s == "backward")
    return Direction::Backward;
  throw DomainError("unknown direction '" + std::string(s) + "'");
}

namespace {

HeatmapRow heat_row(const EdgeKey &edge, bool stop, const std::vector<Traversal> &ts, HeatMetric metric,
                    Direction direction) {
  HeatmapRow row;
  row.edge = edge;
  row.stop = stop;
  row.frequency = static_cast<std::int64_t>(ts.size());
  for (const auto &t : ts)
    row.active_iterations.push_back(t.iteration);
  std::sort(row.active_iterations.begin(), row.active_iterations.end());
  row.active_iterations.erase(std::unique(row.active_iterations.begin(), row.active_iterations.end()),
                              row.active_iterations.end());
  const auto p = [direction](const Traversal &t) { return direction == Direction::Forward ? t.p_forward : t.p_backward; };
  double mean = 0.0;
  for (const auto &t : ts)
    mean += p(t);
  mean /= static_cast<double>(ts.size());
  switch (metric) {
  case HeatMetric::Probability:
    row.value = mean;
    break;
  case HeatMetric::Variance: {
    double ss = 0.0;
    for (const auto &t : ts)
      ss += (p(t) - mean) * (p(t) - mean);
    row.value = ss / static_cast<double>(ts.size());
    break;
  }
  case HeatMetric::Frequency:
    row.value = static_cast<double>(ts.size());
    break;
  }
  return row;
}

} // namespace

std::vector<HeatmapRow> transition_heatmap(const TrajectoryDag &dag, HeatMetric metric, Direction direction,
                                           std::size_t top_m) {
  std::vector<HeatmapRow> rows;
  for (const auto &[key, stats] : dag.edges)
    rows.push_back(heat_row(key, false, stats.traversals, metric, direction));
  for (const auto &[key, node] : dag.nodes)
    if (node.terminal_for_some_sample())
      rows.push_back(heat_row({key, key}, true, node.stops, metric, direction));
  std::sort(rows.begin(), rows.end(), [](const HeatmapRow &a, const HeatmapRow &b) {
    if (a.value != b.value)
      return a.value > b.value;
    return a.edge < b.edge;
  });
  if (top_m > 0 && rows.size() > top_m)
    rows.resize(top_m);
  for (std::size_t i = 0; i < rows.size(); ++i)
    rows[i].rank = static_cast<int>(i + 1);
  return rows;
}

std::vector<HistoryPoint> transition_history(const TrajectoryDag &dag, const EdgeKey &edge) {
  const std::vector<Traversal> *ts = nullptr;
  if (edge.first == edge.second) {
    const auto it = dag.nodes.find(edge.first);
    if (it != dag.nodes.end())
      ts = &it->second.stops;
  } else {
    const auto it = dag.edges.find(edge);
    if (it != dag.edges.end())
      ts = &it->second.traversals;
  }
  std::vector<HistoryPoint> out;
  if (!ts)
    return out;
  std::map<std::int64_t, HistoryPoint> acc;
  for (const auto &t : *ts) {
    auto &h = acc[t.iteration];
    h.iteration = t.iteration;
    h.p_forward += t.p_forward;
    h.p_backward += t.p_backward;
    ++h.count;
  }
  for (auto &[it, h] : acc) {
    h.p_forward /= static_cast<double>(h.count);
    h.p_backward /= static_cast<double>(h.count);
    out.push_back(h);
  }
  return out;
}

// ---------------------------------------------------------------------- JSON

namespace {

json optional_json(const std::optional<double> &v) { return v ? json(*v) : json(nullptr); }

} // namespace

json to_json(const RankingFrame &f) {
  json entries = json::array();
  for (const auto &e : f.entries)
    entries.push_back({{"terminal_key", e.terminal_key},
                       {"rank", e.rank},
                       {"value", e.value},
                       {"iteration", e.iteration},
                       {"first_ranked_iteration", e.first_ranked_iteration}});
  return {{"iteration", f.iteration}, {"entries", std::move(entries)}};
}

json to_json(const HexBin &b, bool detail) {
  json j = {{"q", b.hex.q},
            {"r", b.hex.r},
            {"center", {b.center.x(), b.center.y()}},
            {"count_samples", b.count_samples()},
            {"count_validation", b.count_validation()},
            {"mean_reward", optional_json(b.mean_reward)},
            {"mean_loss", optional_json(b.mean_loss)},
            {"correlation", optional_json(b.correlation)},
            {"odds_score", optional_json(b.odds_score)}};
  if (detail) {
    j["sample_ids"] = b.sample_ids;
    j["validation_keys"] = b.validation_keys;
    json series = json::array();
    for (const auto &p : b.loss_series)
      series.push_back({{"iteration", p.iteration}, {"mean_loss", p.mean_loss}, {"count", p.count}});
    j["loss_series"] = std::move(series);
    j["reward_histogram"] = {{"log_edges", b.reward_histogram.log_edges}, {"counts", b.reward_histogram.counts}};
  }
  return j;
}

json to_json(const HeatmapRow &r) {
  return {{"src", r.edge.first},
          {"dst", r.edge.second},
          {"stop", r.stop},
          {"rank", r.rank},
          {"value", r.value},
          {"frequency", r.frequency},
          {"active_iterations", r.active_iterations}};
}

json to_json(const HistoryPoint &p) {
  return {{"iteration", p.iteration}, {"p_forward", p.p_forward}, {"p_backward", p.p_backward}, {"count", p.count}};
}

} // namespace gflowstate
