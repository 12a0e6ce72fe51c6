#include "gflowstate/env.hpp"

#include "gflowstate/errors.hpp"

#include <charconv>
#include <cmath>

namespace gflowstate {

namespace {

constexpr long kMaxEnumeratedStates = 1'000'000;

std::string_view kind_name(RenderSpec::Kind kind) {
  switch (kind) {
  case RenderSpec::Kind::GridHighlight:
    return "GridHighlight";
  case RenderSpec::Kind::GridDensity:
    return "GridDensity";
  case RenderSpec::Kind::Text:
    return "Text";
  }
  return "Text";
}

bool parse_int(std::string_view text, int &out) {
  if (text.empty())
    return false;
  const auto *first = text.data();
  const auto *last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc{} && ptr == last;
}

} // namespace

std::string_view action_name(Action a) {
  switch (a) {
  case Action::IncX:
    return "IncX";
  case Action::IncY:
    return "IncY";
  case Action::Stop:
    return "Stop";
  }
  return "Stop";
}

Action parse_action(std::string_view name) {
  if (name == "IncX")
    return Action::IncX;
  if (name == "IncY")
    return Action::IncY;
  if (name == "Stop")
    return Action::Stop;
  throw DomainError("unknown action: " + std::string(name));
}

nlohmann::json to_json(const RenderSpec &spec) {
  return {{"kind", kind_name(spec.kind)}, {"payload", spec.payload}};
}

void GridConfig::validate() const {
  if (height < 2)
    throw DomainError("grid height must be at least 2");
  if (!(r0 > 0.0) || !(r1 > 0.0) || !(r2 > 0.0))
    throw DomainError("reward parameters must be positive");
  const bool inside = inner.lo >= outer.lo && inner.hi <= outer.hi &&
                      (inner.lo > outer.lo || !inner.lo_closed || outer.lo_closed) &&
                      (inner.hi < outer.hi || !inner.hi_closed || outer.hi_closed);
  const bool strict = inner.lo > outer.lo || inner.hi < outer.hi;
  if (!inside || !strict)
    throw DomainError("inner reward band must lie strictly inside the outer band");
}

std::string grid_key(const State &s) {
  return std::to_string(s.x) + "," + std::to_string(s.y);
}

State parse_grid_key(std::string_view key) {
  const auto comma = key.find(',');
  State s;
  if (comma == std::string_view::npos || !parse_int(key.substr(0, comma), s.x) ||
      !parse_int(key.substr(comma + 1), s.y))
    throw DomainError("malformed state key: '" + std::string(key) + "'");
  return s;
}

GridEnvironment::GridEnvironment(GridConfig cfg) : cfg_(cfg) { cfg_.validate(); }

nlohmann::json GridEnvironment::describe() const {
  auto band = [](const Interval &i) {
    return nlohmann::json{{"lo", i.lo}, {"hi", i.hi}, {"lo_closed", i.lo_closed},
                          {"hi_closed", i.hi_closed}};
  };
  return {{"env", "grid"},     {"height", cfg_.height},     {"r0", cfg_.r0},
          {"r1", cfg_.r1},     {"r2", cfg_.r2},             {"outer", band(cfg_.outer)},
          {"inner", band(cfg_.inner)}};
}

bool GridEnvironment::is_valid(const State &s) const {
  return s.x >= 0 && s.y >= 0 && s.x < cfg_.height && s.y < cfg_.height;
}

void GridEnvironment::require_valid(const State &s) const {
  if (!is_valid(s))
    throw DomainError("state " + grid_key(s) + " outside grid of height " +
                      std::to_string(cfg_.height));
}

std::vector<Action> GridEnvironment::valid_forward_actions(const State &s) const {
  require_valid(s);
  std::vector<Action> actions;
  actions.reserve(3);
  if (s.x < cfg_.height - 1)
    actions.push_back(Action::IncX);
  if (s.y < cfg_.height - 1)
    actions.push_back(Action::IncY);
  actions.push_back(Action::Stop);
  return actions;
}

StepResult GridEnvironment::apply_action(const State &s, Action a) const {
  require_valid(s);
  switch (a) {
  case Action::IncX:
    if (s.x >= cfg_.height - 1)
      throw DomainError("IncX invalid at " + grid_key(s));
    return {{s.x + 1, s.y}, false};
  case Action::IncY:
    if (s.y >= cfg_.height - 1)
      throw DomainError("IncY invalid at " + grid_key(s));
    return {{s.x, s.y + 1}, false};
  case Action::Stop:
    return {s, true};
  }
  throw DomainError("unknown action");
}

std::vector<Parent> GridEnvironment::parents(const State &s) const {
  require_valid(s);
  std::vector<Parent> out;
  if (s.x > 0)
    out.push_back({{s.x - 1, s.y}, Action::IncX});
  if (s.y > 0)
    out.push_back({{s.x, s.y - 1}, Action::IncY});
  return out;
}

double GridEnvironment::reward(const State &s) const {
  require_valid(s);
  const double span = cfg_.height - 1;
  const double dx = std::abs(s.x / span - 0.5);
  const double dy = std::abs(s.y / span - 0.5);
  double r = cfg_.r0;
  if (cfg_.outer.contains(dx) && cfg_.outer.contains(dy))
    r += cfg_.r1;
  if (cfg_.inner.contains(dx) && cfg_.inner.contains(dy))
    r += cfg_.r2;
  return r;
}

std::string GridEnvironment::state_key(const State &s) const {
  require_valid(s);
  return grid_key(s);
}

State GridEnvironment::parse_key(std::string_view key) const {
  const State s = parse_grid_key(key);
  require_valid(s);
  return s;
}

Eigen::VectorXd GridEnvironment::features(const State &s) const {
  require_valid(s);
  const double span = cfg_.height - 1;
  return Eigen::Vector2d(s.x / span, s.y / span);
}

RenderSpec GridEnvironment::render_state(const State &s) const {
  require_valid(s);
  return {RenderSpec::Kind::GridHighlight,
          {{"height", cfg_.height}, {"cells", nlohmann::json::array({nlohmann::json::array({s.x, s.y})})}}};
}

RenderSpec GridEnvironment::render_states(std::span<const State> states) const {
  // counts[x][y]
  std::vector<std::vector<int>> counts(cfg_.height, std::vector<int>(cfg_.height, 0));
  for (const auto &s : states) {
    require_valid(s);
    ++counts[s.x][s.y];
  }
  return {RenderSpec::Kind::GridDensity, {{"height", cfg_.height}, {"counts", counts}}};
}

std::optional<std::vector<State>> GridEnvironment::enumerate_states() const {
  const long n = static_cast<long>(cfg_.height) * cfg_.height;
  if (n > kMaxEnumeratedStates)
    return std::nullopt;
  std::vector<State> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int depth = 0; depth <= 2 * (cfg_.height - 1); ++depth)
    for (int x = std::max(0, depth - cfg_.height + 1); x <= std::min(depth, cfg_.height - 1); ++x)
      out.push_back({x, depth - x});
  return out;
}

std::unique_ptr<Environment> make_environment(const nlohmann::json &d) {
  const std::string name = d.value("env", std::string("grid"));
  if (name != "grid")
    throw DomainError("unknown environment '" + name + "'");
  auto band = [&d](const char *field, Interval fallback) {
    if (!d.contains(field))
      return fallback;
    const auto &b = d.at(field);
    return Interval{b.at("lo").get<double>(), b.at("hi").get<double>(), b.value("lo_closed", false),
                    b.value("hi_closed", false)};
  };
  GridConfig cfg;
  cfg.height = d.value("height", cfg.height);
  cfg.r0 = d.value("r0", cfg.r0);
  cfg.r1 = d.value("r1", cfg.r1);
  cfg.r2 = d.value("r2", cfg.r2);
  cfg.outer = band("outer", cfg.outer);
  cfg.inner = band("inner", cfg.inner);
  return std::make_unique<GridEnvironment>(cfg);
}

} // namespace gflowstate
