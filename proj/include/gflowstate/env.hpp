#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <compare>
#include <memory>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gflowstate {

struct State {
  int x = 0;
  int y = 0;

  auto operator<=>(const State &) const = default;
};

enum class Action : std::uint8_t { IncX = 0, IncY = 1, Stop = 2 };

inline constexpr int kForwardActionCount = 3;
inline constexpr int kBackwardActionCount = 2;

std::string_view action_name(Action a);
Action parse_action(std::string_view name);

struct Parent {
  State state;
  Action action;

  bool operator==(const Parent &) const = default;
};

// Result of applying an action: the successor, or the terminal marker
// carrying the final object when the action is Stop.
struct StepResult {
  State state;
  bool terminal = false;

  bool operator==(const StepResult &) const = default;
};

struct RenderSpec {
  enum class Kind { GridHighlight, GridDensity, Text };

  Kind kind = Kind::Text;
  nlohmann::json payload;
};

nlohmann::json to_json(const RenderSpec &spec);

// A half-open, open or closed interval on the real line.
struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool lo_closed = false;
  bool hi_closed = false;

  bool contains(double v) const {
    const bool above = lo_closed ? v >= lo : v > lo;
    const bool below = hi_closed ? v <= hi : v < hi;
    return above && below;
  }
};

struct GridConfig {
  int height = 20;
  double r0 = 0.001;
  double r1 = 0.5;
  double r2 = 2.0;
  Interval outer{0.25, 0.5, false, true};
  Interval inner{0.3, 0.4, false, false};

  // Throws DomainError when H < 2, r0 <= 0 or inner is not inside outer.
  void validate() const;
};

/// Environment hooks consumed by training, storage and analytics.
///
/// Besides the MDP itself (actions, parents, reward) an environment supplies
/// the four integration hooks every view relies on: a database string key,
/// a fixed-length feature vector for projection, and single- and multi-state
/// render payloads. Downstream modules only talk to this interface.
class Environment {
public:
  virtual ~Environment() = default;

  virtual std::string name() const = 0;
  virtual nlohmann::json describe() const = 0;

  virtual State source() const = 0;
  virtual bool is_valid(const State &s) const = 0;

  virtual std::vector<Action> valid_forward_actions(const State &s) const = 0;
  virtual StepResult apply_action(const State &s, Action a) const = 0;
  virtual std::vector<Parent> parents(const State &s) const = 0;
  virtual double reward(const State &s) const = 0;

  virtual std::string state_key(const State &s) const = 0;
  virtual State parse_key(std::string_view key) const = 0;
  virtual Eigen::VectorXd features(const State &s) const = 0;
  virtual Eigen::Index feature_dim() const = 0;
  virtual RenderSpec render_state(const State &s) const = 0;
  virtual RenderSpec render_states(std::span<const State> states) const = 0;

  // Every state in an order where parents precede children, or nullopt when
  // the space is too large to enumerate.
  virtual std::optional<std::vector<State>> enumerate_states() const = 0;

  // Upper bound on trajectory length; sampling aborts beyond it.
  virtual int max_trajectory_length() const = 0;
};

class GridEnvironment final : public Environment {
public:
  explicit GridEnvironment(GridConfig cfg = {});

  const GridConfig &config() const { return cfg_; }
  int height() const { return cfg_.height; }

  std::string name() const override { return "grid"; }
  nlohmann::json describe() const override;

  State source() const override { return {0, 0}; }
  bool is_valid(const State &s) const override;

  std::vector<Action> valid_forward_actions(const State &s) const override;
  StepResult apply_action(const State &s, Action a) const override;
  std::vector<Parent> parents(const State &s) const override;
  double reward(const State &s) const override;

  std::string state_key(const State &s) const override;
  State parse_key(std::string_view key) const override;
  Eigen::VectorXd features(const State &s) const override;
  Eigen::Index feature_dim() const override { return 2; }
  RenderSpec render_state(const State &s) const override;
  RenderSpec render_states(std::span<const State> states) const override;

  std::optional<std::vector<State>> enumerate_states() const override;
  int max_trajectory_length() const override { return 4 * cfg_.height; }

private:
  void require_valid(const State &s) const;

  GridConfig cfg_;
};

// Rebuilds an environment from its describe() output; missing fields take
// their defaults.
std::unique_ptr<Environment> make_environment(const nlohmann::json &description);

// "x,y" in decimal with no whitespace.
std::string grid_key(const State &s);
// Inverse of grid_key; throws DomainError on anything else.
State parse_grid_key(std::string_view key);

} // namespace gflowstate
