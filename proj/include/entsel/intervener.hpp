#pragma once

#include <deque>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "entsel/replay.hpp"
#include "entsel/sim.hpp"

namespace entsel {

struct IntervenerConfig {
  int stall_window = 40;
  double stall_epsilon = 0.01;
  double oob_margin = 0.0;
  double expert_gain = 1.0;
  int max_takeover_len = 30;
  double expert_noise = 0.0;  // std of Gaussian noise on expert actions; 0 = deterministic

  void validate() const;
};

enum class TakeoverOrigin { kNone, kScripted, kHuman };

struct TakeoverState {
  bool active = false;
  int ticks_remaining = 0;
  TakeoverOrigin origin = TakeoverOrigin::kNone;
};

/// True on a clamp event, or when a full window of M distances shows less
/// than stall_epsilon of progress (first - last).
bool should_intervene(const IntervenerConfig& cfg, std::span<const double> recent_goal_distances,
                      bool clamp_event);

/// Proportional controller toward the current subgoal, clamped to [-1, 1];
/// gripper tasks append the subgoal's grip command.
std::vector<double> expert_action(const EnvState& state, const TaskSpec& task,
                                  const IntervenerConfig& cfg);

/// Human command beats an active scripted takeover, which beats the policy.
std::pair<std::vector<double>, Source> resolve_action(const TakeoverState& takeover,
                                                      const std::vector<double>& policy_action,
                                                      const std::vector<double>& expert_action,
                                                      const std::optional<std::vector<double>>& human_command);

/// Stateful wrapper that keeps the distance window and the scripted takeover
/// across steps of one episode.
class ScriptedIntervener {
 public:
  explicit ScriptedIntervener(IntervenerConfig cfg);

  const IntervenerConfig& config() const noexcept { return cfg_; }
  const TakeoverState& takeover() const noexcept { return takeover_; }

  /// Starts a takeover if the trigger fires. Call once before choosing the action.
  void maybe_trigger();
  /// Records the outcome of the step that just ran and counts down an active takeover.
  void after_step(double progress_distance, double overshoot);
  void reset_episode();

 private:
  IntervenerConfig cfg_;
  std::deque<double> window_;
  bool clamp_event_ = false;
  TakeoverState takeover_;
};

}  // namespace entsel
