#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "entsel/rng.hpp"

namespace entsel {

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

double distance(Point a, Point b);

enum class TaskKind { kTouch2, kPick, kPickPlace, kStack };

struct Box {
  Point lo{0.0, 0.0};
  Point hi{1.0, 1.0};

  Point center() const { return {(lo.x + hi.x) / 2, (lo.y + hi.y) / 2}; }
  bool contains(Point p) const { return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y; }
  Point clamp(Point p) const;
};

/// A 2-D kinematic manipulation task.
///
/// State vector layouts (fixed per task):
///   touch2:     [tip.x, tip.y, goal.x, goal.y]
///   pick:       [tip.x, tip.y, obj.x, obj.y, held]
///   pick_place: [tip.x, tip.y, obj.x, obj.y, target.x, target.y, held]
///   stack:      [tip.x, tip.y, obj.x, obj.y, base.x, base.y, held, phase0, phase1]
/// Actions are [dx, dy] for touch2 and [dx, dy, grip] for the others; the
/// gripper closes when grip > 0.5.
struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::kTouch2;
  Box workspace;
  /// touch2: touch targets; pick: object spawn points; pick_place: place
  /// targets; stack: the base location (single entry).
  std::vector<Point> goals;
  /// pick_place: object spawn points; stack: spawn of block 1 then block 2.
  std::vector<Point> objects;
  double success_radius = 0.03;
  double grasp_radius = 0.05;
  int horizon = 200;
  double action_scale = 0.05;
  double reset_jitter = 0.05;

  int state_dim() const;
  int action_dim() const;
  void validate() const;
};

/// Registry lookup by name: touch2, pick, pick_place, stack.
TaskSpec make_task(const std::string& name);
std::vector<std::string> task_names();

struct EnvState {
  Point tip;
  bool held = false;
  Point object;
  Point object2;  // stack only: the second block
  int phase = 0;  // stack: number of blocks placed
  int active_goal = 0;
  int t = 0;

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

nlohmann::json to_json(const EnvState& s);

struct StepResult {
  EnvState next;
  double reward = 0.0;
  bool done = false;
  bool clamped = false;    // the tip hit the workspace boundary this step
  double overshoot = 0.0;  // how far outside the workspace the tip was pushed
  bool success = false;
};

EnvState reset(const TaskSpec& task, Rng& rng);
StepResult step(const TaskSpec& task, const EnvState& state, std::span<const double> action);
bool success(const TaskSpec& task, const EnvState& state);
std::vector<double> observe(const TaskSpec& task, const EnvState& state);

/// Where a competent controller should be heading right now and which
/// gripper command it should hold.
struct Subgoal {
  Point target;
  double grip = -1.0;
};
Subgoal current_subgoal(const TaskSpec& task, const EnvState& state);

/// The point whose distance to the tip measures progress on the current phase.
double progress_distance(const TaskSpec& task, const EnvState& state);

/// Task-space position plotted in influence histograms: the tip, read from an
/// observation vector (always the first two entries).
Point tip_from_observation(std::span<const double> obs);

}  // namespace entsel
