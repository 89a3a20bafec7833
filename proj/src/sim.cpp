#include "entsel/sim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace entsel {

double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

Point Box::clamp(Point p) const {
  return {std::clamp(p.x, lo.x, hi.x), std::clamp(p.y, lo.y, hi.y)};
}

int TaskSpec::state_dim() const {
  switch (kind) {
    case TaskKind::kTouch2: return 4;
    case TaskKind::kPick: return 5;
    case TaskKind::kPickPlace: return 7;
    case TaskKind::kStack: return 9;
  }
  return 0;
}

int TaskSpec::action_dim() const { return kind == TaskKind::kTouch2 ? 2 : 3; }

void TaskSpec::validate() const {
  if (goals.empty()) throw std::invalid_argument(name + ": task needs at least one goal");
  for (const auto& g : goals) {
    if (!workspace.contains(g)) throw std::invalid_argument(name + ": goal outside workspace");
  }
  for (const auto& o : objects) {
    if (!workspace.contains(o)) throw std::invalid_argument(name + ": object outside workspace");
  }
  if (kind == TaskKind::kPickPlace && objects.empty()) {
    throw std::invalid_argument(name + ": pick_place needs an object spawn");
  }
  if (kind == TaskKind::kStack && objects.size() < 2) {
    throw std::invalid_argument(name + ": stack needs two block spawns");
  }
  if (!(success_radius > 0.0)) throw std::invalid_argument(name + ": success_radius must be > 0");
  if (horizon < 1) throw std::invalid_argument(name + ": horizon must be >= 1");
  if (!(action_scale > 0.0)) throw std::invalid_argument(name + ": action_scale must be > 0");
  if (reset_jitter < 0.0) throw std::invalid_argument(name + ": reset_jitter must be >= 0");
}

TaskSpec make_task(const std::string& name) {
  TaskSpec t;
  t.name = name;
  if (name == "touch2") {
    t.kind = TaskKind::kTouch2;
    t.goals = {{0.25, 0.75}, {0.75, 0.75}};
    t.horizon = 200;
  } else if (name == "pick") {
    t.kind = TaskKind::kPick;
    t.goals = {{0.3, 0.75}, {0.7, 0.75}};
    t.horizon = 200;
  } else if (name == "pick_place") {
    t.kind = TaskKind::kPickPlace;
    t.objects = {{0.3, 0.75}};
    t.goals = {{0.25, 0.25}, {0.75, 0.25}};
    t.horizon = 300;
  } else if (name == "stack") {
    t.kind = TaskKind::kStack;
    t.objects = {{0.2, 0.75}, {0.8, 0.75}};
    t.goals = {{0.5, 0.2}};
    t.horizon = 400;
  } else {
    throw std::invalid_argument("unknown task: " + name);
  }
  t.validate();
  return t;
}

std::vector<std::string> task_names() { return {"touch2", "pick", "pick_place", "stack"}; }

nlohmann::json to_json(const EnvState& s) {
  return {{"tip", {s.tip.x, s.tip.y}},
          {"held", s.held},
          {"object", {s.object.x, s.object.y}},
          {"object2", {s.object2.x, s.object2.y}},
          {"phase", s.phase},
          {"active_goal", s.active_goal},
          {"t", s.t}};
}

EnvState reset(const TaskSpec& task, Rng& rng) {
  EnvState s;
  s.active_goal = static_cast<int>(rng.index(task.goals.size()));
  const Point c = task.workspace.center();
  const double j = task.reset_jitter;
  s.tip = j > 0.0 ? task.workspace.clamp({c.x + rng.uniform(-j, j), c.y + rng.uniform(-j, j)}) : c;
  switch (task.kind) {
    case TaskKind::kTouch2: break;
    case TaskKind::kPick: s.object = task.goals[static_cast<std::size_t>(s.active_goal)]; break;
    case TaskKind::kPickPlace: s.object = task.objects.front(); break;
    case TaskKind::kStack:
      s.object = task.objects[0];
      s.object2 = task.objects[1];
      break;
  }
  return s;
}

namespace {

Point& active_block(const TaskSpec& task, EnvState& s) {
  return (task.kind == TaskKind::kStack && s.phase >= 1) ? s.object2 : s.object;
}

Point active_block(const TaskSpec& task, const EnvState& s) {
  return (task.kind == TaskKind::kStack && s.phase >= 1) ? s.object2 : s.object;
}

}  // namespace

StepResult step(const TaskSpec& task, const EnvState& state, std::span<const double> action) {
  if (static_cast<int>(action.size()) != task.action_dim()) {
    throw std::invalid_argument("step: expected action of length " + std::to_string(task.action_dim()));
  }
  for (double a : action) {
    if (!std::isfinite(a)) throw std::invalid_argument("step: non-finite action");
  }
  StepResult r;
  r.next = state;
  EnvState& n = r.next;

  const double dx = std::clamp(action[0], -1.0, 1.0);
  const double dy = std::clamp(action[1], -1.0, 1.0);
  const Point proposed{state.tip.x + task.action_scale * dx, state.tip.y + task.action_scale * dy};
  n.tip = task.workspace.clamp(proposed);
  r.clamped = !(n.tip == proposed);
  r.overshoot = distance(n.tip, proposed);

  if (task.kind != TaskKind::kTouch2) {
    const bool closed = action[2] > 0.5;
    Point& block = active_block(task, n);
    const bool was_held = n.held;
    n.held = closed && (was_held || distance(n.tip, block) <= task.grasp_radius);
    if (n.held) block = n.tip;
    if (task.kind == TaskKind::kStack && was_held && !closed &&
        distance(block, task.goals.front()) < task.success_radius) {
      ++n.phase;
    }
  }

  n.t = state.t + 1;
  r.success = success(task, n);
  r.reward = r.success ? 1.0 : 0.0;
  r.done = r.success || n.t >= task.horizon;
  return r;
}

bool success(const TaskSpec& task, const EnvState& s) {
  switch (task.kind) {
    case TaskKind::kTouch2:
      return distance(s.tip, task.goals[static_cast<std::size_t>(s.active_goal)]) < task.success_radius;
    case TaskKind::kPick: return s.held;
    case TaskKind::kPickPlace:
      return distance(s.object, task.goals[static_cast<std::size_t>(s.active_goal)]) <
             task.success_radius;
    case TaskKind::kStack: return s.phase >= 2;
  }
  return false;
}

std::vector<double> observe(const TaskSpec& task, const EnvState& s) {
  switch (task.kind) {
    case TaskKind::kTouch2: {
      const Point g = task.goals[static_cast<std::size_t>(s.active_goal)];
      return {s.tip.x, s.tip.y, g.x, g.y};
    }
    case TaskKind::kPick: return {s.tip.x, s.tip.y, s.object.x, s.object.y, s.held ? 1.0 : 0.0};
    case TaskKind::kPickPlace: {
      const Point g = task.goals[static_cast<std::size_t>(s.active_goal)];
      return {s.tip.x, s.tip.y, s.object.x, s.object.y, g.x, g.y, s.held ? 1.0 : 0.0};
    }
    case TaskKind::kStack: {
      const Point b = active_block(task, s);
      const Point base = task.goals.front();
      return {s.tip.x, s.tip.y, b.x,  b.y, base.x, base.y, s.held ? 1.0 : 0.0,
              s.phase == 0 ? 1.0 : 0.0, s.phase >= 1 ? 1.0 : 0.0};
    }
  }
  return {};
}

Subgoal current_subgoal(const TaskSpec& task, const EnvState& s) {
  const auto approach = [&](Point block) {
    // Close the gripper once the next step can land inside grasp range.
    const bool reachable = distance(s.tip, block) <= task.grasp_radius + task.action_scale;
    return Subgoal{block, reachable ? 1.0 : -1.0};
  };
  switch (task.kind) {
    case TaskKind::kTouch2: return {task.goals[static_cast<std::size_t>(s.active_goal)], -1.0};
    case TaskKind::kPick: return approach(s.object);
    case TaskKind::kPickPlace:
      if (!s.held) return approach(s.object);
      return {task.goals[static_cast<std::size_t>(s.active_goal)], 1.0};
    case TaskKind::kStack: {
      const Point block = active_block(task, s);
      const Point base = task.goals.front();
      if (!s.held) return approach(block);
      if (distance(block, base) < task.success_radius) return {base, -1.0};
      return {base, 1.0};
    }
  }
  return {};
}

double progress_distance(const TaskSpec& task, const EnvState& s) {
  return distance(s.tip, current_subgoal(task, s).target);
}

Point tip_from_observation(std::span<const double> obs) {
  if (obs.size() < 2) throw std::invalid_argument("observation too short");
  return {obs[0], obs[1]};
}

}  // namespace entsel
