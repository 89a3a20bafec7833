#include "entsel/intervener.hpp"

#include <algorithm>
#include <stdexcept>

namespace entsel {

void IntervenerConfig::validate() const {
  if (stall_window < 1) throw std::invalid_argument("intervener.stall_window must be >= 1");
  if (!(expert_gain > 0.0)) throw std::invalid_argument("intervener.expert_gain must be > 0");
  if (max_takeover_len < 1) throw std::invalid_argument("intervener.max_takeover_len must be >= 1");
  if (oob_margin < 0.0 || expert_noise < 0.0) {
    throw std::invalid_argument("intervener margins and noise must be >= 0");
  }
}

bool should_intervene(const IntervenerConfig& cfg, std::span<const double> recent, bool clamp_event) {
  if (clamp_event) return true;
  if (static_cast<int>(recent.size()) != cfg.stall_window) return false;
  return (recent.front() - recent.back()) < cfg.stall_epsilon;
}

std::vector<double> expert_action(const EnvState& state, const TaskSpec& task,
                                  const IntervenerConfig& cfg) {
  const Subgoal sg = current_subgoal(task, state);
  const double k = cfg.expert_gain / task.action_scale;
  std::vector<double> a{std::clamp(k * (sg.target.x - state.tip.x), -1.0, 1.0),
                        std::clamp(k * (sg.target.y - state.tip.y), -1.0, 1.0)};
  if (task.action_dim() == 3) a.push_back(sg.grip);
  return a;
}

std::pair<std::vector<double>, Source> resolve_action(
    const TakeoverState& takeover, const std::vector<double>& policy_action,
    const std::vector<double>& expert, const std::optional<std::vector<double>>& human_command) {
  if (human_command) {
    std::vector<double> a = *human_command;
    for (double& v : a) v = std::clamp(v, -1.0, 1.0);
    return {std::move(a), Source::kIntervention};
  }
  if (takeover.active) return {expert, Source::kIntervention};
  return {policy_action, Source::kExploration};
}

ScriptedIntervener::ScriptedIntervener(IntervenerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void ScriptedIntervener::maybe_trigger() {
  if (takeover_.active) return;
  const std::vector<double> recent(window_.begin(), window_.end());
  if (should_intervene(cfg_, recent, clamp_event_)) {
    takeover_ = {true, cfg_.max_takeover_len, TakeoverOrigin::kScripted};
  }
}

void ScriptedIntervener::after_step(double progress_distance, double overshoot) {
  clamp_event_ = overshoot > cfg_.oob_margin;
  if (takeover_.active) {
    if (--takeover_.ticks_remaining <= 0) {
      takeover_ = {};
      // Give the policy a fresh window after handing control back.
      window_.clear();
      clamp_event_ = false;
      return;
    }
  }
  window_.push_back(progress_distance);
  while (static_cast<int>(window_.size()) > cfg_.stall_window) window_.pop_front();
}

void ScriptedIntervener::reset_episode() {
  window_.clear();
  clamp_event_ = false;
  takeover_ = {};
}

}  // namespace entsel
