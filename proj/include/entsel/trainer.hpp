#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "entsel/actor_critic.hpp"
#include "entsel/influence.hpp"
#include "entsel/intervener.hpp"
#include "entsel/replay.hpp"
#include "entsel/sim.hpp"
#include "entsel/telemetry.hpp"

namespace entsel {

enum class Mode { kE2hil, kUniform };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

struct TrainConfig {
  std::string task = "touch2";
  Mode mode = Mode::kE2hil;
  std::int64_t total_steps = 60000;
  int batch_size = 256;
  int gradient_steps = 1;
  double gamma = 0.99;
  double polyak = 0.995;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double lr_alpha = 3e-4;
  int k = 8;
  double low_pct = 5.0;
  double high_pct = 90.0;
  double mask_eps = kMaskEps;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 5000;
  int eval_episodes = 20;
  int demo_episodes = 10;

  double init_alpha = 0.01;
  /// NaN means -action_dim.
  double target_entropy = std::numeric_limits<double>::quiet_NaN();
  NetShape net;
  std::size_t replay_capacity = 200000;
  std::size_t demo_capacity = 20000;
  int probe_states = 64;
  std::int64_t probe_refresh = 1000;
  bool scripted_intervention = true;
  IntervenerConfig intervener;
  /// Env steps between outbound snapshot messages; 0 disables snapshots.
  int snapshot_every = 1;

  void validate() const;
  double resolved_target_entropy(int action_dim) const;

  /// Sets one dotted key from its text form; throws std::invalid_argument
  /// naming the key on unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  nlohmann::json to_json() const;

  /// Flat UTF-8 file of `key = value` lines; '#' starts a comment.
  static TrainConfig from_file(const std::filesystem::path& path);
  void apply_file(const std::filesystem::path& path);
};

struct ConfigKey {
  std::string key;
  std::string help;
};
/// Every config key in declaration order.
const std::vector<ConfigKey>& config_keys();

struct MetricsRow {
  std::int64_t step = 0;  // env step at which the update ran
  std::int64_t update = 0;
  double entropy_estimate = 0.0;
  double dH_pred = 0.0;
  double dH_meas = 0.0;
  double success_rate = 0.0;  // latest periodic eval
  double intervention_rate = 0.0;
  double retained_fraction = 1.0;
  std::array<std::optional<double>, kNumSources> mean_abs_c_by_source;
  double alpha = 0.0;
  double critic_loss = 0.0;
  double actor_loss = 0.0;

  nlohmann::json to_json() const;
};

struct TrainSummary {
  double success_rate = 0.0;
  double intervention_rate = 0.0;
  std::optional<std::int64_t> steps_to_70pct;
  std::array<std::optional<double>, kNumSources> mean_abs_c_by_source;
  std::int64_t updates = 0;
  std::int64_t env_steps = 0;
  bool aborted = false;
  std::string error;

  nlohmann::json to_json() const;
};

/// Everything learned, in one place so it can be checkpointed.
struct Agent {
  GaussianPolicy policy;
  TwinCritic critic;
  Temperature temperature;

  Agent() = default;
  Agent(const TaskSpec& task, const TrainConfig& cfg);

  Checkpoint to_checkpoint(const TrainConfig& cfg, std::int64_t step) const;
  /// Rebuilds an agent from a checkpoint; the stored config supplies shapes.
  static Agent from_checkpoint(const Checkpoint& ck, TrainConfig* cfg_out = nullptr);
};

struct TrainHooks {
  std::vector<MessageSink*> sinks;
  CommandQueue* commands = nullptr;
  /// Writes metrics.jsonl, summary.json and checkpoints here when set.
  std::optional<std::filesystem::path> out_dir;
  /// Called after every metrics row; used by tests to inspect internals.
  std::function<void(const MetricsRow&)> on_metrics;
};

struct TrainResult {
  Agent agent;
  TrainSummary summary;
  std::vector<MetricsRow> metrics;
  ReplayBuffer replay{1};
  ReplayBuffer demo{1};
  std::int64_t intervention_steps = 0;
};

/// Runs the full interaction + update loop. Non-finite losses stop the run
/// after writing a checkpoint; the summary records the diagnostic.
TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Deterministic rollouts with action = tanh(mean); no interventions.
double evaluate(const GaussianPolicy& policy, const TaskSpec& task, int episodes, Rng& rng);
/// Same protocol with an arbitrary controller from env state to action.
double evaluate_controller(const std::function<std::vector<double>(const EnvState&)>& controller,
                           const TaskSpec& task, int episodes, Rng& rng);

/// Entropy estimate after minus before on the same probe states and draws.
double measure_entropy_change(const GaussianPolicy& before, const GaussianPolicy& after,
                              const Matrix& probe_states, int k, const Matrix& probe_noise);

/// Scripted expert rollouts tagged as demonstrations.
std::vector<Transition> collect_demos(const TaskSpec& task, const IntervenerConfig& icfg,
                                      int episodes, Rng& rng, std::int64_t first_id);

struct Histogram2D {
  int bins = 16;
  Box range;
  std::vector<std::int64_t> counts;  // row-major, y outer

  explicit Histogram2D(int bins = 16, Box range = {});
  void add(Point p);
  std::int64_t total() const;
  nlohmann::json to_json() const;
};

struct AnalysisReport {
  /// Subset label -> {"Top 2%": mean |c|, ...}; subsets are "all" plus each
  /// source present in the export.
  nlohmann::json table;
  std::array<std::int64_t, kNumSources> counts{};
  SelectionBounds bounds;
  Histogram2D retained;
  Histogram2D clipped;
  std::vector<InfluenceRecord> records;

  nlohmann::json to_json() const;
};

/// Recomputes c for every transition under the given agent.
AnalysisReport analyze(const std::vector<Transition>& transitions, const Agent& agent,
                       const TrainConfig& cfg);

/// Table rows: top/low percentile subsets by |c|, mirroring the covariance
/// magnitude table: mean of the largest (or smallest) p% of values.
double tail_mean(std::vector<double> values, double pct, bool top);

}  // namespace entsel
