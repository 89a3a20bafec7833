#include "entsel/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

namespace entsel {

namespace {

constexpr std::int64_t kDemoIdBase = 1'000'000'000'000;

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto t = trim(text);
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || ptr != t.data() + t.size() || t.empty()) {
    throw std::invalid_argument("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const auto t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw std::invalid_argument("config key '" + key + "': expected a boolean, got '" + text + "'");
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "auto";
  return fmt::format("{}", v);
}

struct Entry {
  ConfigKey info;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define ENTSEL_INT(KEY, FIELD, HELP)                                                            \
  Entry {                                                                                      \
    {KEY, HELP}, [](TrainConfig& c, const std::string& v) {                                    \
      c.FIELD = parse_number<decltype(c.FIELD)>(KEY, v);                                       \
    },                                                                                         \
        [](const TrainConfig& c) { return std::to_string(c.FIELD); }                           \
  }
#define ENTSEL_REAL(KEY, FIELD, HELP)                                                           \
  Entry {                                                                                      \
    {KEY, HELP}, [](TrainConfig& c, const std::string& v) { c.FIELD = parse_number<double>(KEY, v); }, \
        [](const TrainConfig& c) { return fmt_double(c.FIELD); }                               \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      Entry{{"task", "task name: touch2, pick, pick_place, stack"},
            [](TrainConfig& c, const std::string& v) { c.task = trim(v); },
            [](const TrainConfig& c) { return c.task; }},
      Entry{{"mode", "e2hil (entropy-bounded selection) or uniform (all samples)"},
            [](TrainConfig& c, const std::string& v) { c.mode = mode_from_string(trim(v)); },
            [](const TrainConfig& c) { return to_string(c.mode); }},
      ENTSEL_INT("total_steps", total_steps, "environment steps T"),
      ENTSEL_INT("batch_size", batch_size, "batch size N (even; half replay, half demo)"),
      ENTSEL_INT("gradient_steps", gradient_steps, "critic updates G per env step"),
      ENTSEL_REAL("gamma", gamma, "discount"),
      ENTSEL_REAL("polyak", polyak, "target smoothing rho"),
      ENTSEL_REAL("actor_lr", actor_lr, "actor learning rate eta"),
      ENTSEL_REAL("critic_lr", critic_lr, "critic learning rate"),
      ENTSEL_REAL("lr_alpha", lr_alpha, "temperature step size"),
      ENTSEL_INT("k", k, "policy draws per state for influence and entropy"),
      ENTSEL_REAL("low_pct", low_pct, "lower selection percentile"),
      ENTSEL_REAL("high_pct", high_pct, "upper selection percentile"),
      ENTSEL_REAL("mask_eps", mask_eps, "denominator guard of the masked actor loss"),
      ENTSEL_INT("seed", seed, "master seed"),
      ENTSEL_INT("eval_every", eval_every, "env steps between evals and checkpoints (0 = end only)"),
      ENTSEL_INT("eval_episodes", eval_episodes, "episodes per eval"),
      ENTSEL_INT("demo_episodes", demo_episodes, "scripted demonstrations collected up front"),
      ENTSEL_REAL("init_alpha", init_alpha, "initial temperature"),
      Entry{{"target_entropy", "temperature target (auto = -action_dim)"},
            [](TrainConfig& c, const std::string& v) {
              c.target_entropy = trim(v) == "auto" ? std::numeric_limits<double>::quiet_NaN()
                                                   : parse_number<double>("target_entropy", v);
            },
            [](const TrainConfig& c) { return fmt_double(c.target_entropy); }},
      Entry{{"net.hidden", "hidden widths, comma separated"},
            [](TrainConfig& c, const std::string& v) {
              std::vector<int> dims;
              std::stringstream ss(v);
              std::string part;
              while (std::getline(ss, part, ',')) dims.push_back(parse_number<int>("net.hidden", part));
              if (dims.empty()) throw std::invalid_argument("config key 'net.hidden': empty");
              c.net.hidden = dims;
            },
            [](const TrainConfig& c) {
              std::string out;
              for (std::size_t i = 0; i < c.net.hidden.size(); ++i) {
                if (i) out += ",";
                out += std::to_string(c.net.hidden[i]);
              }
              return out;
            }},
      ENTSEL_INT("replay_capacity", replay_capacity, "replay buffer capacity"),
      ENTSEL_INT("demo_capacity", demo_capacity, "demo buffer capacity"),
      ENTSEL_INT("probe_states", probe_states, "held-out states for measured entropy change"),
      ENTSEL_INT("probe_refresh", probe_refresh, "updates between probe-set resamples"),
      Entry{{"scripted_intervention", "enable the scripted intervener"},
            [](TrainConfig& c, const std::string& v) {
              c.scripted_intervention = parse_bool("scripted_intervention", v);
            },
            [](const TrainConfig& c) { return std::string(c.scripted_intervention ? "true" : "false"); }},
      ENTSEL_INT("intervener.stall_window", intervener.stall_window, "stall window M (steps)"),
      ENTSEL_REAL("intervener.stall_epsilon", intervener.stall_epsilon, "minimum progress over the window"),
      ENTSEL_REAL("intervener.oob_margin", intervener.oob_margin, "overshoot that counts as a clamp event"),
      ENTSEL_REAL("intervener.expert_gain", intervener.expert_gain, "expert proportional gain"),
      ENTSEL_INT("intervener.max_takeover_len", intervener.max_takeover_len, "takeover length (steps)"),
      ENTSEL_REAL("intervener.expert_noise", intervener.expert_noise, "std of noise on expert actions"),
      ENTSEL_INT("snapshot_every", snapshot_every, "env steps between snapshot messages (0 = off)"),
  };
  return table;
}

#undef ENTSEL_INT
#undef ENTSEL_REAL

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries()) {
    if (e.info.key == key) return e;
  }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

}  // namespace

std::string to_string(Mode m) { return m == Mode::kE2hil ? "e2hil" : "uniform"; }

Mode mode_from_string(const std::string& s) {
  if (s == "e2hil") return Mode::kE2hil;
  if (s == "uniform") return Mode::kUniform;
  throw std::invalid_argument("mode must be e2hil or uniform, got '" + s + "'");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& e : entries()) out.push_back(e.info);
    return out;
  }();
  return keys;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  find_entry(key).set(*this, value);
}

std::string TrainConfig::get(const std::string& key) const { return find_entry(key).get(*this); }

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& e : entries()) j[e.info.key] = e.get(*this);
  return j;
}

void TrainConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(fmt::format("{}:{}: expected key = value", path.string(), lineno));
    }
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path) {
  TrainConfig c;
  c.apply_file(path);
  return c;
}

void TrainConfig::validate() const {
  make_task(task).validate();
  if (batch_size < 2 || batch_size % 2 != 0) throw std::invalid_argument("batch_size must be even and >= 2");
  if (total_steps < 0) throw std::invalid_argument("total_steps must be >= 0");
  if (gradient_steps < 1) throw std::invalid_argument("gradient_steps must be >= 1");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must be in [0, 1)");
  if (!(polyak >= 0.0 && polyak <= 1.0)) throw std::invalid_argument("polyak must be in [0, 1]");
  if (!(actor_lr > 0 && critic_lr > 0 && lr_alpha >= 0)) {
    throw std::invalid_argument("learning rates must be positive");
  }
  if (k < 2) throw std::invalid_argument("k must be >= 2");
  if (!(low_pct >= 0 && low_pct <= high_pct && high_pct <= 100)) {
    throw std::invalid_argument("need 0 <= low_pct <= high_pct <= 100");
  }
  if (!(mask_eps > 0)) throw std::invalid_argument("mask_eps must be > 0");
  if (eval_every < 0 || eval_episodes < 1 || demo_episodes < 0) {
    throw std::invalid_argument("eval_every >= 0, eval_episodes >= 1, demo_episodes >= 0 required");
  }
  if (!(init_alpha > 0)) throw std::invalid_argument("init_alpha must be > 0");
  if (net.hidden.empty() || std::any_of(net.hidden.begin(), net.hidden.end(), [](int w) { return w < 1; })) {
    throw std::invalid_argument("net.hidden widths must be >= 1");
  }
  if (replay_capacity < 1 || demo_capacity < 1) throw std::invalid_argument("capacities must be >= 1");
  if (probe_states < 1 || probe_refresh < 1) throw std::invalid_argument("probe settings must be >= 1");
  if (snapshot_every < 0) throw std::invalid_argument("snapshot_every must be >= 0");
  intervener.validate();
}

double TrainConfig::resolved_target_entropy(int action_dim) const {
  return std::isnan(target_entropy) ? -static_cast<double>(action_dim) : target_entropy;
}

// --- metrics -------------------------------------------------------------------

namespace {

nlohmann::json by_source_json(const std::array<std::optional<double>, kNumSources>& v) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t s = 0; s < kNumSources; ++s) {
    if (v[s]) j[to_string(static_cast<Source>(s))] = *v[s];
  }
  return j;
}

}  // namespace

nlohmann::json MetricsRow::to_json() const {
  return {{"step", step},
          {"update", update},
          {"entropy_estimate", entropy_estimate},
          {"dH_pred", dH_pred},
          {"dH_meas", dH_meas},
          {"success_rate", success_rate},
          {"intervention_rate", intervention_rate},
          {"retained_fraction", retained_fraction},
          {"mean_abs_c_by_source", by_source_json(mean_abs_c_by_source)},
          {"alpha", alpha},
          {"critic_loss", critic_loss},
          {"actor_loss", actor_loss}};
}

nlohmann::json TrainSummary::to_json() const {
  nlohmann::json j = {{"success_rate", success_rate},
                      {"intervention_rate", intervention_rate},
                      {"steps_to_70pct", nullptr},
                      {"mean_abs_c_by_source", by_source_json(mean_abs_c_by_source)},
                      {"updates", updates},
                      {"env_steps", env_steps},
                      {"aborted", aborted}};
  if (steps_to_70pct) j["steps_to_70pct"] = *steps_to_70pct;
  if (!error.empty()) j["error"] = error;
  return j;
}

// --- agent -----------------------------------------------------------------------

Agent::Agent(const TaskSpec& task, const TrainConfig& cfg) {
  Rng init(cfg.seed, "init");
  policy = GaussianPolicy(task.state_dim(), task.action_dim(), cfg.net, init);
  critic = TwinCritic(task.state_dim(), task.action_dim(), cfg.net, init);
  temperature.log_alpha = std::log(cfg.init_alpha);
  temperature.target_entropy = cfg.resolved_target_entropy(task.action_dim());
  temperature.lr_alpha = cfg.lr_alpha;
}

Checkpoint Agent::to_checkpoint(const TrainConfig& cfg, std::int64_t step) const {
  Checkpoint ck;
  ck.meta = {{"config", cfg.to_json()},
             {"step", step},
             {"log_alpha", temperature.log_alpha},
             {"state_dim", policy.state_dim()},
             {"action_dim", policy.action_dim()}};
  for (const auto* t : policy.trunk().params()) ck.add(*t);
  for (int i = 0; i < 2; ++i) {
    for (const auto* t : critic.online()[i].params()) ck.add(*t);
    for (const auto* t : critic.target()[i].params()) ck.add(*t);
  }
  return ck;
}

Agent Agent::from_checkpoint(const Checkpoint& ck, TrainConfig* cfg_out) {
  TrainConfig cfg;
  const auto c = ck.meta.find("config");
  if (c == ck.meta.end() || !c->is_object()) throw std::invalid_argument("checkpoint has no config");
  for (auto it = c->begin(); it != c->end(); ++it) cfg.set(it.key(), it.value().get<std::string>());
  const TaskSpec task = make_task(cfg.task);
  Agent a(task, cfg);
  for (auto* t : a.policy.params()) ck.load_into(*t);
  for (int i = 0; i < 2; ++i) {
    for (auto* t : a.critic.online()[i].params()) ck.load_into(*t);
    for (auto* t : a.critic.target()[i].params()) ck.load_into(*t);
  }
  a.temperature.log_alpha = ck.meta.at("log_alpha").get<double>();
  if (cfg_out) *cfg_out = cfg;
  return a;
}

// --- evaluation ------------------------------------------------------------------

double evaluate_controller(const std::function<std::vector<double>(const EnvState&)>& controller,
                           const TaskSpec& task, int episodes, Rng& rng) {
  if (episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  int successes = 0;
  for (int e = 0; e < episodes; ++e) {
    EnvState s = reset(task, rng);
    for (;;) {
      const auto a = controller(s);
      const StepResult r = step(task, s, a);
      s = r.next;
      if (r.done) {
        successes += r.success ? 1 : 0;
        break;
      }
    }
  }
  return static_cast<double>(successes) / episodes;
}

double evaluate(const GaussianPolicy& policy, const TaskSpec& task, int episodes, Rng& rng) {
  return evaluate_controller(
      [&](const EnvState& s) {
        const auto obs = observe(task, s);
        const Vector a = policy.deterministic_action(obs);
        return std::vector<double>(a.data(), a.data() + a.size());
      },
      task, episodes, rng);
}

double measure_entropy_change(const GaussianPolicy& before, const GaussianPolicy& after,
                              const Matrix& probe_states, int k, const Matrix& probe_noise) {
  return policy_entropy_estimate(after, probe_states, k, probe_noise) -
         policy_entropy_estimate(before, probe_states, k, probe_noise);
}

namespace {

std::vector<double> noisy_expert(const EnvState& s, const TaskSpec& task, const IntervenerConfig& icfg,
                                 Rng& rng) {
  auto a = expert_action(s, task, icfg);
  if (icfg.expert_noise > 0) {
    for (double& v : a) v = std::clamp(v + icfg.expert_noise * rng.normal(), -1.0, 1.0);
  }
  return a;
}

}  // namespace

std::vector<Transition> collect_demos(const TaskSpec& task, const IntervenerConfig& icfg, int episodes,
                                      Rng& rng, std::int64_t first_id) {
  std::vector<Transition> out;
  std::int64_t id = first_id;
  for (int e = 0; e < episodes; ++e) {
    EnvState s = reset(task, rng);
    for (;;) {
      const auto a = noisy_expert(s, task, icfg, rng);
      const StepResult r = step(task, s, a);
      out.push_back({observe(task, s), a, r.reward, observe(task, r.next), r.success, Source::kDemo, id++, -1});
      s = r.next;
      if (r.done) break;
    }
  }
  return out;
}

// --- histograms ----------------------------------------------------------------

Histogram2D::Histogram2D(int bins_, Box range_)
    : bins(bins_), range(range_), counts(static_cast<std::size_t>(bins_ * bins_), 0) {}

void Histogram2D::add(Point p) {
  const auto cell = [&](double v, double lo, double hi) {
    const int i = static_cast<int>(std::floor((v - lo) / (hi - lo) * bins));
    return std::clamp(i, 0, bins - 1);
  };
  const int ix = cell(p.x, range.lo.x, range.hi.x);
  const int iy = cell(p.y, range.lo.y, range.hi.y);
  ++counts[static_cast<std::size_t>(iy * bins + ix)];
}

std::int64_t Histogram2D::total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

nlohmann::json Histogram2D::to_json() const {
  return {{"bins", bins},
          {"lo", {range.lo.x, range.lo.y}},
          {"hi", {range.hi.x, range.hi.y}},
          {"counts", counts}};
}

double tail_mean(std::vector<double> values, double pct, bool top) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  const auto m = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(pct * static_cast<double>(n) / 100.0 - 1e-9)), 1, n);
  const auto first = top ? values.end() - static_cast<std::ptrdiff_t>(m) : values.begin();
  return std::accumulate(first, first + static_cast<std::ptrdiff_t>(m), 0.0) / static_cast<double>(m);
}

// --- training --------------------------------------------------------------------

namespace {

void publish(const TrainHooks& hooks, const WireMessage& m) {
  for (auto* s : hooks.sinks) s->publish(m);
}

void write_checkpoint(const TrainHooks& hooks, const Agent& agent, const TrainConfig& cfg,
                      std::int64_t step, const std::string& stem) {
  if (!hooks.out_dir) return;
  agent.to_checkpoint(cfg, step).save(*hooks.out_dir / (stem + ".json"));
}

/// Per-source accumulators of |c|.
struct SourceSums {
  std::array<double, kNumSources> sum{};
  std::array<std::int64_t, kNumSources> n{};

  void add(Source s, double v) {
    sum[static_cast<std::size_t>(s)] += v;
    ++n[static_cast<std::size_t>(s)];
  }
  std::array<std::optional<double>, kNumSources> means() const {
    std::array<std::optional<double>, kNumSources> out;
    for (std::size_t i = 0; i < kNumSources; ++i) {
      if (n[i] > 0) out[i] = sum[i] / static_cast<double>(n[i]);
    }
    return out;
  }
};

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const TrainHooks& hooks)
      : cfg_(cfg),
        hooks_(hooks),
        task_(make_task(cfg.task)),
        env_rng_(cfg.seed, "env"),
        policy_rng_(cfg.seed, "policy"),
        buffer_rng_(cfg.seed, "buffer"),
        update_rng_(cfg.seed, "update"),
        probe_rng_(cfg.seed, "probe"),
        expert_rng_(cfg.seed, "expert"),
        intervener_(cfg.intervener) {
    result_.agent = Agent(task_, cfg);
    result_.replay = ReplayBuffer(cfg.replay_capacity);
    result_.demo = ReplayBuffer(cfg.demo_capacity);
    actor_opt_ = Adam(AdamConfig{cfg.actor_lr});
    critic_opt_ = Adam(AdamConfig{cfg.critic_lr});
  }

  TrainResult run() {
    if (hooks_.out_dir) {
      std::filesystem::create_directories(*hooks_.out_dir);
      metrics_out_.open(*hooks_.out_dir / "metrics.jsonl");
      if (!metrics_out_) throw std::runtime_error("cannot write " + (*hooks_.out_dir / "metrics.jsonl").string());
    }
    Rng demo_rng(cfg_.seed, "demo");
    for (auto& t : collect_demos(task_, cfg_.intervener, cfg_.demo_episodes, demo_rng, kDemoIdBase)) {
      result_.demo.push(std::move(t));
    }

    env_ = reset(task_, env_rng_);
    std::int64_t t = 0;
    try {
      for (; t < cfg_.total_steps; ++t) {
        env_step(t);
        if (ready()) update(t);
        if (cfg_.eval_every > 0 && (t + 1) % cfg_.eval_every == 0) periodic_eval(t + 1);
      }
    } catch (const NonFiniteError& e) {
      spdlog::error("non-finite value at step {}: {}", t, e.what());
      result_.summary.aborted = true;
      result_.summary.error = fmt::format("non-finite value at step {}: {}", t, e.what());
      write_checkpoint(hooks_, result_.agent, cfg_, t, "checkpoint_abort");
    }

    auto& sum = result_.summary;
    sum.env_steps = t;
    sum.updates = updates_;
    sum.intervention_rate = t > 0 ? static_cast<double>(result_.intervention_steps) / static_cast<double>(t) : 0.0;
    sum.mean_abs_c_by_source = c_sums_.means();
    if (!sum.aborted) {
      if (!(cfg_.eval_every > 0 && t > 0 && t % cfg_.eval_every == 0)) periodic_eval(t);
      sum.success_rate = last_eval_;
    }
    if (hooks_.out_dir) {
      std::ofstream(*hooks_.out_dir / "summary.json") << sum.to_json().dump(2) << '\n';
      if (!sum.aborted) write_checkpoint(hooks_, result_.agent, cfg_, t, "checkpoint");
    }
    return std::move(result_);
  }

 private:
  bool ready() const {
    const auto half = static_cast<std::size_t>(cfg_.batch_size / 2);
    return result_.replay.size() >= half && result_.demo.size() >= half;
  }

  void handle_command(const Command& c) {
    switch (c.kind) {
      case Command::Kind::kTakeover:
        human_takeover_ = c.on;
        if (!c.on) human_action_.reset();
        announce_takeover();
        break;
      case Command::Kind::kAction:
        if (static_cast<int>(c.action.size()) != task_.action_dim()) {
          spdlog::warn("ignoring action command of length {} (task expects {})", c.action.size(),
                       task_.action_dim());
          break;
        }
        human_action_ = c.action;
        break;
      case Command::Kind::kPause:
        paused_ = true;
        break;
      case Command::Kind::kResume:
        paused_ = false;
        break;
    }
  }

  void drain_commands() {
    if (!hooks_.commands) return;
    for (const auto& c : hooks_.commands->drain()) handle_command(c);
    while (paused_) {
      if (auto c = hooks_.commands->wait_pop(std::chrono::milliseconds(100))) handle_command(*c);
    }
  }

  void announce_takeover() {
    WireMessage m;
    m.type = "takeover";
    m.step = step_;
    const bool scripted = intervener_.takeover().active;
    m.payload = {{"on", human_takeover_ || scripted},
                 {"origin", human_takeover_ ? "human" : (scripted ? "scripted" : "none")}};
    publish(hooks_, m);
  }

  void env_step(std::int64_t t) {
    step_ = t;
    drain_commands();
    const bool was_active = intervener_.takeover().active;
    if (cfg_.scripted_intervention && !human_takeover_) intervener_.maybe_trigger();
    if (intervener_.takeover().active != was_active) announce_takeover();

    const auto obs = observe(task_, env_);
    const auto [pa, logp] = result_.agent.policy.sample_action(obs, policy_rng_);
    (void)logp;
    const std::vector<double> policy_action(pa.data(), pa.data() + pa.size());
    const TakeoverState& scripted = intervener_.takeover();
    std::vector<double> expert;
    if (scripted.active) expert = noisy_expert(env_, task_, cfg_.intervener, expert_rng_);
    std::optional<std::vector<double>> human;
    if (human_takeover_) {
      human = human_action_.value_or(std::vector<double>(static_cast<std::size_t>(task_.action_dim()), 0.0));
    }
    auto [action, source] = resolve_action(scripted, policy_action, expert, human);

    const StepResult r = step(task_, env_, action);
    Transition tr{obs, action, r.reward, observe(task_, r.next), r.success, source, t, t};
    if (source == Source::kIntervention) {
      ++result_.intervention_steps;
      result_.demo.push(tr);
    }
    result_.replay.push(std::move(tr));

    if (!human_takeover_) {
      const bool active = intervener_.takeover().active;
      intervener_.after_step(progress_distance(task_, r.next), r.overshoot);
      if (active && !intervener_.takeover().active) announce_takeover();
    }
    env_ = r.next;

    if (cfg_.snapshot_every > 0 && !hooks_.sinks.empty() && t % cfg_.snapshot_every == 0) {
      WireMessage m;
      m.type = "snapshot";
      m.step = t;
      m.payload = to_json(env_);
      m.payload["task"] = task_.name;
      m.payload["source"] = to_string(source);
      m.payload["action"] = action;
      m.payload["reward"] = r.reward;
      m.payload["episode"] = episode_;
      publish(hooks_, m);
    }

    if (r.done) {
      env_ = reset(task_, env_rng_);
      intervener_.reset_episode();
      ++episode_;
    }
  }

  void refresh_probe() {
    std::vector<Transition> ts;
    ts.reserve(static_cast<std::size_t>(cfg_.probe_states));
    for (int i = 0; i < cfg_.probe_states; ++i) ts.push_back(result_.replay.sample(probe_rng_));
    probe_states_ = Batch::from(ts).states;
    probe_noise_ = gaussian_noise(task_.action_dim(), static_cast<Eigen::Index>(cfg_.probe_states) * cfg_.k,
                                  probe_rng_);
  }

  void update(std::int64_t t) {
    Agent& ag = result_.agent;
    const double alpha = ag.temperature.alpha();
    const auto n = static_cast<std::size_t>(cfg_.batch_size);

    Batch batch;
    double critic_loss = 0.0;
    for (int g = 0; g < cfg_.gradient_steps; ++g) {
      batch = Batch::from(sample_half_half(result_.replay, result_.demo, n, buffer_rng_));
      critic_loss = critic_update(ag.critic, batch, ag.policy, alpha, cfg_.gamma, critic_opt_, update_rng_);
      ag.critic.polyak_update(cfg_.polyak);
    }

    const Matrix draws = influence_noise(cfg_.seed, batch.ids, updates_, task_.action_dim(), cfg_.k);
    const InfluenceResult inf =
        compute_influence(batch.states, batch.actions, ag.policy, ag.critic, alpha, cfg_.actor_lr, cfg_.k, draws);
    std::vector<double> abs_c(n);
    for (std::size_t i = 0; i < n; ++i) abs_c[i] = std::abs(inf.c(static_cast<Eigen::Index>(i)));
    const SelectionBounds bounds = percentile_bounds(abs_c, cfg_.low_pct, cfg_.high_pct);
    std::vector<std::uint8_t> mask = selection_mask({inf.c.data(), n}, bounds);
    if (cfg_.mode == Mode::kUniform) std::fill(mask.begin(), mask.end(), std::uint8_t{1});

    if (updates_ % cfg_.probe_refresh == 0) refresh_probe();
    const double h_before = policy_entropy_estimate(ag.policy, probe_states_, cfg_.k, probe_noise_);

    const Matrix noise = gaussian_noise(task_.action_dim(), static_cast<Eigen::Index>(n), update_rng_);
    const ActorLossResult actor = masked_actor_loss(batch.states, mask, ag.policy, ag.critic, alpha, noise, cfg_.mask_eps);
    auto policy_params = ag.policy.params();
    actor_opt_.step(policy_params);

    const double h_after = policy_entropy_estimate(ag.policy, probe_states_, cfg_.k, probe_noise_);
    ag.temperature.update(inf.entropy_estimate);
    if (!std::isfinite(ag.temperature.log_alpha)) throw NonFiniteError("non-finite temperature");

    SourceSums batch_sums;
    for (std::size_t i = 0; i < n; ++i) {
      batch_sums.add(batch.sources[i], abs_c[i]);
      c_sums_.add(batch.sources[i], abs_c[i]);
    }

    MetricsRow row;
    row.step = t;
    row.update = updates_;
    row.entropy_estimate = inf.entropy_estimate;
    row.dH_pred = predict_entropy_change(inf, mask, cfg_.actor_lr);
    row.dH_meas = h_after - h_before;
    row.success_rate = last_eval_;
    row.intervention_rate = static_cast<double>(result_.intervention_steps) / static_cast<double>(t + 1);
    row.retained_fraction = static_cast<double>(actor.retained) / static_cast<double>(n);
    row.mean_abs_c_by_source = batch_sums.means();
    row.alpha = ag.temperature.alpha();
    row.critic_loss = critic_loss;
    row.actor_loss = actor.loss;
    emit(row, batch, mask, bounds);
    ++updates_;
  }

  void emit(const MetricsRow& row, const Batch& batch, const std::vector<std::uint8_t>& mask,
            const SelectionBounds& bounds) {
    if (metrics_out_.is_open()) metrics_out_ << row.to_json().dump() << '\n';
    result_.metrics.push_back(row);
    if (hooks_.on_metrics) hooks_.on_metrics(row);
    if (hooks_.sinks.empty()) return;

    WireMessage m;
    m.type = "metrics";
    m.step = row.step;
    m.payload = row.to_json();
    publish(hooks_, m);

    Histogram2D kept(16, task_.workspace);
    Histogram2D clipped(16, task_.workspace);
    std::array<std::array<std::int64_t, 2>, kNumSources> counts{};
    for (Eigen::Index i = 0; i < batch.size(); ++i) {
      const bool r = mask[static_cast<std::size_t>(i)] != 0;
      const Point p{batch.states(0, i), batch.states(1, i)};
      (r ? kept : clipped).add(p);
      ++counts[static_cast<std::size_t>(batch.sources[static_cast<std::size_t>(i)])][r ? 0 : 1];
    }
    nlohmann::json by_source = nlohmann::json::object();
    for (std::size_t s = 0; s < kNumSources; ++s) {
      by_source[to_string(static_cast<Source>(s))] = {{"retained", counts[s][0]}, {"clipped", counts[s][1]}};
    }
    WireMessage inf;
    inf.type = "influence";
    inf.step = row.step;
    inf.payload = {{"retained", kept.to_json()},
                   {"clipped", clipped.to_json()},
                   {"by_source", by_source},
                   {"bounds", {{"lower", bounds.lower}, {"upper", bounds.upper}}}};
    publish(hooks_, inf);
  }

  void periodic_eval(std::int64_t step) {
    Rng eval_rng(cfg_.seed, "eval", static_cast<std::uint64_t>(step));
    last_eval_ = evaluate(result_.agent.policy, task_, cfg_.eval_episodes, eval_rng);
    if (!result_.summary.steps_to_70pct && last_eval_ >= 0.7) result_.summary.steps_to_70pct = step;
    spdlog::info("step {}: eval success {:.3f}, interventions {}", step, last_eval_, result_.intervention_steps);
    write_checkpoint(hooks_, result_.agent, cfg_, step, "checkpoint");
  }

  TrainConfig cfg_;
  const TrainHooks& hooks_;
  TaskSpec task_;
  Rng env_rng_, policy_rng_, buffer_rng_, update_rng_, probe_rng_, expert_rng_;
  ScriptedIntervener intervener_;
  Adam actor_opt_;
  Adam critic_opt_;
  TrainResult result_;
  EnvState env_;
  std::int64_t step_ = 0;
  std::int64_t updates_ = 0;
  std::int64_t episode_ = 0;
  double last_eval_ = 0.0;
  bool human_takeover_ = false;
  bool paused_ = false;
  std::optional<std::vector<double>> human_action_;
  Matrix probe_states_;
  Matrix probe_noise_;
  SourceSums c_sums_;
  std::ofstream metrics_out_;
};

}  // namespace

TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  return Trainer(cfg, hooks).run();
}

// --- analysis ----------------------------------------------------------------------

nlohmann::json AnalysisReport::to_json() const {
  nlohmann::json counts_j = nlohmann::json::object();
  for (std::size_t s = 0; s < kNumSources; ++s) {
    if (counts[s] > 0) counts_j[to_string(static_cast<Source>(s))] = counts[s];
  }
  return {{"table", table},
          {"counts", counts_j},
          {"bounds", {{"lower", bounds.lower}, {"upper", bounds.upper}, {"low_pct", bounds.low_pct},
                      {"high_pct", bounds.high_pct}}},
          {"retained", retained.to_json()},
          {"clipped", clipped.to_json()}};
}

AnalysisReport analyze(const std::vector<Transition>& transitions, const Agent& agent,
                       const TrainConfig& cfg) {
  const TaskSpec task = make_task(cfg.task);
  AnalysisReport rep{nlohmann::json::object(), {}, {}, Histogram2D(16, task.workspace),
                     Histogram2D(16, task.workspace), {}};
  for (const auto& t : transitions) {
    if (static_cast<int>(t.state.size()) != agent.policy.state_dim() ||
        static_cast<int>(t.action.size()) != agent.policy.action_dim()) {
      throw std::invalid_argument(fmt::format(
          "transition {} has state/action dims {}/{}, checkpoint expects {}/{}", t.id, t.state.size(),
          t.action.size(), agent.policy.state_dim(), agent.policy.action_dim()));
    }
  }
  if (transitions.empty()) return rep;

  const double alpha = agent.temperature.alpha();
  constexpr std::size_t kChunk = 512;
  std::vector<double> c(transitions.size());
  for (std::size_t begin = 0; begin < transitions.size(); begin += kChunk) {
    const std::size_t end = std::min(transitions.size(), begin + kChunk);
    const std::vector<Transition> part(transitions.begin() + static_cast<std::ptrdiff_t>(begin),
                                       transitions.begin() + static_cast<std::ptrdiff_t>(end));
    const Batch b = Batch::from(part);
    const Matrix draws = influence_noise(cfg.seed, b.ids, 0, agent.policy.action_dim(), cfg.k);
    const auto inf = compute_influence(b.states, b.actions, agent.policy, agent.critic, alpha, cfg.actor_lr,
                                       cfg.k, draws);
    for (std::size_t i = begin; i < end; ++i) c[i] = inf.c(static_cast<Eigen::Index>(i - begin));
  }

  std::vector<double> abs_c(c.size());
  std::transform(c.begin(), c.end(), abs_c.begin(), [](double v) { return std::abs(v); });
  rep.bounds = percentile_bounds(abs_c, cfg.low_pct, cfg.high_pct);
  const auto mask = selection_mask(c, rep.bounds);

  std::array<std::vector<double>, kNumSources> per_source;
  for (std::size_t i = 0; i < transitions.size(); ++i) {
    const auto& t = transitions[i];
    const bool kept = mask[i] != 0;
    rep.records.push_back({t.id, c[i], abs_c[i], kept, t.source, t.step});
    (kept ? rep.retained : rep.clipped).add(tip_from_observation(t.state));
    per_source[static_cast<std::size_t>(t.source)].push_back(abs_c[i]);
    ++rep.counts[static_cast<std::size_t>(t.source)];
  }

  const auto column = [](const std::vector<double>& v) {
    nlohmann::json col = nlohmann::json::object();
    for (double p : {2.0, 5.0, 10.0, 20.0, 50.0}) col[fmt::format("Top {}%", p)] = tail_mean(v, p, true);
    for (double p : {20.0, 10.0, 5.0, 2.0}) col[fmt::format("Low {}%", p)] = tail_mean(v, p, false);
    col["All"] = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    col["count"] = v.size();
    return col;
  };
  rep.table["all"] = column(abs_c);
  for (std::size_t s = 0; s < kNumSources; ++s) {
    if (!per_source[s].empty()) rep.table[to_string(static_cast<Source>(s))] = column(per_source[s]);
  }
  return rep;
}

}  // namespace entsel
