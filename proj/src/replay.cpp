#include "entsel/replay.hpp"

#include <algorithm>
#include <fstream>

namespace entsel {

std::string to_string(Source s) {
  switch (s) {
    case Source::kExploration: return "exploration";
    case Source::kIntervention: return "intervention";
    case Source::kDemo: return "demo";
  }
  return "exploration";
}

Source source_from_string(const std::string& s) {
  if (s == "exploration") return Source::kExploration;
  if (s == "intervention") return Source::kIntervention;
  if (s == "demo") return Source::kDemo;
  throw std::invalid_argument("unknown transition source: " + s);
}

void to_json(nlohmann::json& j, const Transition& t) {
  j = nlohmann::json{{"id", t.id},
                     {"step", t.step},
                     {"state", t.state},
                     {"action", t.action},
                     {"reward", t.reward},
                     {"next_state", t.next_state},
                     {"done", t.done},
                     {"source", to_string(t.source)}};
}

void from_json(const nlohmann::json& j, Transition& t) {
  t.id = j.at("id").get<std::int64_t>();
  t.step = j.value("step", std::int64_t{0});
  t.state = j.at("state").get<std::vector<double>>();
  t.action = j.at("action").get<std::vector<double>>();
  t.reward = j.at("reward").get<double>();
  t.next_state = j.at("next_state").get<std::vector<double>>();
  t.done = j.at("done").get<bool>();
  t.source = source_from_string(j.at("source").get<std::string>());
}

Batch Batch::from(const std::vector<Transition>& ts) {
  Batch b;
  if (ts.empty()) return b;
  const auto n = static_cast<Eigen::Index>(ts.size());
  const auto sd = static_cast<Eigen::Index>(ts.front().state.size());
  const auto ad = static_cast<Eigen::Index>(ts.front().action.size());
  b.states.resize(sd, n);
  b.next_states.resize(sd, n);
  b.actions.resize(ad, n);
  b.rewards.resize(n);
  b.dones.resize(n);
  b.sources.reserve(ts.size());
  b.ids.reserve(ts.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = ts[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(t.state.size()) != sd ||
        static_cast<Eigen::Index>(t.next_state.size()) != sd ||
        static_cast<Eigen::Index>(t.action.size()) != ad) {
      throw std::invalid_argument("Batch::from: inconsistent transition dimensions");
    }
    b.states.col(i) = Eigen::Map<const Vector>(t.state.data(), sd);
    b.next_states.col(i) = Eigen::Map<const Vector>(t.next_state.data(), sd);
    b.actions.col(i) = Eigen::Map<const Vector>(t.action.data(), ad);
    b.rewards(i) = t.reward;
    b.dones(i) = t.done ? 1.0 : 0.0;
    b.sources.push_back(t.source);
    b.ids.push_back(t.id);
  }
  return b;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("ReplayBuffer capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
  ++insert_count_;
  if (entries_.size() < capacity_) {
    entries_.push_back(std::move(t));
    return;
  }
  entries_[head_] = std::move(t);
  head_ = (head_ + 1) % capacity_;
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= entries_.size()) throw std::out_of_range("ReplayBuffer::at");
  return entries_[(head_ + i) % entries_.size()];
}

const Transition& ReplayBuffer::sample(Rng& rng) const {
  if (entries_.empty()) throw EmptyBufferError("cannot sample from an empty buffer");
  return entries_[rng.index(entries_.size())];
}

std::vector<Transition> ReplayBuffer::contents() const {
  std::vector<Transition> out;
  out.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) out.push_back(at(i));
  return out;
}

bool ReplayBuffer::contains_id(std::int64_t id) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [id](const Transition& t) { return t.id == id; });
}

std::vector<Transition> sample_half_half(const ReplayBuffer& replay, const ReplayBuffer& demo,
                                         std::size_t n, Rng& rng) {
  if (n == 0 || n % 2 != 0) throw std::invalid_argument("batch size must be even and positive");
  if (replay.empty() || demo.empty()) {
    throw EmptyBufferError("replay and demo buffers must both be nonempty; defer learning");
  }
  std::vector<Transition> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n / 2; ++i) out.push_back(replay.sample(rng));
  for (std::size_t i = 0; i < n / 2; ++i) out.push_back(demo.sample(rng));
  return out;
}

void export_jsonl(const std::filesystem::path& path, const std::vector<Transition>& ts) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& t : ts) out << nlohmann::json(t).dump() << '\n';
}

std::vector<Transition> import_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Transition> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<Transition>());
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace entsel
