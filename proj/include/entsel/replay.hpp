#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "entsel/nn.hpp"
#include "entsel/rng.hpp"

namespace entsel {

enum class Source { kExploration, kIntervention, kDemo };

inline constexpr std::size_t kNumSources = 3;

std::string to_string(Source s);
Source source_from_string(const std::string& s);

struct Transition {
  std::vector<double> state;
  std::vector<double> action;
  double reward = 0.0;
  std::vector<double> next_state;
  bool done = false;
  Source source = Source::kExploration;
  std::int64_t id = 0;
  std::int64_t step = 0;
};

void to_json(nlohmann::json& j, const Transition& t);
void from_json(const nlohmann::json& j, Transition& t);

/// Column-per-sample view of a list of transitions, ready for batched nets.
struct Batch {
  Matrix states;
  Matrix actions;
  Matrix next_states;
  Vector rewards;
  Vector dones;
  std::vector<Source> sources;
  std::vector<std::int64_t> ids;

  Eigen::Index size() const noexcept { return states.cols(); }
  static Batch from(const std::vector<Transition>& ts);
};

/// Fixed-capacity ring; the oldest entry is evicted first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(Transition t);
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  std::uint64_t insert_count() const noexcept { return insert_count_; }
  bool empty() const noexcept { return entries_.empty(); }

  /// i-th entry in insertion order (0 = oldest still held).
  const Transition& at(std::size_t i) const;
  const Transition& sample(Rng& rng) const;
  std::vector<Transition> contents() const;
  bool contains_id(std::int64_t id) const;

 private:
  std::size_t capacity_;
  std::vector<Transition> entries_;
  std::size_t head_ = 0;  // next slot to overwrite once full
  std::uint64_t insert_count_ = 0;
};

/// Raised when a batch is requested before both buffers hold data; the
/// caller should defer learning.
class EmptyBufferError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// N/2 uniform with-replacement draws from each buffer, replay half first.
std::vector<Transition> sample_half_half(const ReplayBuffer& replay, const ReplayBuffer& demo,
                                         std::size_t n, Rng& rng);

void export_jsonl(const std::filesystem::path& path, const std::vector<Transition>& ts);
std::vector<Transition> import_jsonl(const std::filesystem::path& path);

}  // namespace entsel
