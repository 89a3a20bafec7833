#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "entsel/actor_critic.hpp"
#include "entsel/nn.hpp"
#include "entsel/replay.hpp"
#include "entsel/rng.hpp"

namespace entsel {

/// Upper bound on the squashed density used as pi(a|s) in the influence
/// product; keeps pi * A_soft finite when std sits at its floor.
inline constexpr double kMaxDensity = 1e6;

// --- per-state building blocks on pinned draws ------------------------------

/// V(s) = mean_k [ q_k - alpha * log_prob_k ].
double soft_value(std::span<const double> q_min_draws, std::span<const double> log_prob_draws,
                  double alpha);
/// A_soft(s, a) = q - alpha * log_prob - V(s).
double soft_advantage(double q_min, double log_prob, double alpha, double value);
/// Population covariance over the draws (1/K normalization).
double draw_covariance(std::span<const double> x, std::span<const double> y);
/// c = -eta * (x_taken - mean(x)) * (y_taken - mean(y)).
double centered_influence(std::span<const double> x_draws, std::span<const double> y_draws,
                          double x_taken, double y_taken, double eta);

// --- policy/critic level ------------------------------------------------------

double soft_value(std::span<const double> state, const GaussianPolicy& policy,
                  const TwinCritic& critic, double alpha, int k, Rng& rng);
double soft_advantage(std::span<const double> state, std::span<const double> action,
                      const GaussianPolicy& policy, const TwinCritic& critic, double alpha,
                      double value);
double influence_value(std::span<const double> state, std::span<const double> action,
                       const GaussianPolicy& policy, const TwinCritic& critic, double alpha,
                       double eta, int k, Rng& rng);

struct InfluenceResult {
  Vector c;                  // signed influence per sample
  Vector state_covariance;   // K-draw Cov(log pi, pi * A_soft) per sample state
  double entropy_estimate;   // -mean log pi over all draws
};

/// Batched influence. `draw_noise` holds K columns per sample, sample-major.
InfluenceResult compute_influence(const Matrix& states, const Matrix& actions,
                                  const GaussianPolicy& policy, const TwinCritic& critic,
                                  double alpha, double eta, int k, const Matrix& draw_noise);

/// Noise for the K draws of each sample, drawn from a substream keyed by
/// (seed, sample id, update index) so results do not depend on batch order.
Matrix influence_noise(std::uint64_t seed, std::span<const std::int64_t> sample_ids,
                       std::int64_t update_index, int action_dim, int k);

/// Delta H_pred = -eta * mean over states of the per-state covariance.
double predict_entropy_change(const Matrix& states, const GaussianPolicy& policy,
                              const TwinCritic& critic, double alpha, double eta, int k, Rng& rng);
/// Same prediction from precomputed covariances, averaged over retained samples.
double predict_entropy_change(const InfluenceResult& r, std::span<const std::uint8_t> mask,
                              double eta);

// --- selection ----------------------------------------------------------------

struct SelectionBounds {
  double lower = 0.0;
  double upper = 0.0;
  double low_pct = 5.0;
  double high_pct = 90.0;
};

/// Nearest-rank order statistic at rank max(1, ceil(p * n / 100)).
double nearest_rank(std::span<const double> sorted, double pct);
SelectionBounds percentile_bounds(std::span<const double> abs_values, double low_pct = 5.0,
                                  double high_pct = 90.0);
/// 1 iff |c| in [lower, upper] (closed).
std::vector<std::uint8_t> selection_mask(std::span<const double> c, const SelectionBounds& bounds);

struct InfluenceRecord {
  std::int64_t sample_id = 0;
  double c = 0.0;
  double abs_c = 0.0;
  bool retained = true;
  Source source = Source::kExploration;
  std::int64_t step = 0;
};

nlohmann::json to_json(const InfluenceRecord& r);

// --- masked actor objective ---------------------------------------------------

inline constexpr double kMaskEps = 1e-8;

/// -(sum mask * l) / (sum mask + eps).
double masked_objective(std::span<const double> l, std::span<const std::uint8_t> mask,
                        double eps = kMaskEps);

struct ActorLossResult {
  double loss = 0.0;
  std::vector<double> l;  // per-sample objective; 0 for masked-out samples
  std::size_t retained = 0;
};

/// l_t = q_min(s, a~) - alpha * log pi(a~|s) with a~ = tanh(mean + std * noise).
/// Accumulates d loss / d theta into the policy grads using retained columns
/// only; critic grads are left untouched. `noise` has one column per sample.
ActorLossResult masked_actor_loss(const Matrix& states, std::span<const std::uint8_t> mask,
                                  GaussianPolicy& policy, const TwinCritic& critic, double alpha,
                                  const Matrix& noise, double eps = kMaskEps);

// --- exact softmax bandit -------------------------------------------------------

/// Single-state categorical policy over logits; covariance is computed
/// exactly under pi rather than by sampling.
struct SoftmaxBandit {
  Vector logits;

  Vector probs() const;
  double entropy() const;
  /// -eta * Cov_pi(log pi, pi * A).
  double predicted_entropy_change(const Vector& advantages, double eta) const;
  /// z <- z + eta * pi * A.
  void logit_step(const Vector& advantages, double eta);
};

}  // namespace entsel
