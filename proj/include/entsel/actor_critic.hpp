#pragma once

#include <array>
#include <span>
#include <utility>
#include <vector>

#include "entsel/nn.hpp"
#include "entsel/replay.hpp"
#include "entsel/rng.hpp"

namespace entsel {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kSquashEps = 1e-6;
inline constexpr double kActionClip = 1.0 - 1e-6;

struct NetShape {
  std::vector<int> hidden{64, 64};
};

/// tanh-squashed diagonal Gaussian. The trunk emits [mean; log_std] per column.
class GaussianPolicy {
 public:
  struct Head {
    Mlp::Tape tape;
    Matrix mean;
    Matrix log_std;  // clamped
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> clamped;
  };

  struct Sample {
    Matrix actions;
    Matrix pre_tanh;
    RowVector log_prob;
  };

  GaussianPolicy() = default;
  GaussianPolicy(int state_dim, int action_dim, const NetShape& shape, Rng& init_rng);

  int state_dim() const noexcept { return trunk_.input_dim(); }
  int action_dim() const noexcept { return action_dim_; }
  Mlp& trunk() noexcept { return trunk_; }
  const Mlp& trunk() const noexcept { return trunk_; }

  Head head(const Matrix& states) const;
  /// Reparameterized sample: u = mean + std * noise, action = tanh(u).
  Sample sample(const Matrix& states, const Matrix& noise) const;
  static Sample sample_from_head(const Head& h, const Matrix& noise);
  /// Log-density of given actions under per-column (mean, log_std).
  static RowVector log_prob_from_head(const Matrix& mean, const Matrix& log_std,
                                      const Matrix& actions);

  std::pair<Vector, double> sample_action(std::span<const double> state, Rng& rng) const;
  /// Rejects actions outside [-1, 1]; clamps to 1 - 1e-6 before atanh.
  double log_prob(std::span<const double> state, std::span<const double> action) const;
  RowVector log_prob(const Matrix& states, const Matrix& actions) const;
  Vector deterministic_action(std::span<const double> state) const;

  /// Backpropagates d(loss)/d(mean), d(loss)/d(log_std) into the trunk grads.
  /// Clamped log_std entries pass no gradient.
  void backward(const Head& h, const Matrix& d_mean, const Matrix& d_log_std);

  std::vector<ParamTensor*> params() { return trunk_.params(); }

 private:
  Mlp trunk_;
  int action_dim_ = 0;
};

/// log-density of tanh(u) where u ~ N(mean, std^2) evaluated from the
/// standardized noise and the pre-squash value, summed over action dims.
double squashed_log_prob(std::span<const double> noise, std::span<const double> log_std,
                         std::span<const double> pre_tanh);

class TwinCritic {
 public:
  TwinCritic() = default;
  TwinCritic(int state_dim, int action_dim, const NetShape& shape, Rng& init_rng);

  int state_dim() const noexcept { return state_dim_; }
  int action_dim() const noexcept { return action_dim_; }

  std::array<Mlp, 2>& online() noexcept { return online_; }
  const std::array<Mlp, 2>& online() const noexcept { return online_; }
  std::array<Mlp, 2>& target() noexcept { return target_; }
  const std::array<Mlp, 2>& target() const noexcept { return target_; }

  static Matrix join(const Matrix& states, const Matrix& actions);

  std::array<RowVector, 2> q_values(const Matrix& states, const Matrix& actions) const;
  RowVector q_min(const Matrix& states, const Matrix& actions) const;
  RowVector q_min_target(const Matrix& states, const Matrix& actions) const;
  double q_min(std::span<const double> state, std::span<const double> action) const;
  double q_min_target(std::span<const double> state, std::span<const double> action) const;

  /// target <- rho * target + (1 - rho) * online.
  void polyak_update(double rho);

  std::vector<ParamTensor*> params();

 private:
  int state_dim_ = 0;
  int action_dim_ = 0;
  std::array<Mlp, 2> online_;
  std::array<Mlp, 2> target_;
};

struct Temperature {
  double log_alpha = 0.0;
  double target_entropy = -1.0;
  double lr_alpha = 3e-4;

  double alpha() const noexcept;
  /// log_alpha <- log_alpha - lr_alpha * (entropy_estimate - target_entropy)
  void update(double entropy_estimate);
};

/// y = r + gamma * (1 - done) * (q_min_target(s', a') - alpha * log pi(a'|s'))
/// with a' = tanh(mean + std * next_noise).
RowVector critic_targets(const Batch& batch, const GaussianPolicy& policy, const TwinCritic& critic,
                         double alpha, double gamma, const Matrix& next_noise);
double critic_target(double reward, bool done, std::span<const double> next_state,
                     const GaussianPolicy& policy, const TwinCritic& critic, double alpha,
                     double gamma, Rng& rng);

/// Mean over the batch of ((Q1 - y)^2 + (Q2 - y)^2) / 2. Returns the
/// pre-step loss and applies one optimizer step to both online critics.
double critic_update(TwinCritic& critic, const Batch& batch, const GaussianPolicy& policy,
                     double alpha, double gamma, Adam& optimizer, Rng& rng);
/// Same, with targets precomputed by the caller.
double critic_update(TwinCritic& critic, const Batch& batch, const RowVector& targets,
                     Adam& optimizer);

/// -mean over states and K draws of log pi(a|s).
double policy_entropy_estimate(const GaussianPolicy& policy, const Matrix& states, int k, Rng& rng);
/// Same estimate with caller-provided noise; noise has K columns per state,
/// state-major (state i owns columns [i*K, (i+1)*K)).
double policy_entropy_estimate(const GaussianPolicy& policy, const Matrix& states, int k,
                               const Matrix& noise);

/// Repeats every column K times consecutively.
Matrix repeat_columns(const Matrix& m, int k);

Matrix gaussian_noise(Eigen::Index rows, Eigen::Index cols, Rng& rng);

}  // namespace entsel
