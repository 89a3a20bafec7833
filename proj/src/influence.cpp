#include "entsel/influence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace entsel {

namespace {

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double clamped_density(double log_prob) { return std::min(std::exp(log_prob), kMaxDensity); }

Matrix column(std::span<const double> v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

double soft_value(std::span<const double> q_min_draws, std::span<const double> log_prob_draws,
                  double alpha) {
  if (q_min_draws.size() != log_prob_draws.size() || q_min_draws.size() < 2) {
    throw std::invalid_argument("soft_value needs K >= 2 matching draws");
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < q_min_draws.size(); ++k) acc += q_min_draws[k] - alpha * log_prob_draws[k];
  return acc / static_cast<double>(q_min_draws.size());
}

double soft_advantage(double q_min, double log_prob, double alpha, double value) {
  return q_min - alpha * log_prob - value;
}

double draw_covariance(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.empty()) throw std::invalid_argument("draw_covariance: size mismatch");
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double acc = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) acc += (x[k] - mx) * (y[k] - my);
  return acc / static_cast<double>(x.size());
}

double centered_influence(std::span<const double> x_draws, std::span<const double> y_draws,
                          double x_taken, double y_taken, double eta) {
  if (x_draws.size() != y_draws.size() || x_draws.empty()) {
    throw std::invalid_argument("centered_influence: size mismatch");
  }
  return -eta * (x_taken - mean_of(x_draws)) * (y_taken - mean_of(y_draws));
}

double soft_value(std::span<const double> state, const GaussianPolicy& policy,
                  const TwinCritic& critic, double alpha, int k, Rng& rng) {
  if (k < 2) throw std::invalid_argument("soft_value needs K >= 2");
  const Matrix states = repeat_columns(column(state), k);
  const auto draws = policy.sample(states, gaussian_noise(policy.action_dim(), k, rng));
  const RowVector q = critic.q_min(states, draws.actions);
  return (q - alpha * draws.log_prob).mean();
}

double soft_advantage(std::span<const double> state, std::span<const double> action,
                      const GaussianPolicy& policy, const TwinCritic& critic, double alpha,
                      double value) {
  return soft_advantage(critic.q_min(state, action), policy.log_prob(state, action), alpha, value);
}

double influence_value(std::span<const double> state, std::span<const double> action,
                       const GaussianPolicy& policy, const TwinCritic& critic, double alpha,
                       double eta, int k, Rng& rng) {
  const auto r = compute_influence(column(state), column(action), policy, critic, alpha, eta, k,
                                   gaussian_noise(policy.action_dim(), k, rng));
  return r.c(0);
}

InfluenceResult compute_influence(const Matrix& states, const Matrix& actions,
                                  const GaussianPolicy& policy, const TwinCritic& critic,
                                  double alpha, double eta, int k, const Matrix& draw_noise) {
  if (k < 2) throw std::invalid_argument("influence estimation needs K >= 2");
  if (!(eta > 0.0)) throw std::invalid_argument("influence estimation needs eta > 0");
  const Eigen::Index n = states.cols();
  if (n == 0) throw std::invalid_argument("influence estimation needs a nonempty batch");
  if (actions.cols() != n || draw_noise.cols() != n * k) {
    throw std::invalid_argument("influence estimation: batch shape mismatch");
  }

  const auto head = policy.head(states);
  GaussianPolicy::Head draw_head;
  draw_head.mean = repeat_columns(head.mean, k);
  draw_head.log_std = repeat_columns(head.log_std, k);
  const auto draws = GaussianPolicy::sample_from_head(draw_head, draw_noise);
  const RowVector taken_log_prob = GaussianPolicy::log_prob_from_head(head.mean, head.log_std, actions);

  // One critic pass over [draws | taken actions].
  Matrix all_states(states.rows(), n * k + n);
  all_states.leftCols(n * k) = repeat_columns(states, k);
  all_states.rightCols(n) = states;
  Matrix all_actions(actions.rows(), n * k + n);
  all_actions.leftCols(n * k) = draws.actions;
  all_actions.rightCols(n) = actions;
  const RowVector q = critic.q_min(all_states, all_actions);

  InfluenceResult r;
  r.c.resize(n);
  r.state_covariance.resize(n);
  r.entropy_estimate = -draws.log_prob.mean();

  std::vector<double> x(static_cast<std::size_t>(k));
  std::vector<double> y(static_cast<std::size_t>(k));
  std::vector<double> qd(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      x[j] = draws.log_prob(i * k + j);
      qd[j] = q(i * k + j);
    }
    const double value = soft_value(qd, x, alpha);
    for (int j = 0; j < k; ++j) y[j] = clamped_density(x[j]) * soft_advantage(qd[j], x[j], alpha, value);
    const double x_taken = taken_log_prob(i);
    const double y_taken =
        clamped_density(x_taken) * soft_advantage(q(n * k + i), x_taken, alpha, value);
    r.c(i) = centered_influence(x, y, x_taken, y_taken, eta);
    r.state_covariance(i) = draw_covariance(x, y);
  }
  return r;
}

Matrix influence_noise(std::uint64_t seed, std::span<const std::int64_t> sample_ids,
                       std::int64_t update_index, int action_dim, int k) {
  Matrix noise(action_dim, static_cast<Eigen::Index>(sample_ids.size()) * k);
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    Rng rng(mix64(seed ^ mix64(static_cast<std::uint64_t>(update_index))), "influence-draws",
            static_cast<std::uint64_t>(sample_ids[i]));
    for (int j = 0; j < k; ++j) {
      for (int a = 0; a < action_dim; ++a) noise(a, static_cast<Eigen::Index>(i) * k + j) = rng.normal();
    }
  }
  return noise;
}

double predict_entropy_change(const Matrix& states, const GaussianPolicy& policy,
                              const TwinCritic& critic, double alpha, double eta, int k, Rng& rng) {
  if (states.cols() == 0) throw std::invalid_argument("predict_entropy_change: empty batch");
  // Actions are irrelevant to the per-state covariance; reuse the states' own draws.
  const Matrix actions = Matrix::Zero(policy.action_dim(), states.cols());
  const auto r = compute_influence(states, actions, policy, critic, alpha, eta, k,
                                   gaussian_noise(policy.action_dim(), states.cols() * k, rng));
  return -eta * r.state_covariance.mean();
}

double predict_entropy_change(const InfluenceResult& r, std::span<const std::uint8_t> mask,
                              double eta) {
  if (static_cast<Eigen::Index>(mask.size()) != r.state_covariance.size()) {
    throw std::invalid_argument("predict_entropy_change: mask size mismatch");
  }
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      acc += r.state_covariance(static_cast<Eigen::Index>(i));
      ++count;
    }
  }
  return count == 0 ? 0.0 : -eta * acc / static_cast<double>(count);
}

double nearest_rank(std::span<const double> sorted, double pct) {
  if (sorted.empty()) throw std::invalid_argument("nearest_rank: empty list");
  const double n = static_cast<double>(sorted.size());
  const double exact = pct * n / 100.0;
  // Guard against p*n/100 landing a hair above an integer.
  auto rank = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

SelectionBounds percentile_bounds(std::span<const double> abs_values, double low_pct,
                                  double high_pct) {
  if (abs_values.empty()) throw std::invalid_argument("percentile_bounds: empty list");
  if (!(0.0 <= low_pct && low_pct <= high_pct && high_pct <= 100.0)) {
    throw std::invalid_argument("percentile_bounds: need 0 <= low <= high <= 100");
  }
  std::vector<double> sorted(abs_values.begin(), abs_values.end());
  std::sort(sorted.begin(), sorted.end());
  return {nearest_rank(sorted, low_pct), nearest_rank(sorted, high_pct), low_pct, high_pct};
}

std::vector<std::uint8_t> selection_mask(std::span<const double> c, const SelectionBounds& bounds) {
  std::vector<std::uint8_t> mask(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double a = std::abs(c[i]);
    mask[i] = (a >= bounds.lower && a <= bounds.upper) ? 1 : 0;
  }
  return mask;
}

nlohmann::json to_json(const InfluenceRecord& r) {
  return {{"sample_id", r.sample_id}, {"c", r.c},           {"abs_c", r.abs_c},
          {"retained", r.retained},   {"source", to_string(r.source)}, {"step", r.step}};
}

double masked_objective(std::span<const double> l, std::span<const std::uint8_t> mask, double eps) {
  if (l.size() != mask.size()) throw std::invalid_argument("masked_objective: size mismatch");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    if (mask[i]) {
      num += l[i];
      den += 1.0;
    }
  }
  return -num / (den + eps);
}

ActorLossResult masked_actor_loss(const Matrix& states, std::span<const std::uint8_t> mask,
                                  GaussianPolicy& policy, const TwinCritic& critic, double alpha,
                                  const Matrix& noise, double mask_eps) {
  const Eigen::Index n = states.cols();
  if (static_cast<Eigen::Index>(mask.size()) != n || noise.cols() != n) {
    throw std::invalid_argument("masked_actor_loss: mask/noise length must equal batch size");
  }
  ActorLossResult out;
  out.l.assign(static_cast<std::size_t>(n), 0.0);

  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (mask[static_cast<std::size_t>(i)]) keep.push_back(i);
  }
  out.retained = keep.size();
  if (keep.empty()) return out;

  const auto r = static_cast<Eigen::Index>(keep.size());
  Matrix s(states.rows(), r);
  Matrix eps(noise.rows(), r);
  for (Eigen::Index j = 0; j < r; ++j) {
    s.col(j) = states.col(keep[j]);
    eps.col(j) = noise.col(keep[j]);
  }

  const auto head = policy.head(s);
  const auto smp = GaussianPolicy::sample_from_head(head, eps);
  const Matrix x = TwinCritic::join(s, smp.actions);

  std::array<Mlp::Tape, 2> tapes;
  std::array<RowVector, 2> q;
  for (int t = 0; t < 2; ++t) q[t] = critic.online()[t].forward(x, tapes[t]).row(0);

  // d q_min / d action, routed through whichever twin is smaller per column.
  Matrix dq_da = Matrix::Zero(policy.action_dim(), r);
  for (int t = 0; t < 2; ++t) {
    Matrix sel(1, r);
    for (Eigen::Index j = 0; j < r; ++j) {
      const bool first_is_min = q[0](j) <= q[1](j);
      sel(0, j) = (t == 0) == first_is_min ? 1.0 : 0.0;
    }
    const Matrix dx = critic.online()[t].input_gradient(tapes[t], sel);
    dq_da += dx.bottomRows(policy.action_dim());
  }

  const RowVector qmin = q[0].cwiseMin(q[1]);
  const RowVector l = qmin - alpha * smp.log_prob;
  const double denom = static_cast<double>(r) + mask_eps;
  out.loss = -l.sum() / denom;
  for (Eigen::Index j = 0; j < r; ++j) out.l[static_cast<std::size_t>(keep[j])] = l(j);
  if (!std::isfinite(out.loss)) throw NonFiniteError("non-finite actor loss");

  const Eigen::ArrayXXd a = smp.actions.array();
  const Eigen::ArrayXXd one_minus_a2 = 1.0 - a.square();
  // d log pi / d u through the squash correction.
  const Eigen::ArrayXXd dlogp_du = 2.0 * a * one_minus_a2 / (one_minus_a2 + kSquashEps);
  const Eigen::ArrayXXd dl_du = dq_da.array() * one_minus_a2 - alpha * dlogp_du;
  const Eigen::ArrayXXd std_eps = head.log_std.array().exp() * eps.array();

  const double scale = -1.0 / denom;
  const Matrix d_mean = (scale * dl_du).matrix();
  const Matrix d_log_std = (scale * (dl_du * std_eps + alpha)).matrix();
  policy.backward(head, d_mean, d_log_std);
  return out;
}

// --- bandit --------------------------------------------------------------------

Vector SoftmaxBandit::probs() const {
  const double m = logits.maxCoeff();
  Vector p = (logits.array() - m).exp();
  return p / p.sum();
}

double SoftmaxBandit::entropy() const {
  const double m = logits.maxCoeff();
  const Eigen::ArrayXd shifted = logits.array() - m;
  const double log_z = std::log(shifted.exp().sum());
  const Eigen::ArrayXd logp = shifted - log_z;
  return -(logp.exp() * logp).sum();
}

double SoftmaxBandit::predicted_entropy_change(const Vector& advantages, double eta) const {
  if (advantages.size() != logits.size()) throw std::invalid_argument("advantage size mismatch");
  const Vector p = probs();
  const Eigen::ArrayXd logp = p.array().log();
  const Eigen::ArrayXd y = p.array() * advantages.array();
  const double ex = (p.array() * logp).sum();
  const double ey = (p.array() * y).sum();
  const double cov = (p.array() * (logp - ex) * (y - ey)).sum();
  return -eta * cov;
}

void SoftmaxBandit::logit_step(const Vector& advantages, double eta) {
  if (advantages.size() != logits.size()) throw std::invalid_argument("advantage size mismatch");
  logits += eta * (probs().array() * advantages.array()).matrix();
}

}  // namespace entsel
