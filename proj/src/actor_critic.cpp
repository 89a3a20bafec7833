#include "entsel/actor_critic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace entsel {

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

std::vector<int> chain(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}

void check_action_range(std::span<const double> action) {
  for (double a : action) {
    if (!(a >= -1.0 && a <= 1.0)) throw std::invalid_argument("action component outside [-1, 1]");
  }
}

}  // namespace

double squashed_log_prob(std::span<const double> noise, std::span<const double> log_std,
                         std::span<const double> pre_tanh) {
  double lp = 0.0;
  for (std::size_t i = 0; i < noise.size(); ++i) {
    const double t = std::tanh(pre_tanh[i]);
    lp += -0.5 * noise[i] * noise[i] - log_std[i] - kHalfLog2Pi - std::log(1.0 - t * t + kSquashEps);
  }
  return lp;
}

// --- policy ----------------------------------------------------------------

GaussianPolicy::GaussianPolicy(int state_dim, int action_dim, const NetShape& shape, Rng& init_rng)
    : trunk_("policy", chain(state_dim, shape.hidden, 2 * action_dim), Activation::kRelu,
             Activation::kIdentity, init_rng),
      action_dim_(action_dim) {}

GaussianPolicy::Head GaussianPolicy::head(const Matrix& states) const {
  Head h;
  const Matrix out = trunk_.forward(states, h.tape);
  h.mean = out.topRows(action_dim_);
  const Matrix raw = out.bottomRows(action_dim_);
  h.clamped = (raw.array() < kLogStdMin) || (raw.array() > kLogStdMax);
  h.log_std = raw.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  return h;
}

GaussianPolicy::Sample GaussianPolicy::sample_from_head(const Head& h, const Matrix& noise) {
  if (noise.rows() != h.mean.rows() || noise.cols() != h.mean.cols()) {
    throw std::invalid_argument("policy noise shape mismatch");
  }
  Sample s;
  s.pre_tanh = h.mean.array() + h.log_std.array().exp() * noise.array();
  s.actions = s.pre_tanh.array().tanh();
  s.log_prob = (-0.5 * noise.array().square() - h.log_std.array() - kHalfLog2Pi -
                (1.0 - s.actions.array().square() + kSquashEps).log())
                   .matrix()
                   .colwise()
                   .sum();
  return s;
}

GaussianPolicy::Sample GaussianPolicy::sample(const Matrix& states, const Matrix& noise) const {
  return sample_from_head(head(states), noise);
}

std::pair<Vector, double> GaussianPolicy::sample_action(std::span<const double> state,
                                                        Rng& rng) const {
  if (static_cast<int>(state.size()) != state_dim()) {
    throw std::invalid_argument("sample_action: state dimension mismatch");
  }
  Matrix s = Eigen::Map<const Vector>(state.data(), state_dim());
  const Matrix noise = gaussian_noise(action_dim_, 1, rng);
  auto out = sample(s, noise);
  return {out.actions.col(0), out.log_prob(0)};
}

RowVector GaussianPolicy::log_prob(const Matrix& states, const Matrix& actions) const {
  if (actions.rows() != action_dim_ || actions.cols() != states.cols()) {
    throw std::invalid_argument("log_prob: action shape mismatch");
  }
  if (!((actions.array() >= -1.0) && (actions.array() <= 1.0)).all()) {
    throw std::invalid_argument("log_prob: action component outside [-1, 1]");
  }
  const Head h = head(states);
  return log_prob_from_head(h.mean, h.log_std, actions);
}

RowVector GaussianPolicy::log_prob_from_head(const Matrix& mean, const Matrix& log_std,
                                             const Matrix& actions) {
  const Eigen::ArrayXXd a = actions.array().cwiseMax(-kActionClip).cwiseMin(kActionClip);
  const Eigen::ArrayXXd eps = (a.atanh() - mean.array()) / log_std.array().exp();
  return (-0.5 * eps.square() - log_std.array() - kHalfLog2Pi - (1.0 - a.square() + kSquashEps).log())
      .matrix()
      .colwise()
      .sum();
}

double GaussianPolicy::log_prob(std::span<const double> state, std::span<const double> action) const {
  if (static_cast<int>(state.size()) != state_dim() ||
      static_cast<int>(action.size()) != action_dim_) {
    throw std::invalid_argument("log_prob: dimension mismatch");
  }
  check_action_range(action);
  Matrix s = Eigen::Map<const Vector>(state.data(), state_dim());
  Matrix a = Eigen::Map<const Vector>(action.data(), action_dim_);
  return log_prob(s, a)(0);
}

Vector GaussianPolicy::deterministic_action(std::span<const double> state) const {
  if (static_cast<int>(state.size()) != state_dim()) {
    throw std::invalid_argument("deterministic_action: state dimension mismatch");
  }
  Matrix s = Eigen::Map<const Vector>(state.data(), state_dim());
  return head(s).mean.col(0).array().tanh();
}

void GaussianPolicy::backward(const Head& h, const Matrix& d_mean, const Matrix& d_log_std) {
  Matrix grad(2 * action_dim_, h.mean.cols());
  grad.topRows(action_dim_) = d_mean;
  grad.bottomRows(action_dim_) = h.clamped.select(0.0, d_log_std);
  trunk_.backward(h.tape, grad);
}

// --- critic ----------------------------------------------------------------

TwinCritic::TwinCritic(int state_dim, int action_dim, const NetShape& shape, Rng& init_rng)
    : state_dim_(state_dim), action_dim_(action_dim) {
  const auto dims = chain(state_dim + action_dim, shape.hidden, 1);
  for (int i = 0; i < 2; ++i) {
    const std::string name = "critic.q" + std::to_string(i + 1);
    online_[i] = Mlp(name, dims, Activation::kRelu, Activation::kIdentity, init_rng);
    target_[i] = online_[i];
    for (auto* p : target_[i].params()) p->name.replace(0, 7, "critic.target_");
  }
}

Matrix TwinCritic::join(const Matrix& states, const Matrix& actions) {
  if (states.cols() != actions.cols()) throw std::invalid_argument("state/action count mismatch");
  Matrix x(states.rows() + actions.rows(), states.cols());
  x.topRows(states.rows()) = states;
  x.bottomRows(actions.rows()) = actions;
  return x;
}

std::array<RowVector, 2> TwinCritic::q_values(const Matrix& states, const Matrix& actions) const {
  const Matrix x = join(states, actions);
  return {online_[0].forward(x).row(0), online_[1].forward(x).row(0)};
}

RowVector TwinCritic::q_min(const Matrix& states, const Matrix& actions) const {
  const auto q = q_values(states, actions);
  return q[0].cwiseMin(q[1]);
}

RowVector TwinCritic::q_min_target(const Matrix& states, const Matrix& actions) const {
  const Matrix x = join(states, actions);
  return target_[0].forward(x).row(0).cwiseMin(target_[1].forward(x).row(0));
}

double TwinCritic::q_min(std::span<const double> state, std::span<const double> action) const {
  if (static_cast<int>(state.size()) != state_dim_ || static_cast<int>(action.size()) != action_dim_) {
    throw std::invalid_argument("q_min: dimension mismatch");
  }
  return q_min(Matrix(Eigen::Map<const Vector>(state.data(), state_dim_)),
               Matrix(Eigen::Map<const Vector>(action.data(), action_dim_)))(0);
}

double TwinCritic::q_min_target(std::span<const double> state,
                                std::span<const double> action) const {
  if (static_cast<int>(state.size()) != state_dim_ || static_cast<int>(action.size()) != action_dim_) {
    throw std::invalid_argument("q_min_target: dimension mismatch");
  }
  return q_min_target(Matrix(Eigen::Map<const Vector>(state.data(), state_dim_)),
                      Matrix(Eigen::Map<const Vector>(action.data(), action_dim_)))(0);
}

void TwinCritic::polyak_update(double rho) {
  if (rho < 0.0 || rho > 1.0) throw std::invalid_argument("polyak coefficient must be in [0, 1]");
  for (int i = 0; i < 2; ++i) {
    auto dst = target_[i].params();
    auto src = online_[i].params();
    for (std::size_t p = 0; p < dst.size(); ++p) {
      auto& tv = dst[p]->values;
      const auto& ov = src[p]->values;
      for (std::size_t j = 0; j < tv.size(); ++j) tv[j] = rho * tv[j] + (1.0 - rho) * ov[j];
    }
  }
}

std::vector<ParamTensor*> TwinCritic::params() {
  auto out = online_[0].params();
  auto second = online_[1].params();
  out.insert(out.end(), second.begin(), second.end());
  return out;
}

// --- temperature -------------------------------------------------------------

double Temperature::alpha() const noexcept { return std::exp(log_alpha); }

void Temperature::update(double entropy_estimate) {
  if (!std::isfinite(entropy_estimate)) throw NonFiniteError("non-finite entropy estimate");
  log_alpha -= lr_alpha * (entropy_estimate - target_entropy);
}

// --- losses ----------------------------------------------------------------

RowVector critic_targets(const Batch& batch, const GaussianPolicy& policy, const TwinCritic& critic,
                         double alpha, double gamma, const Matrix& next_noise) {
  if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("gamma must be in [0, 1)");
  const auto next = policy.sample(batch.next_states, next_noise);
  const RowVector soft_next =
      critic.q_min_target(batch.next_states, next.actions) - alpha * next.log_prob;
  RowVector y(batch.size());
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    // Terminal rows never read the bootstrap term, so a non-finite value there cannot leak.
    y(i) = batch.dones(i) > 0.5 ? batch.rewards(i) : batch.rewards(i) + gamma * soft_next(i);
  }
  return y;
}

double critic_target(double reward, bool done, std::span<const double> next_state,
                     const GaussianPolicy& policy, const TwinCritic& critic, double alpha,
                     double gamma, Rng& rng) {
  Transition t;
  t.state = std::vector<double>(next_state.begin(), next_state.end());
  t.next_state = t.state;
  t.action.assign(static_cast<std::size_t>(policy.action_dim()), 0.0);
  t.reward = reward;
  t.done = done;
  const Batch b = Batch::from({t});
  const Matrix noise = gaussian_noise(policy.action_dim(), 1, rng);
  return critic_targets(b, policy, critic, alpha, gamma, noise)(0);
}

double critic_update(TwinCritic& critic, const Batch& batch, const RowVector& targets,
                     Adam& optimizer) {
  if (batch.size() == 0) throw std::invalid_argument("critic_update: empty batch");
  const Matrix x = TwinCritic::join(batch.states, batch.actions);
  const double n = static_cast<double>(batch.size());
  std::array<Mlp::Tape, 2> tapes;
  std::array<RowVector, 2> residual;
  double loss = 0.0;
  for (int i = 0; i < 2; ++i) {
    residual[i] = critic.online()[i].forward(x, tapes[i]).row(0) - targets;
    loss += 0.5 * residual[i].squaredNorm() / n;
  }
  if (!std::isfinite(loss)) throw NonFiniteError("non-finite critic loss");
  for (int i = 0; i < 2; ++i) {
    critic.online()[i].backward(tapes[i], residual[i] / n);
  }
  auto params = critic.params();
  optimizer.step(params);
  return loss;
}

double critic_update(TwinCritic& critic, const Batch& batch, const GaussianPolicy& policy,
                     double alpha, double gamma, Adam& optimizer, Rng& rng) {
  const Matrix noise = gaussian_noise(policy.action_dim(), batch.size(), rng);
  return critic_update(critic, batch, critic_targets(batch, policy, critic, alpha, gamma, noise),
                       optimizer);
}

Matrix repeat_columns(const Matrix& m, int k) {
  Matrix out(m.rows(), m.cols() * k);
  for (Eigen::Index i = 0; i < m.cols(); ++i) {
    for (int j = 0; j < k; ++j) out.col(i * k + j) = m.col(i);
  }
  return out;
}

Matrix gaussian_noise(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.normal();
  }
  return m;
}

double policy_entropy_estimate(const GaussianPolicy& policy, const Matrix& states, int k,
                               const Matrix& noise) {
  if (states.cols() == 0) throw std::invalid_argument("entropy estimate needs at least one state");
  if (k < 2) throw std::invalid_argument("entropy estimate needs K >= 2");
  const auto s = policy.sample(repeat_columns(states, k), noise);
  return -s.log_prob.mean();
}

double policy_entropy_estimate(const GaussianPolicy& policy, const Matrix& states, int k, Rng& rng) {
  if (states.cols() == 0) throw std::invalid_argument("entropy estimate needs at least one state");
  return policy_entropy_estimate(policy, states, k,
                                 gaussian_noise(policy.action_dim(), states.cols() * k, rng));
}

}  // namespace entsel
