#include <doctest.h>

#include <cmath>
#include <numbers>

#include "entsel/actor_critic.hpp"
#include "oracles.hpp"

using namespace entsel;

namespace {

/// Zeroes the last layer's weights so the head outputs exactly `bias`.
void pin_output(Mlp& net, const std::vector<double>& bias) {
  auto& last = net.layers().back();
  std::fill(last.weight.values.begin(), last.weight.values.end(), 0.0);
  last.bias.values.assign(bias.begin(), bias.end());
}

GaussianPolicy make_policy(int s, int a, std::uint64_t seed, std::vector<int> hidden = {8, 8}) {
  Rng rng(seed);
  return GaussianPolicy(s, a, NetShape{hidden}, rng);
}

TwinCritic make_critic(int s, int a, std::uint64_t seed) {
  Rng rng(seed);
  return TwinCritic(s, a, NetShape{{8, 8}}, rng);
}

Batch one_transition(std::vector<double> s, std::vector<double> a, double r, std::vector<double> s2,
                     bool done) {
  Transition t;
  t.state = std::move(s);
  t.action = std::move(a);
  t.reward = r;
  t.next_state = std::move(s2);
  t.done = done;
  return Batch::from({t});
}

const double kLog2Pi = std::log(2 * std::numbers::pi);

}  // namespace

TEST_CASE("centered draw at mean 0 std 1 has log_prob -0.5 log 2pi") {
  GaussianPolicy p = make_policy(2, 1, 1);
  pin_output(p.trunk(), {0.0, 0.0});
  Matrix noise(1, 1);
  noise << 0.0;
  const auto s = p.sample(Matrix::Zero(2, 1), noise);
  CHECK(s.actions(0, 0) == 0.0);
  // The squash correction contributes -log(1 + 1e-6) at u = 0.
  CHECK(s.log_prob(0) == doctest::Approx(-0.5 * kLog2Pi - std::log1p(kSquashEps)).epsilon(1e-12));
}

TEST_CASE("log_prob at mean 0.5, std 0.3, u 0.8 matches hand evaluation") {
  GaussianPolicy p = make_policy(2, 1, 2);
  pin_output(p.trunk(), {0.5, std::log(0.3)});
  Matrix noise(1, 1);
  noise << (0.8 - 0.5) / 0.3;
  const auto s = p.sample(Matrix::Zero(2, 1), noise);
  const double a = std::tanh(0.8);
  CHECK(s.actions(0, 0) == doctest::Approx(a).epsilon(1e-12));
  // N(0.8; 0.5, 0.3) in log form, minus log(1 - tanh(0.8)^2 + 1e-6).
  const double hand = -0.5 * 1.0 - std::log(0.3) - 0.5 * kLog2Pi - std::log(1 - a * a + 1e-6);
  CHECK(s.log_prob(0) == doctest::Approx(hand).epsilon(1e-10));
  CHECK(s.log_prob(0) == doctest::Approx(oracle::squashed_gaussian_log_prob(0.5, 0.3, a)).epsilon(1e-9));
  const std::vector<double> state{0, 0}, act{a};
  CHECK(p.log_prob(state, act) == doctest::Approx(hand).epsilon(1e-9));
}

TEST_CASE("tiny std collapses onto tanh(mean)") {
  GaussianPolicy p = make_policy(2, 1, 3);
  pin_output(p.trunk(), {0.7, -50.0});  // clamped to the log_std floor
  Rng rng(4);
  const std::vector<double> state{0.1, 0.2};
  for (int i = 0; i < 50; ++i) {
    const auto [a, lp] = p.sample_action(state, rng);
    CHECK(std::abs(a(0) - std::tanh(0.7)) < 0.03);
  }
}

TEST_CASE("log_prob round trips sampled actions") {
  GaussianPolicy p = make_policy(3, 2, 5);
  Rng rng(6);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::vector<double> s{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const auto [a, lp] = p.sample_action(s, rng);
    worst = std::max(worst, std::abs(p.log_prob(s, std::span<const double>(a.data(), 2)) - lp));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("density peaks at tanh(mean) for small std") {
  GaussianPolicy p = make_policy(2, 1, 7);
  pin_output(p.trunk(), {0.2, std::log(0.05)});
  const std::vector<double> s{0, 0};
  const double centre = std::tanh(0.2);
  const double at = p.log_prob(s, std::vector<double>{centre});
  CHECK(at > p.log_prob(s, std::vector<double>{centre + 0.1}));
  CHECK(at > p.log_prob(s, std::vector<double>{centre - 0.1}));
}

TEST_CASE("log_prob rejects actions outside [-1, 1]") {
  GaussianPolicy p = make_policy(2, 1, 8);
  const std::vector<double> s{0, 0};
  CHECK_THROWS_AS(p.log_prob(s, std::vector<double>{1.5}), std::invalid_argument);
  CHECK(std::isfinite(p.log_prob(s, std::vector<double>{1.0})));
}

TEST_CASE("q_min takes the smaller twin") {
  TwinCritic c = make_critic(2, 1, 9);
  const std::vector<double> s{0.3, 0.4}, a{0.1};
  pin_output(c.online()[0], {1.0});
  pin_output(c.online()[1], {3.0});
  CHECK(c.q_min(s, a) == 1.0);
  pin_output(c.online()[1], {1.0});
  CHECK(c.q_min(s, a) == 1.0);
}

TEST_CASE("q_min of random twins equals min of separate forwards") {
  TwinCritic c = make_critic(3, 2, 10);
  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    const std::vector<double> s{rng.uniform(), rng.uniform(), rng.uniform()};
    const std::vector<double> a{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    std::vector<double> x = s;
    x.insert(x.end(), a.begin(), a.end());
    const double q1 = oracle::mlp_forward(c.online()[0], x)[0];
    const double q2 = oracle::mlp_forward(c.online()[1], x)[0];
    CHECK(c.q_min(s, a) == doctest::Approx(std::min(q1, q2)).epsilon(1e-12));
  }
}

TEST_CASE("terminal and myopic targets equal the reward") {
  GaussianPolicy p = make_policy(2, 1, 12);
  TwinCritic c = make_critic(2, 1, 13);
  Rng rng(14);
  const std::vector<double> s2{0.5, 0.5};
  CHECK(critic_target(0.7, true, s2, p, c, 0.2, 0.99, rng) == 0.7);
  CHECK(critic_target(0.7, false, s2, p, c, 0.2, 0.0, rng) == 0.7);
  CHECK_THROWS_AS(critic_target(0.7, false, s2, p, c, 0.2, 1.0, rng), std::invalid_argument);
}

TEST_CASE("bootstrap target matches hand evaluation with pinned noise") {
  GaussianPolicy p = make_policy(2, 1, 15);
  TwinCritic c = make_critic(2, 1, 16);
  const Batch b = one_transition({0, 0}, {0}, 1.0, {0.2, -0.4}, false);
  Matrix noise(1, 1);
  noise << 0.37;
  const double alpha = 0.2;
  const double y = critic_targets(b, p, c, alpha, 0.99, noise)(0);

  const auto head = oracle::mlp_forward(p.trunk(), {0.2, -0.4});
  const double log_std = std::clamp(head[1], kLogStdMin, kLogStdMax);
  const double u = head[0] + std::exp(log_std) * 0.37;
  const double a = std::tanh(u);
  const double lp = -0.5 * 0.37 * 0.37 - log_std - 0.5 * kLog2Pi - std::log(1 - a * a + 1e-6);
  const double q = std::min(oracle::mlp_forward(c.target()[0], {0.2, -0.4, a})[0],
                            oracle::mlp_forward(c.target()[1], {0.2, -0.4, a})[0]);
  CHECK(y == doctest::Approx(1.0 + 0.99 * (q - alpha * lp)).epsilon(1e-12));
}

TEST_CASE("critic at its fixed point has zero loss and does not move") {
  TwinCritic c = make_critic(2, 1, 17);
  c.online()[1] = c.online()[0];
  const Batch b = one_transition({0.1, 0.2}, {0.3}, 0, {0, 0}, true);
  const RowVector y = c.q_values(b.states, b.actions)[0];
  const auto before = c.online()[0].layers()[0].weight.values;
  Adam opt;
  CHECK(critic_update(c, b, y, opt) == 0.0);
  CHECK(c.online()[0].layers()[0].weight.values == before);
}

TEST_CASE("single-transition critic loss matches hand value") {
  TwinCritic c = make_critic(2, 1, 18);
  const Batch b = one_transition({0.1, 0.2}, {0.3}, 0, {0, 0}, true);
  const auto q = c.q_values(b.states, b.actions);
  RowVector y(1);
  y << 0.75;
  Adam opt;
  const double loss = critic_update(c, b, y, opt);
  CHECK(loss == doctest::Approx(0.5 * (std::pow(q[0](0) - 0.75, 2) + std::pow(q[1](0) - 0.75, 2))).epsilon(1e-12));
}

TEST_CASE("critic loss falls on a frozen batch") {
  TwinCritic c = make_critic(3, 2, 19);
  Rng rng(20);
  std::vector<Transition> ts;
  for (int i = 0; i < 32; ++i) {
    Transition t;
    t.state = {rng.uniform(), rng.uniform(), rng.uniform()};
    t.action = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    t.next_state = t.state;
    ts.push_back(t);
  }
  const Batch b = Batch::from(ts);
  RowVector y(32);
  for (int i = 0; i < 32; ++i) y(i) = std::sin(3 * b.states(0, i)) + b.actions(1, i);
  Adam opt(AdamConfig{1e-2});
  const double first = critic_update(c, b, y, opt);
  double last = first;
  for (int i = 0; i < 99; ++i) last = critic_update(c, b, y, opt);
  CHECK(last < 0.5 * first);
}

TEST_CASE("polyak averaging") {
  TwinCritic c = make_critic(2, 1, 21);
  auto& t = c.target()[0].layers()[0].weight.values;
  auto& o = c.online()[0].layers()[0].weight.values;
  t[0] = 1.0;
  o[0] = 0.0;
  c.polyak_update(1.0);
  CHECK(t[0] == 1.0);
  c.polyak_update(0.99);
  CHECK(t[0] == doctest::Approx(0.99).epsilon(1e-15));
  c.polyak_update(0.0);
  CHECK(c.target()[0].layers()[0].weight.values == c.online()[0].layers()[0].weight.values);
  CHECK(c.target()[1].layers()[1].bias.values == c.online()[1].layers()[1].bias.values);
  CHECK_THROWS_AS(c.polyak_update(1.5), std::invalid_argument);
  CHECK(c.target()[0].layers()[0].weight.name == "critic.target_q1.l0.weight");
}

TEST_CASE("temperature update") {
  Temperature t{0.3, 1.0, 0.1};
  t.update(1.0);
  CHECK(t.log_alpha == 0.3);
  t.update(2.0);
  CHECK(t.log_alpha == doctest::Approx(0.2).epsilon(1e-15));
  const double a = t.alpha();
  t.update(0.0);
  CHECK(t.alpha() > a);
  CHECK_THROWS_AS(t.update(std::nan("")), NonFiniteError);
}

TEST_CASE("entropy estimate: narrow policy below wide policy") {
  GaussianPolicy narrow = make_policy(2, 1, 22);
  GaussianPolicy wide = narrow;
  pin_output(narrow.trunk(), {0.0, kLogStdMin});
  pin_output(wide.trunk(), {0.0, 0.0});
  Rng rng(23);
  const Matrix states = Matrix::Random(2, 16);
  const Matrix noise = gaussian_noise(1, 16 * 8, rng);
  CHECK(policy_entropy_estimate(narrow, states, 8, noise) < policy_entropy_estimate(wide, states, 8, noise));
}

TEST_CASE("entropy estimate on one state is the negated mean log_prob") {
  GaussianPolicy p = make_policy(2, 2, 24);
  Matrix state(2, 1);
  state << 0.3, -0.1;
  Matrix noise(2, 3);
  noise << 0.1, -1.2, 0.5, 0.7, 0.0, -0.3;
  const auto head = oracle::mlp_forward(p.trunk(), {0.3, -0.1});
  double sum = 0;
  for (int k = 0; k < 3; ++k) {
    for (int d = 0; d < 2; ++d) {
      const double ls = std::clamp(head[2 + d], kLogStdMin, kLogStdMax);
      const double a = std::tanh(head[d] + std::exp(ls) * noise(d, k));
      sum += oracle::squashed_gaussian_log_prob(head[d], std::exp(ls), a);
    }
  }
  CHECK(policy_entropy_estimate(p, state, 3, noise) == doctest::Approx(-sum / 3).epsilon(1e-8));
}

TEST_CASE("entropy estimate variance shrinks roughly as 1/K") {
  GaussianPolicy p = make_policy(2, 1, 25);
  pin_output(p.trunk(), {0.3, std::log(0.5)});
  const Matrix state = Matrix::Constant(2, 1, 0.2);
  Rng rng(26);
  auto variance = [&](int k) {
    std::vector<double> v;
    for (int i = 0; i < 400; ++i) v.push_back(policy_entropy_estimate(p, state, k, rng));
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
  };
  const double v8 = variance(8);
  const double v16 = variance(16);
  CHECK(v16 < 0.7 * v8);
  CHECK(v16 > 0.3 * v8);
}

TEST_CASE("clamped log_std entries pass no gradient") {
  GaussianPolicy p = make_policy(2, 1, 27);
  pin_output(p.trunk(), {0.0, 10.0});
  const auto head = p.head(Matrix::Zero(2, 1));
  CHECK(head.clamped(0, 0));
  p.trunk().zero_grad();
  p.backward(head, Matrix::Zero(1, 1), Matrix::Ones(1, 1));
  for (const auto* t : p.params()) {
    for (double g : t->grad) CHECK(g == 0.0);
  }
}
