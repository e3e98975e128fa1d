#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "lcrl/bcq.hpp"
#include "lcrl/ppo.hpp"

using namespace lcrl;
using ag::Tensor;

namespace {

constexpr int kStates = 8;

ObsTensor state_obs(int s) {
  ObsTensor o;
  o.data[static_cast<std::size_t>(s)] = 1.0f;
  return o;
}

// Tables of logits and Q over one-hot states. Actions 2..5 carry fixed
// offsets so a two-action problem fits the six-action interface.
class TabularPolicy : public ActorCritic {
 public:
  explicit TabularPolicy(int actions = 2) : actions_(actions) {
    set_.add("logits", Tensor::zeros({kNumActions, kStates}, true));
    set_.add("q", Tensor::zeros({kNumActions, kStates}, true));
  }
  PolicyOutput forward(const Tensor& obs) override {
    const int n = obs.dim(0);
    std::vector<float> x(static_cast<std::size_t>(n * kStates));
    for (int i = 0; i < n; ++i)
      for (int s = 0; s < kStates; ++s)
        x[static_cast<std::size_t>(i * kStates + s)] = obs.values()[static_cast<std::size_t>(i) * kObsSize + s];
    const Tensor xt = Tensor::from({n, kStates}, x);
    std::vector<float> lb(kNumActions, 0.0f), qb(kNumActions, 0.0f);
    for (int a = actions_; a < kNumActions; ++a) lb[static_cast<std::size_t>(a)] = -20.0f, qb[static_cast<std::size_t>(a)] = -10.0f;
    PolicyOutput out;
    out.logits = ag::dense(xt, set_.get("logits"), Tensor::from({kNumActions}, lb));
    out.q = ag::dense(xt, set_.get("q"), Tensor::from({kNumActions}, qb));
    return out;
  }
  std::vector<ag::ParameterSet*> parameter_sets() override { return {&set_}; }
  float q(int s, int a) { return set_.get("q").values()[static_cast<std::size_t>(a * kStates + s)]; }
  float& q_ref(int s, int a) { return set_.get("q").mutable_values()[static_cast<std::size_t>(a * kStates + s)]; }
  std::vector<float> probs(int s) {
    ag::NoGradGuard ng;
    const ObsTensor o = state_obs(s);
    const auto out = forward(Tensor::from({1, 7, 7, 7}, std::vector<float>(o.data.begin(), o.data.end())));
    std::vector<float> p(kNumActions);
    double z = 0.0;
    for (int a = 0; a < kNumActions; ++a) z += std::exp(out.logits.values()[static_cast<std::size_t>(a)]);
    for (int a = 0; a < kNumActions; ++a)
      p[static_cast<std::size_t>(a)] = static_cast<float>(std::exp(out.logits.values()[static_cast<std::size_t>(a)]) / z);
    return p;
  }

 private:
  int actions_;
  ag::ParameterSet set_;
};

struct ToyMDP {
  int next[kStates][2];
  float reward[kStates][2];
  bool terminal[kStates][2];
};

ToyMDP make_mdp() {
  ToyMDP m{};
  Rng rng(99);
  for (int s = 0; s < kStates; ++s) {
    m.next[s][0] = (s + 1) % kStates;
    m.next[s][1] = (3 * s + 2) % kStates;
    for (int a = 0; a < 2; ++a) {
      m.reward[s][a] = static_cast<float>(rng.uniform());
      m.terminal[s][a] = (s == 5 && a == 0) || (s == 2 && a == 1);
    }
  }
  return m;
}

std::array<std::array<double, 2>, kStates> value_iteration(const ToyMDP& m, double gamma) {
  std::array<std::array<double, 2>, kStates> q{};
  for (int it = 0; it < 5000; ++it) {
    auto next = q;
    for (int s = 0; s < kStates; ++s)
      for (int a = 0; a < 2; ++a) {
        const int sp = m.next[s][a];
        next[s][a] = m.reward[s][a] + (m.terminal[s][a] ? 0.0 : gamma * std::max(q[sp][0], q[sp][1]));
      }
    q = next;
  }
  return q;
}

TransitionBuffer toy_buffer(const ToyMDP& m, bool action_one) {
  TransitionBuffer b(TaskDescriptor::from_indices(1, 0, 0), 64);
  for (int s = 0; s < kStates; ++s)
    for (int a = 0; a < (action_one ? 2 : 1); ++a)
      b.push(state_obs(s), a, m.reward[s][a], state_obs(m.next[s][a]), m.terminal[s][a]);
  return b;
}

std::vector<std::size_t> all_indices(const TransitionBuffer& b) {
  std::vector<std::size_t> idx(b.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

}  // namespace

TEST_CASE("constrained greedy action") {
  const std::vector<float> q{1, 5, 2}, probs{0.5f, 0.05f, 0.45f};
  CHECK(constrained_greedy_action(q, probs, 0.3f) == 2);
  CHECK(constrained_greedy_action(q, probs, 0.0f) == 1);
  const std::vector<float> onehot{0, 0, 1};
  CHECK(constrained_greedy_action(q, onehot, 0.3f) == 2);
  const std::vector<float> mode_only{0.9f, 0.05f, 0.05f};
  CHECK(constrained_greedy_action(q, mode_only, 0.99f) == 0);
  // Absolute form: 0.45 > 0.4 keeps action 2, 0.5 keeps 0.
  CHECK(constrained_greedy_action(q, probs, 0.4f, false) == 2);
  CHECK(constrained_greedy_action(q, probs, 0.47f, false) == 0);
  const std::vector<float> tied{3, 3, 1};
  const std::vector<float> flat{1.0f / 3, 1.0f / 3, 1.0f / 3};
  CHECK(constrained_greedy_action(tied, flat, 0.3f) == 0);
}

TEST_CASE("boltzmann sampling") {
  Rng rng(1);
  const std::vector<float> uniform(6, 0.25f);
  std::vector<int> counts(6, 0);
  for (int i = 0; i < 10000; ++i) ++counts[static_cast<std::size_t>(boltzmann_sample(uniform, 0.1, rng))];
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - 10000.0 / 6) * (c - 10000.0 / 6) / (10000.0 / 6);
  // 5 degrees of freedom, 0.999 quantile 20.5.
  CHECK(chi2 < 20.5);

  const double t = 0.1;
  const std::vector<float> two{0.0f, static_cast<float>(t * std::log(2.0))};
  int ones = 0;
  const int draws = 30000;
  for (int i = 0; i < draws; ++i) ones += boltzmann_sample(two, t, rng);
  const double sd = std::sqrt(2.0 / 9.0 / draws);
  CHECK(std::abs(ones / static_cast<double>(draws) - 2.0 / 3.0) < 4 * sd);

  const std::vector<float> q{0.1f, 0.5f, 0.4f};
  for (int i = 0; i < 1000; ++i) CHECK(boltzmann_sample(q, 1e-4, rng) == 1);
  CHECK_THROWS_AS(boltzmann_sample(q, 0.0, rng), ContractViolation);
}

TEST_CASE("behavior cloning") {
  const ToyMDP m = make_mdp();
  ag::OptimizerConfig opt;
  opt.lr = 0.05f;
  SUBCASE("a repeated action becomes near-certain") {
    TabularPolicy p(kNumActions);
    const TransitionBuffer b = toy_buffer(m, false);
    const auto batch = b.gather(all_indices(b));
    for (int i = 0; i < 300; ++i) CHECK(behavior_cloning_update(p, batch, opt) >= 0.0);
    for (int s = 0; s < kStates; ++s) CHECK(p.probs(s)[0] > 0.99f);
  }
  SUBCASE("uniform data gives a uniform actor") {
    TabularPolicy p(kNumActions);
    Rng rng(2);
    for (float& w : p.parameter_sets()[0]->get("logits").mutable_values()) w = static_cast<float>(rng.normal());
    TransitionBuffer b(TaskDescriptor::from_indices(1, 0, 0), 64);
    for (int a = 0; a < kNumActions; ++a)
      for (int rep = 0; rep < 3; ++rep) b.push(state_obs(0), a, 0.0f, state_obs(0), false);
    const auto batch = b.gather(all_indices(b));
    for (int i = 0; i < 1000; ++i) behavior_cloning_update(p, batch, opt);
    for (float pr : p.probs(0)) CHECK(pr == doctest::Approx(1.0 / 6).epsilon(1e-2));
  }
}

TEST_CASE("BCQ with complete data reaches the value-iteration fixed point") {
  const ToyMDP m = make_mdp();
  const double gamma = 0.9;
  const auto oracle = value_iteration(m, gamma);
  TabularPolicy current, target;
  BCQConfig cfg;
  cfg.tau = 0.0f;
  cfg.gamma = gamma;
  cfg.target_update_period = 20;
  cfg.optimizer.kind = ag::OptimizerConfig::Kind::sgd;
  cfg.optimizer.lr = 4.0f;  // halves the regression error on every full-batch step
  BCQTrainer trainer(current, target, cfg);
  const TransitionBuffer b = toy_buffer(m, true);
  const auto batch = b.gather(all_indices(b));
  for (int i = 0; i < 4000; ++i) trainer.update(batch);
  double worst = 0.0;
  for (int s = 0; s < kStates; ++s)
    for (int a = 0; a < 2; ++a) worst = std::max(worst, std::abs(current.q(s, a) - oracle[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)]));
  CHECK(worst < 1e-3);
}

TEST_CASE("BCQ never bootstraps through an action missing from the data") {
  const ToyMDP m = make_mdp();
  TabularPolicy current, target;
  for (int s = 0; s < kStates; ++s) current.q_ref(s, 1) = 5.0f;  // tempting but unsupported
  BCQConfig cfg;
  cfg.tau = 0.9f;
  cfg.gamma = 0.9;
  cfg.target_update_period = 10;
  cfg.actor_warmup_updates = 50;
  cfg.optimizer.lr = 0.05f;
  BCQTrainer trainer(current, target, cfg);
  const TransitionBuffer b = toy_buffer(m, false);
  const auto batch = b.gather(all_indices(b));
  bool gap_seen = false;
  for (int i = 0; i < 1000; ++i) {
    const BCQLosses res = trainer.update(batch);
    for (std::size_t k = 0; k < res.next_actions.size(); ++k) {
      REQUIRE(res.next_actions[k] != 1);
      CHECK(res.targets[k] <= res.unconstrained[k]);
      gap_seen = gap_seen || res.targets[k] < res.unconstrained[k] - 1.0f;
    }
  }
  CHECK(gap_seen);
  for (int s = 0; s < kStates; ++s) CHECK(current.q(s, 1) == 5.0f);
}

TEST_CASE("terminal targets and the gamma = 0 regression") {
  TabularPolicy current, target;
  TransitionBuffer b(TaskDescriptor::from_indices(1, 0, 0), 16);
  b.push(state_obs(0), 0, 0.2f, state_obs(1), false);
  b.push(state_obs(0), 0, 0.6f, state_obs(2), false);
  b.push(state_obs(3), 1, 0.7f, state_obs(4), true);
  BCQConfig cfg;
  cfg.gamma = 0.0;
  cfg.optimizer.kind = ag::OptimizerConfig::Kind::sgd;
  cfg.optimizer.lr = 1.0f;
  BCQTrainer trainer(current, target, cfg);
  const auto batch = b.gather(all_indices(b));
  const BCQLosses first = trainer.update(batch);
  CHECK(first.targets[2] == 0.7f);
  CHECK(first.next_actions[2] == -1);
  for (int i = 0; i < 500; ++i) trainer.update(batch);
  CHECK(current.q(0, 0) == doctest::Approx(0.4).epsilon(1e-4));
  CHECK(current.q(3, 1) == doctest::Approx(0.7).epsilon(1e-4));
}

TEST_CASE("constrained targets stay below unconstrained ones on gridworld data") {
  Rng rng(3);
  ModuleLibrary lib(ArchitectureConfig{}, {1, 1, 1}, rng), tlib(ArchitectureConfig{}, {1, 1, 1}, rng);
  AssembledPolicy policy = AssembledPolicy::assemble(lib, {{0, 0, 0}}, false);
  AssembledPolicy target = AssembledPolicy::assemble(tlib, {{0, 0, 0}}, false);
  const TaskDescriptor task = TaskDescriptor::from_indices(2, 1, 0);
  EnvRunner runner(task, 4);
  TransitionBuffer buffer(task, 2000);
  collect_rollouts(runner, policy, 512, &buffer);
  BCQConfig cfg;
  cfg.minibatch = 64;
  cfg.target_update_period = 5;
  BCQTrainer trainer(policy, target, cfg);
  for (int i = 0; i < 20; ++i) {
    const BCQLosses res = trainer.update(buffer.sample(64, rng));
    for (std::size_t k = 0; k < res.targets.size(); ++k) CHECK(res.targets[k] <= res.unconstrained[k]);
  }
  trainer.sync_target();
  CHECK(tlib.module(2, 0).checksum() == lib.module(2, 0).checksum());
}

TEST_CASE("transition buffer") {
  const TaskDescriptor task = TaskDescriptor::from_indices(0, 3, 1);
  TransitionBuffer b(task, 5);
  for (int i = 0; i < 8; ++i) b.push(state_obs(i % kStates), i % kNumActions, static_cast<float>(i), state_obs((i + 1) % kStates), i % 3 == 0);
  CHECK(b.size() == 5);
  CHECK(b.total_pushed() == 8);
  for (std::size_t i = 0; i < 5; ++i) CHECK(b.reward_at(i) == static_cast<float>(i + 3));
  const std::vector<std::size_t> idx{4, 0};
  const auto batch = b.gather(idx);
  CHECK(batch.rewards == std::vector<float>{7.0f, 3.0f});
  CHECK(batch.actions == std::vector<int>{1, 3});
  CHECK(batch.obs[7] == 1.0f);

  const auto path = (std::filesystem::temp_directory_path() / "lcrl_buffer_test.bin").string();
  b.save(path);
  const TransitionBuffer back = TransitionBuffer::load(path);
  CHECK(back == b);
  CHECK(back.total_pushed() == 8);
  CHECK(back.task() == task);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 10);
  CHECK_THROWS(TransitionBuffer::load(path));
  std::filesystem::remove(path);

  ObsTensor bad;
  bad.data[0] = 0.5f;
  CHECK_THROWS_AS(b.push(bad, 0, 0.0f, bad, false), ContractViolation);
  CHECK_THROWS_AS(b.push(state_obs(0), 6, 0.0f, state_obs(0), false), ContractViolation);
}

TEST_CASE("buffer sampling is uniform") {
  TransitionBuffer b(TaskDescriptor::from_indices(1, 1, 1), 10);
  for (int i = 0; i < 10; ++i) b.push(state_obs(0), 0, static_cast<float>(i), state_obs(0), false);
  Rng rng(5);
  std::vector<int> counts(10, 0);
  const auto batch = b.sample(20000, rng);
  for (float r : batch.rewards) ++counts[static_cast<std::size_t>(r)];
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - 2000.0) * (c - 2000.0) / 2000.0;
  // 9 degrees of freedom, 0.999 quantile 27.9.
  CHECK(chi2 < 27.9);
}

TEST_CASE("multi-task consolidation schedule") {
  const ToyMDP m = make_mdp();
  TabularPolicy c1, t1, c2, t2;
  const TransitionBuffer b1 = toy_buffer(m, true), b2 = toy_buffer(m, false);
  const BCQTaskSlot slots[] = {{&c1, &t1, &b1}, {&c2, &t2, &b2}};
  BCQConfig cfg;
  cfg.epochs = 2;
  cfg.minibatch = 4;
  cfg.target_update_period = 5;
  int syncs = 0;
  Rng rng(6);
  multi_task_bcq(slots, cfg, 3, [&] { ++syncs; }, rng);
  CHECK(syncs == 2);  // 2 epochs x 3 rounds x 2 slots = 12 updates
  CHECK(c1.parameter_sets()[0]->step_count() == 6);
  CHECK(c2.parameter_sets()[0]->step_count() == 6);
  syncs = 0;
  multi_task_bcq(slots, cfg, 0, [&] { ++syncs; }, rng);
  CHECK(c1.parameter_sets()[0]->step_count() == 6 + 2 * 4);  // ceil(16 / 4) rounds per epoch
}
