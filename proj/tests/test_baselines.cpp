#include <doctest.h>

#include <cmath>

#include "lcrl/baselines.hpp"

using namespace lcrl;
using ag::Tensor;

namespace {

BaselineConfig small_config() {
  BaselineConfig cfg;
  cfg.online_budget = 512;
  cfg.ppo.steps_per_update = 256;
  cfg.ppo.minibatch = 128;
  cfg.ppo.epochs = 1;
  cfg.ppo.entropy_coef = 0.01;
  cfg.buffer_capacity = 1024;
  cfg.bcq.epochs = 1;
  cfg.bcq.minibatch = 64;
  cfg.bcq_updates_per_epoch = 2;
  cfg.fisher_samples = 128;
  cfg.distill_epochs = 2;
  cfg.distill_minibatch = 128;
  cfg.online_eval.episodes = 2;
  cfg.offline_eval.episodes = 2;
  cfg.seed = 21;
  return cfg;
}

TaskDescriptor task(int s, int c, int d) { return TaskDescriptor::from_indices(s, c, d); }

Tensor random_obs(int n, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(n) * kObsSize);
  for (float& x : v) x = rng.uniform() < 0.3 ? 1.0f : 0.0f;
  return Tensor::from({n, kObsChannels, kViewSize, kViewSize}, std::move(v));
}

std::vector<float> flat(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// Displacement of every knowledge-base coordinate whose Fisher entry is positive.
double mean_fisher_drift(const PnCState& state, const ModuleLibrary& before) {
  double drift = 0.0;
  long count = 0;
  for (std::size_t s = 0; s < state.kb_fisher.fisher.size(); ++s) {
    const auto& now = state.knowledge.module(static_cast<int>(s), 0).entries();
    const auto& old = before.module(static_cast<int>(s), 0).entries();
    for (std::size_t i = 0; i < now.size(); ++i)
      for (std::size_t j = 0; j < now[i].tensor.numel(); ++j)
        if (state.kb_fisher.fisher[s][i][j] > 0.0f) {
          drift += std::abs(now[i].tensor.values()[j] - old[i].tensor.values()[j]);
          ++count;
        }
  }
  return count ? drift / static_cast<double>(count) : 0.0;
}

}  // namespace

TEST_CASE("EWC penalty closed forms") {
  ag::ParameterSet p;
  p.add("w", Tensor::from({1}, {1.0f}, true));
  ag::ParameterSet* sets[] = {&p};
  FisherState state;
  CHECK(ewc_penalty(sets, state, 2.0).item() == 0.0f);

  state.accumulate({{{1.0f}}}, sets, 1.0);
  CHECK(ewc_penalty(sets, state, 2.0).item() == 0.0f);
  p.get("w").mutable_values()[0] = 2.0f;
  CHECK(ewc_penalty(sets, state, 2.0).item() == doctest::Approx(1.0));

  // A second identical accumulation at the same anchor doubles the penalty.
  p.get("w").mutable_values()[0] = 1.0f;
  state.accumulate({{{1.0f}}}, sets, 1.0);
  p.get("w").mutable_values()[0] = 2.0f;
  CHECK(ewc_penalty(sets, state, 2.0).item() == doctest::Approx(2.0));

  // Decay: F <- 0.5 * 2 + 1.
  p.get("w").mutable_values()[0] = 1.0f;
  state.accumulate({{{1.0f}}}, sets, 0.5);
  CHECK(state.fisher[0][0][0] == doctest::Approx(2.0));
  CHECK_THROWS_AS(state.accumulate({}, sets, 1.0), ContractViolation);
}

TEST_CASE("EWC penalty grows along Fisher-positive directions") {
  Rng rng(1);
  ag::ParameterSet p;
  p.add("a", Tensor::from({3}, {0.1f, -0.2f, 0.3f}, true));
  p.add("b", Tensor::from({2}, {1.0f, 2.0f}, true));
  ag::ParameterSet* sets[] = {&p};
  FisherState state;
  state.accumulate({{{0.5f, 0.0f, 2.0f}, {1.0f, 0.25f}}}, sets, 1.0);
  const std::vector<float> base_a = flat(p.get("a")), base_b = flat(p.get("b"));
  const std::vector<float> dir_a{0.3f, 1.0f, -0.2f}, dir_b{-0.5f, 0.4f};
  double prev = 0.0;
  for (double t : {0.25, 0.5, 1.0, 2.0, 4.0}) {
    for (int i = 0; i < 3; ++i) p.get("a").mutable_values()[static_cast<std::size_t>(i)] = static_cast<float>(base_a[static_cast<std::size_t>(i)] + t * dir_a[static_cast<std::size_t>(i)]);
    for (int i = 0; i < 2; ++i) p.get("b").mutable_values()[static_cast<std::size_t>(i)] = static_cast<float>(base_b[static_cast<std::size_t>(i)] + t * dir_b[static_cast<std::size_t>(i)]);
    const double pen = ewc_penalty(sets, state, 3.0).item();
    double expected = 0.5 * 0.09 + 2.0 * 0.04 + 1.0 * 0.25 + 0.25 * 0.16;
    expected *= 1.5 * t * t;
    CHECK(pen == doctest::Approx(expected).epsilon(1e-5));
    CHECK(pen > prev);
    prev = pen;
  }
  // Moving only along a zero-Fisher coordinate costs nothing.
  p.get("a").mutable_values()[0] = base_a[0];
  p.get("a").mutable_values()[2] = base_a[2];
  p.get("b").mutable_values()[0] = base_b[0];
  p.get("b").mutable_values()[1] = base_b[1];
  CHECK(ewc_penalty(sets, state, 3.0).item() == 0.0f);
}

TEST_CASE("Fisher estimate matches the softmax-bias closed form at initialization") {
  Rng rng(2);
  ModuleLibrary net = make_monolithic(ArchitectureConfig{}, rng);
  AssembledPolicy policy = AssembledPolicy::assemble(net, StructureAssignment{}, false);
  const auto f = estimate_fisher(policy, task(1, 0, 0), 4096, 3);
  auto sets = policy.parameter_sets();
  const auto& agent = sets[2]->entries();
  double critic_sum = 0.0;
  for (std::size_t s = 0; s < f.size(); ++s)
    for (std::size_t i = 0; i < f[s].size(); ++i)
      for (float x : f[s][i]) CHECK(x >= 0.0f);
  for (std::size_t i = 0; i < agent.size(); ++i) {
    if (agent[i].name.starts_with("critic"))
      for (float x : f[2][i]) critic_sum += x;
    if (agent[i].name == "actor.fc2.b")
      // d log pi(a) / d b_j = 1[a=j] - pi_j, so E[(.)^2] = pi_j (1 - pi_j), and
      // the small output gain keeps pi near uniform.
      for (float x : f[2][i]) CHECK(x == doctest::Approx(5.0 / 36.0).epsilon(0.15));
  }
  CHECK(critic_sum == 0.0);
  const auto again = estimate_fisher(policy, task(1, 0, 0), 4096, 3);
  CHECK(again == f);
}

TEST_CASE("STL tasks are independent and deterministic") {
  const BaselineConfig cfg = small_config();
  const auto ab = run_stl({task(1, 0, 0), task(2, 3, 1)}, cfg);
  const auto cb = run_stl({task(0, 2, 2), task(2, 3, 1)}, cfg);
  REQUIRE(ab.size() == 2);
  CHECK(ab[1].online == cb[1].online);
  CHECK(ab[1].zero_shot == cb[1].zero_shot);
  REQUIRE(ab[1].curve.size() == cb[1].curve.size());
  for (std::size_t i = 0; i < ab[1].curve.size(); ++i) CHECK(ab[1].curve[i].mean_return == cb[1].curve[i].mean_return);
  CHECK(std::isnan(ab[0].offline));
  CHECK(ab[0].final == ab[0].online);
  const auto again = run_stl({task(1, 0, 0), task(2, 3, 1)}, cfg);
  CHECK(again[0].online == ab[0].online);
  CHECK(again[0].explore_steps == cfg.online_budget);
}

TEST_CASE("EWC runs a shared network with task inputs") {
  const BaselineConfig cfg = small_config();
  const auto recs = run_ewc({task(1, 0, 0), task(2, 1, 1)}, cfg);
  REQUIRE(recs.size() == 2);
  for (const auto& r : recs) {
    CHECK(std::isnan(r.offline));
    CHECK(r.final >= min_episode_return());
    CHECK(r.explore_steps == cfg.online_budget);
  }
  const auto again = run_ewc({task(1, 0, 0), task(2, 1, 1)}, cfg);
  CHECK(again[1].final == recs[1].final);
}

TEST_CASE("lateral connections carry all knowledge-base influence") {
  Rng rng(4);
  ArchitectureConfig arch;
  arch.descriptor_width = 12;
  ModuleLibrary kb = make_monolithic(arch, rng), active = make_monolithic(arch, rng);
  ag::ParameterSet laterals = make_laterals(arch, rng);
  ProgressivePolicy policy(kb, active, laterals);
  policy.set_descriptor(descriptor_to_multihot(task(1, 2, 3)).bits);
  const Tensor obs = random_obs(4, rng);

  auto outputs = [&] {
    const auto out = policy.forward(obs);
    auto v = flat(out.logits);
    const auto q = flat(out.q);
    v.insert(v.end(), q.begin(), q.end());
    return v;
  };
  auto perturb_kb = [&] {
    for (int d = 0; d < kNumDepths; ++d)
      for (auto& e : kb.module(d, 0).entries())
        for (float& x : e.tensor.mutable_values()) x += static_cast<float>(0.1 * rng.normal());
  };

  const auto base = outputs();
  perturb_kb();
  CHECK(outputs() != base);

  for (auto& e : laterals.entries())
    for (float& x : e.tensor.mutable_values()) x = 0.0f;
  const auto ablated = outputs();
  perturb_kb();
  CHECK(outputs() == ablated);

  const auto sets = policy.parameter_sets();
  CHECK(sets.size() == 4);
  for (auto* s : sets)
    for (int d = 0; d < kNumDepths; ++d) CHECK(s != &kb.module(d, 0));
}

TEST_CASE("progress never touches the knowledge base") {
  const BaselineConfig cfg = small_config();
  PnCState state = make_pnc_state(cfg);
  const std::uint64_t before = state.knowledge.checksum();
  int updates = 0;
  LifelongHooks hooks;
  hooks.on_ppo_update = [&](const TaskDescriptor&, const PPOStats&) {
    ++updates;
    CHECK(state.knowledge.checksum() == before);
  };
  pnc_run_task(state, task(1, 0, 0), CompressMode::batch_rl, cfg, 5, hooks);
  CHECK(updates == 2);
  CHECK(state.knowledge.checksum() != before);  // compressed afterwards
  CHECK(state.buffers.at(task(1, 0, 0).id()).size() == static_cast<std::size_t>(cfg.online_budget));
  CHECK_THROWS_AS(pnc_run_task(state, task(1, 0, 0), CompressMode::batch_rl, cfg, 6), ContractViolation);
}

TEST_CASE("a dominant distillation penalty pins the knowledge base") {
  auto drift_for = [](double lambda) {
    BaselineConfig cfg = small_config();
    cfg.pnc_lambda = lambda;
    PnCState state = make_pnc_state(cfg);
    pnc_run_task(state, task(1, 0, 0), CompressMode::ewc_distill, cfg, 7);
    const ModuleLibrary before = state.knowledge.clone();
    pnc_run_task(state, task(2, 1, 1), CompressMode::ewc_distill, cfg, 8);
    return mean_fisher_drift(state, before);
  };
  const double free_drift = drift_for(0.0);
  const double pinned = drift_for(1e12);
  MESSAGE("mean drift on Fisher-positive coordinates: lambda=0 ", free_drift, ", lambda=1e12 ", pinned);
  CHECK(free_drift > 0.0);
  // Adam bounds each step by about lr, so a dominant penalty leaves at most an
  // lr-sized oscillation around the anchor.
  CHECK(pinned < 2e-3);
  CHECK(pinned < 0.5 * free_drift);
}

TEST_CASE("P&C records and determinism") {
  const BaselineConfig cfg = small_config();
  for (auto mode : {CompressMode::ewc_distill, CompressMode::batch_rl}) {
    const auto a = run_pnc({task(1, 0, 0), task(2, 1, 1)}, mode, cfg);
    const auto b = run_pnc({task(1, 0, 0), task(2, 1, 1)}, mode, cfg);
    REQUIRE(a.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(std::isfinite(a[i].offline));
      CHECK(a[i].final == b[i].final);
      CHECK(a[i].offline == b[i].offline);
    }
  }
}
