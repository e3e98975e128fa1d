#include "lcrl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lcrl/bcq.hpp"

namespace lcrl {

const char* eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::greedy_actor: return "greedy";
    case EvalMode::sample_actor: return "sample";
    case EvalMode::boltzmann_q: return "boltzmann";
    case EvalMode::constrained_q: return "constrained";
  }
  return "?";
}

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "greedy") return EvalMode::greedy_actor;
  if (s == "sample") return EvalMode::sample_actor;
  if (s == "boltzmann") return EvalMode::boltzmann_q;
  if (s == "constrained") return EvalMode::constrained_q;
  throw ContractViolation("unknown evaluation mode '" + s + "' (expected greedy, sample, boltzmann or constrained)");
}

namespace {

int argmax(std::span<const float> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

int sample_softmax(std::span<const float> logits, Rng& rng) {
  const float m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> w(logits.size());
  double z = 0.0;
  for (std::size_t a = 0; a < w.size(); ++a) z += (w[a] = std::exp(static_cast<double>(logits[a] - m)));
  double u = rng.uniform() * z;
  for (std::size_t a = 0; a < w.size(); ++a) {
    if (u < w[a]) return static_cast<int>(a);
    u -= w[a];
  }
  return static_cast<int>(w.size()) - 1;
}

int sample_constrained(std::span<const float> logits, std::span<const float> q, double temperature, float tau,
                       Rng& rng) {
  // Relative eligibility compares logits: pi(a) / max pi = exp(l_a - l_max).
  const float lmax = *std::max_element(logits.begin(), logits.end());
  const double log_tau = tau > 0.0f ? std::log(static_cast<double>(tau)) : -INFINITY;
  std::vector<int> eligible;
  for (std::size_t a = 0; a < logits.size(); ++a)
    if (logits[a] == lmax || static_cast<double>(logits[a] - lmax) > log_tau) eligible.push_back(static_cast<int>(a));
  std::vector<float> q_sub;
  for (int a : eligible) q_sub.push_back(q[static_cast<std::size_t>(a)]);
  return eligible[static_cast<std::size_t>(boltzmann_sample(q_sub, temperature, rng))];
}

}  // namespace

EvalResult evaluate_policy(ActorCritic& policy, const TaskDescriptor& task, const EvalConfig& cfg) {
  require(cfg.episodes > 0, "evaluate_policy: episodes must be positive");
  require(cfg.temperature > 0.0, "evaluate_policy: temperature must be positive");
  ag::NoGradGuard ng;
  EvalResult res;
  for (int ep = 0; ep < cfg.episodes && !res.truncated; ++ep) {
    const std::uint64_t ep_seed =
        Rng::derive(Rng::derive(cfg.seed, static_cast<std::uint64_t>(task.id())), static_cast<std::uint64_t>(ep));
    GridWorld env(task, ep_seed);
    Rng action_rng(Rng::derive(ep_seed, 7));
    ObsTensor obs = env.reset();
    double ret = 0.0;
    for (;;) {
      if (cfg.max_steps > 0 && res.env_steps >= cfg.max_steps) {
        res.truncated = true;
        break;
      }
      const PolicyOutput out = policy.forward(obs_batch(obs));
      int action = 0;
      switch (cfg.mode) {
        case EvalMode::greedy_actor: action = argmax(out.logits.values()); break;
        case EvalMode::sample_actor: action = sample_softmax(out.logits.values(), action_rng); break;
        case EvalMode::boltzmann_q: action = boltzmann_sample(out.q.values(), cfg.temperature, action_rng); break;
        case EvalMode::constrained_q:
          action = sample_constrained(out.logits.values(), out.q.values(), cfg.temperature, cfg.tau, action_rng);
          break;
      }
      const StepOutcome step = env.step(action);
      ret += step.reward;
      res.env_steps += 1;
      if (step.done) {
        if (step.info.success) res.successes += 1;
        break;
      }
      obs = step.obs;
    }
    if (!res.truncated) res.returns.push_back(ret);
  }
  res.mean_return = res.returns.empty() ? 0.0
                                        : std::accumulate(res.returns.begin(), res.returns.end(), 0.0) /
                                              static_cast<double>(res.returns.size());
  return res;
}

double max_episode_return() { return 1.0 - 0.9 / kHorizon + kFoodReward * kMaxStaticCells; }

double min_episode_return() { return -kLavaPenalty; }

}  // namespace lcrl
