#pragma once

// Policy evaluation on fixed per-task episode seeds, so two policies evaluated
// on the same task face the same initial states.

#include <cstdint>
#include <string>
#include <vector>

#include "lcrl/gridworld.hpp"
#include "lcrl/modular_policy.hpp"

namespace lcrl {

enum class EvalMode {
  greedy_actor,    // argmax of the actor logits, ties to the lowest index
  sample_actor,    // categorical sample from the actor
  boltzmann_q,     // softmax(Q / temperature)
  // softmax(Q / temperature) restricted to actions the actor deems likely
  // (pi(a) / max pi > tau), the batch-constrained policy.
  constrained_q,
};

const char* eval_mode_name(EvalMode m);
EvalMode parse_eval_mode(const std::string& s);

struct EvalConfig {
  int episodes = 10;
  EvalMode mode = EvalMode::greedy_actor;
  double temperature = 0.1;
  float tau = 0.3f;
  std::uint64_t seed = 0;  // base for per-episode environment seeds
  long max_steps = 0;      // total step cap across episodes, 0 for none
};

struct EvalResult {
  double mean_return = 0.0;
  std::vector<double> returns;
  long env_steps = 0;
  int successes = 0;
  bool truncated = false;  // the step cap cut an episode short
};

// Episode i of task t always starts from the environment seed derived from
// (cfg.seed, t, i). Runs without recording gradients. When the step cap is
// reached mid-episode, the partial episode is dropped and `truncated` is set.
EvalResult evaluate_policy(ActorCritic& policy, const TaskDescriptor& task, const EvalConfig& cfg);

// Upper bound of an episode return for any task: a success on the first step
// plus every food item.
double max_episode_return();
double min_episode_return();

}  // namespace lcrl
