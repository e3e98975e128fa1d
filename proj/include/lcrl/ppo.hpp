#pragma once

// Clipped policy-gradient training with a Q-function critic. The state value
// used for advantage estimation is the maximum Q over actions.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lcrl/bcq.hpp"
#include "lcrl/gridworld.hpp"
#include "lcrl/modular_policy.hpp"
#include "lcrl/tensor.hpp"

namespace lcrl {

struct PPOConfig {
  int steps_per_update = 4096;
  int minibatch = 256;
  int epochs = 4;
  ag::OptimizerConfig optimizer{};
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double entropy_coef = 0.5;
  double clip = 0.2;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;  // 0 disables clipping
  bool normalize_advantages = true;

  void validate() const;
};

struct RolloutBatch {
  std::vector<float> obs;  // size() * kObsSize
  std::vector<int> actions;
  std::vector<float> rewards;
  std::vector<std::uint8_t> dones;
  std::vector<float> log_probs;
  std::vector<float> q_values;  // size() * kNumActions
  std::vector<float> values;    // max_a q at collection time
  float bootstrap_value = 0.0f;  // max_a Q(next obs) if the last step did not end an episode
  std::vector<double> episode_returns;  // episodes that finished inside the batch

  int size() const { return static_cast<int>(actions.size()); }
};

float state_value_from_q(std::span<const float> q_row);

struct GAEResult {
  std::vector<float> advantages;
  std::vector<float> returns;
};

// values has one more entry than rewards: the bootstrap for the step after
// the batch (zero when the batch ends on a terminal step).
GAEResult compute_gae(std::span<const float> rewards, std::span<const float> values,
                      std::span<const std::uint8_t> dones, double gamma, double lambda);

// An environment that persists across rollout calls, so episodes may span
// update boundaries, plus the RNG used for action sampling.
class EnvRunner {
 public:
  EnvRunner(TaskDescriptor task, std::uint64_t seed);

  const TaskDescriptor& task() const { return env_.task(); }
  const ObsTensor& observation() const { return obs_; }
  StepOutcome step(int action);
  Rng& action_rng() { return action_rng_; }
  long total_steps() const { return total_steps_; }

 private:
  GridWorld env_;
  Rng action_rng_;
  ObsTensor obs_;
  double episode_return_ = 0.0;
  long total_steps_ = 0;
  std::vector<double> finished_;
  friend RolloutBatch collect_rollouts(EnvRunner&, ActorCritic&, int, TransitionBuffer*);
};

// Samples actions from the categorical actor; every transition is also
// appended to `buffer` when one is given. Episodes reset automatically.
RolloutBatch collect_rollouts(EnvRunner& runner, ActorCritic& policy, int n_steps, TransitionBuffer* buffer);

struct PPOStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double mean_return = 0.0;  // over episodes completed in the rollout; NaN if none
  int episodes = 0;
  int minibatches = 0;

  std::string to_json() const;
};

// Rollout data with advantages and returns attached.
struct PreparedBatch {
  const RolloutBatch* rollout = nullptr;
  std::vector<float> advantages;  // normalized if configured
  std::vector<float> returns;
};

PreparedBatch prepare_batch(const RolloutBatch& batch, const PPOConfig& cfg);

struct PPOLossParts {
  ag::Tensor total;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

// Loss over the given sample indices; no optimizer interaction.
PPOLossParts ppo_loss(ActorCritic& policy, const PreparedBatch& batch, std::span<const int> indices,
                      const PPOConfig& cfg);

// Optional extra term added to every minibatch loss (used by EWC).
using ExtraLoss = std::function<ag::Tensor()>;

PPOStats ppo_update(ActorCritic& policy, const RolloutBatch& batch, const PPOConfig& cfg, Rng& rng,
                    const ExtraLoss& extra = {});

}  // namespace lcrl
