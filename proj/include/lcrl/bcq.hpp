#pragma once

// Per-task replay stores and discrete batch-constrained Q-learning. The actor
// is behavior-cloned on stored actions; the critic bootstraps only through
// next actions the actor considers likely enough.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lcrl/gridworld.hpp"
#include "lcrl/modular_policy.hpp"
#include "lcrl/tensor.hpp"

namespace lcrl {

struct TransitionBatch {
  int size = 0;
  ag::Shape obs_shape;  // per-sample shape, e.g. {7,7,7}
  std::vector<float> obs;
  std::vector<int> actions;
  std::vector<float> rewards;
  std::vector<float> next_obs;
  std::vector<std::uint8_t> dones;

  ag::Tensor obs_tensor() const;
  ag::Tensor next_obs_tensor() const;
};

// FIFO ring of (obs, action, reward, next_obs, done) for one task.
// Observations are small non-negative integers and are stored as bytes.
class TransitionBuffer {
 public:
  TransitionBuffer() = default;
  TransitionBuffer(TaskDescriptor task, std::size_t capacity);

  void push(const ObsTensor& obs, int action, float reward, const ObsTensor& next_obs, bool done);

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  const TaskDescriptor& task() const { return task_; }
  std::uint64_t total_pushed() const { return pushed_; }

  // i = 0 is the oldest stored transition.
  TransitionBatch gather(std::span<const std::size_t> chronological) const;
  // Uniform with replacement.
  TransitionBatch sample(std::size_t n, Rng& rng) const;

  ObsTensor obs_at(std::size_t i) const;
  int action_at(std::size_t i) const;
  float reward_at(std::size_t i) const;
  bool done_at(std::size_t i) const;

  // Versioned binary file: header (magic, version, task triple, count,
  // capacity) then `count` fixed-width records in chronological order:
  // 343 x f32 obs | u8 action | f32 reward | 343 x f32 next_obs | u8 done.
  void save(const std::string& path) const;
  static TransitionBuffer load(const std::string& path);

  friend bool operator==(const TransitionBuffer& a, const TransitionBuffer& b);

 private:
  std::size_t slot(std::size_t chronological) const;

  TaskDescriptor task_;
  std::size_t capacity_ = 0;
  std::size_t size_ = 0;
  std::size_t head_ = 0;  // next write slot
  std::uint64_t pushed_ = 0;
  std::vector<std::uint8_t> obs_, next_obs_;
  std::vector<std::uint8_t> actions_;
  std::vector<float> rewards_;
  std::vector<std::uint8_t> dones_;
};

struct BCQConfig {
  float tau = 0.3f;
  // true: a is eligible when pi(a)/max pi > tau. false: pi(a) > tau.
  bool relative_threshold = true;
  double gamma = 0.99;
  int epochs = 10;
  int minibatch = 256;
  int target_update_period = 1000;
  double boltzmann_temperature = 0.1;
  ag::OptimizerConfig optimizer{};
  double max_grad_norm = 0.0;  // 0 disables clipping
  // Pure behavior-cloning steps before critic bootstrapping starts.
  int actor_warmup_updates = 0;

  void validate() const;
};

int constrained_greedy_action(std::span<const float> q_row, std::span<const float> actor_probs, float tau,
                              bool relative = true);

int boltzmann_sample(std::span<const float> q_row, double temperature, Rng& rng);

// Mean negative log-likelihood of the batch actions under the actor.
ag::Tensor behavior_cloning_loss(ActorCritic& actor, const TransitionBatch& batch);
double behavior_cloning_update(ActorCritic& actor, const TransitionBatch& batch, const ag::OptimizerConfig& opt);

struct BCQLosses {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  std::vector<int> next_actions;       // bootstrap action per sample (-1 if terminal)
  std::vector<float> targets;          // constrained Bellman targets
  std::vector<float> unconstrained;    // r + gamma * max_a Q'(s', a)
};

// Builds targets, computes critic MSE + actor NLL, does not step.
BCQLosses bcq_loss(ActorCritic& current, ActorCritic& target, const TransitionBatch& batch, const BCQConfig& cfg,
                   bool train_critic, ag::Tensor* loss_out);

// One combined step: critic toward constrained targets, actor by cloning.
BCQLosses bcq_update(ActorCritic& current, ActorCritic& target, const TransitionBatch& batch, const BCQConfig& cfg);

// Hard target-copy cadence for a single actor-critic pair.
class BCQTrainer {
 public:
  BCQTrainer(ActorCritic& current, ActorCritic& target, BCQConfig cfg);
  BCQLosses update(const TransitionBatch& batch);
  long steps() const { return steps_; }
  void sync_target();

 private:
  ActorCritic& current_;
  ActorCritic& target_;
  BCQConfig cfg_;
  long steps_ = 0;
};

// Interleaved multi-task consolidation: every round draws one minibatch from
// each slot's buffer and updates that slot's policy. `sync_target` runs every
// target_update_period updates (counted across slots).
struct BCQTaskSlot {
  ActorCritic* current = nullptr;
  ActorCritic* target = nullptr;
  const TransitionBuffer* buffer = nullptr;
};

// Rounds per epoch = updates_per_epoch, or largest buffer / minibatch when 0.
void multi_task_bcq(std::span<const BCQTaskSlot> slots, const BCQConfig& cfg, long updates_per_epoch,
                    const std::function<void()>& sync_target, Rng& rng);

}  // namespace lcrl
