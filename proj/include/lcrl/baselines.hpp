#pragma once

// Non-compositional comparison learners on the single-structure network:
// independent single-task agents, online EWC with a multi-hot task input,
// and progress-and-compress with either EWC distillation or batch RL as the
// compress step.

#include <string>
#include <vector>

#include "lcrl/bcq.hpp"
#include "lcrl/evaluation.hpp"
#include "lcrl/lifelong.hpp"
#include "lcrl/modular_policy.hpp"
#include "lcrl/ppo.hpp"

namespace lcrl {

struct BaselineConfig {
  ArchitectureConfig arch{};  // descriptor width is set per method
  long online_budget = 200000;
  PPOConfig ppo{};
  BCQConfig bcq{};
  std::size_t buffer_capacity = 100000;
  int bcq_updates_per_epoch = 0;  // 0 means buffer size / minibatch

  double ewc_lambda = 10000.0;
  double ewc_gamma = 1.0;
  int fisher_samples = 4096;

  double pnc_lambda = 10.0;
  double pnc_gamma = 1.0;  // knowledge-base Fisher decay
  int distill_epochs = 10;
  int distill_minibatch = 256;

  EvalConfig online_eval{.episodes = 10, .mode = EvalMode::greedy_actor};
  EvalConfig offline_eval{.episodes = 10, .mode = EvalMode::constrained_q};
  std::uint64_t seed = 0;
};

// Diagonal Fisher estimate and anchor values, one vector per parameter tensor
// of each set, in parameter_sets() order.
struct FisherState {
  std::vector<std::vector<std::vector<float>>> fisher;
  std::vector<std::vector<std::vector<float>>> anchor;
  int accumulations = 0;

  bool empty() const { return accumulations == 0; }
  // F <- gamma * F + F_new, then re-anchor at the current values.
  void accumulate(const std::vector<std::vector<std::vector<float>>>& f_new, std::span<ag::ParameterSet* const> sets,
                  double gamma);
};

// (lambda / 2) * sum_i F_i (theta_i - anchor_i)^2 over all sets. Zero scalar
// (without history) when the state is empty.
ag::Tensor ewc_penalty(std::span<ag::ParameterSet* const> sets, const FisherState& state, double lambda);

// Mean squared gradient of log pi(a | s) over on-policy samples, with a drawn
// from the actor.
std::vector<std::vector<std::vector<float>>> estimate_fisher(ActorCritic& policy, const TaskDescriptor& task,
                                                             int samples, std::uint64_t seed);

// Each task trains a fresh single-structure network without task input.
std::vector<TaskRecord> run_stl(const std::vector<TaskDescriptor>& tasks, const BaselineConfig& cfg,
                                const LifelongHooks& hooks = {});

// One shared network, task descriptor input, online EWC between tasks.
std::vector<TaskRecord> run_ewc(const std::vector<TaskDescriptor>& tasks, const BaselineConfig& cfg,
                                const LifelongHooks& hooks = {});

enum class CompressMode { ewc_distill, batch_rl };

// Active column plus lateral adapters reading the knowledge-base column.
class ProgressivePolicy : public ActorCritic {
 public:
  ProgressivePolicy(ModuleLibrary& knowledge, ModuleLibrary& active, ag::ParameterSet& laterals);

  PolicyOutput forward(const ag::Tensor& obs) override;
  // Active column and lateral weights only; the knowledge base stays frozen.
  std::vector<ag::ParameterSet*> parameter_sets() override;
  void set_descriptor(std::vector<float> bits);

 private:
  AssembledPolicy kb_;
  AssembledPolicy active_;
  ag::ParameterSet* laterals_;
};

ag::ParameterSet make_laterals(const ArchitectureConfig& arch, Rng& rng);

struct PnCState {
  ModuleLibrary knowledge;
  FisherState kb_fisher;
  std::vector<TaskRecord> records;
  std::map<int, TransitionBuffer> buffers;
};

PnCState make_pnc_state(const BaselineConfig& cfg);

// Progress on the current task, then compress into the knowledge base.
const TaskRecord& pnc_run_task(PnCState& state, const TaskDescriptor& task, CompressMode mode,
                               const BaselineConfig& cfg, std::uint64_t task_seed, const LifelongHooks& hooks = {});

std::vector<TaskRecord> run_pnc(const std::vector<TaskDescriptor>& tasks, CompressMode mode,
                                const BaselineConfig& cfg, const LifelongHooks& hooks = {});

// Knowledge-base policy for one task (descriptor attached).
AssembledPolicy knowledge_policy(ModuleLibrary& kb, const TaskDescriptor& task);

}  // namespace lcrl
