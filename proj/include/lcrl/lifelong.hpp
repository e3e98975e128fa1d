#pragma once

// Lifelong compositional training loop. Each new task gets a structure (fixed
// initial assignment, exhaustive search, or a ground-truth lookup), trains
// private copies of the chosen modules online, and is then folded into the
// shared library by batch-constrained Q-learning over every stored buffer.

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lcrl/bcq.hpp"
#include "lcrl/evaluation.hpp"
#include "lcrl/modular_policy.hpp"
#include "lcrl/ppo.hpp"
#include "lcrl/task_space.hpp"

namespace lcrl {

enum class StructureSource {
  search,        // exhaustive search over module combinations
  ground_truth,  // component value -> module index, fixed on first use
};

struct CurvePoint {
  long step = 0;  // within-task environment steps, search included
  double mean_return = 0.0;
};

struct TaskRecord {
  TaskDescriptor task;
  StructureAssignment structure;
  double zero_shot = 0.0;
  double online = 0.0;
  double offline = 0.0;
  double final = 0.0;
  long search_steps = 0;
  long explore_steps = 0;
  bool search_truncated = false;
  std::vector<CurvePoint> curve;
};

struct LifelongConfig {
  StructureSource source = StructureSource::search;
  ArchitectureConfig arch{};
  std::array<int, kNumDepths> modules_per_depth{4, 4, 4};
  long online_budget = 200000;  // search + exploration steps per task
  int search_episodes = 10;
  PPOConfig ppo{};
  BCQConfig bcq{};
  std::size_t buffer_capacity = 100000;
  // Minibatches per task per BCQ epoch; 0 means buffer size / minibatch.
  int bcq_updates_per_epoch = 0;
  bool offline_phase = true;
  // false: replay only tasks that share a module with the current task.
  bool replay_all_tasks = true;
  EvalConfig online_eval{.episodes = 10, .mode = EvalMode::greedy_actor};
  EvalConfig offline_eval{.episodes = 10, .mode = EvalMode::constrained_q};
  std::uint64_t seed = 0;

  void validate() const;
};

// Search over k_static * k_target * k_agent combinations in lexicographic
// order. The evaluator returns the mean return of one combination and may
// stop early once `step_cap` steps have been used (0 = no cap). A negative
// step_limit disables the budget; otherwise the search stops, keeping the best
// fully evaluated combination, once the limit is spent.
using StructureEvaluator = std::function<EvalResult(const StructureAssignment&, long step_cap)>;

struct SearchResult {
  StructureAssignment best;
  double best_return = 0.0;
  long env_steps = 0;
  int combinations_evaluated = 0;
  bool truncated = false;
};

SearchResult discrete_search(const std::array<int, kNumDepths>& modules_per_depth, const StructureEvaluator& eval,
                             long step_limit);

// Every combination evaluated with the same episode seeds and the greedy actor.
SearchResult discrete_search(ModuleLibrary& lib, const TaskDescriptor& task, int episodes, std::uint64_t seed,
                             long step_limit);

// Task ordinal T (1-based) during initialization uses module T-1 at every depth.
StructureAssignment initialize_task_structure(int ordinal, const std::array<int, kNumDepths>& modules_per_depth);

struct LifetimeState {
  ModuleLibrary library;
  std::vector<TaskRecord> records;  // in training order
  std::map<int, TransitionBuffer> buffers;  // keyed by task id
  // Ground-truth bijection: component value -> module index, -1 while unset.
  std::array<std::array<int, 4>, kNumDepths> value_to_module{};

  int tasks_seen() const { return static_cast<int>(records.size()); }
  const TaskRecord* record_for(const TaskDescriptor& t) const;
};

LifetimeState make_lifetime_state(const LifelongConfig& cfg);

// Lookup under the ground-truth bijection; unseen values take the smallest
// module index not yet bound at that depth.
StructureAssignment ground_truth_structure(LifetimeState& state, const TaskDescriptor& task,
                                           const std::array<int, kNumDepths>& modules_per_depth);

// Progress sink for learning curves and diagnostics. Any member may be empty.
struct LifelongHooks {
  std::function<void(const TaskDescriptor&, const CurvePoint&)> on_curve_point;
  std::function<void(const TaskDescriptor&, const PPOStats&)> on_ppo_update;
  std::function<void(const std::string&)> on_event;
};

// Runs one new task end to end and appends its record.
const TaskRecord& run_task(LifetimeState& state, const TaskDescriptor& task, const LifelongConfig& cfg,
                           const LifelongHooks& hooks = {});

// Offline consolidation into the shared library over the given tasks.
void offline_consolidation(LifetimeState& state, const std::vector<TaskDescriptor>& tasks, const LifelongConfig& cfg,
                           std::uint64_t seed);

double evaluate_structure(ModuleLibrary& lib, const StructureAssignment& s, const TaskDescriptor& task,
                          const EvalConfig& cfg);

// Fills the final column for every seen task against the current library.
void evaluate_final(LifetimeState& state, const LifelongConfig& cfg);

// Runs (or resumes) a lifetime over the curriculum. When `checkpoint_dir` is
// non-empty, state is written after every task and an existing checkpoint in
// that directory is resumed from.
LifetimeState run_lifetime(const std::vector<TaskDescriptor>& curriculum, const LifelongConfig& cfg,
                           const std::string& checkpoint_dir = "", const LifelongHooks& hooks = {});

// Module values and optimizer state under "d<depth>.m<index>." prefixes.
void save_library(const ModuleLibrary& lib, const std::string& path);
// Restores into a library of identical shape.
void load_library(ModuleLibrary& lib, const std::string& path);

void save_lifetime(const LifetimeState& state, const std::string& dir);
// Restores into a state created by make_lifetime_state(cfg).
bool load_lifetime(LifetimeState& state, const std::string& dir);

}  // namespace lcrl
