#pragma once

// Experiment plumbing: run configuration, multi-task training with known
// structures, zero-shot and module-swap evaluation, metrics files and
// cross-run aggregation.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lcrl/baselines.hpp"
#include "lcrl/lifelong.hpp"

namespace lcrl {

enum class Method { comp_struct, comp_search, comp_search_nc, stl, ewc, pnc, pnc_batchrl };

const char* method_name(Method m);
Method parse_method(const std::string& s);
std::vector<std::string> method_names();

// Flat key = value document; keys follow the hyperparameter table names
// (see docs/FORMATS.md). Unknown keys are rejected.
struct RunConfig {
  Method method = Method::comp_search;
  std::uint64_t seed = 0;
  // "all", a count N (first N tasks of the curriculum) or a comma list of
  // task names used as the curriculum in the given order.
  std::string tasks = "all";
  std::optional<CurriculumMode> curriculum;  // default follows the method
  ArchitectureMode architecture = ArchitectureMode::factored;
  int modules_per_depth = 4;

  long env_steps_per_task = 200000;
  int steps_per_update = 4096;
  double learning_rate = 1e-3;
  int minibatch_size = 256;
  int epochs_per_update = 4;
  double gae_lambda = 0.95;
  double gamma = 0.99;
  double entropy_coef = 0.5;
  double clip = 0.2;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;

  int rollouts_per_combination = 10;
  std::size_t replay_samples_per_task = 100000;
  int bcq_epochs = 10;
  double bcq_tau = 0.3;
  bool bcq_relative_threshold = true;
  int bcq_target_update_period = 1000;
  int bcq_updates_per_epoch = 0;
  int bcq_actor_warmup_updates = 0;
  bool replay_all_tasks = true;

  double pnc_lambda = 10.0;
  double pnc_gamma = 1.0;
  int distillation_epochs = 10;
  double ewc_lambda = 10000.0;
  double ewc_gamma = 1.0;
  int fisher_samples = 4096;

  int eval_episodes = 10;
  EvalMode online_eval_mode = EvalMode::greedy_actor;
  EvalMode offline_eval_mode = EvalMode::constrained_q;
  double boltzmann_temperature = 0.1;

  int mtl_steps_per_task_update = 1024;

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);
  // Overrides one key; throws ContractViolation for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  // Every key, fixed order, round-trips through parse().
  std::string serialize() const;
  // FNV-1a over the serialization without the seed line, as 16 hex digits.
  std::string hash() const;
  std::string run_name() const;  // <method>-<hash8>-s<seed>

  CurriculumMode effective_curriculum() const;
  PPOConfig ppo() const;
  BCQConfig bcq() const;
  EvalConfig eval(EvalMode mode) const;
  LifelongConfig lifelong() const;
  BaselineConfig baseline() const;
};

std::vector<TaskDescriptor> resolve_curriculum(const RunConfig& cfg);

// ---- metrics ------------------------------------------------------------

struct MetricsRow {
  std::string method;
  std::uint64_t seed = 0;
  std::string task;
  double zero_shot = 0.0, online = 0.0, offline = 0.0, final = 0.0;
};

std::vector<MetricsRow> to_metrics_rows(const std::string& method, std::uint64_t seed,
                                        const std::vector<TaskRecord>& records);
std::string format_metrics_csv(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);
// One {"task","step","mean_return"} object per line.
std::string format_curves_jsonl(const std::vector<TaskRecord>& records);

struct StageSummary {
  std::string method;
  std::string stage;
  double mean = 0.0;
  double stderr_ = 0.0;
  int seeds = 0;
};

// Per seed: mean over tasks; then mean and standard error across seeds.
// Stages whose values are all NaN are skipped.
std::vector<StageSummary> summarize(const std::vector<MetricsRow>& rows);
std::string format_summary_csv(const std::vector<StageSummary>& s);

double mean_of(const std::vector<double>& v);
// Sample standard deviation / sqrt(n); 0 for n < 2.
double standard_error(const std::vector<double>& v);

struct TransferSummary {
  double forward_transfer = 0.0;
  double forgetting = 0.0;
  double backward_transfer = 0.0;
};

// Forward transfer compares the average return over each task's training
// (area under its step-wise curve divided by the budget) against STL on the
// same task. Forgetting uses offline, or online when a method has no offline
// stage, as the reference for final.
TransferSummary transfer_metrics(const std::vector<TaskRecord>& lifelong, const std::vector<TaskRecord>& stl,
                                 long budget);

double curve_area(const std::vector<CurvePoint>& curve, long budget);

// ---- multi-task training with known structures ---------------------------

struct MTLTask {
  TaskDescriptor task;
  StructureAssignment structure;
};

// Structure given by the component values: module index = value index.
StructureAssignment value_structure(const TaskDescriptor& t);

struct MTLConfig {
  PPOConfig ppo{};
  int steps_per_task_update = 1024;
  long steps_per_task = 200000;
  std::uint64_t seed = 0;
};

struct MTLResult {
  std::vector<std::vector<CurvePoint>> curves;  // per task
  long updates = 0;
};

// Every update collects rollouts from every task, averages the per-task PPO
// losses (so gradients average), and steps each module that received one.
MTLResult mtl_train(ModuleLibrary& lib, const std::vector<MTLTask>& tasks, const MTLConfig& cfg,
                    const LifelongHooks& hooks = {});

// Per-task streams used by mtl_train, keyed by task id so a duplicated task
// sees identical data. Exposed so tests can replay a run.
std::uint64_t mtl_runner_seed(std::uint64_t seed, const TaskDescriptor& task);
std::uint64_t mtl_update_seed(std::uint64_t seed, const TaskDescriptor& task);

// Floor tasks split 12/4: the held-out set pairs each dynamics id with a
// distinct color drawn by a random permutation, so every color and every
// dynamics id appears in exactly three training tasks.
struct HeldOutSplit {
  std::vector<TaskDescriptor> train;
  std::vector<TaskDescriptor> held_out;
};
HeldOutSplit floor_heldout_split(std::uint64_t seed);

std::vector<double> zero_shot_eval(ModuleLibrary& lib, const std::vector<MTLTask>& tasks, const EvalConfig& cfg);

double module_swap_eval(ModuleLibrary& lib, const MTLTask& task, int wrong_depth, int wrong_index,
                        const EvalConfig& cfg);

// Correct-structure return against the mean return with each depth's module
// replaced by every wrong alternative, averaged over tasks.
struct SwapRow {
  std::string task;
  int depth = 0;  // -1 for the correct structure
  int module = 0;
  double mean_return = 0.0;
};
struct SwapSummary {
  double correct = 0.0;
  std::array<double, kNumDepths> swapped{};
  std::vector<SwapRow> rows;
};
SwapSummary swap_ablation(ModuleLibrary& lib, const std::vector<MTLTask>& tasks, const EvalConfig& cfg);
std::string format_swap_csv(const SwapSummary& s);

// ---- run directories ----------------------------------------------------

struct RunOutput {
  std::string dir;
  std::vector<TaskRecord> records;
};

// Runs cfg.method over the resolved curriculum and writes config.txt,
// metrics.csv, curves.jsonl, ppo.jsonl, events.log and checkpoints/ under
// out_root/<run_name>.
RunOutput execute_run(const RunConfig& cfg, const std::string& out_root, bool quiet = false);

// MTL on cfg.tasks ("all" selects the floor 12/4 split, otherwise a comma
// list of training tasks with nothing held out) with ground-truth structures,
// env_steps_per_task steps per task. Writes config.txt, split.txt,
// library.ckpt, mtl_metrics.csv and curves.jsonl under out_root/mtl-<hash8>-s<seed>.
struct MTLRunOutput {
  std::string dir;
  ModuleLibrary library;
  std::vector<MTLTask> train;
  std::vector<MTLTask> held_out;
  std::vector<double> train_returns;
  std::vector<double> held_out_returns;
};
MTLRunOutput execute_mtl(const RunConfig& cfg, const std::string& out_root, bool quiet = false);

// Reloads a directory written by execute_mtl (returns are left empty).
MTLRunOutput load_mtl_run(const std::string& dir);

// Reads metrics.csv from each run directory.
std::vector<MetricsRow> collect_metrics(const std::vector<std::string>& run_dirs);

// Curve points of several runs binned by within-task step: per method, the
// mean and standard error over all (seed, task) curves that have a point in
// the bin. Bins are right-closed with width `bin`.
struct CurveSummaryPoint {
  std::string method;
  long step = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
  int count = 0;
};
std::vector<CurveSummaryPoint> summarize_curves(const std::vector<std::string>& run_dirs, long bin);
std::string format_curve_summary_csv(const std::vector<CurveSummaryPoint>& s);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace lcrl
