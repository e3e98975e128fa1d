#include "lcrl/lifelong.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace lcrl {

namespace fs = std::filesystem;

namespace {

// Stream tags for per-task generators; every task draws from its own streams,
// so a resumed lifetime replays exactly.
constexpr std::uint64_t kTagLibraryInit = 0;
constexpr std::uint64_t kTagRunner = 1000;
constexpr std::uint64_t kTagUpdates = 2000;
constexpr std::uint64_t kTagOffline = 3000;
constexpr std::uint64_t kTagSearch = 4000;

int min_modules(const std::array<int, kNumDepths>& k) { return *std::min_element(k.begin(), k.end()); }

void emit(const LifelongHooks& hooks, const std::string& msg) {
  if (hooks.on_event) hooks.on_event(msg);
}

bool shares_module(const StructureAssignment& a, const StructureAssignment& b) {
  for (int d = 0; d < kNumDepths; ++d)
    if (a[d] == b[d]) return true;
  return false;
}

}  // namespace

void LifelongConfig::validate() const {
  for (int k : modules_per_depth) require(k >= 1, "LifelongConfig: every depth needs at least one module");
  require(online_budget >= 0, "LifelongConfig: online budget must be non-negative");
  require(search_episodes > 0, "LifelongConfig: search episodes must be positive");
  require(buffer_capacity > 0, "LifelongConfig: buffer capacity must be positive");
  require(bcq_updates_per_epoch >= 0, "LifelongConfig: bcq_updates_per_epoch must be non-negative");
  ppo.validate();
  bcq.validate();
}

SearchResult discrete_search(const std::array<int, kNumDepths>& k, const StructureEvaluator& eval, long step_limit) {
  SearchResult res;
  bool have_best = false;
  for (int s = 0; s < k[0] && !res.truncated; ++s)
    for (int t = 0; t < k[1] && !res.truncated; ++t)
      for (int a = 0; a < k[2] && !res.truncated; ++a) {
        const bool capped = step_limit >= 0;
        const long remaining = capped ? step_limit - res.env_steps : 0;
        if (capped && remaining <= 0) {
          res.truncated = true;
          break;
        }
        const StructureAssignment combo{{s, t, a}};
        const EvalResult r = eval(combo, remaining);
        res.env_steps += r.env_steps;
        if (r.truncated) {
          res.truncated = true;
          break;
        }
        res.combinations_evaluated += 1;
        // Strict improvement keeps the lexicographically smallest on ties.
        if (!have_best || r.mean_return > res.best_return) {
          res.best = combo;
          res.best_return = r.mean_return;
          have_best = true;
        }
      }
  return res;
}

SearchResult discrete_search(ModuleLibrary& lib, const TaskDescriptor& task, int episodes, std::uint64_t seed,
                             long step_limit) {
  const auto evaluator = [&](const StructureAssignment& s, long cap) {
    AssembledPolicy p = AssembledPolicy::assemble(lib, s, false);
    EvalConfig ec;
    ec.episodes = episodes;
    ec.mode = EvalMode::greedy_actor;
    ec.seed = seed;
    ec.max_steps = cap;
    return evaluate_policy(p, task, ec);
  };
  return discrete_search(lib.modules_per_depth(), evaluator, step_limit);
}

StructureAssignment initialize_task_structure(int ordinal, const std::array<int, kNumDepths>& k) {
  require(ordinal >= 1 && ordinal <= min_modules(k),
          [&] { return "initialize_task_structure: task ordinal " + std::to_string(ordinal) + " exceeds k"; });
  return StructureAssignment{{ordinal - 1, ordinal - 1, ordinal - 1}};
}

const TaskRecord* LifetimeState::record_for(const TaskDescriptor& t) const {
  for (const auto& r : records)
    if (r.task == t) return &r;
  return nullptr;
}

LifetimeState make_lifetime_state(const LifelongConfig& cfg) {
  cfg.validate();
  Rng rng(Rng::derive(cfg.seed, kTagLibraryInit));
  LifetimeState s{ModuleLibrary(cfg.arch, cfg.modules_per_depth, rng), {}, {}, {}};
  for (auto& row : s.value_to_module) row.fill(-1);
  return s;
}

StructureAssignment ground_truth_structure(LifetimeState& state, const TaskDescriptor& task,
                                           const std::array<int, kNumDepths>& k) {
  StructureAssignment s;
  for (int d = 0; d < kNumDepths; ++d) {
    auto& row = state.value_to_module[d];
    const int value = task.component(d);
    if (row[value] < 0) {
      int chosen = -1;
      for (int m = 0; m < k[d] && chosen < 0; ++m)
        if (std::find(row.begin(), row.end(), m) == row.end()) chosen = m;
      // More values than modules: shared modules, assigned round-robin.
      row[value] = chosen >= 0 ? chosen : value % k[d];
    }
    s.modules[d] = row[value];
  }
  return s;
}

double evaluate_structure(ModuleLibrary& lib, const StructureAssignment& s, const TaskDescriptor& task,
                          const EvalConfig& cfg) {
  AssembledPolicy p = AssembledPolicy::assemble(lib, s, false);
  return evaluate_policy(p, task, cfg).mean_return;
}

void offline_consolidation(LifetimeState& state, const std::vector<TaskDescriptor>& tasks, const LifelongConfig& cfg,
                           std::uint64_t seed) {
  if (tasks.empty()) return;
  ModuleLibrary target = state.library.clone();
  std::vector<AssembledPolicy> current, frozen;
  current.reserve(tasks.size());
  frozen.reserve(tasks.size());
  std::vector<BCQTaskSlot> slots;
  for (const auto& t : tasks) {
    const TaskRecord* rec = state.record_for(t);
    require(rec != nullptr, "offline_consolidation: task has no structure");
    auto it = state.buffers.find(t.id());
    require(it != state.buffers.end() && it->second.size() > 0, "offline_consolidation: task has no data");
    current.push_back(AssembledPolicy::assemble(state.library, rec->structure, false));
    frozen.push_back(AssembledPolicy::assemble(target, rec->structure, false));
    slots.push_back({&current.back(), &frozen.back(), &it->second});
  }
  Rng rng(seed);
  multi_task_bcq(slots, cfg.bcq, cfg.bcq_updates_per_epoch, [&] { target.copy_values_from(state.library); }, rng);
}

const TaskRecord& run_task(LifetimeState& state, const TaskDescriptor& task, const LifelongConfig& cfg,
                           const LifelongHooks& hooks) {
  require(state.record_for(task) == nullptr, [&] { return "run_task: task " + task.name() + " was already seen"; });
  const int ordinal = state.tasks_seen() + 1;
  const auto k = cfg.modules_per_depth;
  const bool initializing = ordinal <= min_modules(k);
  const auto tag = static_cast<std::uint64_t>(ordinal);

  TaskRecord rec;
  rec.task = task;
  if (cfg.source == StructureSource::ground_truth) {
    rec.structure = ground_truth_structure(state, task, k);
  } else if (initializing) {
    rec.structure = initialize_task_structure(ordinal, k);
  } else {
    const SearchResult sr =
        discrete_search(state.library, task, cfg.search_episodes, Rng::derive(cfg.seed, kTagSearch + tag),
                        cfg.online_budget);
    rec.structure = sr.best;
    rec.search_steps = sr.env_steps;
    rec.search_truncated = sr.truncated;
    if (sr.truncated)
      emit(hooks, "search truncated on " + task.name() + " after " + std::to_string(sr.combinations_evaluated) +
                      " combinations");
  }
  emit(hooks, "task " + std::to_string(ordinal) + " " + task.name() + " structure " + rec.structure.str());
  rec.zero_shot = evaluate_structure(state.library, rec.structure, task, cfg.online_eval);

  // Online exploration on private copies; the library must not move.
  const std::uint64_t before = state.library.checksum();
  AssembledPolicy policy = AssembledPolicy::assemble(state.library, rec.structure, true);
  for (auto* s : policy.parameter_sets()) s->reset_optimizer_state();
  auto [slot, inserted] = state.buffers.try_emplace(task.id(), task, cfg.buffer_capacity);
  require(inserted, "run_task: buffer already exists");
  TransitionBuffer& buffer = slot->second;
  EnvRunner runner(task, Rng::derive(cfg.seed, kTagRunner + tag));
  Rng update_rng(Rng::derive(cfg.seed, kTagUpdates + tag));
  long steps = rec.search_steps;
  while (steps < cfg.online_budget) {
    const int n = static_cast<int>(std::min<long>(cfg.ppo.steps_per_update, cfg.online_budget - steps));
    const RolloutBatch batch = collect_rollouts(runner, policy, n, &buffer);
    const PPOStats stats = ppo_update(policy, batch, cfg.ppo, update_rng);
    steps += n;
    rec.explore_steps += n;
    if (hooks.on_ppo_update) hooks.on_ppo_update(task, stats);
    if (stats.episodes > 0) {
      rec.curve.push_back({steps, stats.mean_return});
      if (hooks.on_curve_point) hooks.on_curve_point(task, rec.curve.back());
    }
  }
  if (state.library.checksum() != before)
    throw std::logic_error("run_task: online exploration modified the shared library");
  rec.online = evaluate_policy(policy, task, cfg.online_eval).mean_return;
  if (initializing) policy.write_back(state.library);
  state.records.push_back(rec);

  TaskRecord& stored = state.records.back();
  if (cfg.offline_phase && !state.buffers.empty()) {
    std::vector<TaskDescriptor> replay;
    for (const auto& r : state.records) {
      // A task whose whole budget went to search has nothing to replay.
      if (state.buffers.at(r.task.id()).size() == 0) continue;
      if (cfg.replay_all_tasks || shares_module(r.structure, stored.structure)) replay.push_back(r.task);
    }
    offline_consolidation(state, replay, cfg, Rng::derive(cfg.seed, kTagOffline + tag));
  }
  stored.offline = evaluate_structure(state.library, stored.structure, task, cfg.offline_eval);
  emit(hooks, "task " + task.name() + " zero-shot " + std::to_string(stored.zero_shot) + " online " +
                  std::to_string(stored.online) + " offline " + std::to_string(stored.offline));
  return stored;
}

void evaluate_final(LifetimeState& state, const LifelongConfig& cfg) {
  for (auto& r : state.records) r.final = evaluate_structure(state.library, r.structure, r.task, cfg.offline_eval);
}

// ---- checkpoints ----------------------------------------------------------

namespace {

std::string module_prefix(int d, int i) { return "d" + std::to_string(d) + ".m" + std::to_string(i) + "."; }

nlohmann::json record_to_json(const TaskRecord& r) {
  nlohmann::json j;
  j["task"] = r.task.name();
  j["structure"] = r.structure.modules;
  j["zero_shot"] = r.zero_shot;
  j["online"] = r.online;
  j["offline"] = r.offline;
  j["final"] = r.final;
  j["search_steps"] = r.search_steps;
  j["explore_steps"] = r.explore_steps;
  j["search_truncated"] = r.search_truncated;
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : r.curve) curve.push_back({p.step, p.mean_return});
  j["curve"] = curve;
  return j;
}

TaskRecord record_from_json(const nlohmann::json& j) {
  TaskRecord r;
  r.task = TaskDescriptor::parse(j.at("task").get<std::string>());
  r.structure.modules = j.at("structure").get<std::array<int, kNumDepths>>();
  r.zero_shot = j.at("zero_shot").get<double>();
  r.online = j.at("online").get<double>();
  r.offline = j.at("offline").get<double>();
  r.final = j.at("final").get<double>();
  r.search_steps = j.at("search_steps").get<long>();
  r.explore_steps = j.at("explore_steps").get<long>();
  r.search_truncated = j.at("search_truncated").get<bool>();
  for (const auto& p : j.at("curve")) r.curve.push_back({p.at(0).get<long>(), p.at(1).get<double>()});
  return r;
}

}  // namespace

void save_library(const ModuleLibrary& lib, const std::string& path) {
  std::vector<ag::CheckpointEntry> entries;
  const auto k = lib.modules_per_depth();
  for (int d = 0; d < kNumDepths; ++d)
    for (int i = 0; i < k[d]; ++i) ag::append_parameter_set(entries, module_prefix(d, i), lib.module(d, i));
  ag::write_checkpoint(path, entries);
}

void load_library(ModuleLibrary& lib, const std::string& path) {
  const auto entries = ag::read_checkpoint(path);
  const auto k = lib.modules_per_depth();
  for (int d = 0; d < kNumDepths; ++d) {
    const std::string extra = module_prefix(d, k[d]);
    for (const auto& e : entries)
      if (e.name.starts_with(extra))
        throw std::runtime_error("load_library: '" + path + "' holds more than " + std::to_string(k[d]) +
                                 " modules at depth " + depth_name(d));
    for (int i = 0; i < k[d]; ++i) ag::restore_parameter_set(entries, module_prefix(d, i), lib.module(d, i));
  }
}

void save_lifetime(const LifetimeState& state, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "buffers");
  // Write to a temporary name first so an interrupted save never leaves a
  // checkpoint that claims more tasks than its library holds.
  const fs::path lib_tmp = fs::path(dir) / "library.ckpt.tmp";
  save_library(state.library, lib_tmp.string());
  for (const auto& [id, buf] : state.buffers) {
    const fs::path p = fs::path(dir) / "buffers" / (std::to_string(id) + ".buf");
    buf.save(p.string());
  }
  nlohmann::json j;
  j["version"] = 1;
  j["records"] = nlohmann::json::array();
  for (const auto& r : state.records) j["records"].push_back(record_to_json(r));
  j["value_to_module"] = state.value_to_module;
  const fs::path meta_tmp = fs::path(dir) / "lifetime.json.tmp";
  {
    std::ofstream os(meta_tmp);
    os << j.dump(1) << "\n";
    if (!os) throw std::runtime_error("save_lifetime: cannot write " + meta_tmp.string());
  }
  fs::rename(lib_tmp, fs::path(dir) / "library.ckpt");
  fs::rename(meta_tmp, fs::path(dir) / "lifetime.json");
}

bool load_lifetime(LifetimeState& state, const std::string& dir) {
  const fs::path meta = fs::path(dir) / "lifetime.json";
  if (!fs::exists(meta)) return false;
  nlohmann::json j;
  {
    std::ifstream is(meta);
    j = nlohmann::json::parse(is);
  }
  if (j.at("version").get<int>() != 1) throw std::runtime_error("load_lifetime: unsupported version");
  load_library(state.library, (fs::path(dir) / "library.ckpt").string());
  state.records.clear();
  state.buffers.clear();
  for (const auto& r : j.at("records")) state.records.push_back(record_from_json(r));
  state.value_to_module = j.at("value_to_module").get<std::array<std::array<int, 4>, kNumDepths>>();
  for (const auto& r : state.records) {
    const fs::path p = fs::path(dir) / "buffers" / (std::to_string(r.task.id()) + ".buf");
    state.buffers.emplace(r.task.id(), TransitionBuffer::load(p.string()));
  }
  return true;
}

LifetimeState run_lifetime(const std::vector<TaskDescriptor>& curriculum, const LifelongConfig& cfg,
                           const std::string& checkpoint_dir, const LifelongHooks& hooks) {
  LifetimeState state = make_lifetime_state(cfg);
  if (!checkpoint_dir.empty() && load_lifetime(state, checkpoint_dir)) {
    require(state.records.size() <= curriculum.size(), "run_lifetime: checkpoint is longer than the curriculum");
    for (std::size_t i = 0; i < state.records.size(); ++i)
      require(state.records[i].task == curriculum[i], "run_lifetime: checkpoint does not match the curriculum");
    emit(hooks, "resumed after " + std::to_string(state.records.size()) + " tasks");
  }
  for (std::size_t i = state.records.size(); i < curriculum.size(); ++i) {
    run_task(state, curriculum[i], cfg, hooks);
    if (!checkpoint_dir.empty()) save_lifetime(state, checkpoint_dir);
  }
  evaluate_final(state, cfg);
  if (!checkpoint_dir.empty()) save_lifetime(state, checkpoint_dir);
  return state;
}

}  // namespace lcrl
