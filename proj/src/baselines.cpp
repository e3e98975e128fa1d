#include "lcrl/baselines.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace lcrl {

using ag::Tensor;

namespace {

constexpr std::uint64_t kTagInit = 0;
constexpr std::uint64_t kTagRunner = 1000;
constexpr std::uint64_t kTagUpdates = 2000;
constexpr std::uint64_t kTagFisher = 3000;
constexpr std::uint64_t kTagCompress = 4000;

const double kNotApplicable = std::numeric_limits<double>::quiet_NaN();

ArchitectureConfig with_descriptor(ArchitectureConfig arch) {
  arch.descriptor_width = ComponentDepthSpec{}.multihot_width();
  return arch;
}

std::vector<float> descriptor_bits(const TaskDescriptor& t) { return descriptor_to_multihot(t).bits; }

// PPO for `budget` steps, every transition into `buffer` when given.
void train_online(ActorCritic& policy, const TaskDescriptor& task, long budget, const PPOConfig& ppo,
                  std::uint64_t runner_seed, std::uint64_t update_seed, TransitionBuffer* buffer, TaskRecord& rec,
                  const LifelongHooks& hooks, const ExtraLoss& extra = {}) {
  EnvRunner runner(task, runner_seed);
  Rng update_rng(update_seed);
  long steps = 0;
  while (steps < budget) {
    const int n = static_cast<int>(std::min<long>(ppo.steps_per_update, budget - steps));
    const RolloutBatch batch = collect_rollouts(runner, policy, n, buffer);
    const PPOStats stats = ppo_update(policy, batch, ppo, update_rng, extra);
    steps += n;
    rec.explore_steps += n;
    if (hooks.on_ppo_update) hooks.on_ppo_update(task, stats);
    if (stats.episodes > 0) {
      rec.curve.push_back({steps, stats.mean_return});
      if (hooks.on_curve_point) hooks.on_curve_point(task, rec.curve.back());
    }
  }
}

}  // namespace

// ---- EWC ------------------------------------------------------------------

void FisherState::accumulate(const std::vector<std::vector<std::vector<float>>>& f_new,
                             std::span<ag::ParameterSet* const> sets, double gamma) {
  require(f_new.size() == sets.size(), "FisherState::accumulate: set count mismatch");
  if (fisher.empty()) {
    fisher = f_new;
  } else {
    require(fisher.size() == f_new.size(), "FisherState::accumulate: layout changed");
    for (std::size_t s = 0; s < fisher.size(); ++s)
      for (std::size_t i = 0; i < fisher[s].size(); ++i)
        for (std::size_t j = 0; j < fisher[s][i].size(); ++j)
          fisher[s][i][j] = static_cast<float>(gamma * fisher[s][i][j] + f_new[s][i][j]);
  }
  anchor.assign(sets.size(), {});
  for (std::size_t s = 0; s < sets.size(); ++s)
    for (const auto& p : sets[s]->entries()) anchor[s].emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  accumulations += 1;
}

Tensor ewc_penalty(std::span<ag::ParameterSet* const> sets, const FisherState& state, double lambda) {
  if (state.empty()) return Tensor::scalar(0.0f);
  require(state.fisher.size() == sets.size() && state.anchor.size() == sets.size(), "ewc_penalty: layout mismatch");
  Tensor total;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    const auto& entries = sets[s]->entries();
    require(entries.size() == state.fisher[s].size(), "ewc_penalty: layout mismatch");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const Tensor& theta = entries[i].tensor;
      const Tensor anchor = Tensor::from(theta.shape(), state.anchor[s][i]);
      const Tensor f = Tensor::from(theta.shape(), state.fisher[s][i]);
      const Tensor term = ag::sum(ag::mul(f, ag::square(ag::sub(theta, anchor))));
      total = total.defined() ? ag::add(total, term) : term;
    }
  }
  return ag::scale(total, static_cast<float>(lambda / 2.0));
}

std::vector<std::vector<std::vector<float>>> estimate_fisher(ActorCritic& policy, const TaskDescriptor& task,
                                                             int samples, std::uint64_t seed) {
  require(samples > 0, "estimate_fisher: samples must be positive");
  auto sets = policy.parameter_sets();
  std::vector<std::vector<std::vector<float>>> f(sets.size());
  for (std::size_t s = 0; s < sets.size(); ++s)
    for (const auto& p : sets[s]->entries()) f[s].emplace_back(p.tensor.numel(), 0.0f);
  EnvRunner runner(task, seed);
  for (int i = 0; i < samples; ++i) {
    for (auto* s : sets) s->zero_grad();
    const PolicyOutput out = policy.forward(obs_batch(runner.observation()));
    const auto logits = out.logits.values();
    const float m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (float l : logits) z += std::exp(static_cast<double>(l - m));
    double u = runner.action_rng().uniform() * z;
    int action = kNumActions - 1;
    for (int a = 0; a < kNumActions; ++a) {
      const double w = std::exp(static_cast<double>(logits[static_cast<std::size_t>(a)] - m));
      if (u < w) {
        action = a;
        break;
      }
      u -= w;
    }
    const int idx[1] = {action};
    ag::sum(ag::gather(ag::log_softmax(out.logits), idx)).backward();
    for (std::size_t s = 0; s < sets.size(); ++s) {
      auto& entries = sets[s]->entries();
      for (std::size_t j = 0; j < entries.size(); ++j) {
        if (!entries[j].tensor.has_grad()) continue;
        const auto g = entries[j].tensor.grad();
        for (std::size_t k = 0; k < g.size(); ++k) f[s][j][k] += g[k] * g[k];
      }
    }
    runner.step(action);
  }
  for (auto& set : f)
    for (auto& t : set)
      for (float& x : t) x /= static_cast<float>(samples);
  for (auto* s : sets) s->zero_grad();
  return f;
}

// ---- STL --------------------------------------------------------------------

std::vector<TaskRecord> run_stl(const std::vector<TaskDescriptor>& tasks, const BaselineConfig& cfg,
                                const LifelongHooks& hooks) {
  std::vector<TaskRecord> out;
  ArchitectureConfig arch = cfg.arch;
  arch.descriptor_width = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto tag = static_cast<std::uint64_t>(i + 1);
    Rng init(Rng::derive(cfg.seed, kTagInit + tag));
    ModuleLibrary net = make_monolithic(arch, init);
    AssembledPolicy policy = AssembledPolicy::assemble(net, StructureAssignment{}, false);
    TaskRecord rec;
    rec.task = tasks[i];
    rec.zero_shot = evaluate_policy(policy, tasks[i], cfg.online_eval).mean_return;
    train_online(policy, tasks[i], cfg.online_budget, cfg.ppo, Rng::derive(cfg.seed, kTagRunner + tag),
                 Rng::derive(cfg.seed, kTagUpdates + tag), nullptr, rec, hooks);
    rec.online = evaluate_policy(policy, tasks[i], cfg.online_eval).mean_return;
    rec.offline = kNotApplicable;
    // Each network trains on its own task only, nothing later can change it.
    rec.final = rec.online;
    out.push_back(std::move(rec));
  }
  return out;
}

// ---- online EWC -------------------------------------------------------------

std::vector<TaskRecord> run_ewc(const std::vector<TaskDescriptor>& tasks, const BaselineConfig& cfg,
                                const LifelongHooks& hooks) {
  Rng init(Rng::derive(cfg.seed, kTagInit));
  ModuleLibrary net = make_monolithic(with_descriptor(cfg.arch), init);
  AssembledPolicy policy = AssembledPolicy::assemble(net, StructureAssignment{}, false);
  FisherState fisher;
  std::vector<TaskRecord> out;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto tag = static_cast<std::uint64_t>(i + 1);
    policy.set_descriptor(descriptor_bits(tasks[i]));
    TaskRecord rec;
    rec.task = tasks[i];
    rec.zero_shot = evaluate_policy(policy, tasks[i], cfg.online_eval).mean_return;
    auto sets = policy.parameter_sets();
    const ExtraLoss penalty = [&] { return ewc_penalty(sets, fisher, cfg.ewc_lambda); };
    train_online(policy, tasks[i], cfg.online_budget, cfg.ppo, Rng::derive(cfg.seed, kTagRunner + tag),
                 Rng::derive(cfg.seed, kTagUpdates + tag), nullptr, rec, hooks,
                 fisher.empty() ? ExtraLoss{} : penalty);
    rec.online = evaluate_policy(policy, tasks[i], cfg.online_eval).mean_return;
    rec.offline = kNotApplicable;
    fisher.accumulate(estimate_fisher(policy, tasks[i], cfg.fisher_samples, Rng::derive(cfg.seed, kTagFisher + tag)),
                      sets, cfg.ewc_gamma);
    out.push_back(std::move(rec));
  }
  for (auto& rec : out) {
    policy.set_descriptor(descriptor_bits(rec.task));
    rec.final = evaluate_policy(policy, rec.task, cfg.online_eval).mean_return;
  }
  return out;
}

// ---- progress and compress -------------------------------------------------

namespace {

void add_lateral(ag::ParameterSet& p, const std::string& name, int out, int in, float gain, Rng& rng) {
  Tensor w = Tensor::zeros({out, in}, true);
  ag::init_orthogonal(w, gain, rng);
  p.add(name + ".w", w);
  p.add(name + ".b", Tensor::zeros({out}, true));
}

Tensor lateral(const Tensor& x, const ag::ParameterSet& p, const std::string& name) {
  return ag::dense(x, p.get(name + ".w"), p.get(name + ".b"));
}

}  // namespace

ag::ParameterSet make_laterals(const ArchitectureConfig& arch, Rng& rng) {
  ag::ParameterSet p;
  const int in = arch.feature_width() + arch.descriptor_width;
  const int h = arch.hidden_units;
  add_lateral(p, "actor.hidden", h, in, 1.0f, rng);
  add_lateral(p, "critic.hidden", h, in, 1.0f, rng);
  add_lateral(p, "actor.out", kNumActions, h, 0.01f, rng);
  add_lateral(p, "critic.out", kNumActions, h, 1.0f, rng);
  return p;
}

ProgressivePolicy::ProgressivePolicy(ModuleLibrary& knowledge, ModuleLibrary& active, ag::ParameterSet& laterals)
    : kb_(AssembledPolicy::assemble(knowledge, StructureAssignment{}, false)),
      active_(AssembledPolicy::assemble(active, StructureAssignment{}, false)),
      laterals_(&laterals) {}

void ProgressivePolicy::set_descriptor(std::vector<float> bits) {
  kb_.set_descriptor(bits);
  active_.set_descriptor(std::move(bits));
}

PolicyOutput ProgressivePolicy::forward(const Tensor& obs) {
  PolicyOutput kb;
  {
    ag::NoGradGuard ng;
    kb = kb_.forward(obs);
  }
  const ag::ParameterSet& l = *laterals_;
  const LateralInputs lat{lateral(kb.features, l, "actor.hidden"), lateral(kb.features, l, "critic.hidden"),
                          lateral(kb.actor_hidden, l, "actor.out"), lateral(kb.critic_hidden, l, "critic.out")};
  const Tensor desc = descriptor_batch(active_.descriptor(), obs.dim(0));
  return modular_forward(active_.refs(), active_.arch(), obs, &desc, &lat);
}

std::vector<ag::ParameterSet*> ProgressivePolicy::parameter_sets() {
  auto sets = active_.parameter_sets();
  sets.push_back(laterals_);
  return sets;
}

AssembledPolicy knowledge_policy(ModuleLibrary& kb, const TaskDescriptor& task) {
  AssembledPolicy p = AssembledPolicy::assemble(kb, StructureAssignment{}, false);
  p.set_descriptor(descriptor_bits(task));
  return p;
}

PnCState make_pnc_state(const BaselineConfig& cfg) {
  Rng init(Rng::derive(cfg.seed, kTagInit));
  return PnCState{make_monolithic(with_descriptor(cfg.arch), init), {}, {}, {}};
}

namespace {

// Cross-entropy from the teacher's action distribution plus Q matching, with
// the EWC penalty holding the knowledge base near its previous solution.
void distill_into_knowledge(PnCState& state, ActorCritic& teacher, const TaskDescriptor& task,
                            const TransitionBuffer& buffer, const BaselineConfig& cfg, Rng& rng) {
  AssembledPolicy student = knowledge_policy(state.knowledge, task);
  auto sets = student.parameter_sets();
  const std::size_t n = buffer.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto mb = static_cast<std::size_t>(cfg.distill_minibatch);
  for (int epoch = 0; epoch < cfg.distill_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < n; start += mb) {
      const std::size_t len = std::min(mb, n - start);
      const TransitionBatch batch = buffer.gather(std::span<const std::size_t>(order.data() + start, len));
      const Tensor obs = batch.obs_tensor();
      PolicyOutput t;
      {
        ag::NoGradGuard ng;
        t = teacher.forward(obs);
      }
      const Tensor teacher_probs = ag::softmax(t.logits).detach();
      for (auto* s : sets) s->zero_grad();
      const PolicyOutput s = student.forward(obs);
      const Tensor ce = ag::scale(ag::mean(ag::sum_rows(ag::mul(teacher_probs, ag::log_softmax(s.logits)))), -1.0f);
      const Tensor q_match = ag::mean(ag::square(ag::sub(s.q, t.q.detach())));
      Tensor loss = ag::add(ce, q_match);
      if (!state.kb_fisher.empty()) loss = ag::add(loss, ewc_penalty(sets, state.kb_fisher, cfg.pnc_lambda));
      loss.backward();
      for (auto* p : sets)
        if (p->all_have_grad()) ag::optimizer_step(*p, cfg.ppo.optimizer);
    }
  }
}

}  // namespace

const TaskRecord& pnc_run_task(PnCState& state, const TaskDescriptor& task, CompressMode mode,
                               const BaselineConfig& cfg, std::uint64_t task_seed, const LifelongHooks& hooks) {
  require(state.buffers.find(task.id()) == state.buffers.end(), "pnc_run_task: task already seen");
  const ArchitectureConfig arch = with_descriptor(cfg.arch);
  Rng init(Rng::derive(task_seed, kTagInit));
  ModuleLibrary active = make_monolithic(arch, init);
  ag::ParameterSet laterals = make_laterals(arch, init);
  ProgressivePolicy progress(state.knowledge, active, laterals);
  progress.set_descriptor(descriptor_bits(task));

  TaskRecord rec;
  rec.task = task;
  rec.zero_shot = evaluate_policy(progress, task, cfg.online_eval).mean_return;
  const std::uint64_t before = state.knowledge.checksum();
  TransitionBuffer& buffer = state.buffers.try_emplace(task.id(), task, cfg.buffer_capacity).first->second;
  train_online(progress, task, cfg.online_budget, cfg.ppo, Rng::derive(task_seed, kTagRunner),
               Rng::derive(task_seed, kTagUpdates), &buffer, rec, hooks);
  if (state.knowledge.checksum() != before)
    throw std::logic_error("pnc_run_task: progress phase modified the knowledge base");
  rec.online = evaluate_policy(progress, task, cfg.online_eval).mean_return;
  state.records.push_back(rec);

  Rng rng(Rng::derive(task_seed, kTagCompress));
  if (mode == CompressMode::ewc_distill) {
    distill_into_knowledge(state, progress, task, buffer, cfg, rng);
    AssembledPolicy kb = knowledge_policy(state.knowledge, task);
    auto sets = kb.parameter_sets();
    state.kb_fisher.accumulate(estimate_fisher(kb, task, cfg.fisher_samples, Rng::derive(task_seed, kTagFisher)),
                               sets, cfg.pnc_gamma);
  } else {
    ModuleLibrary target = state.knowledge.clone();
    std::vector<AssembledPolicy> current, frozen;
    current.reserve(state.records.size());
    frozen.reserve(state.records.size());
    std::vector<BCQTaskSlot> slots;
    for (const auto& r : state.records) {
      current.push_back(knowledge_policy(state.knowledge, r.task));
      frozen.push_back(knowledge_policy(target, r.task));
      slots.push_back({&current.back(), &frozen.back(), &state.buffers.at(r.task.id())});
    }
    multi_task_bcq(slots, cfg.bcq, cfg.bcq_updates_per_epoch, [&] { target.copy_values_from(state.knowledge); },
                   rng);
  }
  TaskRecord& stored = state.records.back();
  AssembledPolicy kb = knowledge_policy(state.knowledge, task);
  stored.offline = evaluate_policy(kb, task, cfg.offline_eval).mean_return;
  return stored;
}

std::vector<TaskRecord> run_pnc(const std::vector<TaskDescriptor>& tasks, CompressMode mode,
                                const BaselineConfig& cfg, const LifelongHooks& hooks) {
  PnCState state = make_pnc_state(cfg);
  for (std::size_t i = 0; i < tasks.size(); ++i)
    pnc_run_task(state, tasks[i], mode, cfg, Rng::derive(cfg.seed, kTagRunner + i + 1), hooks);
  for (auto& rec : state.records) {
    AssembledPolicy kb = knowledge_policy(state.knowledge, rec.task);
    rec.final = evaluate_policy(kb, rec.task, cfg.offline_eval).mean_return;
  }
  return state.records;
}

}  // namespace lcrl
