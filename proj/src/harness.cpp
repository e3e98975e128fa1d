#include "lcrl/harness.hpp"

#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <type_traits>

namespace fs = std::filesystem;

namespace lcrl {

namespace {

constexpr std::uint64_t kTagCurriculum = 5000;
constexpr std::uint64_t kTagEval = 6000;
constexpr std::uint64_t kTagMtlRunner = 7000;
constexpr std::uint64_t kTagMtlUpdates = 8000;
constexpr std::uint64_t kTagHeldOut = 9000;

const double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = first + text.size();
  const auto r = std::from_chars(first, last, v);
  require(r.ec == std::errc{} && r.ptr == last,
          [&] { return "config: bad value '" + text + "' for key '" + key + "'"; });
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ContractViolation("config: bad boolean '" + text + "' for key '" + key + "'");
}

template <typename T>
void positive(const std::string& key, T v) {
  require(v > 0, [&] { return "config: '" + key + "' must be positive"; });
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
Field int_field(const char* key, T RunConfig::*member, bool must_be_positive = true) {
  return {key, [member](const RunConfig& c) { return std::to_string(c.*member); },
          [key, member, must_be_positive](RunConfig& c, const std::string& v) {
            const T x = parse_number<T>(key, v);
            if (must_be_positive) positive(key, x);
            if constexpr (std::is_signed_v<T>)
              require(x >= 0, [&] { return std::string("config: '") + key + "' must be non-negative"; });
            c.*member = x;
          }};
}

Field double_field(const char* key, double RunConfig::*member) {
  return {key, [member](const RunConfig& c) { return format_double(c.*member); },
          [key, member](RunConfig& c, const std::string& v) {
            const double x = parse_number<double>(key, v);
            require(std::isfinite(x) && x >= 0.0,
                    [&] { return std::string("config: '") + key + "' must be finite and non-negative"; });
            c.*member = x;
          }};
}

Field bool_field(const char* key, bool RunConfig::*member) {
  return {key, [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [key, member](RunConfig& c, const std::string& v) { c.*member = parse_bool(key, v); }};
}

Field eval_mode_field(const char* key, EvalMode RunConfig::*member) {
  return {key, [member](const RunConfig& c) { return std::string(eval_mode_name(c.*member)); },
          [member](RunConfig& c, const std::string& v) { c.*member = parse_eval_mode(v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"method", [](const RunConfig& c) { return std::string(method_name(c.method)); },
       [](RunConfig& c, const std::string& v) { c.method = parse_method(v); }},
      {"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
       [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); }},
      {"tasks", [](const RunConfig& c) { return c.tasks; },
       [](RunConfig& c, const std::string& v) {
         require(!v.empty(), "config: 'tasks' must not be empty");
         c.tasks = v;
       }},
      {"curriculum",
       [](const RunConfig& c) { return std::string(c.curriculum ? curriculum_mode_name(*c.curriculum) : "default"); },
       [](RunConfig& c, const std::string& v) {
         if (v == "default")
           c.curriculum.reset();
         else
           c.curriculum = parse_curriculum_mode(v);
       }},
      {"architecture", [](const RunConfig& c) { return std::string(architecture_mode_name(c.architecture)); },
       [](RunConfig& c, const std::string& v) { c.architecture = parse_architecture_mode(v); }},
      int_field("modules_per_depth", &RunConfig::modules_per_depth),
      int_field("env_steps_per_task", &RunConfig::env_steps_per_task),
      int_field("steps_per_update", &RunConfig::steps_per_update),
      double_field("learning_rate", &RunConfig::learning_rate),
      int_field("minibatch_size", &RunConfig::minibatch_size),
      int_field("epochs_per_update", &RunConfig::epochs_per_update),
      double_field("gae_lambda", &RunConfig::gae_lambda),
      double_field("gamma", &RunConfig::gamma),
      double_field("entropy_coef", &RunConfig::entropy_coef),
      double_field("clip", &RunConfig::clip),
      double_field("value_coef", &RunConfig::value_coef),
      double_field("max_grad_norm", &RunConfig::max_grad_norm),
      int_field("rollouts_per_combination", &RunConfig::rollouts_per_combination),
      int_field("replay_samples_per_task", &RunConfig::replay_samples_per_task),
      int_field("bcq_epochs", &RunConfig::bcq_epochs, false),
      double_field("bcq_tau", &RunConfig::bcq_tau),
      bool_field("bcq_relative_threshold", &RunConfig::bcq_relative_threshold),
      int_field("bcq_target_update_period", &RunConfig::bcq_target_update_period),
      int_field("bcq_updates_per_epoch", &RunConfig::bcq_updates_per_epoch, false),
      int_field("bcq_actor_warmup_updates", &RunConfig::bcq_actor_warmup_updates, false),
      bool_field("replay_all_tasks", &RunConfig::replay_all_tasks),
      double_field("pnc_lambda", &RunConfig::pnc_lambda),
      double_field("pnc_gamma", &RunConfig::pnc_gamma),
      int_field("distillation_epochs", &RunConfig::distillation_epochs, false),
      double_field("ewc_lambda", &RunConfig::ewc_lambda),
      double_field("ewc_gamma", &RunConfig::ewc_gamma),
      int_field("fisher_samples", &RunConfig::fisher_samples),
      int_field("eval_episodes", &RunConfig::eval_episodes),
      eval_mode_field("online_eval_mode", &RunConfig::online_eval_mode),
      eval_mode_field("offline_eval_mode", &RunConfig::offline_eval_mode),
      double_field("boltzmann_temperature", &RunConfig::boltzmann_temperature),
      int_field("mtl_steps_per_task_update", &RunConfig::mtl_steps_per_task_update),
  };
  return table;
}

bool is_lifelong(Method m) {
  return m == Method::comp_struct || m == Method::comp_search || m == Method::comp_search_nc;
}

}  // namespace

// ---- methods ----------------------------------------------------------------

const char* method_name(Method m) {
  switch (m) {
    case Method::comp_struct: return "comp-struct";
    case Method::comp_search: return "comp-search";
    case Method::comp_search_nc: return "comp-search-nc";
    case Method::stl: return "stl";
    case Method::ewc: return "ewc";
    case Method::pnc: return "pnc";
    case Method::pnc_batchrl: return "pnc-batchrl";
  }
  return "?";
}

std::vector<std::string> method_names() {
  return {"comp-struct", "comp-search", "comp-search-nc", "stl", "ewc", "pnc", "pnc-batchrl"};
}

Method parse_method(const std::string& s) {
  const auto names = method_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == s) return static_cast<Method>(i);
  throw ContractViolation("unknown method '" + s + "'");
}

// ---- RunConfig --------------------------------------------------------------

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  }
  throw ContractViolation("config: unknown key '" + key + "'");
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos,
            [&] { return "config line " + std::to_string(lineno) + ": expected key = value"; });
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) { return parse(read_text_file(path)); }

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

std::string RunConfig::hash() const {
  std::string body;
  for (const auto& f : fields())
    if (std::string(f.key) != "seed") body += std::string(f.key) + " = " + f.get(*this) + "\n";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, ag::fnv1a(body.data(), body.size()));
  return buf;
}

std::string RunConfig::run_name() const {
  return std::string(method_name(method)) + "-" + hash().substr(0, 8) + "-s" + std::to_string(seed);
}

CurriculumMode RunConfig::effective_curriculum() const {
  if (curriculum) return *curriculum;
  return method == Method::comp_search_nc ? CurriculumMode::random : CurriculumMode::disjoint_first;
}

PPOConfig RunConfig::ppo() const {
  PPOConfig p;
  p.steps_per_update = steps_per_update;
  p.minibatch = minibatch_size;
  p.epochs = epochs_per_update;
  p.optimizer.lr = static_cast<float>(learning_rate);
  p.gamma = gamma;
  p.gae_lambda = gae_lambda;
  p.entropy_coef = entropy_coef;
  p.clip = clip;
  p.value_coef = value_coef;
  p.max_grad_norm = max_grad_norm;
  p.validate();
  return p;
}

BCQConfig RunConfig::bcq() const {
  BCQConfig b;
  b.tau = static_cast<float>(bcq_tau);
  b.relative_threshold = bcq_relative_threshold;
  b.gamma = gamma;
  b.epochs = bcq_epochs;
  b.minibatch = minibatch_size;
  b.target_update_period = bcq_target_update_period;
  b.boltzmann_temperature = boltzmann_temperature;
  b.optimizer.lr = static_cast<float>(learning_rate);
  b.actor_warmup_updates = bcq_actor_warmup_updates;
  b.validate();
  return b;
}

EvalConfig RunConfig::eval(EvalMode mode) const {
  EvalConfig e;
  e.episodes = eval_episodes;
  e.mode = mode;
  e.temperature = boltzmann_temperature;
  e.tau = static_cast<float>(bcq_tau);
  e.seed = Rng::derive(seed, kTagEval);
  return e;
}

LifelongConfig RunConfig::lifelong() const {
  require(is_lifelong(method), "RunConfig::lifelong: method is not compositional");
  LifelongConfig c;
  c.source = method == Method::comp_struct ? StructureSource::ground_truth : StructureSource::search;
  c.arch.mode = architecture;
  c.modules_per_depth = {modules_per_depth, modules_per_depth, modules_per_depth};
  c.online_budget = env_steps_per_task;
  c.search_episodes = rollouts_per_combination;
  c.ppo = ppo();
  c.bcq = bcq();
  c.buffer_capacity = replay_samples_per_task;
  c.bcq_updates_per_epoch = bcq_updates_per_epoch;
  c.offline_phase = bcq_epochs > 0;
  c.replay_all_tasks = replay_all_tasks;
  c.online_eval = eval(online_eval_mode);
  c.offline_eval = eval(offline_eval_mode);
  c.seed = seed;
  c.validate();
  return c;
}

BaselineConfig RunConfig::baseline() const {
  require(!is_lifelong(method), "RunConfig::baseline: method is compositional");
  BaselineConfig c;
  c.arch.mode = architecture;
  c.online_budget = env_steps_per_task;
  c.ppo = ppo();
  c.bcq = bcq();
  c.buffer_capacity = replay_samples_per_task;
  c.bcq_updates_per_epoch = bcq_updates_per_epoch;
  c.ewc_lambda = ewc_lambda;
  c.ewc_gamma = ewc_gamma;
  c.fisher_samples = fisher_samples;
  c.pnc_lambda = pnc_lambda;
  c.pnc_gamma = pnc_gamma;
  c.distill_epochs = distillation_epochs;
  c.distill_minibatch = minibatch_size;
  c.online_eval = eval(online_eval_mode);
  c.offline_eval = eval(offline_eval_mode);
  c.seed = seed;
  return c;
}

std::vector<TaskDescriptor> resolve_curriculum(const RunConfig& cfg) {
  const std::string& spec = cfg.tasks;
  if (spec.find('/') != std::string::npos) {
    std::vector<TaskDescriptor> out;
    for (const auto& name : split(spec, ',')) {
      const TaskDescriptor t = TaskDescriptor::parse(trim(name));
      for (const auto& seen : out)
        require(!(seen == t), [&] { return "config: task " + t.name() + " listed twice"; });
      out.push_back(t);
    }
    return out;
  }
  Rng rng(Rng::derive(cfg.seed, kTagCurriculum));
  ComponentDepthSpec depths;
  depths.modules_per_depth = {cfg.modules_per_depth, cfg.modules_per_depth, cfg.modules_per_depth};
  // Disjoint-first needs at most as many disjoint tasks as component values.
  for (int& k : depths.modules_per_depth) k = std::min(k, 4);
  std::vector<TaskDescriptor> order = make_curriculum(enumerate_tasks(), cfg.effective_curriculum(), rng, depths).ordering;
  if (spec == "all") return order;
  const long n = parse_number<long>("tasks", spec);
  require(n > 0 && n <= static_cast<long>(order.size()), "config: task count out of range");
  order.resize(static_cast<std::size_t>(n));
  return order;
}

// ---- metrics ----------------------------------------------------------------

std::vector<MetricsRow> to_metrics_rows(const std::string& method, std::uint64_t seed,
                                        const std::vector<TaskRecord>& records) {
  std::vector<MetricsRow> rows;
  for (const auto& r : records)
    rows.push_back({method, seed, r.task.name(), r.zero_shot, r.online, r.offline, r.final});
  return rows;
}

namespace {

std::string metric_cell(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

double parse_cell(const std::string& s) {
  if (s == "nan") return kNaN;
  return parse_number<double>("metrics", s);
}

}  // namespace

std::string format_metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "method,seed,task,zero_shot,online,offline,final\n";
  for (const auto& r : rows)
    out += r.method + "," + std::to_string(r.seed) + "," + r.task + "," + metric_cell(r.zero_shot) + "," +
           metric_cell(r.online) + "," + metric_cell(r.offline) + "," + metric_cell(r.final) + "\n";
  return out;
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::vector<MetricsRow> rows;
  std::istringstream in(text);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    if (header) {
      require(line == "method,seed,task,zero_shot,online,offline,final", "metrics.csv: unexpected header");
      header = false;
      continue;
    }
    const auto cells = split(line, ',');
    require(cells.size() == 7, [&] { return "metrics.csv: bad row '" + line + "'"; });
    MetricsRow r;
    r.method = cells[0];
    r.seed = parse_number<std::uint64_t>("seed", cells[1]);
    r.task = cells[2];
    r.zero_shot = parse_cell(cells[3]);
    r.online = parse_cell(cells[4]);
    r.offline = parse_cell(cells[5]);
    r.final = parse_cell(cells[6]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string format_curves_jsonl(const std::vector<TaskRecord>& records) {
  std::string out;
  for (const auto& r : records)
    for (const auto& p : r.curve) {
      nlohmann::json j;
      j["task"] = r.task.name();
      j["step"] = p.step;
      j["mean_return"] = p.mean_return;
      out += j.dump() + "\n";
    }
  return out;
}

double mean_of(const std::vector<double>& v) {
  require(!v.empty(), "mean_of: empty input");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double standard_error(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  const double n = static_cast<double>(v.size());
  return std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

std::vector<StageSummary> summarize(const std::vector<MetricsRow>& rows) {
  std::vector<std::string> methods;
  for (const auto& r : rows)
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
  const std::array<std::pair<const char*, double MetricsRow::*>, 4> stages{{{"zero_shot", &MetricsRow::zero_shot},
                                                                            {"online", &MetricsRow::online},
                                                                            {"offline", &MetricsRow::offline},
                                                                            {"final", &MetricsRow::final}}};
  std::vector<StageSummary> out;
  for (const auto& m : methods) {
    for (const auto& [stage, member] : stages) {
      std::map<std::uint64_t, std::vector<double>> per_seed;
      for (const auto& r : rows)
        if (r.method == m && std::isfinite(r.*member)) per_seed[r.seed].push_back(r.*member);
      if (per_seed.empty()) continue;
      std::vector<double> seed_means;
      for (const auto& [seed, values] : per_seed) seed_means.push_back(mean_of(values));
      out.push_back({m, stage, mean_of(seed_means), standard_error(seed_means), static_cast<int>(seed_means.size())});
    }
  }
  return out;
}

std::string format_summary_csv(const std::vector<StageSummary>& s) {
  std::string out = "method,stage,mean,stderr,seeds\n";
  for (const auto& r : s)
    out += r.method + "," + r.stage + "," + metric_cell(r.mean) + "," + metric_cell(r.stderr_) + "," +
           std::to_string(r.seeds) + "\n";
  return out;
}

double curve_area(const std::vector<CurvePoint>& curve, long budget) {
  require(!curve.empty(), "curve_area: empty curve");
  require(budget > 0, "curve_area: budget must be positive");
  // Step function: each point's value holds over the interval ending at it;
  // the first value extends back to step 0 and the last forward to the budget.
  double area = 0.0;
  long prev = 0;
  for (const auto& p : curve) {
    require(p.step >= prev && p.step <= budget, "curve_area: steps must be sorted and within the budget");
    area += static_cast<double>(p.step - prev) * p.mean_return;
    prev = p.step;
  }
  area += static_cast<double>(budget - prev) * curve.back().mean_return;
  return area / static_cast<double>(budget);
}

TransferSummary transfer_metrics(const std::vector<TaskRecord>& lifelong, const std::vector<TaskRecord>& stl,
                                 long budget) {
  require(!lifelong.empty(), "transfer_metrics: empty table");
  require(lifelong.size() == stl.size(), "transfer_metrics: tables cover different task counts");
  std::vector<double> forward, drop;
  for (const auto& r : lifelong) {
    const auto it = std::find_if(stl.begin(), stl.end(), [&](const TaskRecord& s) { return s.task == r.task; });
    require(it != stl.end(), [&] { return "transfer_metrics: task " + r.task.name() + " missing from baseline"; });
    forward.push_back(curve_area(r.curve, budget) - curve_area(it->curve, budget));
    const double reference = std::isfinite(r.offline) ? r.offline : r.online;
    drop.push_back(reference - r.final);
  }
  TransferSummary s;
  s.forward_transfer = mean_of(forward);
  const double mean_drop = mean_of(drop);
  s.forgetting = std::max(0.0, mean_drop);
  s.backward_transfer = std::max(0.0, -mean_drop);
  return s;
}

// ---- MTL --------------------------------------------------------------------

StructureAssignment value_structure(const TaskDescriptor& t) {
  StructureAssignment s;
  for (int d = 0; d < kNumDepths; ++d) s.modules[static_cast<std::size_t>(d)] = t.component(d);
  return s;
}

std::uint64_t mtl_runner_seed(std::uint64_t seed, const TaskDescriptor& task) {
  return Rng::derive(seed, kTagMtlRunner + static_cast<std::uint64_t>(task.id()));
}

std::uint64_t mtl_update_seed(std::uint64_t seed, const TaskDescriptor& task) {
  return Rng::derive(seed, kTagMtlUpdates + static_cast<std::uint64_t>(task.id()));
}

MTLResult mtl_train(ModuleLibrary& lib, const std::vector<MTLTask>& tasks, const MTLConfig& cfg,
                    const LifelongHooks& hooks) {
  require(!tasks.empty(), "mtl_train: no tasks");
  require(cfg.steps_per_task_update > 0 && cfg.steps_per_task > 0, "mtl_train: step counts must be positive");
  cfg.ppo.validate();
  const std::size_t T = tasks.size();
  std::vector<AssembledPolicy> policies;
  std::vector<EnvRunner> runners;
  std::vector<Rng> shuffles;
  policies.reserve(T);
  runners.reserve(T);
  for (const auto& t : tasks) {
    policies.push_back(AssembledPolicy::assemble(lib, t.structure, false));
    runners.emplace_back(t.task, mtl_runner_seed(cfg.seed, t.task));
    shuffles.emplace_back(mtl_update_seed(cfg.seed, t.task));
  }
  // Each library module exactly once, in first-use order.
  std::vector<ag::ParameterSet*> sets;
  for (auto& p : policies)
    for (auto* s : p.parameter_sets())
      if (std::find(sets.begin(), sets.end(), s) == sets.end()) sets.push_back(s);

  const float weight = 1.0f / static_cast<float>(T);
  MTLResult result;
  result.curves.resize(T);
  long steps = 0;
  while (steps < cfg.steps_per_task) {
    const int n = static_cast<int>(std::min<long>(cfg.steps_per_task_update, cfg.steps_per_task - steps));
    std::vector<RolloutBatch> batches;
    std::vector<PreparedBatch> prepared;
    batches.reserve(T);
    prepared.reserve(T);
    for (std::size_t i = 0; i < T; ++i) batches.push_back(collect_rollouts(runners[i], policies[i], n, nullptr));
    for (std::size_t i = 0; i < T; ++i) prepared.push_back(prepare_batch(batches[i], cfg.ppo));
    const int mb = std::min(cfg.ppo.minibatch, n);
    std::vector<std::vector<int>> orders(T, std::vector<int>(static_cast<std::size_t>(n)));
    for (auto& o : orders) std::iota(o.begin(), o.end(), 0);
    for (int epoch = 0; epoch < cfg.ppo.epochs; ++epoch) {
      for (std::size_t i = 0; i < T; ++i) shuffles[i].shuffle(orders[i].begin(), orders[i].end());
      for (int start = 0; start < n; start += mb) {
        const int len = std::min(mb, n - start);
        for (auto* s : sets) s->zero_grad();
        ag::Tensor total;
        for (std::size_t i = 0; i < T; ++i) {
          const std::span<const int> idx(orders[i].data() + start, static_cast<std::size_t>(len));
          ag::Tensor loss = ppo_loss(policies[i], prepared[i], idx, cfg.ppo).total;
          if (T > 1) loss = ag::scale(loss, weight);
          total = total.defined() ? ag::add(total, loss) : loss;
        }
        total.backward();
        if (cfg.ppo.max_grad_norm > 0.0) ag::clip_grad_norm(sets, cfg.ppo.max_grad_norm);
        for (auto* s : sets)
          if (s->all_have_grad()) ag::optimizer_step(*s, cfg.ppo.optimizer);
      }
    }
    steps += n;
    result.updates += 1;
    for (std::size_t i = 0; i < T; ++i) {
      const auto& ret = batches[i].episode_returns;
      if (ret.empty()) continue;
      double s = 0.0;
      for (double r : ret) s += r;
      result.curves[i].push_back({steps, s / static_cast<double>(ret.size())});
      if (hooks.on_curve_point) hooks.on_curve_point(tasks[i].task, result.curves[i].back());
    }
  }
  return result;
}

HeldOutSplit floor_heldout_split(std::uint64_t seed) {
  std::vector<int> colors{0, 1, 2, 3};
  Rng rng(Rng::derive(seed, kTagHeldOut));
  rng.shuffle(colors.begin(), colors.end());
  HeldOutSplit split;
  const int floor = static_cast<int>(StaticObject::floor);
  for (int c = 0; c < kNumColors; ++c)
    for (int d = 0; d < kNumDynamics; ++d) {
      const TaskDescriptor t = TaskDescriptor::from_indices(floor, c, d);
      (colors[static_cast<std::size_t>(d)] == c ? split.held_out : split.train).push_back(t);
    }
  return split;
}

std::vector<double> zero_shot_eval(ModuleLibrary& lib, const std::vector<MTLTask>& tasks, const EvalConfig& cfg) {
  std::vector<double> out;
  out.reserve(tasks.size());
  for (const auto& t : tasks) out.push_back(evaluate_structure(lib, t.structure, t.task, cfg));
  return out;
}

double module_swap_eval(ModuleLibrary& lib, const MTLTask& task, int wrong_depth, int wrong_index,
                        const EvalConfig& cfg) {
  require(wrong_depth >= 0 && wrong_depth < kNumDepths, "module_swap_eval: depth out of range");
  require(wrong_index >= 0 && wrong_index < lib.modules_at(wrong_depth), "module_swap_eval: index out of range");
  require(task.structure[wrong_depth] != wrong_index, "module_swap_eval: replacement equals the correct module");
  StructureAssignment s = task.structure;
  s.modules[static_cast<std::size_t>(wrong_depth)] = wrong_index;
  return evaluate_structure(lib, s, task.task, cfg);
}

// ---- run directories --------------------------------------------------------

void write_text_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, p);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunOutput execute_run(const RunConfig& cfg, const std::string& out_root, bool quiet) {
  const std::vector<TaskDescriptor> curriculum = resolve_curriculum(cfg);
  RunOutput result;
  result.dir = (fs::path(out_root) / cfg.run_name()).string();
  fs::create_directories(result.dir);
  write_text_file(result.dir + "/config.txt", cfg.serialize());

  std::ofstream ppo_log(result.dir + "/ppo.jsonl", std::ios::trunc);
  std::ofstream events(result.dir + "/events.log", std::ios::trunc);
  LifelongHooks hooks;
  hooks.on_ppo_update = [&](const TaskDescriptor& t, const PPOStats& s) {
    nlohmann::json j = nlohmann::json::parse(s.to_json());
    j["task"] = t.name();
    ppo_log << j.dump() << "\n";
  };
  hooks.on_event = [&](const std::string& msg) {
    events << msg << "\n";
    events.flush();
    if (!quiet) std::cerr << "[" << method_name(cfg.method) << " s" << cfg.seed << "] " << msg << "\n";
  };

  if (is_lifelong(cfg.method)) {
    const LifelongConfig lc = cfg.lifelong();
    LifetimeState state = run_lifetime(curriculum, lc, result.dir + "/checkpoints", hooks);
    result.records = state.records;
  } else {
    const BaselineConfig bc = cfg.baseline();
    hooks.on_event("start " + std::to_string(curriculum.size()) + " tasks");
    switch (cfg.method) {
      case Method::stl: result.records = run_stl(curriculum, bc, hooks); break;
      case Method::ewc: result.records = run_ewc(curriculum, bc, hooks); break;
      case Method::pnc: result.records = run_pnc(curriculum, CompressMode::ewc_distill, bc, hooks); break;
      case Method::pnc_batchrl: result.records = run_pnc(curriculum, CompressMode::batch_rl, bc, hooks); break;
      default: throw std::logic_error("execute_run: unhandled method");
    }
    for (const auto& r : result.records)
      hooks.on_event("task " + r.task.name() + " online " + std::to_string(r.online) + " final " +
                     std::to_string(r.final));
  }
  write_text_file(result.dir + "/metrics.csv",
                  format_metrics_csv(to_metrics_rows(method_name(cfg.method), cfg.seed, result.records)));
  write_text_file(result.dir + "/curves.jsonl", format_curves_jsonl(result.records));
  return result;
}

std::vector<MetricsRow> collect_metrics(const std::vector<std::string>& run_dirs) {
  std::vector<MetricsRow> rows;
  for (const auto& d : run_dirs) {
    auto part = parse_metrics_csv(read_text_file(d + "/metrics.csv"));
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return rows;
}

std::vector<CurveSummaryPoint> summarize_curves(const std::vector<std::string>& run_dirs, long bin) {
  require(bin > 0, "summarize_curves: bin must be positive");
  // method -> bin -> values; methods kept in first-seen order.
  std::vector<std::string> methods;
  std::map<std::string, std::map<long, std::vector<double>>> bins;
  for (const auto& d : run_dirs) {
    const RunConfig cfg = RunConfig::load(d + "/config.txt");
    const std::string m = method_name(cfg.method);
    if (std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
    std::istringstream in(read_text_file(d + "/curves.jsonl"));
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const long step = j.at("step").get<long>();
      const long b = (step + bin - 1) / bin * bin;
      bins[m][b].push_back(j.at("mean_return").get<double>());
    }
  }
  std::vector<CurveSummaryPoint> out;
  for (const auto& m : methods)
    for (const auto& [step, values] : bins[m])
      out.push_back({m, step, mean_of(values), standard_error(values), static_cast<int>(values.size())});
  return out;
}

std::string format_curve_summary_csv(const std::vector<CurveSummaryPoint>& s) {
  std::string out = "method,step,mean_return,stderr,count\n";
  for (const auto& p : s)
    out += p.method + "," + std::to_string(p.step) + "," + metric_cell(p.mean) + "," + metric_cell(p.stderr_) + "," +
           std::to_string(p.count) + "\n";
  return out;
}

SwapSummary swap_ablation(ModuleLibrary& lib, const std::vector<MTLTask>& tasks, const EvalConfig& cfg) {
  require(!tasks.empty(), "swap_ablation: no tasks");
  SwapSummary s;
  std::vector<double> correct;
  std::array<std::vector<double>, kNumDepths> per_depth;
  for (const auto& t : tasks) {
    const double c = evaluate_structure(lib, t.structure, t.task, cfg);
    correct.push_back(c);
    s.rows.push_back({t.task.name(), -1, -1, c});
    for (int d = 0; d < kNumDepths; ++d) {
      std::vector<double> wrong;
      for (int i = 0; i < lib.modules_at(d); ++i) {
        if (i == t.structure[d]) continue;
        const double r = module_swap_eval(lib, t, d, i, cfg);
        wrong.push_back(r);
        s.rows.push_back({t.task.name(), d, i, r});
      }
      if (!wrong.empty()) per_depth[static_cast<std::size_t>(d)].push_back(mean_of(wrong));
    }
  }
  s.correct = mean_of(correct);
  for (int d = 0; d < kNumDepths; ++d) {
    const auto& v = per_depth[static_cast<std::size_t>(d)];
    s.swapped[static_cast<std::size_t>(d)] = v.empty() ? kNaN : mean_of(v);
  }
  return s;
}

std::string format_swap_csv(const SwapSummary& s) {
  std::string out = "task,swapped_depth,module,mean_return\n";
  for (const auto& r : s.rows)
    out += r.task + "," + (r.depth < 0 ? std::string("none") : std::string(depth_name(r.depth))) + "," +
           (r.depth < 0 ? std::string("-") : std::to_string(r.module)) + "," + metric_cell(r.mean_return) + "\n";
  return out;
}

namespace {

std::string mtl_run_name(const RunConfig& cfg) { return "mtl-" + cfg.hash().substr(0, 8) + "-s" + std::to_string(cfg.seed); }

ModuleLibrary fresh_library(const RunConfig& cfg) {
  ArchitectureConfig arch;
  arch.mode = cfg.architecture;
  const int k = cfg.modules_per_depth;
  Rng rng(Rng::derive(cfg.seed, 0));
  return ModuleLibrary(arch, {k, k, k}, rng);
}

std::vector<MTLTask> with_structures(const std::vector<TaskDescriptor>& tasks) {
  std::vector<MTLTask> out;
  for (const auto& t : tasks) out.push_back({t, value_structure(t)});
  return out;
}

}  // namespace

MTLRunOutput execute_mtl(const RunConfig& cfg, const std::string& out_root, bool quiet) {
  require(cfg.modules_per_depth >= 4, "execute_mtl: ground-truth structures need 4 modules per depth");
  MTLRunOutput out;
  if (cfg.tasks == "all") {
    const HeldOutSplit split = floor_heldout_split(cfg.seed);
    out.train = with_structures(split.train);
    out.held_out = with_structures(split.held_out);
  } else {
    std::vector<TaskDescriptor> list;
    for (const auto& name : split(cfg.tasks, ',')) list.push_back(TaskDescriptor::parse(trim(name)));
    out.train = with_structures(list);
  }
  out.dir = (fs::path(out_root) / mtl_run_name(cfg)).string();
  fs::create_directories(out.dir);
  write_text_file(out.dir + "/config.txt", cfg.serialize());
  std::string split_text;
  for (const auto& t : out.train) split_text += "train " + t.task.name() + "\n";
  for (const auto& t : out.held_out) split_text += "heldout " + t.task.name() + "\n";
  write_text_file(out.dir + "/split.txt", split_text);

  out.library = fresh_library(cfg);
  MTLConfig mc;
  mc.ppo = cfg.ppo();
  mc.steps_per_task_update = cfg.mtl_steps_per_task_update;
  mc.steps_per_task = cfg.env_steps_per_task;
  mc.seed = cfg.seed;
  LifelongHooks hooks;
  long last_report = 0;
  if (!quiet)
    hooks.on_curve_point = [&](const TaskDescriptor& t, const CurvePoint& p) {
      if (t == out.train.front().task && p.step - last_report >= 20 * mc.steps_per_task_update) {
        last_report = p.step;
        std::cerr << "[mtl s" << cfg.seed << "] step " << p.step << " " << t.name() << " return " << p.mean_return
                  << "\n";
      }
    };
  const MTLResult res = mtl_train(out.library, out.train, mc, hooks);

  const EvalConfig ec = cfg.eval(cfg.online_eval_mode);
  out.train_returns = zero_shot_eval(out.library, out.train, ec);
  out.held_out_returns = zero_shot_eval(out.library, out.held_out, ec);
  save_library(out.library, out.dir + "/library.ckpt");

  std::string metrics = "task,role,mean_return\n";
  std::vector<TaskRecord> curves;
  for (std::size_t i = 0; i < out.train.size(); ++i) {
    metrics += out.train[i].task.name() + ",train," + metric_cell(out.train_returns[i]) + "\n";
    TaskRecord r;
    r.task = out.train[i].task;
    r.curve = res.curves[i];
    curves.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < out.held_out.size(); ++i)
    metrics += out.held_out[i].task.name() + ",heldout," + metric_cell(out.held_out_returns[i]) + "\n";
  write_text_file(out.dir + "/mtl_metrics.csv", metrics);
  write_text_file(out.dir + "/curves.jsonl", format_curves_jsonl(curves));
  return out;
}

MTLRunOutput load_mtl_run(const std::string& dir) {
  const RunConfig cfg = RunConfig::load(dir + "/config.txt");
  MTLRunOutput out;
  out.dir = dir;
  std::istringstream in(read_text_file(dir + "/split.txt"));
  std::string role, name;
  while (in >> role >> name) {
    const MTLTask t{TaskDescriptor::parse(name), value_structure(TaskDescriptor::parse(name))};
    if (role == "train")
      out.train.push_back(t);
    else if (role == "heldout")
      out.held_out.push_back(t);
    else
      throw std::runtime_error("split.txt: unknown role '" + role + "'");
  }
  out.library = fresh_library(cfg);
  load_library(out.library, dir + "/library.ckpt");
  return out;
}

}  // namespace lcrl
