#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "lcrl/harness.hpp"

using namespace lcrl;
namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

TaskDescriptor task(int s, int c, int d) { return TaskDescriptor::from_indices(s, c, d); }

ModuleLibrary library(int k, std::uint64_t seed) {
  Rng rng(seed);
  return ModuleLibrary(ArchitectureConfig{}, {k, k, k}, rng);
}

MTLConfig small_mtl() {
  MTLConfig cfg;
  cfg.ppo.steps_per_update = 256;
  cfg.ppo.minibatch = 128;
  cfg.ppo.epochs = 2;
  cfg.ppo.entropy_coef = 0.01;
  cfg.steps_per_task_update = 256;
  cfg.steps_per_task = 512;
  cfg.seed = 31;
  return cfg;
}

RunConfig tiny_run(Method m) {
  RunConfig cfg;
  cfg.method = m;
  cfg.seed = 3;
  cfg.tasks = "2";
  cfg.modules_per_depth = 2;
  cfg.env_steps_per_task = 512;
  cfg.steps_per_update = 256;
  cfg.minibatch_size = 128;
  cfg.epochs_per_update = 1;
  cfg.entropy_coef = 0.01;
  cfg.rollouts_per_combination = 1;
  cfg.replay_samples_per_task = 1024;
  cfg.bcq_epochs = 1;
  cfg.bcq_updates_per_epoch = 2;
  cfg.distillation_epochs = 1;
  cfg.fisher_samples = 128;
  cfg.eval_episodes = 2;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("lcrl_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

MetricsRow row(const std::string& m, std::uint64_t seed, const std::string& t, double v) {
  return {m, seed, t, v, v, kNaN, v};
}

}  // namespace

TEST_CASE("single-task MTL reproduces plain PPO updates") {
  const TaskDescriptor t = task(1, 2, 3);
  const MTLConfig cfg = small_mtl();
  ModuleLibrary a = library(2, 5), b = library(2, 5);
  const StructureAssignment s{{1, 0, 1}};
  const MTLResult res = mtl_train(a, {{t, s}}, cfg);
  CHECK(res.updates == 2);

  AssembledPolicy policy = AssembledPolicy::assemble(b, s, false);
  EnvRunner runner(t, mtl_runner_seed(cfg.seed, t));
  Rng rng(mtl_update_seed(cfg.seed, t));
  std::vector<double> returns;
  for (int u = 0; u < 2; ++u) {
    const RolloutBatch batch = collect_rollouts(runner, policy, cfg.steps_per_task_update, nullptr);
    ppo_update(policy, batch, cfg.ppo, rng);
  }
  CHECK(a.checksum() == b.checksum());
}

TEST_CASE("duplicated task averages to the same update; unused modules stay put") {
  const TaskDescriptor t = task(0, 1, 2);
  const MTLConfig cfg = small_mtl();
  ModuleLibrary once = library(4, 6), twice = library(4, 6);
  const StructureAssignment s = value_structure(t);
  const std::uint64_t unused_before = once.module(1, 0).checksum();
  mtl_train(once, {{t, s}}, cfg);
  mtl_train(twice, {{t, s}, {t, s}}, cfg);
  // Gradient accumulation order differs between the two graphs, so agreement
  // is up to float rounding rather than bitwise.
  double worst = 0.0;
  for (int d = 0; d < kNumDepths; ++d)
    for (int i = 0; i < 4; ++i) {
      const auto& x = once.module(d, i).entries();
      const auto& y = twice.module(d, i).entries();
      for (std::size_t e = 0; e < x.size(); ++e)
        for (std::size_t j = 0; j < x[e].tensor.numel(); ++j)
          worst = std::max(worst, static_cast<double>(std::abs(x[e].tensor.values()[j] - y[e].tensor.values()[j])));
    }
  CHECK(worst < 1e-5);
  CHECK(once.module(1, 0).checksum() == unused_before);
  CHECK(once.module(1, 1).checksum() != library(4, 6).module(1, 1).checksum());
}

TEST_CASE("value structure and held-out split") {
  CHECK(value_structure(task(2, 3, 1)) == StructureAssignment{{2, 3, 1}});
  const HeldOutSplit split = floor_heldout_split(4);
  REQUIRE(split.train.size() == 12);
  REQUIRE(split.held_out.size() == 4);
  std::set<int> colors, dyn;
  for (const auto& t : split.held_out) {
    CHECK(t.static_object == StaticObject::floor);
    colors.insert(t.component(1));
    dyn.insert(t.component(2));
  }
  CHECK(colors.size() == 4);
  CHECK(dyn.size() == 4);
  std::array<int, 4> color_count{}, dyn_count{};
  for (const auto& t : split.train) {
    ++color_count[static_cast<std::size_t>(t.component(1))];
    ++dyn_count[static_cast<std::size_t>(t.component(2))];
  }
  for (int i = 0; i < 4; ++i) {
    CHECK(color_count[static_cast<std::size_t>(i)] == 3);
    CHECK(dyn_count[static_cast<std::size_t>(i)] == 3);
  }
  CHECK(floor_heldout_split(4).held_out == split.held_out);
}

TEST_CASE("zero-shot and swap evaluation do not modify the library") {
  ModuleLibrary lib = library(4, 8);
  const std::uint64_t before = lib.checksum();
  const std::vector<MTLTask> tasks{{task(1, 0, 0), value_structure(task(1, 0, 0))},
                                   {task(1, 2, 3), value_structure(task(1, 2, 3))}};
  EvalConfig ec;
  ec.episodes = 1;
  const auto zs = zero_shot_eval(lib, tasks, ec);
  CHECK(zs.size() == 2);
  const SwapSummary s = swap_ablation(lib, tasks, ec);
  CHECK(lib.checksum() == before);
  CHECK(s.rows.size() == 2 * (1 + 3 * 3));
  CHECK(s.correct == doctest::Approx(mean_of(zs)));
  CHECK_THROWS_AS(module_swap_eval(lib, tasks[0], 1, 0, ec), ContractViolation);
  CHECK_THROWS_AS(module_swap_eval(lib, tasks[0], 3, 0, ec), ContractViolation);
  CHECK_THROWS_AS(module_swap_eval(lib, tasks[0], 0, 4, ec), ContractViolation);
  const std::string csv = format_swap_csv(s);
  CHECK(csv.starts_with("task,swapped_depth,module,mean_return\n"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 21);
}

TEST_CASE("report aggregates per seed, then across seeds") {
  std::vector<MetricsRow> rows;
  // Per-seed task means 0.2, 0.4, 0.9.
  rows.push_back(row("m", 0, "a", 0.1));
  rows.push_back(row("m", 0, "b", 0.3));
  rows.push_back(row("m", 1, "a", 0.4));
  rows.push_back(row("m", 2, "a", 1.0));
  rows.push_back(row("m", 2, "b", 0.8));
  rows.push_back(row("other", 0, "a", 0.5));
  const auto parsed = parse_metrics_csv(format_metrics_csv(rows));
  REQUIRE(parsed.size() == rows.size());
  CHECK(std::isnan(parsed[0].offline));
  const auto s = summarize(parsed);
  REQUIRE(s.size() == 6);  // offline skipped for both methods
  for (const auto& x : s) CHECK(x.stage != "offline");
  CHECK(s[0].method == "m");
  CHECK(s[0].stage == "zero_shot");
  CHECK(s[0].mean == doctest::Approx(0.5));
  CHECK(s[0].stderr_ == doctest::Approx(std::sqrt(0.13) / std::sqrt(3.0)));
  CHECK(s[0].seeds == 3);
  CHECK(s.back().method == "other");
  CHECK(s.back().stderr_ == 0.0);
  CHECK(standard_error({2.0}) == 0.0);
  CHECK_THROWS_AS(mean_of({}), ContractViolation);
  CHECK_THROWS_AS(parse_metrics_csv("bad,header\n"), ContractViolation);
}

TEST_CASE("curve area and transfer metrics") {
  CHECK(curve_area({{100, 0.5}, {200, 1.0}}, 400) == doctest::Approx(0.875));
  CHECK(curve_area({{400, 0.3}}, 400) == doctest::Approx(0.3));
  CHECK_THROWS_AS(curve_area({{200, 0.1}, {100, 0.2}}, 400), ContractViolation);
  CHECK_THROWS_AS(curve_area({}, 400), ContractViolation);

  TaskRecord a, b, sa, sb;
  a.task = sa.task = task(1, 0, 0);
  b.task = sb.task = task(2, 1, 1);
  a.curve = {{200, 0.6}, {400, 0.8}};
  b.curve = {{400, 0.4}};
  sa.curve = {{200, 0.2}, {400, 0.6}};
  sb.curve = {{400, 0.4}};
  a.offline = 0.9, a.final = 0.7;
  b.offline = kNaN, b.online = 0.5, b.final = 0.4;
  const TransferSummary t = transfer_metrics({a, b}, {sb, sa}, 400);
  CHECK(t.forward_transfer == doctest::Approx((0.7 - 0.4 + 0.0) / 2.0));
  CHECK(t.forgetting == doctest::Approx(0.15));
  CHECK(t.backward_transfer == 0.0);

  a.final = 1.0, b.final = 0.7;
  const TransferSummary up = transfer_metrics({a, b}, {sa, sb}, 400);
  CHECK(up.forgetting == 0.0);
  CHECK(up.backward_transfer == doctest::Approx(0.15));
  CHECK_THROWS_AS(transfer_metrics({a}, {sb}, 400), ContractViolation);
}

TEST_CASE("run configuration round trip and hashing") {
  RunConfig cfg = tiny_run(Method::pnc_batchrl);
  cfg.curriculum = CurriculumMode::random;
  const RunConfig back = RunConfig::parse(cfg.serialize());
  CHECK(back.serialize() == cfg.serialize());
  CHECK(back.hash() == cfg.hash());
  CHECK(cfg.hash().size() == 16);

  RunConfig other_seed = cfg;
  other_seed.seed = 99;
  CHECK(other_seed.hash() == cfg.hash());
  CHECK(other_seed.run_name() == "pnc-batchrl-" + cfg.hash().substr(0, 8) + "-s99");
  RunConfig other = cfg;
  other.set("bcq_tau", "0.5");
  CHECK(other.bcq_tau == 0.5);
  CHECK(other.hash() != cfg.hash());

  CHECK_THROWS_AS(cfg.set("no_such_key", "1"), ContractViolation);
  CHECK_THROWS_AS(cfg.set("steps_per_update", "-5"), ContractViolation);
  CHECK_THROWS_AS(cfg.set("gamma", "nan"), ContractViolation);
  CHECK_THROWS_AS(RunConfig::parse("method = bogus\n"), ContractViolation);
  CHECK_THROWS_AS(RunConfig::parse("mystery = 3\n"), ContractViolation);
  const RunConfig commented = RunConfig::parse("# note\n\nseed = 7\nmethod = ewc\n");
  CHECK(commented.seed == 7);
  CHECK(commented.method == Method::ewc);
  for (const auto& name : method_names()) CHECK(method_name(parse_method(name)) == name);
}

TEST_CASE("curriculum resolution") {
  RunConfig cfg;
  cfg.tasks = "wall/red/0, floor/blue/2";
  const auto list = resolve_curriculum(cfg);
  REQUIRE(list.size() == 2);
  CHECK(list[1] == TaskDescriptor::parse("floor/blue/2"));
  cfg.tasks = "wall/red/0,wall/red/0";
  CHECK_THROWS_AS(resolve_curriculum(cfg), ContractViolation);
  cfg.tasks = "all";
  cfg.seed = 2;
  const auto all = resolve_curriculum(cfg);
  CHECK(all.size() == 64);
  cfg.tasks = "5";
  const auto five = resolve_curriculum(cfg);
  CHECK(std::equal(five.begin(), five.end(), all.begin()));
  cfg.tasks = "65";
  CHECK_THROWS_AS(resolve_curriculum(cfg), ContractViolation);
}

TEST_CASE("run directories are reproducible byte for byte") {
  TempDir root_a("run_a"), root_b("run_b");
  for (Method m : {Method::comp_search, Method::stl, Method::pnc}) {
    const RunConfig cfg = tiny_run(m);
    const RunOutput a = execute_run(cfg, root_a.str(), true);
    const RunOutput b = execute_run(cfg, root_b.str(), true);
    CHECK(fs::path(a.dir).filename() == cfg.run_name());
    const std::string metrics = read_text_file(a.dir + "/metrics.csv");
    CHECK(metrics == read_text_file(b.dir + "/metrics.csv"));
    CHECK(read_text_file(a.dir + "/curves.jsonl") == read_text_file(b.dir + "/curves.jsonl"));
    CHECK(RunConfig::load(a.dir + "/config.txt").serialize() == cfg.serialize());
    const auto rows = collect_metrics({a.dir});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].method == method_name(m));
  }
  std::vector<std::string> dirs;
  for (const auto& e : fs::directory_iterator(root_a.path)) dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  const auto curves = summarize_curves(dirs, 256);
  CHECK(!curves.empty());
  for (const auto& p : curves) CHECK(p.step % 256 == 0);
  CHECK(format_curve_summary_csv(curves).starts_with("method,step,mean_return,stderr,count\n"));
}

TEST_CASE("MTL run directories reload") {
  TempDir root("mtl");
  RunConfig cfg = tiny_run(Method::comp_struct);
  cfg.modules_per_depth = 4;
  cfg.tasks = "floor/red/0,floor/green/1";
  cfg.env_steps_per_task = 256;
  cfg.mtl_steps_per_task_update = 256;
  const MTLRunOutput out = execute_mtl(cfg, root.str(), true);
  CHECK(out.train.size() == 2);
  CHECK(out.held_out.empty());
  MTLRunOutput back = load_mtl_run(out.dir);
  CHECK(back.library.checksum() == out.library.checksum());
  REQUIRE(back.train.size() == 2);
  CHECK(back.train[1].structure == value_structure(task(1, 1, 1)));
  cfg.modules_per_depth = 2;
  CHECK_THROWS_AS(execute_mtl(cfg, root.str(), true), ContractViolation);
}
