// Command-line front end for training runs, ablations and aggregation.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "lcrl/harness.hpp"

namespace fs = std::filesystem;
using namespace lcrl;

namespace {

struct CommonOptions {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out = "runs";
  std::string method;
  std::string tasks;
  long budget = 0;
  bool full = false;
  bool quiet = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_method) {
  cmd->add_option("--config", o.config_path, "Key = value run configuration file")->check(CLI::ExistingFile);
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&o](std::uint64_t s) { o.seed = s, o.seed_set = true; }, "Run seed");
  cmd->add_option("--out", o.out, "Output root for run directories")->capture_default_str();
  if (with_method)
    cmd->add_option("--method", o.method, "Learner")->check(CLI::IsMember(method_names()));
  cmd->add_option("--tasks", o.tasks, "all, a task count, or a comma list of static/color/dynamics names");
  cmd->add_option("--budget", o.budget, "Environment steps per task")->check(CLI::PositiveNumber);
  cmd->add_option("--set", o.overrides, "Override one config key (key=value), repeatable");
  cmd->add_flag("--full", o.full, "Full-scale setting: all 64 tasks, 1M steps per task");
  cmd->add_flag("--quiet", o.quiet, "No progress output");
}

RunConfig build_config(const CommonOptions& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : RunConfig::load(o.config_path);
  if (o.full) {
    cfg.tasks = "all";
    cfg.env_steps_per_task = 1000000;
  }
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ContractViolation("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed_set) cfg.seed = o.seed;
  if (!o.method.empty()) cfg.method = parse_method(o.method);
  if (!o.tasks.empty()) cfg.set("tasks", o.tasks);
  if (o.budget > 0) cfg.env_steps_per_task = o.budget;
  return cfg;
}

void print_records(const std::vector<TaskRecord>& records) {
  std::printf("%-16s %9s %9s %9s %9s\n", "task", "zero_shot", "online", "offline", "final");
  for (const auto& r : records)
    std::printf("%-16s %9.3f %9.3f %9.3f %9.3f\n", r.task.name().c_str(), r.zero_shot, r.online, r.offline, r.final);
}

void print_mtl(const MTLRunOutput& run) {
  for (std::size_t i = 0; i < run.train_returns.size(); ++i)
    std::printf("train   %-16s %.3f\n", run.train[i].task.name().c_str(), run.train_returns[i]);
  for (std::size_t i = 0; i < run.held_out_returns.size(); ++i)
    std::printf("heldout %-16s %.3f\n", run.held_out[i].task.name().c_str(), run.held_out_returns[i]);
  if (!run.train_returns.empty()) std::printf("train mean   %.3f\n", mean_of(run.train_returns));
  if (!run.held_out_returns.empty()) std::printf("heldout mean %.3f\n", mean_of(run.held_out_returns));
}

std::vector<std::string> run_dirs_under(const std::vector<std::string>& roots) {
  std::vector<std::string> dirs;
  for (const auto& root : roots) {
    if (fs::exists(fs::path(root) / "metrics.csv")) {
      dirs.push_back(root);
      continue;
    }
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && fs::exists(e.path() / "metrics.csv")) dirs.push_back(e.path().string());
  }
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lifelong compositional reinforcement learning experiments"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  CommonOptions lifelong_opts, stl_opts, mtl_opts, modules_opts;
  auto* run_lifelong = app.add_subcommand("run-lifelong", "Train one method over a task curriculum");
  add_common(run_lifelong, lifelong_opts, true);
  auto* run_stl = app.add_subcommand("run-stl", "Independent single-task agents");
  add_common(run_stl, stl_opts, false);
  auto* run_mtl = app.add_subcommand("run-mtl", "Multi-task training with ground-truth structures");
  add_common(run_mtl, mtl_opts, false);

  std::string mtl_dir;
  EvalMode eval_mode = EvalMode::greedy_actor;
  std::string eval_mode_text = "greedy";
  int eval_episodes = 0;
  auto* zero_shot = app.add_subcommand("eval-zero-shot", "Evaluate a trained MTL library on its held-out tasks");
  zero_shot->add_option("--run", mtl_dir, "Directory written by run-mtl")->required()->check(CLI::ExistingDirectory);
  zero_shot->add_option("--mode", eval_mode_text, "greedy, sample, boltzmann or constrained")->capture_default_str();
  zero_shot->add_option("--episodes", eval_episodes, "Episodes per task (default: from the run config)");
  auto* swap = app.add_subcommand("ablate-swap", "Replace one module per depth with each wrong alternative");
  swap->add_option("--run", mtl_dir, "Directory written by run-mtl")->required()->check(CLI::ExistingDirectory);
  swap->add_option("--episodes", eval_episodes, "Episodes per task (default: from the run config)");
  std::string swap_set = "train";
  swap->add_option("--on", swap_set, "Task set to evaluate: train or heldout")
      ->check(CLI::IsMember({"train", "heldout"}))
      ->capture_default_str();

  auto* modules = app.add_subcommand("ablate-modules", "Lifelong runs over several library sizes");
  add_common(modules, modules_opts, true);
  std::vector<int> module_counts{2, 4, 6};
  modules->add_option("--modules", module_counts, "Modules per depth to try")->delimiter(',')->capture_default_str();

  std::vector<std::string> report_roots;
  std::string report_out;
  long bin = 4096;
  auto* report = app.add_subcommand("report", "Aggregate run directories into summary CSV and curve files");
  report->add_option("--runs", report_roots, "Run directories, or roots containing them")
      ->required()
      ->check(CLI::ExistingDirectory);
  report->add_option("--out", report_out, "Directory for summary.csv and curves_summary.csv (default: first root)");
  report->add_option("--bin", bin, "Curve bin width in steps")->check(CLI::PositiveNumber)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (run_lifelong->parsed()) {
      const RunConfig cfg = build_config(lifelong_opts);
      const RunOutput out = execute_run(cfg, lifelong_opts.out, lifelong_opts.quiet);
      print_records(out.records);
      std::printf("run directory: %s\n", out.dir.c_str());
    } else if (run_stl->parsed()) {
      RunConfig cfg = build_config(stl_opts);
      cfg.method = Method::stl;
      const RunOutput out = execute_run(cfg, stl_opts.out, stl_opts.quiet);
      print_records(out.records);
      std::printf("run directory: %s\n", out.dir.c_str());
    } else if (run_mtl->parsed()) {
      const RunConfig cfg = build_config(mtl_opts);
      const MTLRunOutput out = execute_mtl(cfg, mtl_opts.out, mtl_opts.quiet);
      print_mtl(out);
      std::printf("run directory: %s\n", out.dir.c_str());
    } else if (zero_shot->parsed()) {
      eval_mode = parse_eval_mode(eval_mode_text);
      MTLRunOutput run = load_mtl_run(mtl_dir);
      const RunConfig cfg = RunConfig::load(mtl_dir + "/config.txt");
      EvalConfig ec = cfg.eval(eval_mode);
      if (eval_episodes > 0) ec.episodes = eval_episodes;
      run.train_returns = zero_shot_eval(run.library, run.train, ec);
      run.held_out_returns = zero_shot_eval(run.library, run.held_out, ec);
      print_mtl(run);
      std::string csv = "task,role,mean_return\n";
      char buf[32];
      for (std::size_t i = 0; i < run.train.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.6f", run.train_returns[i]);
        csv += run.train[i].task.name() + ",train," + buf + "\n";
      }
      for (std::size_t i = 0; i < run.held_out.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.6f", run.held_out_returns[i]);
        csv += run.held_out[i].task.name() + ",heldout," + buf + "\n";
      }
      write_text_file(mtl_dir + "/zero_shot_" + std::string(eval_mode_name(eval_mode)) + ".csv", csv);
    } else if (swap->parsed()) {
      MTLRunOutput run = load_mtl_run(mtl_dir);
      const RunConfig cfg = RunConfig::load(mtl_dir + "/config.txt");
      EvalConfig ec = cfg.eval(cfg.online_eval_mode);
      if (eval_episodes > 0) ec.episodes = eval_episodes;
      const auto& tasks = swap_set == "train" ? run.train : run.held_out;
      const SwapSummary s = swap_ablation(run.library, tasks, ec);
      write_text_file(mtl_dir + "/swap_" + swap_set + ".csv", format_swap_csv(s));
      std::printf("correct structure %.3f\n", s.correct);
      for (int d = 0; d < kNumDepths; ++d) std::printf("swap %-15s %.3f\n", depth_name(d), s.swapped[static_cast<std::size_t>(d)]);
    } else if (modules->parsed()) {
      for (int k : module_counts) {
        RunConfig cfg = build_config(modules_opts);
        if (modules_opts.method.empty()) cfg.method = Method::comp_search;
        cfg.modules_per_depth = k;
        const RunOutput out = execute_run(cfg, modules_opts.out, modules_opts.quiet);
        std::printf("modules per depth %d\n", k);
        print_records(out.records);
        std::printf("run directory: %s\n", out.dir.c_str());
      }
    } else if (report->parsed()) {
      const auto dirs = run_dirs_under(report_roots);
      if (dirs.empty()) throw ContractViolation("report: no run directories with metrics.csv found");
      const std::string out_dir = report_out.empty() ? report_roots.front() : report_out;
      const auto summary = summarize(collect_metrics(dirs));
      write_text_file(out_dir + "/summary.csv", format_summary_csv(summary));
      write_text_file(out_dir + "/curves_summary.csv", format_curve_summary_csv(summarize_curves(dirs, bin)));
      std::printf("%-16s %-10s %9s %9s %5s\n", "method", "stage", "mean", "stderr", "seeds");
      for (const auto& s : summary)
        std::printf("%-16s %-10s %9.4f %9.4f %5d\n", s.method.c_str(), s.stage.c_str(), s.mean, s.stderr_, s.seeds);
      std::printf("aggregated %zu run directories into %s\n", dirs.size(), out_dir.c_str());
    }
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
