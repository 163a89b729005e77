#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "fedsub/experiment.hpp"

namespace {

struct CommonArgs {
  std::string spec_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
  std::string engine;
};

void add_common(CLI::App* cmd, CommonArgs* args) {
  cmd->add_option("spec", args->spec_path, "experiment spec (JSON file)")->required();
  cmd->add_option("--out", args->out_dir, "output directory (overrides the spec)");
  cmd->add_option("--seed", args->seed, "base seed override (replaces the sweep seed axis)")
      ->each([args](const std::string&) { args->seed_set = true; });
  cmd->add_option("--threads", args->threads, "worker threads per run (overrides the spec)");
  cmd->add_option("--engine", args->engine,
                  "engine override: dual, vr, fedavg, or fedavg_subspace");
}

fedsub::ExperimentSpec load_with_overrides(const CommonArgs& args) {
  fedsub::ExperimentSpec spec = fedsub::load_spec(args.spec_path);
  if (!args.out_dir.empty()) spec.output_dir = args.out_dir;
  if (args.seed_set) {
    spec.base.master_seed = args.seed;
    spec.sweep.seeds = {args.seed};
  }
  if (args.threads > 0) spec.base.threads = args.threads;
  if (!args.engine.empty()) {
    spec.base.engine = fedsub::parse_engine(args.engine);
    spec.sweep.engines = {spec.base.engine};
  }
  return spec;
}

int cmd_run(const CommonArgs& args) {
  const fedsub::ExperimentSpec spec = load_with_overrides(args);
  const fedsub::ExperimentOutcome outcome = fedsub::run_experiment(spec);
  int diverged = 0;
  for (const auto& cell : outcome.cells)
    if (cell.result.status == fedsub::RunStatus::Diverged) ++diverged;
  std::printf("%s: %zu cell(s) -> %s\n", spec.name.c_str(), outcome.cells.size(),
              outcome.out_dir.c_str());
  if (diverged) std::printf("warning: %d cell(s) diverged; see %s\n", diverged,
                            outcome.summary_path.c_str());
  return 0;
}

int cmd_validate(const CommonArgs& args) {
  const fedsub::ExperimentSpec spec = load_with_overrides(args);
  const fedsub::ValidationReport report = fedsub::run_validation(spec);
  std::printf("%-22s %-12s %-12s %s\n", "check", "observed", "threshold", "result");
  for (const auto& c : report.checks)
    std::printf("%-22s %-12.4g %-12.4g %s\n", c.id.c_str(), c.observed, c.threshold,
                c.pass ? "pass" : "FAIL");
  std::printf("%s\n", report.all_pass() ? "all checks passed" : "validation FAILED");
  return report.all_pass() ? 0 : 1;
}

int cmd_stepsize(const CommonArgs& args) {
  const fedsub::ExperimentSpec spec = load_with_overrides(args);
  const fedsub::StepsizeReport rep = fedsub::run_stepsize(spec);
  if (!rep.smoothness_known) {
    std::printf("smoothness constant unavailable for objective '%s'; configured step size %.6g "
                "cannot be checked\n",
                spec.objective.kind.c_str(), rep.eta_configured);
    return 0;
  }
  std::printf("smoothness L        %.6g\n", rep.smoothness);
  std::printf("theta_m / theta_r   %.6g / %.6g\n", rep.theta_m_value, rep.theta_r_value);
  std::printf("clients / steps     %d / %d\n", rep.n_clients, rep.local_steps);
  std::printf("cap quad            %.6g\n", rep.cap_quad);
  std::printf("cap drift           %.6g\n", rep.cap_drift);
  std::printf("cap descent         %.6g\n", rep.cap_descent);
  std::printf("cap higher          %.6g\n", rep.cap_higher);
  std::printf("cap variance        %.6g\n", rep.cap_variance);
  std::printf("largest admissible  %.6g (binding: %s)\n", rep.eta_max, rep.binding.c_str());
  std::printf("configured          %.6g (%s)\n", rep.eta_configured,
              rep.configured_admissible ? "admissible" : "exceeds the admissible range");
  return 0;
}

int cmd_export_data(const CommonArgs& args) {
  const fedsub::ExperimentSpec spec = load_with_overrides(args);
  const std::string dir = fedsub::run_export_data(spec);
  std::printf("wrote client datasets to %s\n", dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated subspace optimization laboratory"};
  app.require_subcommand(1);

  CommonArgs run_args, validate_args, stepsize_args, export_args;
  CLI::App* run_cmd = app.add_subcommand("run", "run an experiment sweep and write CSVs");
  add_common(run_cmd, &run_args);
  CLI::App* validate_cmd =
      app.add_subcommand("validate", "run the correctness battery (nonzero exit on failure)");
  add_common(validate_cmd, &validate_args);
  CLI::App* stepsize_cmd =
      app.add_subcommand("stepsize", "evaluate the admissible-step-size conditions");
  add_common(stepsize_cmd, &stepsize_args);
  CLI::App* export_cmd = app.add_subcommand("export-data", "write the client datasets as CSVs");
  add_common(export_cmd, &export_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) return cmd_run(run_args);
    if (validate_cmd->parsed()) return cmd_validate(validate_args);
    if (stepsize_cmd->parsed()) return cmd_stepsize(stepsize_args);
    if (export_cmd->parsed()) return cmd_export_data(export_args);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
