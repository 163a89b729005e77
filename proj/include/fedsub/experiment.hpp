#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedsub/engine.hpp"
#include "fedsub/objectives.hpp"

namespace fedsub {

// Frozen Monte-Carlo tolerances for the E[P P^T] = I validator at 50 000
// draws, one per (construction, shape) pair the validation pipeline checks.
// Each is the estimator's mean + 3 standard deviations (estimated offline
// over repeated runs), rounded up, so a correct construction fails with
// probability well under 1e-3 while a miscalibrated one exceeds them by
// orders of magnitude.
inline constexpr int kAssumption1Samples = 50000;
inline constexpr double kExactTol = 1e-10;
inline constexpr double kMcTolCd20x10 = 0.0070;
inline constexpr double kMcTolRd20x10 = 0.0060;
inline constexpr double kMcTolSs20x10 = 0.0060;
inline constexpr double kMcTolCd8x1 = 0.0220;
inline constexpr double kMcTolRd8x1 = 0.0180;
inline constexpr double kMcTolSs8x1 = 0.0180;

// What to optimize. logistic and mlp draw the synthetic clustered client
// datasets; quadratic draws random SPD client quadratics.
struct ObjectiveSpec {
  std::string kind = "logistic";  // logistic | quadratic | mlp
  double lambda = 1e-4;           // logistic/mlp l2 regularizer
  int hidden_width = 16;          // mlp
  // Clustered data (logistic, mlp).
  int n_clients = 30;
  std::int64_t samples_total = 60000;
  int feature_dim = 20;
  double heterogeneity_noise = 0.1;
  std::uint64_t data_seed = 1;
  // Quadratic.
  std::vector<LayerShape> quad_layers = {{20, 1}};
  QuadraticOptions quad;
};

// Optional sweep axes; an absent axis is the singleton from the base config.
struct SweepSpec {
  std::vector<EngineKind> engines;
  std::vector<ProjectionMethod> projections;
  std::vector<int> subspace_dims;
  std::vector<std::uint64_t> seeds;
};

struct ExperimentSpec {
  std::string name = "experiment";
  ObjectiveSpec objective;
  FedConfig base;           // engine/method/dims/master_seed overridden per cell
  int scalar_r = 0;         // fed.subspace_dim when given as a scalar (0 = unset)
  bool dims_explicit = false;  // fed.subspace_dim given as a per-layer array
  SweepSpec sweep;
  int repetitions = 1;
  std::string output_dir;   // empty: $FEDSUB_OUT_DIR or ./out, plus /name
  bool timing_wall = true;  // false zeroes the wall_ms column for byte-stable CSVs
  // tri-state: unset = on when a reference solver exists for the objective
  std::optional<bool> reference;
  GenerateOptions debug;
};

ExperimentSpec load_spec(const std::string& path);
ExperimentSpec parse_spec(const std::string& json_text);
std::string resolve_output_dir(const ExperimentSpec& spec);

struct BuiltObjective {
  std::unique_ptr<Objective> objective;
  LayeredMatrix x0;
  std::optional<Dataset> dataset;  // logistic/mlp only
};
BuiltObjective build_objective(const ObjectiveSpec& spec);

struct CellOutcome {
  EngineKind engine{};
  ProjectionMethod method{};
  int r_axis = 0;  // requested scalar r; 0 for identity (full space)
  std::uint64_t seed = 0;
  int rep = 0;
  std::string csv_path;
  RunResult result;
};

struct ExperimentOutcome {
  std::vector<CellOutcome> cells;
  std::string out_dir;
  std::string summary_path;
};

// Run every sweep cell, write one per-round CSV per cell
// (k,rel_error,grad_norm_sq,uplink,matmul,gradcost,wall_ms) plus summary.csv.
ExperimentOutcome run_experiment(const ExperimentSpec& spec);

// Write the spec's client datasets as CSVs under <out>/data.
std::string run_export_data(const ExperimentSpec& spec);

struct ValidationCheck {
  std::string id;
  std::string description;
  double observed = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

struct ValidationReport {
  std::vector<ValidationCheck> checks;
  bool all_pass() const;
};

// Self-contained correctness battery: projection contract (exact and Monte
// Carlo), gradient finite-difference spot checks, drift-sum conservation,
// engine equivalence, and the plain-gradient-descent reduction. Honors
// spec.debug so a deliberately corrupted construction must fail. Writes
// validation_report.csv under the spec's output dir.
ValidationReport run_validation(const ExperimentSpec& spec);

struct StepsizeReport {
  bool smoothness_known = false;
  double smoothness = 0.0;  // L, upper bound on every client's constant
  double theta_m_value = 1.0;
  double theta_r_value = 1.0;
  int n_clients = 1;
  int local_steps = 1;
  // Largest eta admitted by each written condition, and their minimum.
  double cap_quad = 0.0;        // 4 eta^2 th_r^2 th_m^3 tau L^2 <= 1/(8 tau)
  double cap_drift = 0.0;       // (5/2) eta^2 th_r^3 th_m^2 L^2 tau^3 <= tau/(4 th_m)
  double cap_descent = 0.0;     // 1 - eta tau L th_r^2 th_m^2 - 4 eta^3 tau th_r^4 th_m^2 L^2 / n >= 0
  double cap_higher = 0.0;      // eta tau/(4 th_m) - 20 eta^4 th_r^4 tau^4 L^2 th_m^3 / n >= eta tau/(8 th_m)
  double cap_variance = 0.0;    // 5 n eta tau th_r L^2 th_m^2 <= 1
  double eta_max = 0.0;
  std::string binding;          // name of the condition attaining eta_max
  double eta_configured = 0.0;
  bool configured_admissible = false;
};

StepsizeReport compute_stepsize(double smoothness, double th_m, double th_r, int n_clients,
                                int local_steps, double eta_configured);
// Derives L and the distortion ratios from the spec's objective and base
// config, then applies the written conditions.
StepsizeReport run_stepsize(const ExperimentSpec& spec);

}  // namespace fedsub
