#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "fedsub/cost.hpp"
#include "fedsub/layered.hpp"
#include "fedsub/objectives.hpp"
#include "fedsub/projection.hpp"

namespace fedsub {

// batch_size 0 means full client gradients; otherwise every local step draws
// a fresh uniform minibatch of this size without replacement.
struct GradientMode {
  int batch_size = 0;
  bool is_minibatch() const { return batch_size > 0; }
};

struct FedConfig {
  int n_clients = 1;
  int rounds = 1;       // K; run() accepts 0 and returns an empty trajectory
  int local_steps = 1;  // tau
  double step_size = 0.1;
  EngineKind engine = EngineKind::DualVariable;
  ProjectionMethod method = ProjectionMethod::Identity;
  SubspaceDims dims;  // per-layer r_l
  GradientMode gradient;
  std::uint64_t master_seed = 0;
  int threads = 1;
  CostModelParams cost_params;
  bool collect_wall_time = true;
  // Record the iterate after every round in RunResult::trajectory.
  bool capture_trajectory = false;
  // Test hook: reset every drift variable to zero after each round, which
  // must reproduce FedAvgSubspace exactly.
  bool debug_zero_duals = false;

  // Structural checks against the objective's layer shapes; throws
  // std::invalid_argument naming the offending field.
  void validate(const std::vector<LayerShape>& shapes) const;
};

struct RoundRecord {
  int round = 0;  // 1-based: state after this many completed rounds
  double rel_error = std::numeric_limits<double>::quiet_NaN();
  double grad_norm_sq = 0.0;
  std::int64_t uplink_scalars = 0;
  std::int64_t matmul_flops = 0;
  std::int64_t gradient_cost_units = 0;
  double wall_ms = 0.0;
};

enum class RunStatus { Completed, Diverged };

struct RunResult {
  RunStatus status = RunStatus::Completed;
  std::vector<RoundRecord> records;  // one per completed round
  std::vector<LayeredMatrix> trajectory;  // per-round iterates, if captured
  LayeredMatrix x_final;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  // max over rounds of || sum_i Lambda_i ||_max; exact zero would hold in
  // exact arithmetic, so this measures accumulated rounding drift.
  double max_dual_sum_inf = 0.0;
  int diverged_round = -1;  // 0-based round / local step where a non-finite
  int diverged_step = -1;   // value first appeared (status Diverged only)
  CostModel analytic_cost;        // per-client per-round ledger
  CostModel measured_round_cost;  // client-0 counters from the last round
};

// Thrown by local rounds when an iterate stops being finite. run() converts
// it into RunStatus::Diverged with a partial trajectory.
class DivergedError : public std::runtime_error {
 public:
  DivergedError(int client, int step)
      : std::runtime_error("local update diverged at client " + std::to_string(client) +
                           ", step " + std::to_string(step)),
        client_(client), step_(step) {}
  int client() const { return client_; }
  int step() const { return step_; }

 private:
  int client_;
  int step_;
};

// Shared parameters for one client's local round.
struct LocalRoundOptions {
  double step_size = 0.1;
  int local_steps = 1;
  int round_index = 0;
  std::uint64_t master_seed = 0;
  GradientMode gradient;
  CostModelParams cost_params;
};

// tau steps of B <- B - eta * (g(B) + correction) started from B = 0, where
// g(B) = (r/m) P^T grad f_client(x + P B) layer-wise. correction may be null
// (no additive term). step_gradients, when given, receives the tau projected
// gradients g(B^t). Meters tau subspace lifts and tau gradient evaluations.
LayeredMatrix local_subspace_round(const Objective& obj, int client, const LayeredMatrix& x,
                                   const ProjectionSet& P, const LayeredMatrix* correction,
                                   const LocalRoundOptions& opt, CostMeter* meter = nullptr,
                                   std::vector<LayeredMatrix>* step_gradients = nullptr);

// Drift-corrected local round: correction = dual / (eta * tau).
LayeredMatrix local_round_dual(const Objective& obj, int client, const LayeredMatrix& x,
                               const ProjectionSet& P, const LayeredMatrix& dual,
                               const LocalRoundOptions& opt, CostMeter* meter = nullptr);

// Control-variate local round: correction is used as-is and the per-step
// projected gradients are logged for the caller's averaging.
LayeredMatrix local_round_vr(const Objective& obj, int client, const LayeredMatrix& x,
                             const ProjectionSet& P, const LayeredMatrix& correction,
                             const LocalRoundOptions& opt, CostMeter* meter = nullptr,
                             std::vector<LayeredMatrix>* step_gradients = nullptr);

// dual' = (P_next)^T P_cur (dual + B_i - B_avg); two transport products.
LayeredMatrix dual_update(const LayeredMatrix& dual, const LayeredMatrix& B_i,
                          const LayeredMatrix& B_avg, const ProjectionSet& P_next,
                          const ProjectionSet& P_cur, CostMeter* meter = nullptr);

// x' = x + P B_avg (server-side; not charged to any client meter).
LayeredMatrix server_update(const LayeredMatrix& x, const LayeredMatrix& B_avg,
                            const ProjectionSet& P);

// Run cfg.rounds federated rounds from x0. The reference solution, when
// given, turns on the rel_error column. Deterministic in (cfg, obj, x0)
// regardless of cfg.threads.
RunResult run(const FedConfig& cfg, const Objective& obj, const LayeredMatrix& x0,
              const ReferenceSolution* ref = nullptr);

}  // namespace fedsub
