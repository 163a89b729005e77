#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsub/layered.hpp"
#include "fedsub/projection.hpp"

namespace fedsub {

// The four federated update rules the laboratory runs. DualVariable is the
// subspace method with low-dimensional drift correction; VarianceReduction is
// the mathematically equivalent reformulation used as a cross-check; FedAvg
// is plain local SGD in the full space; FedAvgSubspace is local SGD inside
// the projected subspace with no drift correction.
enum class EngineKind { DualVariable, VarianceReduction, FedAvg, FedAvgSubspace };

std::string engine_name(EngineKind k);
EngineKind parse_engine(const std::string& name);

// Abstract per-unit costs of a gradient evaluation whose result has s
// scalars: compute C_g(s) = alpha_grad * s, memory M_g(s) = alpha_mem * s.
struct CostModelParams {
  double alpha_grad = 2.0;
  double alpha_mem = 3.0;
};

// Per-client, per-round cost ledger. Uplink/downlink are scalar counts,
// matmul is multiply-accumulate flops of projection applications, gradient
// units follow C_g, memory is the analytic peak working set.
struct CostModel {
  std::int64_t uplink_scalars = 0;
  std::int64_t downlink_scalars = 0;
  std::int64_t matmul_flops = 0;
  std::int64_t gradient_cost_units = 0;
  std::int64_t memory_scalars = 0;
};

// Scalars in one transmitted payload.
std::int64_t measure_uplink(const LayeredMatrix& payload);

// Flops of applying the projections (or their transposes) of P to a stack of
// per-layer d_l-column operands: sum_l m_l r_l d_l, zero for identity.
std::int64_t projection_flops(const ProjectionSet& P, const std::vector<LayerShape>& shapes);

// Gradient cost units for one evaluation whose result has size_scalars
// scalars, rounded to the nearest integer unit.
std::int64_t gradient_units(std::int64_t size_scalars, const CostModelParams& params);

// Analytic per-client, per-round costs of one engine/projection combination:
//   DualVariable (projected):  uplink rd, matmul (tau+2) mrd, grad tau C_g(rd),
//                              memory 3rd + M_g(rd) + 2rm + md
//   DualVariable (identity):   uplink md, matmul 0, grad tau C_g(md),
//                              memory 3md + M_g(md)
//   FedAvg:                    uplink md, matmul 0, grad tau C_g(md),
//                              memory md + M_g(md)
//   FedAvgSubspace (projected): uplink rd, matmul tau mrd, grad tau C_g(rd),
//                              memory 2rd + M_g(rd) + rm + md
// (rd, mrd, md abbreviate the per-layer sums.) VarianceReduction tallies as
// DualVariable: the two engines run the same per-round arithmetic.
CostModel tally_round(EngineKind engine, ProjectionMethod method,
                      const std::vector<LayerShape>& shapes, const SubspaceDims& dims,
                      int local_steps, const CostModelParams& params = {});

// Measured counters an engine increments as it runs; one meter per client,
// reset at every round boundary.
class CostMeter {
 public:
  void add_uplink(std::int64_t scalars) { tally_.uplink_scalars += scalars; }
  void add_downlink(std::int64_t scalars) { tally_.downlink_scalars += scalars; }
  void add_matmul(std::int64_t flops) { tally_.matmul_flops += flops; }
  void add_gradient_eval(std::int64_t size_scalars, const CostModelParams& params) {
    tally_.gradient_cost_units += gradient_units(size_scalars, params);
  }
  const CostModel& tally() const { return tally_; }
  void reset() { tally_ = CostModel{}; }

 private:
  CostModel tally_;
};

}  // namespace fedsub
