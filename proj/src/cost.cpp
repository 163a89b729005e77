#include "fedsub/cost.hpp"

#include <cmath>
#include <stdexcept>

namespace fedsub {

std::string engine_name(EngineKind k) {
  switch (k) {
    case EngineKind::DualVariable: return "dual";
    case EngineKind::VarianceReduction: return "vr";
    case EngineKind::FedAvg: return "fedavg";
    case EngineKind::FedAvgSubspace: return "fedavg_subspace";
  }
  throw std::logic_error("engine_name: unknown engine");
}

EngineKind parse_engine(const std::string& name) {
  if (name == "dual") return EngineKind::DualVariable;
  if (name == "vr") return EngineKind::VarianceReduction;
  if (name == "fedavg") return EngineKind::FedAvg;
  if (name == "fedavg_subspace") return EngineKind::FedAvgSubspace;
  throw std::invalid_argument("unknown engine '" + name +
                              "' (expected dual, vr, fedavg, or fedavg_subspace)");
}

std::int64_t measure_uplink(const LayeredMatrix& payload) { return payload.size(); }

std::int64_t projection_flops(const ProjectionSet& P, const std::vector<LayerShape>& shapes) {
  if (P.is_identity()) return 0;
  if (static_cast<int>(shapes.size()) != P.num_layers())
    throw std::invalid_argument("projection_flops: layer count mismatch");
  std::int64_t flops = 0;
  for (int l = 0; l < P.num_layers(); ++l)
    flops += static_cast<std::int64_t>(P.rows(l)) * P.cols(l) *
             shapes[static_cast<std::size_t>(l)].cols;
  return flops;
}

std::int64_t gradient_units(std::int64_t size_scalars, const CostModelParams& params) {
  if (size_scalars < 0) throw std::invalid_argument("gradient_units: negative size");
  return std::llround(params.alpha_grad * static_cast<double>(size_scalars));
}

namespace {

std::int64_t memory_units(double alpha_mem, std::int64_t grad_size) {
  return std::llround(alpha_mem * static_cast<double>(grad_size));
}

}  // namespace

CostModel tally_round(EngineKind engine, ProjectionMethod method,
                      const std::vector<LayerShape>& shapes, const SubspaceDims& dims,
                      int local_steps, const CostModelParams& params) {
  if (local_steps < 1) throw std::invalid_argument("tally_round: local_steps must be >= 1");
  if (shapes.size() != dims.r.size())
    throw std::invalid_argument("tally_round: dims/layer count mismatch");
  const bool identity = method == ProjectionMethod::Identity;

  std::int64_t rd = 0, md = 0, mrd = 0, rm = 0;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const std::int64_t m = shapes[l].rows, d = shapes[l].cols, r = dims.r[l];
    rd += r * d;
    md += m * d;
    mrd += m * r * d;
    rm += r * m;
  }
  const std::int64_t tau = local_steps;

  CostModel c;
  switch (engine) {
    case EngineKind::DualVariable:
    case EngineKind::VarianceReduction:
      if (identity) {
        c.uplink_scalars = md;
        c.downlink_scalars = 2 * md;  // averaged update plus refreshed iterate
        c.matmul_flops = 0;
        c.gradient_cost_units = tau * gradient_units(md, params);
        c.memory_scalars = 3 * md + memory_units(params.alpha_mem, md);
      } else {
        c.uplink_scalars = rd;
        c.downlink_scalars = rd + md;
        // tau subspace lifts during local steps plus the two transport
        // products of the drift-correction update.
        c.matmul_flops = (tau + 2) * mrd;
        c.gradient_cost_units = tau * gradient_units(rd, params);
        // B, averaged B, drift variable (rd each), gradient working set,
        // current and next projections (rm each), iterate (md).
        c.memory_scalars = 3 * rd + memory_units(params.alpha_mem, rd) + 2 * rm + md;
      }
      break;
    case EngineKind::FedAvg:
      c.uplink_scalars = md;
      c.downlink_scalars = md;
      c.matmul_flops = 0;
      c.gradient_cost_units = tau * gradient_units(md, params);
      c.memory_scalars = md + memory_units(params.alpha_mem, md);
      break;
    case EngineKind::FedAvgSubspace:
      if (identity) {
        // Degenerate case: identical to FedAvg.
        c.uplink_scalars = md;
        c.downlink_scalars = md;
        c.matmul_flops = 0;
        c.gradient_cost_units = tau * gradient_units(md, params);
        c.memory_scalars = md + memory_units(params.alpha_mem, md);
      } else {
        c.uplink_scalars = rd;
        c.downlink_scalars = md;     // clients only need the refreshed iterate
        c.matmul_flops = tau * mrd;  // no drift correction, so no transport
        c.gradient_cost_units = tau * gradient_units(rd, params);
        // Drops the drift variable and next-round projection of the dual
        // engine's inventory.
        c.memory_scalars = 2 * rd + memory_units(params.alpha_mem, rd) + rm + md;
      }
      break;
  }
  return c;
}

}  // namespace fedsub
