#include "fedsub/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "fedsub/rng.hpp"

namespace fedsub {

void FedConfig::validate(const std::vector<LayerShape>& shapes) const {
  if (n_clients < 1) throw std::invalid_argument("config: n_clients must be >= 1");
  if (rounds < 0) throw std::invalid_argument("config: rounds must be >= 0");
  if (local_steps < 1) throw std::invalid_argument("config: local_steps must be >= 1");
  if (!(step_size > 0.0) || !std::isfinite(step_size))
    throw std::invalid_argument("config: step_size must be positive and finite");
  if (threads < 1) throw std::invalid_argument("config: threads must be >= 1");
  if (gradient.batch_size < 0)
    throw std::invalid_argument("config: batch_size must be >= 0 (0 = full gradients)");
  if (engine == EngineKind::FedAvg && method != ProjectionMethod::Identity)
    throw std::invalid_argument("config: the fedavg engine runs in the full space; use "
                                "fedavg_subspace for projected runs");
  if (dims.r.size() != shapes.size())
    throw std::invalid_argument("config: got " + std::to_string(dims.r.size()) +
                                " subspace dims for " + std::to_string(shapes.size()) +
                                " layers");
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    if (dims.r[l] < 1 || dims.r[l] > shapes[l].rows)
      throw std::invalid_argument("config: layer " + std::to_string(l) + " has r=" +
                                  std::to_string(dims.r[l]) + " outside [1, m=" +
                                  std::to_string(shapes[l].rows) + "]");
    if (method == ProjectionMethod::Identity && dims.r[l] != shapes[l].rows)
      throw std::invalid_argument("config: identity projection requires r = m, layer " +
                                  std::to_string(l) + " has r=" + std::to_string(dims.r[l]) +
                                  ", m=" + std::to_string(shapes[l].rows));
  }
}

namespace {

std::uint64_t round_seed(std::uint64_t master, int round) {
  return derive_seed(master, {kSeedProjection, static_cast<std::uint64_t>(round)});
}

std::vector<LayerShape> subspace_shapes(const ProjectionSet& P,
                                        const std::vector<LayerShape>& full) {
  std::vector<LayerShape> out;
  out.reserve(full.size());
  for (std::size_t l = 0; l < full.size(); ++l)
    out.push_back({P.cols(static_cast<int>(l)), full[l].cols});
  return out;
}

// Map fn over clients 0..n-1 on up to `threads` workers. Results must be
// written to pre-sized slots inside fn; the first exception is rethrown on
// the caller thread after all workers join.
template <typename Fn>
void parallel_for_clients(int n, int threads, Fn&& fn) {
  const int workers = std::max(1, std::min(threads, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

LayeredMatrix local_subspace_round(const Objective& obj, int client, const LayeredMatrix& x,
                                   const ProjectionSet& P, const LayeredMatrix* correction,
                                   const LocalRoundOptions& opt, CostMeter* meter,
                                   std::vector<LayeredMatrix>* step_gradients) {
  const std::vector<LayerShape> full = x.shapes();
  const LayerScalars ratios = ratio_r_over_m(full, P.dims());
  LayeredMatrix B = LayeredMatrix::zeros(subspace_shapes(P, full));
  const std::int64_t lift_flops = projection_flops(P, full);

  for (int t = 0; t < opt.local_steps; ++t) {
    const LayeredMatrix x_eval = add(x, project_up(P, B));
    if (meter) meter->add_matmul(lift_flops);

    LayeredMatrix raw;
    if (opt.gradient.is_minibatch()) {
      Rng rng(derive_seed(opt.master_seed,
                          {kSeedBatch, static_cast<std::uint64_t>(opt.round_index),
                           static_cast<std::uint64_t>(client), static_cast<std::uint64_t>(t)}));
      raw = minibatch_gradient(obj, client, x_eval, opt.gradient.batch_size, rng);
    } else {
      raw = obj.full_gradient(client, x_eval);
    }
    const LayeredMatrix g = scale_layerwise(ratios, project_down(P, raw));
    if (meter) meter->add_gradient_eval(B.size(), opt.cost_params);
    if (step_gradients) step_gradients->push_back(g);

    B = sub(B, scale(opt.step_size, correction ? add(g, *correction) : g));
    if (!B.all_finite()) throw DivergedError(client, t);
  }
  return B;
}

LayeredMatrix local_round_dual(const Objective& obj, int client, const LayeredMatrix& x,
                               const ProjectionSet& P, const LayeredMatrix& dual,
                               const LocalRoundOptions& opt, CostMeter* meter) {
  const LayeredMatrix correction =
      scale(1.0 / (opt.step_size * static_cast<double>(opt.local_steps)), dual);
  return local_subspace_round(obj, client, x, P, &correction, opt, meter, nullptr);
}

LayeredMatrix local_round_vr(const Objective& obj, int client, const LayeredMatrix& x,
                             const ProjectionSet& P, const LayeredMatrix& correction,
                             const LocalRoundOptions& opt, CostMeter* meter,
                             std::vector<LayeredMatrix>* step_gradients) {
  return local_subspace_round(obj, client, x, P, &correction, opt, meter, step_gradients);
}

LayeredMatrix dual_update(const LayeredMatrix& dual, const LayeredMatrix& B_i,
                          const LayeredMatrix& B_avg, const ProjectionSet& P_next,
                          const ProjectionSet& P_cur, CostMeter* meter) {
  if (meter) {
    const std::vector<LayerShape> operand = dual.shapes();  // d_l column counts
    meter->add_matmul(projection_flops(P_cur, operand) + projection_flops(P_next, operand));
  }
  return transport(P_next, P_cur, add(dual, sub(B_i, B_avg)));
}

LayeredMatrix server_update(const LayeredMatrix& x, const LayeredMatrix& B_avg,
                            const ProjectionSet& P) {
  return add(x, project_up(P, B_avg));
}

RunResult run(const FedConfig& cfg, const Objective& obj, const LayeredMatrix& x0,
              const ReferenceSolution* ref) {
  const std::vector<LayerShape> shapes = obj.layer_shapes();
  cfg.validate(shapes);
  if (x0.shapes() != shapes)
    throw std::invalid_argument("run: x0 shapes " + shape_string(x0.shapes()) +
                                " do not match objective " + shape_string(shapes));
  if (cfg.n_clients != obj.n_clients())
    throw std::invalid_argument("run: config has " + std::to_string(cfg.n_clients) +
                                " clients, objective has " + std::to_string(obj.n_clients()));
  if (cfg.gradient.is_minibatch())
    for (int i = 0; i < obj.n_clients(); ++i)
      if (cfg.gradient.batch_size > obj.client_samples(i))
        throw std::invalid_argument("run: batch_size " + std::to_string(cfg.gradient.batch_size) +
                                    " exceeds client " + std::to_string(i) + "'s " +
                                    std::to_string(obj.client_samples(i)) + " samples");

  const int n = cfg.n_clients;
  const int tau = cfg.local_steps;
  const double eta = cfg.step_size;
  const bool dual_engine = cfg.engine == EngineKind::DualVariable;
  const bool vr_engine = cfg.engine == EngineKind::VarianceReduction;

  RunResult result;
  result.analytic_cost =
      tally_round(cfg.engine, cfg.method, shapes, cfg.dims, tau, cfg.cost_params);

  double ref_denom = 1.0;
  if (ref) {
    const double nx = std::sqrt(norm_sq(ref->x_star));
    ref_denom = nx > 0.0 ? nx : 1.0;
  }

  LayeredMatrix x = x0;
  ProjectionSet P_cur =
      generate_projections(cfg.method, shapes, cfg.dims, round_seed(cfg.master_seed, 0));
  ProjectionSet P_prev = P_cur;  // VR only; unused at round 0
  const std::vector<LayerShape> sub_shapes = subspace_shapes(P_cur, shapes);
  const std::vector<LayerShape> operand_shapes = sub_shapes;  // d_l columns per layer

  std::vector<LayeredMatrix> duals;   // dual engine (and zeroed-dual debug)
  std::vector<LayeredMatrix> diffs;   // VR engine: (1/tau) sum_t (gbar_t - g_it)
  if (dual_engine || cfg.engine == EngineKind::FedAvgSubspace || cfg.engine == EngineKind::FedAvg)
    duals.assign(static_cast<std::size_t>(n), LayeredMatrix::zeros(sub_shapes));
  if (vr_engine) diffs.assign(static_cast<std::size_t>(n), LayeredMatrix::zeros(sub_shapes));

  std::vector<LayeredMatrix> B(static_cast<std::size_t>(n));
  std::vector<CostMeter> meters(static_cast<std::size_t>(n));
  std::vector<std::vector<LayeredMatrix>> step_logs;  // VR: per client, tau entries
  if (vr_engine) step_logs.assign(static_cast<std::size_t>(n), {});

  result.records.reserve(static_cast<std::size_t>(cfg.rounds));

  for (int k = 0; k < cfg.rounds; ++k) {
    const auto t_start = std::chrono::steady_clock::now();
    for (auto& m : meters) m.reset();

    LocalRoundOptions opt;
    opt.step_size = eta;
    opt.local_steps = tau;
    opt.round_index = k;
    opt.master_seed = cfg.master_seed;
    opt.gradient = cfg.gradient;
    opt.cost_params = cfg.cost_params;

    // VR corrections enter this round fixed; transported from the previous
    // round's subspace (zero at round 0, when there is no previous round).
    std::vector<LayeredMatrix> corrections;
    if (vr_engine) {
      corrections.assign(static_cast<std::size_t>(n), LayeredMatrix::zeros(sub_shapes));
      if (k > 0)
        for (int i = 0; i < n; ++i) {
          CostMeter& m = meters[static_cast<std::size_t>(i)];
          m.add_matmul(projection_flops(P_prev, operand_shapes) +
                       projection_flops(P_cur, operand_shapes));
          corrections[static_cast<std::size_t>(i)] =
              transport(P_cur, P_prev, diffs[static_cast<std::size_t>(i)]);
        }
    }

    try {
      parallel_for_clients(n, cfg.threads, [&](int i) {
        const auto idx = static_cast<std::size_t>(i);
        if (dual_engine || cfg.engine == EngineKind::FedAvg ||
            cfg.engine == EngineKind::FedAvgSubspace) {
          // FedAvg-family duals stay exactly zero; passing them through the
          // same code path keeps the engines bit-comparable.
          if (dual_engine)
            B[idx] = local_round_dual(obj, i, x, P_cur, duals[idx], opt, &meters[idx]);
          else
            B[idx] = local_subspace_round(obj, i, x, P_cur, nullptr, opt, &meters[idx]);
        } else {
          step_logs[idx].clear();
          B[idx] = local_round_vr(obj, i, x, P_cur, corrections[idx], opt, &meters[idx],
                                  &step_logs[idx]);
        }
        meters[idx].add_uplink(measure_uplink(B[idx]));
      });
    } catch (const DivergedError& e) {
      result.status = RunStatus::Diverged;
      result.diverged_round = k;
      result.diverged_step = e.step();
      break;
    }

    const LayeredMatrix B_avg = average(B);

    if (vr_engine) {
      // Per-step averages as the control-variate recursion writes them.
      std::vector<LayeredMatrix> gbar;
      gbar.reserve(static_cast<std::size_t>(tau));
      for (int t = 0; t < tau; ++t) {
        std::vector<LayeredMatrix> at_t;
        at_t.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
          at_t.push_back(step_logs[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)]);
        gbar.push_back(average(at_t));
      }
      LayeredMatrix gbar_sum = gbar[0];
      for (int t = 1; t < tau; ++t) gbar_sum = add(gbar_sum, gbar[static_cast<std::size_t>(t)]);
      for (int i = 0; i < n; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        LayeredMatrix g_sum = step_logs[idx][0];
        for (int t = 1; t < tau; ++t)
          g_sum = add(g_sum, step_logs[idx][static_cast<std::size_t>(t)]);
        diffs[idx] = scale(1.0 / static_cast<double>(tau), sub(gbar_sum, g_sum));
      }
      x = sub(x, scale(eta, project_up(P_cur, gbar_sum)));
      // Clients need the summed average (to form next round's correction)
      // and the refreshed iterate.
      for (auto& m : meters) m.add_downlink(gbar_sum.size() + x.size());
      P_prev = P_cur;
      P_cur = generate_projections(cfg.method, shapes, cfg.dims,
                                   round_seed(cfg.master_seed, k + 1));
    } else {
      ProjectionSet P_next = dual_engine
                                 ? generate_projections(cfg.method, shapes, cfg.dims,
                                                        round_seed(cfg.master_seed, k + 1))
                                 : P_cur;
      if (dual_engine) {
        for (int i = 0; i < n; ++i) {
          const auto idx = static_cast<std::size_t>(i);
          duals[idx] = dual_update(duals[idx], B[idx], B_avg, P_next, P_cur, &meters[idx]);
          if (cfg.debug_zero_duals)
            duals[idx] = LayeredMatrix::zeros(sub_shapes);
        }
        LayeredMatrix dual_sum = duals[0];
        for (int i = 1; i < n; ++i) dual_sum = add(dual_sum, duals[static_cast<std::size_t>(i)]);
        for (int l = 0; l < dual_sum.num_layers(); ++l)
          result.max_dual_sum_inf =
              std::max(result.max_dual_sum_inf, dual_sum.layer(l).cwiseAbs().maxCoeff());
      }
      x = server_update(x, B_avg, P_cur);
      const std::int64_t bcast =
          cfg.engine == EngineKind::FedAvg || cfg.engine == EngineKind::FedAvgSubspace
              ? x.size()
              : B_avg.size() + x.size();
      for (auto& m : meters) m.add_downlink(bcast);
      if (dual_engine)
        P_cur = std::move(P_next);
      else
        P_cur = generate_projections(cfg.method, shapes, cfg.dims,
                                     round_seed(cfg.master_seed, k + 1));
    }

    if (!x.all_finite()) {
      result.status = RunStatus::Diverged;
      result.diverged_round = k;
      result.diverged_step = tau;
      break;
    }

    // Client counters must agree across clients; a mismatch means the
    // metering logic lost track of who did what.
    for (int i = 1; i < n; ++i) {
      const auto& a = meters[0].tally();
      const auto& b = meters[static_cast<std::size_t>(i)].tally();
      if (a.uplink_scalars != b.uplink_scalars || a.matmul_flops != b.matmul_flops ||
          a.gradient_cost_units != b.gradient_cost_units ||
          a.downlink_scalars != b.downlink_scalars)
        throw std::logic_error("run: per-client cost counters diverged at round " +
                               std::to_string(k));
    }

    RoundRecord rec;
    rec.round = k + 1;
    if (ref) rec.rel_error = std::sqrt(norm_sq(sub(x, ref->x_star))) / ref_denom;
    rec.grad_norm_sq = norm_sq(obj.global_gradient(x));
    rec.uplink_scalars = meters[0].tally().uplink_scalars;
    rec.matmul_flops = meters[0].tally().matmul_flops;
    rec.gradient_cost_units = meters[0].tally().gradient_cost_units;
    if (cfg.collect_wall_time) {
      const auto t_end = std::chrono::steady_clock::now();
      rec.wall_ms = std::chrono::duration<double, std::milli>(t_end - t_start).count();
    }
    result.records.push_back(rec);
    result.measured_round_cost = meters[0].tally();
    if (cfg.capture_trajectory) result.trajectory.push_back(x);
  }

  result.x_final = x;
  if (result.status == RunStatus::Completed || x.all_finite())
    result.final_loss = obj.global_loss(x);
  return result;
}

}  // namespace fedsub
