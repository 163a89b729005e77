#include "doctest.h"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "fedsub/cost.hpp"
#include "fedsub/engine.hpp"
#include "fedsub/layered.hpp"
#include "fedsub/objectives.hpp"
#include "fedsub/projection.hpp"
#include "fedsub/rng.hpp"

using namespace fedsub;

namespace {

bool layers_equal(const LayeredMatrix& a, const LayeredMatrix& b) {
  if (a.num_layers() != b.num_layers()) return false;
  for (int l = 0; l < a.num_layers(); ++l)
    if (a.layer(l) != b.layer(l)) return false;
  return true;
}

double traj_rel_gap(const RunResult& a, const RunResult& b) {
  REQUIRE(a.trajectory.size() == b.trajectory.size());
  double worst = 0.0;
  for (std::size_t k = 0; k < a.trajectory.size(); ++k) {
    const double num = std::sqrt(norm_sq(sub(a.trajectory[k], b.trajectory[k])));
    const double den = std::max(1.0, std::sqrt(norm_sq(a.trajectory[k])));
    worst = std::max(worst, num / den);
  }
  return worst;
}

FedConfig base_config(int n, int rounds, int tau, double eta, EngineKind engine,
                      ProjectionMethod method, std::vector<int> r) {
  FedConfig cfg;
  cfg.n_clients = n;
  cfg.rounds = rounds;
  cfg.local_steps = tau;
  cfg.step_size = eta;
  cfg.engine = engine;
  cfg.method = method;
  cfg.dims = SubspaceDims{std::move(r)};
  cfg.master_seed = 99;
  cfg.collect_wall_time = false;
  cfg.capture_trajectory = true;
  return cfg;
}

}  // namespace

TEST_CASE("engine: dual and control-variate formulations walk the same trajectory") {
  const auto obj = make_random_quadratic(4, {{6, 1}}, 11);
  const LayeredMatrix x0 = random_init(obj->layer_shapes(), 1);
  struct Case {
    ProjectionMethod method;
    int r;
  };
  for (const Case c : {Case{ProjectionMethod::Identity, 6}, Case{ProjectionMethod::CoordinateDescent, 3},
                       Case{ProjectionMethod::RandomOrthonormal, 3}}) {
    FedConfig cfg = base_config(4, 8, 3, 0.1, EngineKind::DualVariable, c.method, {c.r});
    const RunResult dual = run(cfg, *obj, x0);
    cfg.engine = EngineKind::VarianceReduction;
    const RunResult vr = run(cfg, *obj, x0);
    REQUIRE(dual.status == RunStatus::Completed);
    REQUIRE(vr.status == RunStatus::Completed);
    INFO("method=", method_name(c.method));
    CHECK(traj_rel_gap(dual, vr) <= 1e-10);
    // In exact arithmetic the drift variables sum to zero across clients.
    CHECK(dual.max_dual_sum_inf <= 1e-9);
  }
}

TEST_CASE("engine: zeroed drift variables reproduce the uncorrected subspace engine exactly") {
  const auto obj = make_random_quadratic(3, {{8, 1}}, 21);
  const LayeredMatrix x0 = random_init(obj->layer_shapes(), 2);
  FedConfig cfg = base_config(3, 6, 2, 0.1, EngineKind::DualVariable,
                              ProjectionMethod::CoordinateDescent, {4});
  cfg.debug_zero_duals = true;
  const RunResult crippled = run(cfg, *obj, x0);

  FedConfig plain = base_config(3, 6, 2, 0.1, EngineKind::FedAvgSubspace,
                                ProjectionMethod::CoordinateDescent, {4});
  const RunResult sub = run(plain, *obj, x0);
  REQUIRE(crippled.trajectory.size() == sub.trajectory.size());
  for (std::size_t k = 0; k < sub.trajectory.size(); ++k)
    CHECK(layers_equal(crippled.trajectory[k], sub.trajectory[k]));
}

TEST_CASE("engine: subspace local SGD at full dimension is plain local SGD bit-for-bit") {
  const auto obj = make_random_quadratic(3, {{5, 1}}, 33);
  const LayeredMatrix x0 = random_init(obj->layer_shapes(), 3);
  const FedConfig a = base_config(3, 5, 3, 0.1, EngineKind::FedAvgSubspace,
                                  ProjectionMethod::Identity, {5});
  const FedConfig b =
      base_config(3, 5, 3, 0.1, EngineKind::FedAvg, ProjectionMethod::Identity, {5});
  const RunResult ra = run(a, *obj, x0);
  const RunResult rb = run(b, *obj, x0);
  REQUIRE(ra.trajectory.size() == rb.trajectory.size());
  for (std::size_t k = 0; k < ra.trajectory.size(); ++k)
    CHECK(layers_equal(ra.trajectory[k], rb.trajectory[k]));
}

TEST_CASE("engine: one client, one local step, full dimension is gradient descent bit-for-bit") {
  const auto obj = make_random_quadratic(1, {{5, 1}}, 44);
  const LayeredMatrix x0 = random_init(obj->layer_shapes(), 4);
  const double eta = 0.2;
  const int steps = 30;
  FedConfig cfg =
      base_config(1, steps, 1, eta, EngineKind::DualVariable, ProjectionMethod::Identity, {5});
  const RunResult res = run(cfg, *obj, x0);
  REQUIRE(res.status == RunStatus::Completed);
  REQUIRE(static_cast<int>(res.trajectory.size()) == steps);

  LayeredMatrix x = x0;
  for (int k = 0; k < steps; ++k) {
    x = sub(x, scale(eta, obj->full_gradient(0, x)));
    CHECK(layers_equal(res.trajectory[static_cast<std::size_t>(k)], x));
  }
}

TEST_CASE("engine: plain local SGD matches a hand-rolled client loop") {
  const auto obj = make_random_quadratic(2, {{4, 1}}, 55);
  const LayeredMatrix x0 = random_init(obj->layer_shapes(), 5);
  const double eta = 0.05;
  const int tau = 3, rounds = 4;
  const FedConfig cfg =
      base_config(2, rounds, tau, eta, EngineKind::FedAvg, ProjectionMethod::Identity, {4});
  const RunResult res = run(cfg, *obj, x0);

  LayeredMatrix x = x0;
  for (int k = 0; k < rounds; ++k) {
    std::vector<LayeredMatrix> z;
    for (int i = 0; i < 2; ++i) {
      LayeredMatrix zi = x;
      for (int t = 0; t < tau; ++t) zi = sub(zi, scale(eta, obj->full_gradient(i, zi)));
      z.push_back(zi);
    }
    x = average(z);
    const double gap = std::sqrt(norm_sq(sub(res.trajectory[static_cast<std::size_t>(k)], x)));
    CHECK(gap <= 1e-13 * std::max(1.0, std::sqrt(norm_sq(x))));
  }
}

TEST_CASE("engine: thread count never changes the trajectory") {
  const Dataset d = generate_clustered_data(6, 60, 5, 0.3, 3);
  const auto obj = make_logistic(d, 0.01);
  const LayeredMatrix x0 = LayeredMatrix::zeros(obj->layer_shapes());
  FedConfig cfg = base_config(6, 5, 3, 0.2, EngineKind::DualVariable,
                              ProjectionMethod::CoordinateDescent, {3});
  cfg.gradient.batch_size = 4;  // stochastic path: per-client streams must not move
  const RunResult one = run(cfg, *obj, x0);
  cfg.threads = 4;
  const RunResult four = run(cfg, *obj, x0);
  REQUIRE(one.trajectory.size() == four.trajectory.size());
  for (std::size_t k = 0; k < one.trajectory.size(); ++k)
    CHECK(layers_equal(one.trajectory[k], four.trajectory[k]));
}

TEST_CASE("engine: zero rounds is a no-op run") {
  const auto obj = make_random_quadratic(2, {{3, 1}}, 66);
  const LayeredMatrix x0 = random_init(obj->layer_shapes(), 6);
  const FedConfig cfg =
      base_config(2, 0, 1, 0.1, EngineKind::FedAvg, ProjectionMethod::Identity, {3});
  const RunResult res = run(cfg, *obj, x0);
  CHECK(res.status == RunStatus::Completed);
  CHECK(res.records.empty());
  CHECK(res.trajectory.empty());
  CHECK(layers_equal(res.x_final, x0));
  CHECK(res.final_loss == doctest::Approx(obj->global_loss(x0)));
}

TEST_CASE("engine: blow-ups surface as a diverged status, not an exception") {
  const auto obj = make_random_quadratic(2, {{4, 1}}, 77);
  const LayeredMatrix x0 = random_init(obj->layer_shapes(), 7);
  FedConfig cfg = base_config(2, 50, 4, 1e6, EngineKind::DualVariable,
                              ProjectionMethod::CoordinateDescent, {2});
  const RunResult res = run(cfg, *obj, x0);
  CHECK(res.status == RunStatus::Diverged);
  CHECK(res.diverged_round >= 0);
  CHECK(res.diverged_step >= 0);
  CHECK(static_cast<int>(res.records.size()) < cfg.rounds);
}

TEST_CASE("engine: trajectory capture aligns with records and the final iterate") {
  const auto obj = make_random_quadratic(3, {{4, 1}}, 88);
  const LayeredMatrix x0 = random_init(obj->layer_shapes(), 8);
  FedConfig cfg = base_config(3, 7, 2, 0.1, EngineKind::DualVariable,
                              ProjectionMethod::RandomOrthonormal, {2});
  const RunResult res = run(cfg, *obj, x0);
  REQUIRE(res.records.size() == 7);
  CHECK(res.trajectory.size() == res.records.size());
  CHECK(layers_equal(res.trajectory.back(), res.x_final));
  for (std::size_t k = 0; k < res.records.size(); ++k)
    CHECK(res.records[k].round == static_cast<int>(k) + 1);

  cfg.capture_trajectory = false;
  CHECK(run(cfg, *obj, x0).trajectory.empty());
}

TEST_CASE("engine: relative error needs a reference and then decreases") {
  const auto obj = make_random_quadratic(3, {{5, 1}}, 99);
  const LayeredMatrix x0 = random_init(obj->layer_shapes(), 9);
  const ReferenceSolution ref = solve_reference(*obj);
  FedConfig cfg =
      base_config(3, 40, 2, 0.2, EngineKind::DualVariable, ProjectionMethod::Identity, {5});
  const RunResult with_ref = run(cfg, *obj, x0, &ref);
  REQUIRE(with_ref.status == RunStatus::Completed);
  CHECK(with_ref.records.back().rel_error < 1e-6);
  CHECK(with_ref.records.back().rel_error < with_ref.records.front().rel_error);
  // Cross-check the reported metric against its definition at the end point.
  const double want =
      std::sqrt(norm_sq(sub(with_ref.x_final, ref.x_star))) / std::sqrt(norm_sq(ref.x_star));
  CHECK(with_ref.records.back().rel_error == doctest::Approx(want).epsilon(1e-12));

  const RunResult without = run(cfg, *obj, x0);
  CHECK(std::isnan(without.records.back().rel_error));
}

TEST_CASE("engine: measured per-round costs equal the analytic ledger") {
  const auto obj = make_random_quadratic(3, {{8, 1}}, 12);
  const LayeredMatrix x0 = random_init(obj->layer_shapes(), 10);
  for (EngineKind engine : {EngineKind::DualVariable, EngineKind::VarianceReduction,
                            EngineKind::FedAvgSubspace}) {
    FedConfig cfg =
        base_config(3, 3, 4, 0.05, engine, ProjectionMethod::CoordinateDescent, {4});
    const RunResult res = run(cfg, *obj, x0);
    REQUIRE(res.status == RunStatus::Completed);
    INFO("engine=", engine_name(engine));
    CHECK(res.measured_round_cost.uplink_scalars == res.analytic_cost.uplink_scalars);
    CHECK(res.measured_round_cost.downlink_scalars == res.analytic_cost.downlink_scalars);
    CHECK(res.measured_round_cost.matmul_flops == res.analytic_cost.matmul_flops);
    CHECK(res.measured_round_cost.gradient_cost_units == res.analytic_cost.gradient_cost_units);
    // Every record carries the same per-client counters.
    for (const RoundRecord& rec : res.records) {
      CHECK(rec.uplink_scalars == res.analytic_cost.uplink_scalars);
      CHECK(rec.gradient_cost_units == res.analytic_cost.gradient_cost_units);
    }
  }
  FedConfig avg = base_config(3, 3, 4, 0.05, EngineKind::FedAvg, ProjectionMethod::Identity, {8});
  const RunResult res = run(avg, *obj, x0);
  CHECK(res.measured_round_cost.uplink_scalars == res.analytic_cost.uplink_scalars);
  CHECK(res.measured_round_cost.matmul_flops == 0);
}

TEST_CASE("engine: configuration validation rejects inconsistent setups") {
  const auto obj = make_random_quadratic(3, {{6, 1}}, 13);
  const LayeredMatrix x0 = random_init(obj->layer_shapes(), 11);
  const auto try_run = [&](FedConfig cfg) { return run(cfg, *obj, x0); };

  // Full-space baseline cannot take a sampled projection.
  CHECK_THROWS_AS(try_run(base_config(3, 1, 1, 0.1, EngineKind::FedAvg,
                                      ProjectionMethod::CoordinateDescent, {3})),
                  std::invalid_argument);
  // Identity requires r = m.
  CHECK_THROWS_AS(try_run(base_config(3, 1, 1, 0.1, EngineKind::DualVariable,
                                      ProjectionMethod::Identity, {3})),
                  std::invalid_argument);
  // One r per layer.
  CHECK_THROWS_AS(try_run(base_config(3, 1, 1, 0.1, EngineKind::DualVariable,
                                      ProjectionMethod::CoordinateDescent, {3, 3})),
                  std::invalid_argument);
  // r outside [1, m].
  CHECK_THROWS_AS(try_run(base_config(3, 1, 1, 0.1, EngineKind::DualVariable,
                                      ProjectionMethod::CoordinateDescent, {7})),
                  std::invalid_argument);
  // Client count must match the objective.
  CHECK_THROWS_AS(try_run(base_config(2, 1, 1, 0.1, EngineKind::DualVariable,
                                      ProjectionMethod::CoordinateDescent, {3})),
                  std::invalid_argument);
  // Step size must be positive and finite.
  FedConfig bad = base_config(3, 1, 1, 0.1, EngineKind::DualVariable,
                              ProjectionMethod::CoordinateDescent, {3});
  bad.step_size = 0.0;
  CHECK_THROWS_AS(try_run(bad), std::invalid_argument);
  // Minibatches cannot exceed a client's sample count.
  const Dataset d = generate_clustered_data(3, 9, 4, 0.1, 1);
  const auto logit = make_logistic(d, 0.0);
  FedConfig mb = base_config(3, 1, 1, 0.1, EngineKind::DualVariable,
                             ProjectionMethod::CoordinateDescent, {2});
  mb.gradient.batch_size = 5;
  CHECK_THROWS_AS(run(mb, *logit, LayeredMatrix::zeros(logit->layer_shapes())),
                  std::invalid_argument);
}

TEST_CASE("engine: local rounds follow the projected recursion step for step") {
  const auto obj = make_random_quadratic(1, {{6, 1}}, 14);
  const std::vector<LayerShape> shapes = obj->layer_shapes();
  const LayeredMatrix x = random_init(shapes, 12);
  const ProjectionSet P =
      generate_projections(ProjectionMethod::CoordinateDescent, shapes, SubspaceDims{{3}}, 5);
  LayeredMatrix correction = LayeredMatrix::zeros({{3, 1}});
  correction.layer(0)(0, 0) = 0.05;
  correction.layer(0)(2, 0) = -0.02;

  LocalRoundOptions opt;
  opt.step_size = 0.1;
  opt.local_steps = 3;

  std::vector<LayeredMatrix> logged;
  const LayeredMatrix got = local_round_vr(*obj, 0, x, P, correction, opt, nullptr, &logged);

  // Hand recursion: B <- B - eta (g(B) + c), g(B) = (r/m) P^T grad f(x + P B).
  const LayerScalars rm = ratio_r_over_m(shapes, P.dims());
  LayeredMatrix B = LayeredMatrix::zeros({{3, 1}});
  REQUIRE(logged.size() == 3);
  for (int t = 0; t < 3; ++t) {
    const LayeredMatrix g =
        scale_layerwise(rm, project_down(P, obj->full_gradient(0, add(x, project_up(P, B)))));
    CHECK(std::sqrt(norm_sq(sub(logged[static_cast<std::size_t>(t)], g))) <= 1e-14);
    B = sub(B, scale(opt.step_size, add(g, correction)));
  }
  CHECK(std::sqrt(norm_sq(sub(got, B))) <= 1e-13);

  // The drift-corrected round is the same recursion with c = dual / (eta tau).
  const LayeredMatrix dual = scale(opt.step_size * opt.local_steps, correction);
  const LayeredMatrix via_dual = local_round_dual(*obj, 0, x, P, dual, opt);
  CHECK(std::sqrt(norm_sq(sub(via_dual, B))) <= 1e-13);
}

TEST_CASE("engine: drift transport and server step match their definitions") {
  const std::vector<LayerShape> shapes = {{7, 2}};
  const SubspaceDims dims{{3}};
  const ProjectionSet P_cur =
      generate_projections(ProjectionMethod::RandomOrthonormal, shapes, dims, 8);
  const ProjectionSet P_next =
      generate_projections(ProjectionMethod::RandomOrthonormal, shapes, dims, 9);

  const LayeredMatrix dual = random_init({{3, 2}}, 21);
  const LayeredMatrix B_i = random_init({{3, 2}}, 22);
  const LayeredMatrix B_avg = random_init({{3, 2}}, 23);

  CostMeter meter;
  const LayeredMatrix got = dual_update(dual, B_i, B_avg, P_next, P_cur, &meter);
  const LayeredMatrix want =
      project_down(P_next, project_up(P_cur, add(dual, sub(B_i, B_avg))));
  CHECK(std::sqrt(norm_sq(sub(got, want))) <= 1e-13);
  CHECK(meter.tally().matmul_flops == 2 * 7 * 3 * 2);  // two transport products

  const LayeredMatrix x = random_init(shapes, 24);
  const LayeredMatrix stepped = server_update(x, B_avg, P_cur);
  CHECK(std::sqrt(norm_sq(sub(stepped, add(x, project_up(P_cur, B_avg))))) == 0.0);
}
