#include "fedsub/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "fedsub/rng.hpp"
#include "json.hpp"

namespace fedsub {

namespace {

using nlohmann::json;

// Full round-trip precision; also the canonical formatting for CSV cells so
// identical runs produce byte-identical files.
std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) { ok = true; break; }
    if (!ok) {
      std::string expected;
      for (const char* a : allowed) {
        if (!expected.empty()) expected += ", ";
        expected += a;
      }
      throw std::invalid_argument(std::string("spec: unknown key '") + key + "' in " + where +
                                  " (expected one of: " + expected + ")");
    }
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("spec: bad value for '") + key + "': " + e.what());
  }
}

ObjectiveSpec parse_objective(const json& j) {
  check_keys(j, {"kind", "lambda", "hidden_width", "data", "quadratic"}, "objective");
  ObjectiveSpec spec;
  spec.kind = get_or<std::string>(j, "kind", spec.kind);
  if (spec.kind != "logistic" && spec.kind != "quadratic" && spec.kind != "mlp")
    throw std::invalid_argument("spec: objective.kind must be logistic, quadratic, or mlp, got '" +
                                spec.kind + "'");
  spec.lambda = get_or<double>(j, "lambda", spec.lambda);
  spec.hidden_width = get_or<int>(j, "hidden_width", spec.hidden_width);
  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, {"n_clients", "samples_total", "feature_dim", "heterogeneity_noise", "seed"},
               "objective.data");
    spec.n_clients = get_or<int>(d, "n_clients", spec.n_clients);
    spec.samples_total = get_or<std::int64_t>(d, "samples_total", spec.samples_total);
    spec.feature_dim = get_or<int>(d, "feature_dim", spec.feature_dim);
    spec.heterogeneity_noise = get_or<double>(d, "heterogeneity_noise", spec.heterogeneity_noise);
    spec.data_seed = get_or<std::uint64_t>(d, "seed", spec.data_seed);
  }
  if (j.contains("quadratic")) {
    const json& q = j.at("quadratic");
    check_keys(q, {"layers", "n_clients", "eig_min", "eig_max", "heterogeneity", "seed"},
               "objective.quadratic");
    if (q.contains("layers")) {
      spec.quad_layers.clear();
      for (const json& layer : q.at("layers")) {
        check_keys(layer, {"m", "d"}, "objective.quadratic.layers[]");
        spec.quad_layers.push_back({get_or<int>(layer, "m", 0), get_or<int>(layer, "d", 1)});
      }
    }
    spec.n_clients = get_or<int>(q, "n_clients", spec.n_clients);
    spec.quad.eig_min = get_or<double>(q, "eig_min", spec.quad.eig_min);
    spec.quad.eig_max = get_or<double>(q, "eig_max", spec.quad.eig_max);
    spec.quad.heterogeneity = get_or<double>(q, "heterogeneity", spec.quad.heterogeneity);
    spec.data_seed = get_or<std::uint64_t>(q, "seed", spec.data_seed);
  }
  return spec;
}

void parse_fed(const json& j, ExperimentSpec& spec) {
  check_keys(j,
             {"rounds", "local_steps", "step_size", "engine", "projection", "subspace_dim",
              "batch_size", "master_seed", "threads", "alpha_grad", "alpha_mem"},
             "fed");
  FedConfig& c = spec.base;
  c.rounds = get_or<int>(j, "rounds", c.rounds);
  if (c.rounds < 1) throw std::invalid_argument("spec: fed.rounds must be >= 1");
  c.local_steps = get_or<int>(j, "local_steps", c.local_steps);
  c.step_size = get_or<double>(j, "step_size", c.step_size);
  c.engine = parse_engine(get_or<std::string>(j, "engine", engine_name(c.engine)));
  c.method = parse_method(get_or<std::string>(j, "projection", method_name(c.method)));
  if (j.contains("subspace_dim")) {
    const json& r = j.at("subspace_dim");
    if (r.is_array()) {
      c.dims.r.clear();
      for (const json& v : r) c.dims.r.push_back(v.get<int>());
      spec.dims_explicit = true;
    } else {
      spec.scalar_r = r.get<int>();
      if (spec.scalar_r < 1)
        throw std::invalid_argument("spec: fed.subspace_dim must be >= 1");
    }
  }
  c.gradient.batch_size = get_or<int>(j, "batch_size", c.gradient.batch_size);
  c.master_seed = get_or<std::uint64_t>(j, "master_seed", c.master_seed);
  c.threads = get_or<int>(j, "threads", c.threads);
  c.cost_params.alpha_grad = get_or<double>(j, "alpha_grad", c.cost_params.alpha_grad);
  c.cost_params.alpha_mem = get_or<double>(j, "alpha_mem", c.cost_params.alpha_mem);
}

SweepSpec parse_sweep(const json& j) {
  check_keys(j, {"engines", "projections", "subspace_dims", "seeds"}, "sweep");
  SweepSpec s;
  if (j.contains("engines")) {
    for (const json& v : j.at("engines")) s.engines.push_back(parse_engine(v.get<std::string>()));
    if (s.engines.empty()) throw std::invalid_argument("spec: sweep.engines is empty");
  }
  if (j.contains("projections")) {
    for (const json& v : j.at("projections"))
      s.projections.push_back(parse_method(v.get<std::string>()));
    if (s.projections.empty()) throw std::invalid_argument("spec: sweep.projections is empty");
  }
  if (j.contains("subspace_dims")) {
    for (const json& v : j.at("subspace_dims")) s.subspace_dims.push_back(v.get<int>());
    if (s.subspace_dims.empty()) throw std::invalid_argument("spec: sweep.subspace_dims is empty");
  }
  if (j.contains("seeds")) {
    for (const json& v : j.at("seeds")) s.seeds.push_back(v.get<std::uint64_t>());
    if (s.seeds.empty()) throw std::invalid_argument("spec: sweep.seeds is empty");
  }
  return s;
}

}  // namespace

ExperimentSpec parse_spec(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("spec: not valid JSON: ") + e.what());
  }
  check_keys(j,
             {"name", "objective", "fed", "sweep", "repetitions", "output_dir", "timing",
              "reference", "debug"},
             "the top level");
  ExperimentSpec spec;
  spec.name = get_or<std::string>(j, "name", spec.name);
  if (spec.name.empty()) throw std::invalid_argument("spec: name must be nonempty");
  for (char ch : spec.name)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_')
      throw std::invalid_argument("spec: name may contain only letters, digits, '-', '_'");
  if (j.contains("objective")) spec.objective = parse_objective(j.at("objective"));
  if (j.contains("fed")) parse_fed(j.at("fed"), spec);
  if (j.contains("sweep")) spec.sweep = parse_sweep(j.at("sweep"));
  spec.repetitions = get_or<int>(j, "repetitions", spec.repetitions);
  if (spec.repetitions < 1) throw std::invalid_argument("spec: repetitions must be >= 1");
  spec.output_dir = get_or<std::string>(j, "output_dir", spec.output_dir);
  const std::string timing = get_or<std::string>(j, "timing", "wall");
  if (timing == "wall")
    spec.timing_wall = true;
  else if (timing == "off")
    spec.timing_wall = false;
  else
    throw std::invalid_argument("spec: timing must be \"wall\" or \"off\", got '" + timing + "'");
  if (j.contains("reference")) spec.reference = j.at("reference").get<bool>();
  if (j.contains("debug")) {
    check_keys(j.at("debug"), {"corrupt_cd_scaling"}, "debug");
    spec.debug.corrupt_cd_scaling = get_or<bool>(j.at("debug"), "corrupt_cd_scaling", false);
  }
  if (spec.dims_explicit && !spec.sweep.subspace_dims.empty())
    throw std::invalid_argument(
        "spec: per-layer fed.subspace_dim cannot be combined with sweep.subspace_dims");
  return spec;
}

ExperimentSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open spec file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_spec(ss.str());
}

std::string resolve_output_dir(const ExperimentSpec& spec) {
  if (!spec.output_dir.empty()) return spec.output_dir;
  const char* env = std::getenv("FEDSUB_OUT_DIR");
  const std::string root = env && *env ? env : "out";
  return (std::filesystem::path(root) / spec.name).string();
}

BuiltObjective build_objective(const ObjectiveSpec& spec) {
  BuiltObjective built;
  if (spec.kind == "quadratic") {
    built.objective =
        make_random_quadratic(spec.n_clients, spec.quad_layers, spec.data_seed, spec.quad);
    built.x0 = LayeredMatrix::zeros(built.objective->layer_shapes());
    return built;
  }
  Dataset data = generate_clustered_data(spec.n_clients, spec.samples_total, spec.feature_dim,
                                         spec.heterogeneity_noise, spec.data_seed);
  if (spec.kind == "logistic") {
    built.objective = make_logistic(data, spec.lambda);
    built.x0 = LayeredMatrix::zeros(built.objective->layer_shapes());
  } else {  // mlp
    built.objective = make_mlp(data, spec.hidden_width, spec.lambda);
    // Zero is a saddle of the tanh network; start from a seeded random point
    // shared by every cell so engines stay comparable.
    built.x0 = random_init(built.objective->layer_shapes(), spec.data_seed);
  }
  built.dataset = std::move(data);
  return built;
}

namespace {

SubspaceDims dims_for_cell(const ExperimentSpec& spec, const std::vector<LayerShape>& shapes,
                           ProjectionMethod method, int r_axis) {
  SubspaceDims dims;
  if (method == ProjectionMethod::Identity) {
    for (const auto& s : shapes) dims.r.push_back(s.rows);
    return dims;
  }
  if (spec.dims_explicit) return spec.base.dims;
  const int r = r_axis > 0 ? r_axis : spec.scalar_r;
  if (r < 1)
    throw std::invalid_argument("spec: fed.subspace_dim (or sweep.subspace_dims) is required "
                                "for projected methods");
  dims.r.assign(shapes.size(), r);
  return dims;
}

struct Cell {
  EngineKind engine;
  ProjectionMethod method;
  int r_axis;  // 0 for identity
  std::uint64_t seed;
  int rep;
  FedConfig cfg;
};

std::vector<Cell> expand_cells(const ExperimentSpec& spec, const std::vector<LayerShape>& shapes,
                               int n_clients) {
  const std::vector<EngineKind> engines =
      spec.sweep.engines.empty() ? std::vector<EngineKind>{spec.base.engine} : spec.sweep.engines;
  const std::vector<ProjectionMethod> projections =
      spec.sweep.projections.empty() ? std::vector<ProjectionMethod>{spec.base.method}
                                     : spec.sweep.projections;
  const std::vector<int> dims_axis =
      spec.sweep.subspace_dims.empty() ? std::vector<int>{0} : spec.sweep.subspace_dims;
  const std::vector<std::uint64_t> seeds = spec.sweep.seeds.empty()
                                               ? std::vector<std::uint64_t>{spec.base.master_seed}
                                               : spec.sweep.seeds;

  std::vector<Cell> cells;
  for (EngineKind e : engines)
    for (ProjectionMethod p : projections)
      for (int r : dims_axis)
        for (std::uint64_t s : seeds)
          for (int rep = 0; rep < spec.repetitions; ++rep) {
            Cell cell;
            cell.engine = e;
            cell.method = p;
            cell.r_axis = p == ProjectionMethod::Identity ? 0 : (r > 0 ? r : spec.scalar_r);
            cell.seed = s;
            cell.rep = rep;
            cell.cfg = spec.base;
            cell.cfg.engine = e;
            cell.cfg.method = p;
            cell.cfg.dims = dims_for_cell(spec, shapes, p, r);
            cell.cfg.n_clients = n_clients;
            // Repetitions get sub-streams of the sweep seed; engines and
            // projection methods intentionally share it so comparisons
            // across them are paired on the same randomness.
            cell.cfg.master_seed = derive_seed(s, {kSeedRep, static_cast<std::uint64_t>(rep)});
            cell.cfg.collect_wall_time = spec.timing_wall;
            try {
              cell.cfg.validate(shapes);
            } catch (const std::invalid_argument& e2) {
              throw std::invalid_argument("sweep cell (engine=" + engine_name(e) + ", projection=" +
                                          method_name(p) + ", r=" + std::to_string(cell.r_axis) +
                                          "): " + e2.what());
            }
            cells.push_back(std::move(cell));
          }
  return cells;
}

std::string cell_csv_name(const ExperimentSpec& spec, const Cell& cell) {
  std::ostringstream name;
  name << spec.name << "__" << engine_name(cell.engine) << "__" << method_name(cell.method)
       << "__r" << cell.r_axis << "__seed" << cell.seed << "__rep" << cell.rep << ".csv";
  return name.str();
}

void write_round_csv(const std::string& path, const std::vector<RoundRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file: " + path);
  out << "k,rel_error,grad_norm_sq,uplink,matmul,gradcost,wall_ms\n";
  for (const auto& r : records) {
    out << r.round << ',' << fmt(r.rel_error) << ',' << fmt(r.grad_norm_sq) << ','
        << r.uplink_scalars << ',' << r.matmul_flops << ',' << r.gradient_cost_units << ','
        << fmt(r.wall_ms) << "\n";
  }
  if (!out) throw std::runtime_error("write failed for: " + path);
}

}  // namespace

ExperimentOutcome run_experiment(const ExperimentSpec& spec) {
  BuiltObjective built = build_objective(spec.objective);
  const std::vector<LayerShape> shapes = built.objective->layer_shapes();
  const std::vector<Cell> cells = expand_cells(spec, shapes, built.objective->n_clients());

  const bool want_ref = spec.reference.value_or(spec.objective.kind != "mlp");
  if (want_ref && spec.objective.kind == "mlp")
    throw std::invalid_argument("spec: reference solutions are unavailable for the mlp objective");
  std::optional<ReferenceSolution> ref;
  if (want_ref) ref = solve_reference(*built.objective);

  ExperimentOutcome outcome;
  outcome.out_dir = resolve_output_dir(spec);
  std::filesystem::create_directories(outcome.out_dir);

  std::ostringstream summary;
  summary << "engine,projection,r,seed,rep,status,rounds_completed,final_rel_error,"
             "final_grad_norm_sq,final_loss,max_dual_sum_inf,uplink_per_round,"
             "downlink_per_round,matmul_per_round,gradcost_per_round,memory_model,total_wall_ms\n";

  for (const Cell& cell : cells) {
    RunResult res = run(cell.cfg, *built.objective, built.x0, ref ? &*ref : nullptr);

    CellOutcome co;
    co.engine = cell.engine;
    co.method = cell.method;
    co.r_axis = cell.r_axis;
    co.seed = cell.seed;
    co.rep = cell.rep;
    co.csv_path = (std::filesystem::path(outcome.out_dir) / cell_csv_name(spec, cell)).string();
    write_round_csv(co.csv_path, res.records);

    const double final_rel =
        res.records.empty() ? std::numeric_limits<double>::quiet_NaN() : res.records.back().rel_error;
    const double final_gns =
        res.records.empty() ? std::numeric_limits<double>::quiet_NaN() : res.records.back().grad_norm_sq;
    double total_wall = 0.0;
    for (const auto& r : res.records) total_wall += r.wall_ms;

    summary << engine_name(cell.engine) << ',' << method_name(cell.method) << ',' << cell.r_axis
            << ',' << cell.seed << ',' << cell.rep << ','
            << (res.status == RunStatus::Completed ? "completed" : "diverged") << ','
            << res.records.size() << ',' << fmt(final_rel) << ',' << fmt(final_gns) << ','
            << fmt(res.final_loss) << ',' << fmt(res.max_dual_sum_inf) << ','
            << res.analytic_cost.uplink_scalars << ',' << res.analytic_cost.downlink_scalars << ','
            << res.analytic_cost.matmul_flops << ',' << res.analytic_cost.gradient_cost_units
            << ',' << res.analytic_cost.memory_scalars << ',' << fmt(total_wall) << "\n";

    co.result = std::move(res);
    outcome.cells.push_back(std::move(co));
  }

  outcome.summary_path = (std::filesystem::path(outcome.out_dir) / "summary.csv").string();
  std::ofstream out(outcome.summary_path);
  if (!out) throw std::runtime_error("cannot open output file: " + outcome.summary_path);
  out << summary.str();
  if (!out) throw std::runtime_error("write failed for: " + outcome.summary_path);
  return outcome;
}

std::string run_export_data(const ExperimentSpec& spec) {
  if (spec.objective.kind == "quadratic")
    throw std::invalid_argument("export-data: the quadratic objective has no sample data");
  BuiltObjective built = build_objective(spec.objective);
  const std::string dir = (std::filesystem::path(resolve_output_dir(spec)) / "data").string();
  export_dataset_csv(*built.dataset, dir);
  return dir;
}

// --------------------------------------------------------------------------
// Validation battery

namespace {

LayeredMatrix fd_gradient(const Objective& obj, int client, const LayeredMatrix& x) {
  LayeredMatrix g = LayeredMatrix::zeros(x.shapes());
  LayeredMatrix probe = x;
  for (int l = 0; l < x.num_layers(); ++l) {
    for (int c = 0; c < x.layer(l).cols(); ++c) {
      for (int r = 0; r < x.layer(l).rows(); ++r) {
        const double v = x.layer(l)(r, c);
        const double h = 1e-5 * std::max(1.0, std::abs(v));
        probe.layer(l)(r, c) = v + h;
        const double up = obj.loss(client, probe);
        probe.layer(l)(r, c) = v - h;
        const double dn = obj.loss(client, probe);
        probe.layer(l)(r, c) = v;
        g.layer(l)(r, c) = (up - dn) / (2.0 * h);
      }
    }
  }
  return g;
}

double fd_check(const Objective& obj, std::uint64_t seed, int points) {
  double worst = 0.0;
  for (int p = 0; p < points; ++p) {
    LayeredMatrix x = random_init(obj.layer_shapes(),
                                  derive_seed(seed, {kSeedValidate, static_cast<std::uint64_t>(p)}));
    const int client = p % obj.n_clients();
    const LayeredMatrix g = obj.full_gradient(client, x);
    const LayeredMatrix f = fd_gradient(obj, client, x);
    const double rel =
        std::sqrt(norm_sq(sub(g, f))) / std::max(std::sqrt(norm_sq(f)), 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

void push_a1(std::vector<ValidationCheck>& checks, ProjectionMethod method, LayerShape shape,
             int r, double mc_tol, std::uint64_t seed, const GenerateOptions& opt) {
  const Assumption1Report rep =
      validate_assumption1(method, shape, r, kAssumption1Samples, kExactTol, mc_tol, seed, opt);
  const std::string tag = method_name(method) + "_" + std::to_string(shape.rows) + "x" +
                          std::to_string(r);
  checks.push_back({"a1_" + tag + "_exact",
                    "max |P^T P - (m/r) I| over draws (" + tag + ")", rep.max_exact_deviation,
                    rep.tol_exact, rep.exact_ok});
  checks.push_back({"a1_" + tag + "_mc",
                    "Frobenius-relative |mean P P^T - I| at " +
                        std::to_string(kAssumption1Samples) + " draws (" + tag + ")",
                    rep.mean_ppt_frob_rel, rep.tol_mc, rep.mc_ok});
}

double trajectory_max_rel_gap(const RunResult& a, const RunResult& b) {
  if (a.trajectory.size() != b.trajectory.size())
    return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (std::size_t k = 0; k < a.trajectory.size(); ++k) {
    const double gap = std::sqrt(norm_sq(sub(a.trajectory[k], b.trajectory[k])));
    const double den = std::max(std::sqrt(norm_sq(a.trajectory[k])), 1.0);
    worst = std::max(worst, gap / den);
  }
  return worst;
}

}  // namespace

bool ValidationReport::all_pass() const {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return true;
}

ValidationReport run_validation(const ExperimentSpec& spec) {
  ValidationReport report;
  const std::uint64_t seed = 20260817;

  // Projection contract, both halves, on both canonical shapes.
  push_a1(report.checks, ProjectionMethod::CoordinateDescent, {20, 1}, 10, kMcTolCd20x10, seed,
          spec.debug);
  push_a1(report.checks, ProjectionMethod::RandomOrthonormal, {20, 1}, 10, kMcTolRd20x10, seed,
          spec.debug);
  push_a1(report.checks, ProjectionMethod::SphericalSmoothing, {20, 1}, 10, kMcTolSs20x10, seed,
          spec.debug);
  push_a1(report.checks, ProjectionMethod::CoordinateDescent, {8, 1}, 1, kMcTolCd8x1, seed,
          spec.debug);
  push_a1(report.checks, ProjectionMethod::RandomOrthonormal, {8, 1}, 1, kMcTolRd8x1, seed,
          spec.debug);
  push_a1(report.checks, ProjectionMethod::SphericalSmoothing, {8, 1}, 1, kMcTolSs8x1, seed,
          spec.debug);

  // Gradient implementations against central finite differences.
  {
    auto quad = make_random_quadratic(3, {{6, 2}, {4, 1}}, seed);
    report.checks.push_back({"grad_fd_quadratic", "quadratic gradient vs finite differences",
                             fd_check(*quad, seed + 1, 5), 1e-6, false});
    Dataset data = generate_clustered_data(3, 60, 8, 0.1, seed);
    auto logi = make_logistic(data, 1e-4);
    report.checks.push_back({"grad_fd_logistic", "logistic gradient vs finite differences",
                             fd_check(*logi, seed + 2, 5), 1e-6, false});
    auto mlp = make_mlp(std::move(data), 5, 0.0);
    report.checks.push_back({"grad_fd_mlp", "mlp gradient vs finite differences",
                             fd_check(*mlp, seed + 3, 5), 1e-6, false});
    for (std::size_t i = report.checks.size() - 3; i < report.checks.size(); ++i)
      report.checks[i].pass = report.checks[i].observed <= report.checks[i].threshold;
  }

  // Engine cross-checks on a small heterogeneous quadratic.
  {
    auto quad = make_random_quadratic(4, {{6, 1}, {4, 2}}, seed + 10);
    const LayeredMatrix x0 = LayeredMatrix::zeros(quad->layer_shapes());
    FedConfig cfg;
    cfg.n_clients = 4;
    cfg.rounds = 5;
    cfg.local_steps = 3;
    cfg.step_size = 0.05;
    cfg.engine = EngineKind::DualVariable;
    cfg.master_seed = seed + 11;
    cfg.capture_trajectory = true;
    cfg.collect_wall_time = false;

    const struct {
      ProjectionMethod method;
      int r;
      const char* label;
    } combos[] = {{ProjectionMethod::Identity, 0, "identity"},
                  {ProjectionMethod::CoordinateDescent, 3, "cd"},
                  {ProjectionMethod::RandomOrthonormal, 3, "rd"}};
    double worst_dual_sum = 0.0;
    for (const auto& combo : combos) {
      FedConfig c = cfg;
      c.method = combo.method;
      c.dims.r.clear();
      for (const auto& s : quad->layer_shapes())
        c.dims.r.push_back(combo.method == ProjectionMethod::Identity ? s.rows : combo.r);
      const RunResult dual = run(c, *quad, x0);
      worst_dual_sum = std::max(worst_dual_sum, dual.max_dual_sum_inf);
      FedConfig cv = c;
      cv.engine = EngineKind::VarianceReduction;
      const RunResult vr = run(cv, *quad, x0);
      report.checks.push_back({std::string("equiv_") + combo.label,
                               std::string("dual vs control-variate trajectory gap (") +
                                   combo.label + ")",
                               trajectory_max_rel_gap(dual, vr), 1e-10, false});
      report.checks.back().pass =
          report.checks.back().observed <= report.checks.back().threshold;
    }
    report.checks.push_back({"dual_sum_zero", "max over rounds of ||sum_i dual_i||_max",
                             worst_dual_sum, 1e-9, worst_dual_sum <= 1e-9});
  }

  // Identity projection, one client, one local step reduces to plain
  // gradient descent; the trajectories must agree to the last bit.
  {
    auto quad = make_random_quadratic(1, {{5, 1}}, seed + 20);
    const LayeredMatrix x0 = LayeredMatrix::zeros(quad->layer_shapes());
    FedConfig cfg;
    cfg.n_clients = 1;
    cfg.rounds = 20;
    cfg.local_steps = 1;
    cfg.step_size = 0.1;
    cfg.engine = EngineKind::DualVariable;
    cfg.method = ProjectionMethod::Identity;
    cfg.dims.r = {5};
    cfg.master_seed = seed + 21;
    cfg.capture_trajectory = true;
    cfg.collect_wall_time = false;
    const RunResult res = run(cfg, *quad, x0);
    LayeredMatrix x = x0;
    double worst = 0.0;
    for (int k = 0; k < cfg.rounds; ++k) {
      x = sub(x, scale(cfg.step_size, quad->full_gradient(0, x)));
      for (int l = 0; l < x.num_layers(); ++l)
        worst = std::max(
            worst,
            (x.layer(l) - res.trajectory[static_cast<std::size_t>(k)].layer(l)).cwiseAbs().maxCoeff());
    }
    report.checks.push_back(
        {"reduce_gd", "identity/tau=1/n=1 vs plain gradient descent, max abs gap", worst, 0.0,
         worst == 0.0});
  }

  const std::string dir = resolve_output_dir(spec);
  std::filesystem::create_directories(dir);
  const std::string path = (std::filesystem::path(dir) / "validation_report.csv").string();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file: " + path);
  out << "id,description,observed,threshold,pass\n";
  for (const auto& c : report.checks)
    out << c.id << ",\"" << c.description << "\"," << fmt(c.observed) << ',' << fmt(c.threshold)
        << ',' << (c.pass ? "1" : "0") << "\n";
  return report;
}

// --------------------------------------------------------------------------
// Step-size conditions

StepsizeReport compute_stepsize(double smoothness, double th_m, double th_r, int n_clients,
                                int local_steps, double eta_configured) {
  if (!(smoothness > 0.0))
    throw std::invalid_argument("compute_stepsize: smoothness must be positive");
  if (th_m < 1.0 || th_r <= 0.0 || th_r > 1.0)
    throw std::invalid_argument("compute_stepsize: need th_m >= 1 and 0 < th_r <= 1");
  if (n_clients < 1 || local_steps < 1)
    throw std::invalid_argument("compute_stepsize: need n_clients >= 1 and local_steps >= 1");

  StepsizeReport rep;
  rep.smoothness_known = true;
  rep.smoothness = smoothness;
  rep.theta_m_value = th_m;
  rep.theta_r_value = th_r;
  rep.n_clients = n_clients;
  rep.local_steps = local_steps;
  rep.eta_configured = eta_configured;

  const double L = smoothness;
  const double n = n_clients;
  const double tau = local_steps;

  // 4 eta^2 th_r^2 th_m^3 tau L^2 <= 1/(8 tau)
  rep.cap_quad = 1.0 / (tau * L * th_r * std::pow(th_m, 1.5) * std::sqrt(32.0));
  // (5/2) eta^2 th_r^3 th_m^2 L^2 tau^3 <= tau/(4 th_m)
  rep.cap_drift = 1.0 / (tau * L * std::sqrt(10.0 * std::pow(th_r, 3.0) * std::pow(th_m, 3.0)));
  // eta tau/(4 th_m) - 20 eta^4 th_r^4 tau^4 L^2 th_m^3 / n >= eta tau/(8 th_m)
  rep.cap_higher = std::cbrt(n / (160.0 * std::pow(th_r, 4.0) * std::pow(tau, 3.0) * L * L *
                                  std::pow(th_m, 4.0)));
  // 5 n eta tau th_r L^2 th_m^2 <= 1
  rep.cap_variance = 1.0 / (5.0 * n * tau * th_r * L * L * th_m * th_m);
  // 1 - eta tau L th_r^2 th_m^2 - 4 eta^3 tau th_r^4 th_m^2 L^2 / n >= 0,
  // decreasing in eta, so bisect from the first term's own root.
  {
    const auto lhs = [&](double eta) {
      return 1.0 - eta * tau * L * th_r * th_r * th_m * th_m -
             4.0 * eta * eta * eta * tau * std::pow(th_r, 4.0) * th_m * th_m * L * L / n;
    };
    double lo = 0.0, hi = 1.0 / (tau * L * th_r * th_r * th_m * th_m);
    for (int it = 0; it < 80; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (lhs(mid) >= 0.0)
        lo = mid;
      else
        hi = mid;
    }
    rep.cap_descent = lo;
  }

  rep.eta_max = rep.cap_quad;
  rep.binding = "quad";
  const struct {
    double cap;
    const char* name;
  } caps[] = {{rep.cap_drift, "drift"},
              {rep.cap_descent, "descent"},
              {rep.cap_higher, "higher"},
              {rep.cap_variance, "variance"}};
  for (const auto& c : caps)
    if (c.cap < rep.eta_max) {
      rep.eta_max = c.cap;
      rep.binding = c.name;
    }
  rep.configured_admissible = eta_configured <= rep.eta_max;
  return rep;
}

StepsizeReport run_stepsize(const ExperimentSpec& spec) {
  BuiltObjective built = build_objective(spec.objective);
  const std::vector<LayerShape> shapes = built.objective->layer_shapes();
  const SubspaceDims dims = dims_for_cell(spec, shapes, spec.base.method, 0);
  const std::optional<double> L = built.objective->smoothness_bound();
  if (!L) {
    StepsizeReport rep;
    rep.smoothness_known = false;
    rep.eta_configured = spec.base.step_size;
    rep.n_clients = built.objective->n_clients();
    rep.local_steps = spec.base.local_steps;
    return rep;
  }
  return compute_stepsize(*L, theta_m(shapes, dims), theta_r(shapes, dims),
                          built.objective->n_clients(), spec.base.local_steps,
                          spec.base.step_size);
}

}  // namespace fedsub
