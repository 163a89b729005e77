#include "fedsub/projection.hpp"

#include <Eigen/QR>
#include <cmath>
#include <stdexcept>

#include "fedsub/rng.hpp"

namespace fedsub {

std::string method_name(ProjectionMethod m) {
  switch (m) {
    case ProjectionMethod::CoordinateDescent: return "cd";
    case ProjectionMethod::RandomOrthonormal: return "rd";
    case ProjectionMethod::SphericalSmoothing: return "ss";
    case ProjectionMethod::Identity: return "identity";
  }
  throw std::logic_error("method_name: unknown method");
}

ProjectionMethod parse_method(const std::string& name) {
  if (name == "cd") return ProjectionMethod::CoordinateDescent;
  if (name == "rd") return ProjectionMethod::RandomOrthonormal;
  if (name == "ss") return ProjectionMethod::SphericalSmoothing;
  if (name == "identity") return ProjectionMethod::Identity;
  throw std::invalid_argument("unknown projection method '" + name +
                              "' (expected cd, rd, ss, or identity)");
}

namespace {

void check_dims(const std::vector<LayerShape>& shapes, const SubspaceDims& dims,
                ProjectionMethod method) {
  if (shapes.size() != dims.r.size())
    throw std::invalid_argument("projection dims: got " + std::to_string(dims.r.size()) +
                                " subspace dims for " + std::to_string(shapes.size()) + " layers");
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const int m = shapes[l].rows, r = dims.r[l];
    if (r < 1 || r > m)
      throw std::invalid_argument("projection dims: layer " + std::to_string(l) + " has r=" +
                                  std::to_string(r) + " outside [1, m=" + std::to_string(m) + "]");
    if (method == ProjectionMethod::Identity && r != m)
      throw std::invalid_argument("identity projection requires r = m, layer " +
                                  std::to_string(l) + " has r=" + std::to_string(r) +
                                  ", m=" + std::to_string(m));
  }
}

}  // namespace

double theta_m(const std::vector<LayerShape>& shapes, const SubspaceDims& dims) {
  check_dims(shapes, dims, ProjectionMethod::CoordinateDescent);
  double t = 0.0;
  for (std::size_t l = 0; l < shapes.size(); ++l)
    t = std::max(t, static_cast<double>(shapes[l].rows) / static_cast<double>(dims.r[l]));
  return t;
}

double theta_r(const std::vector<LayerShape>& shapes, const SubspaceDims& dims) {
  check_dims(shapes, dims, ProjectionMethod::CoordinateDescent);
  double t = 0.0;
  for (std::size_t l = 0; l < shapes.size(); ++l)
    t = std::max(t, static_cast<double>(dims.r[l]) / static_cast<double>(shapes[l].rows));
  return t;
}

LayerScalars ratio_m_over_r(const std::vector<LayerShape>& shapes, const SubspaceDims& dims) {
  check_dims(shapes, dims, ProjectionMethod::CoordinateDescent);
  LayerScalars s;
  for (std::size_t l = 0; l < shapes.size(); ++l)
    s.values.push_back(static_cast<double>(shapes[l].rows) / static_cast<double>(dims.r[l]));
  return s;
}

LayerScalars ratio_r_over_m(const std::vector<LayerShape>& shapes, const SubspaceDims& dims) {
  check_dims(shapes, dims, ProjectionMethod::CoordinateDescent);
  LayerScalars s;
  for (std::size_t l = 0; l < shapes.size(); ++l)
    s.values.push_back(static_cast<double>(dims.r[l]) / static_cast<double>(shapes[l].rows));
  return s;
}

ProjectionSet::ProjectionSet(ProjectionMethod method, std::vector<LayerShape> shapes,
                             SubspaceDims dims, std::vector<Matrix> matrices)
    : method_(method), shapes_(std::move(shapes)), dims_(std::move(dims)),
      matrices_(std::move(matrices)) {}

const Matrix& ProjectionSet::matrix(int l) const {
  if (is_identity())
    throw std::logic_error("ProjectionSet::matrix: identity projections are not materialized");
  return matrices_.at(static_cast<std::size_t>(l));
}

namespace {

Matrix gen_coordinate(int m, int r, Rng& rng, bool corrupt_scaling) {
  // r distinct coordinates; columns are sqrt(m/r) e_j so P^T P = (m/r) I.
  const std::vector<int> coords = sample_without_replacement(m, r, rng);
  const double s = corrupt_scaling ? 1.0 : std::sqrt(static_cast<double>(m) / r);
  Matrix P = Matrix::Zero(m, r);
  for (int c = 0; c < r; ++c) P(coords[static_cast<std::size_t>(c)], c) = s;
  return P;
}

Matrix fill_gaussian(int m, int r, Rng& rng) {
  Matrix G(m, r);
  for (int j = 0; j < r; ++j)
    for (int i = 0; i < m; ++i) G(i, j) = rng.gaussian();
  return G;
}

// Orthonormalize the columns of G and scale by sqrt(m/r). The Q factor of a
// Gaussian matrix is Haar-distributed up to column signs, and P P^T is
// invariant to those signs, so E[P P^T] = (m/r) * (r/m) I = I holds exactly.
Matrix orthonormal_scaled(Matrix G, int m, int r, Rng& rng) {
  for (int attempt = 0; attempt < 8; ++attempt) {
    Eigen::HouseholderQR<Matrix> qr(G);
    Matrix Q = qr.householderQ() * Matrix::Identity(m, r);
    // Rank deficiency in the draw (probability zero, but cheap to guard):
    // resample rather than return a frame that breaks P^T P = (m/r) I.
    const double dev = (Q.transpose() * Q - Matrix::Identity(r, r)).cwiseAbs().maxCoeff();
    if (dev <= 1e-12) return std::sqrt(static_cast<double>(m) / r) * Q;
    G = fill_gaussian(m, r, rng);
  }
  throw std::runtime_error("projection draw failed to orthonormalize after 8 attempts");
}

Matrix gen_orthonormal(int m, int r, Rng& rng) {
  return orthonormal_scaled(fill_gaussian(m, r, rng), m, r, rng);
}

Matrix gen_spherical(int m, int r, Rng& rng) {
  if (r == 1) {
    // Single direction uniform on the sphere, scaled sqrt(m): P^T P = m.
    Eigen::VectorXd u(m);
    double n2 = 0.0;
    do {
      for (int i = 0; i < m; ++i) u(i) = rng.gaussian();
      n2 = u.squaredNorm();
    } while (n2 == 0.0);
    return std::sqrt(static_cast<double>(m)) * (u / std::sqrt(n2));
  }
  // r > 1: orthonormalize r independent sphere directions. The span (and
  // hence P P^T) matches the Gaussian construction in distribution.
  Matrix G = fill_gaussian(m, r, rng);
  for (int j = 0; j < r; ++j) {
    const double n = G.col(j).norm();
    if (n > 0.0) G.col(j) /= n;
  }
  return orthonormal_scaled(std::move(G), m, r, rng);
}

}  // namespace

ProjectionSet generate_projections(ProjectionMethod method, const std::vector<LayerShape>& shapes,
                                   const SubspaceDims& dims, std::uint64_t round_seed,
                                   const GenerateOptions& opt) {
  check_dims(shapes, dims, method);
  if (method == ProjectionMethod::Identity)
    return ProjectionSet(method, shapes, dims, {});
  std::vector<Matrix> mats;
  mats.reserve(shapes.size());
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    // Per-layer stream: layer count never perturbs other layers' draws.
    Rng rng(derive_seed(round_seed, {kSeedProjection, static_cast<std::uint64_t>(l)}));
    const int m = shapes[l].rows, r = dims.r[l];
    switch (method) {
      case ProjectionMethod::CoordinateDescent:
        mats.push_back(gen_coordinate(m, r, rng, opt.corrupt_cd_scaling));
        break;
      case ProjectionMethod::RandomOrthonormal:
        mats.push_back(gen_orthonormal(m, r, rng));
        break;
      case ProjectionMethod::SphericalSmoothing:
        mats.push_back(gen_spherical(m, r, rng));
        break;
      case ProjectionMethod::Identity:
        break;  // unreachable
    }
  }
  return ProjectionSet(method, shapes, dims, std::move(mats));
}

namespace {

void check_apply(const ProjectionSet& P, const LayeredMatrix& x, bool subspace_side,
                 const char* op) {
  if (x.num_layers() != P.num_layers())
    throw std::invalid_argument(std::string(op) + ": layer count mismatch (" +
                                std::to_string(x.num_layers()) + " vs " +
                                std::to_string(P.num_layers()) + ")");
  for (int l = 0; l < x.num_layers(); ++l) {
    const int want = subspace_side ? P.cols(l) : P.rows(l);
    if (x.layer(l).rows() != want)
      throw std::invalid_argument(std::string(op) + ": layer " + std::to_string(l) + " has " +
                                  std::to_string(x.layer(l).rows()) + " rows, expected " +
                                  std::to_string(want));
  }
}

}  // namespace

LayeredMatrix project_down(const ProjectionSet& P, const LayeredMatrix& g) {
  check_apply(P, g, /*subspace_side=*/false, "project_down");
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(g.num_layers()));
  for (int l = 0; l < g.num_layers(); ++l)
    out.push_back(P.is_identity() ? g.layer(l) : Matrix(P.matrix(l).transpose() * g.layer(l)));
  return LayeredMatrix(std::move(out));
}

LayeredMatrix project_up(const ProjectionSet& P, const LayeredMatrix& B) {
  check_apply(P, B, /*subspace_side=*/true, "project_up");
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(B.num_layers()));
  for (int l = 0; l < B.num_layers(); ++l)
    out.push_back(P.is_identity() ? B.layer(l) : Matrix(P.matrix(l) * B.layer(l)));
  return LayeredMatrix(std::move(out));
}

LayeredMatrix transport(const ProjectionSet& next, const ProjectionSet& prev,
                        const LayeredMatrix& V) {
  return project_down(next, project_up(prev, V));
}

Assumption1Report validate_assumption1(ProjectionMethod method, LayerShape shape, int r,
                                       int n_samples, double tol_exact, double tol_mc,
                                       std::uint64_t seed, const GenerateOptions& opt) {
  if (n_samples < 1) throw std::invalid_argument("validate_assumption1: n_samples must be >= 1");
  const int m = shape.rows;
  const std::vector<LayerShape> shapes = {shape};
  const SubspaceDims dims{{r}};
  const double ratio = static_cast<double>(m) / r;

  Assumption1Report rep;
  rep.n_samples = n_samples;
  rep.tol_exact = tol_exact;
  rep.tol_mc = tol_mc;

  Matrix mean_ppt = Matrix::Zero(m, m);
  for (int s = 0; s < n_samples; ++s) {
    const ProjectionSet P = generate_projections(
        method, shapes, dims, derive_seed(seed, {kSeedValidate, static_cast<std::uint64_t>(s)}),
        opt);
    if (P.is_identity()) {
      mean_ppt += Matrix::Identity(m, m);
      continue;  // P^T P = (m/r) I = I holds with deviation exactly zero
    }
    const Matrix& M = P.matrix(0);
    const double dev =
        (M.transpose() * M - ratio * Matrix::Identity(r, r)).cwiseAbs().maxCoeff();
    rep.max_exact_deviation = std::max(rep.max_exact_deviation, dev);
    mean_ppt += M * M.transpose();
  }
  mean_ppt /= static_cast<double>(n_samples);
  // Frobenius-relative: ||I||_F = sqrt(m).
  rep.mean_ppt_frob_rel =
      (mean_ppt - Matrix::Identity(m, m)).norm() / std::sqrt(static_cast<double>(m));

  rep.exact_ok = rep.max_exact_deviation <= tol_exact;
  rep.mc_ok = rep.mean_ppt_frob_rel <= tol_mc;
  return rep;
}

}  // namespace fedsub
