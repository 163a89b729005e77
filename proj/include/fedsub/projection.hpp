#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedsub/layered.hpp"

namespace fedsub {

// How the per-layer projection matrices P_l (m_l x r_l) are drawn each round.
// Every method satisfies, by construction,
//   (P_l)^T P_l = (m_l / r_l) I_r   exactly, and
//   E[P_l (P_l)^T] = I_m            over the draw.
enum class ProjectionMethod {
  CoordinateDescent,   // r distinct coordinate columns, scaled sqrt(m/r)
  RandomOrthonormal,   // orthonormalized Gaussian frame, scaled sqrt(m/r)
  SphericalSmoothing,  // orthonormalized directions drawn uniformly on the sphere
  Identity,            // P = I, never materialized; requires r_l = m_l
};

std::string method_name(ProjectionMethod m);
ProjectionMethod parse_method(const std::string& name);

// Per-layer subspace dimensions r_l.
struct SubspaceDims {
  std::vector<int> r;
};

// theta_m = max_l m_l/r_l and theta_r = max_l r_l/m_l (distortion bounds).
double theta_m(const std::vector<LayerShape>& shapes, const SubspaceDims& dims);
double theta_r(const std::vector<LayerShape>& shapes, const SubspaceDims& dims);

LayerScalars ratio_m_over_r(const std::vector<LayerShape>& shapes, const SubspaceDims& dims);
LayerScalars ratio_r_over_m(const std::vector<LayerShape>& shapes, const SubspaceDims& dims);

// Debug hooks. corrupt_cd_scaling drops the sqrt(m/r) column scaling from the
// coordinate construction so the exact-orthogonality validator must fail; it
// exists as a negative control for the validation pipeline and nothing else.
struct GenerateOptions {
  bool corrupt_cd_scaling = false;
};

// One round's projections for all layers. Identity is represented symbolically
// (no matrices are stored) so that applying it costs a copy, not a product.
class ProjectionSet {
 public:
  ProjectionSet(ProjectionMethod method, std::vector<LayerShape> shapes, SubspaceDims dims,
                std::vector<Matrix> matrices);

  ProjectionMethod method() const { return method_; }
  bool is_identity() const { return method_ == ProjectionMethod::Identity; }
  int num_layers() const { return static_cast<int>(shapes_.size()); }
  const std::vector<LayerShape>& layer_shapes() const { return shapes_; }
  const SubspaceDims& dims() const { return dims_; }
  int rows(int l) const { return shapes_.at(static_cast<std::size_t>(l)).rows; }
  int cols(int l) const { return dims_.r.at(static_cast<std::size_t>(l)); }
  // Materialized P_l; throws for Identity.
  const Matrix& matrix(int l) const;

 private:
  ProjectionMethod method_;
  std::vector<LayerShape> shapes_;
  SubspaceDims dims_;
  std::vector<Matrix> matrices_;  // empty for Identity
};

// Draw fresh projections for one round. Deterministic in (method, shapes,
// dims, round_seed): the same arguments always return bit-identical matrices,
// which is how independent engines are kept on a shared projection schedule.
ProjectionSet generate_projections(ProjectionMethod method, const std::vector<LayerShape>& shapes,
                                   const SubspaceDims& dims, std::uint64_t round_seed,
                                   const GenerateOptions& opt = {});

// (P_l)^T g_l per layer: full-space (m x d) down to subspace (r x d).
LayeredMatrix project_down(const ProjectionSet& P, const LayeredMatrix& g);
// P_l B_l per layer: subspace (r x d) up to full space (m x d).
LayeredMatrix project_up(const ProjectionSet& P, const LayeredMatrix& B);
// (P_next)^T (P_prev V) per layer, evaluated as two successive products so the
// cost stays 2 m r d; the r x r composite is never formed.
LayeredMatrix transport(const ProjectionSet& next, const ProjectionSet& prev,
                        const LayeredMatrix& V);

struct Assumption1Report {
  // max over sampled draws of max-norm deviation ||P^T P - (m/r) I||_max.
  double max_exact_deviation = 0.0;
  // || mean_N [P P^T] - I ||_F / ||I||_F over n_samples independent draws.
  double mean_ppt_frob_rel = 0.0;
  int n_samples = 0;
  double tol_exact = 0.0;
  double tol_mc = 0.0;
  bool exact_ok = false;
  bool mc_ok = false;
  bool passed() const { return exact_ok && mc_ok; }
};

// Validate both halves of the projection contract on a single layer shape by
// Monte Carlo over n_samples independent draws. The exact check applies to
// every draw; the mean check estimates E[P P^T] and compares it to I at the
// caller-supplied tolerance (which must account for the O(1/sqrt(N))
// estimator noise of the chosen construction and shape).
Assumption1Report validate_assumption1(ProjectionMethod method, LayerShape shape, int r,
                                       int n_samples, double tol_exact, double tol_mc,
                                       std::uint64_t seed, const GenerateOptions& opt = {});

}  // namespace fedsub
