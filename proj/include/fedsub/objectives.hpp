#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedsub/layered.hpp"
#include "fedsub/rng.hpp"

namespace fedsub {

// Per-client classification data. hyperplane_normals is generation metadata
// (the unit vector each client's labels were drawn from); it is kept so tests
// can verify label geometry directly instead of re-fitting a separator.
struct Dataset {
  std::vector<Matrix> features;                    // client i: s_i x feature_dim
  std::vector<Eigen::VectorXd> labels;             // client i: s_i entries in {-1, +1}
  std::vector<Eigen::VectorXd> hyperplane_normals; // client i: unit vector, feature_dim

  int n_clients() const { return static_cast<int>(features.size()); }
  int feature_dim() const { return features.empty() ? 0 : static_cast<int>(features[0].cols()); }
  std::int64_t total_samples() const;
};

// Synthetic heterogeneous benchmark: all clients share one pool of feature
// rows a ~ N(0, I) and margin-noise draws eps ~ N(0, 1); client i labels them
// y = sign(w_i . a + eps) with its own normal w_i = normalize(w0 + noise * z_i)
// perturbing a shared base hyperplane w0. Client dissimilarity is therefore
// set purely by heterogeneity_noise (zero makes every client identical).
// samples_total is split round-robin (clients i < samples_total mod n get one
// extra row of the pool).
Dataset generate_clustered_data(int n_clients, std::int64_t samples_total, int feature_dim,
                                double heterogeneity_noise, std::uint64_t seed);

// One CSV per client (client_000.csv, ...) with a label column followed by
// feature columns, written at full double precision so round-trips are exact.
void export_dataset_csv(const Dataset& data, const std::string& dir);
Dataset import_dataset_csv(const std::string& dir, int n_clients);

// Finite-sum objective f(x) = (1/n) sum_i f_i(x) over layered parameters.
// batch_gradient is the only gradient primitive subclasses implement;
// full_gradient delegates to it with all sample indices in ascending order,
// so a full-size minibatch reproduces the full gradient bit-for-bit.
class Objective {
 public:
  virtual ~Objective() = default;

  virtual std::vector<LayerShape> layer_shapes() const = 0;
  virtual int n_clients() const = 0;
  virtual int client_samples(int client) const = 0;

  virtual double loss(int client, const LayeredMatrix& x) const = 0;
  virtual LayeredMatrix batch_gradient(int client, const LayeredMatrix& x,
                                       const std::vector<int>& batch) const = 0;

  LayeredMatrix full_gradient(int client, const LayeredMatrix& x) const;
  double global_loss(const LayeredMatrix& x) const;
  LayeredMatrix global_gradient(const LayeredMatrix& x) const;

  // Upper bound on the smoothness constant of every f_i, when known.
  virtual std::optional<double> smoothness_bound() const { return std::nullopt; }

  // Hooks for solve_reference; see there.
  virtual std::optional<LayeredMatrix> closed_form_minimizer() const { return std::nullopt; }
  virtual bool newton_capable() const { return false; }
  virtual Matrix newton_hessian(const LayeredMatrix& x) const;
};

// Mean of per-sample gradients over a uniform batch drawn without
// replacement, plus the full regularizer. batch_size equal to the client's
// sample count skips sampling and equals full_gradient bit-exactly.
LayeredMatrix minibatch_gradient(const Objective& obj, int client, const LayeredMatrix& x,
                                 int batch_size, Rng& rng);

// l2-regularized logistic regression on the client datasets (one weight
// vector, stored as a single m x 1 layer).
std::unique_ptr<Objective> make_logistic(Dataset data, double lambda);

// Client quadratics f_i(x) = sum_l 0.5 tr(x_l^T A_il x_l) - tr(b_il^T x_l)
// with SPD A_il. heterogeneity 0 makes every client identical.
struct QuadraticOptions {
  double eig_min = 1.0;
  double eig_max = 2.0;
  double heterogeneity = 1.0;
};
std::unique_ptr<Objective> make_random_quadratic(int n_clients,
                                                 const std::vector<LayerShape>& shapes,
                                                 std::uint64_t seed,
                                                 const QuadraticOptions& opt = {});
// Explicit coefficients: per client, per layer A (m x m) and b (m x d).
std::unique_ptr<Objective> make_quadratic(std::vector<std::vector<Matrix>> A,
                                          std::vector<std::vector<Matrix>> b);

// Two-layer tanh network with squared loss on +-1 labels: layers are
// W1 (feature_dim x hidden) and w2 (hidden x 1).
std::unique_ptr<Objective> make_mlp(Dataset data, int hidden_width, double lambda = 0.0);

// Scaled-Gaussian starting point (1/sqrt(fan-in) per layer); the zero point
// is a saddle for the tanh network so runs must not start there.
LayeredMatrix random_init(const std::vector<LayerShape>& shapes, std::uint64_t seed);

struct ReferenceSolution {
  LayeredMatrix x_star;
  double f_star = 0.0;
  double grad_norm = 0.0;  // ||grad f(x_star)||, certificate of optimality
  int iterations = 0;
};

// High-accuracy minimizer of the global objective, computed independently of
// the federated engines: closed form where the objective provides one,
// otherwise damped Newton with Armijo backtracking. Throws if the objective
// supports neither or the tolerance is not reached.
ReferenceSolution solve_reference(const Objective& obj, double tol = 1e-12, int max_iters = 200);

}  // namespace fedsub
