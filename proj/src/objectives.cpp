#include "fedsub/objectives.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace fedsub {

std::int64_t Dataset::total_samples() const {
  std::int64_t n = 0;
  for (const auto& f : features) n += static_cast<std::int64_t>(f.rows());
  return n;
}

Dataset generate_clustered_data(int n_clients, std::int64_t samples_total, int feature_dim,
                                double heterogeneity_noise, std::uint64_t seed) {
  if (n_clients < 1) throw std::invalid_argument("generate_clustered_data: n_clients must be >= 1");
  if (samples_total < n_clients)
    throw std::invalid_argument("generate_clustered_data: need at least one sample per client");
  if (feature_dim < 1) throw std::invalid_argument("generate_clustered_data: feature_dim must be >= 1");
  if (heterogeneity_noise < 0.0)
    throw std::invalid_argument("generate_clustered_data: heterogeneity_noise must be >= 0");

  const std::int64_t base = samples_total / n_clients;
  const std::int64_t rem = samples_total % n_clients;
  const int max_rows = static_cast<int>(base + (rem > 0 ? 1 : 0));

  // Clients share one pool of feature rows and margin-noise draws; client i
  // perturbs the pool with its own feature jitter (scale = noise) and labels
  // the result with its own hyperplane w_i, a slight rotation of a common
  // base normal w0. Client dissimilarity is therefore controlled purely by
  // the noise knob — zero noise makes every client bit-identical — rather
  // than being dominated by independent sampling jitter, which would put a
  // large irreducible floor under any drift-correction scheme. The jitter is
  // the dominant channel: it perturbs each client's feature second moments,
  // which is what drives local-update drift apart across clients; the
  // hyperplane dispersal is kept far smaller because labeling-rule spread
  // degrades every engine alike and would mask the drift-correction contrast.
  // The fixed unit-scale margin noise keeps a constant fraction of labels in
  // conflict across the pool so the problem stays far from separable and
  // strongly curved at the optimum.
  constexpr double kMarginNoiseScale = 1.0;
  constexpr double kHyperplaneDispersalRatio = 1e-4;
  const double feature_jitter = heterogeneity_noise;
  const double dispersal = heterogeneity_noise * kHyperplaneDispersalRatio;

  Eigen::VectorXd w0(feature_dim);
  {
    Rng rng(derive_seed(seed, {kSeedData, 0xBA5E}));
    double n2 = 0.0;
    do {
      for (int j = 0; j < feature_dim; ++j) w0(j) = rng.gaussian();
      n2 = w0.norm();
    } while (n2 == 0.0);
    w0 /= n2;
  }

  Matrix pool(max_rows, feature_dim);
  Eigen::VectorXd margin_eps(max_rows);
  {
    Rng rng(derive_seed(seed, {kSeedData, 0x5A3D}));
    for (int s = 0; s < max_rows; ++s) {
      for (int j = 0; j < feature_dim; ++j) pool(s, j) = rng.gaussian();
      margin_eps(s) = kMarginNoiseScale * rng.gaussian();
    }
  }

  Dataset data;
  data.features.reserve(static_cast<std::size_t>(n_clients));
  data.labels.reserve(static_cast<std::size_t>(n_clients));
  data.hyperplane_normals.reserve(static_cast<std::size_t>(n_clients));

  for (int i = 0; i < n_clients; ++i) {
    // Per-client stream: client i's hyperplane does not depend on n_clients.
    Rng rng(derive_seed(seed, {kSeedData, static_cast<std::uint64_t>(i)}));
    const int s_i = static_cast<int>(base + (i < rem ? 1 : 0));

    Eigen::VectorXd w(feature_dim);
    for (int j = 0; j < feature_dim; ++j) w(j) = w0(j) + dispersal * rng.gaussian();
    const double wn = w.norm();
    if (wn == 0.0)
      throw std::runtime_error("generate_clustered_data: degenerate hyperplane draw");
    w /= wn;

    Matrix A = pool.topRows(s_i);
    for (int s = 0; s < s_i; ++s)
      for (int j = 0; j < feature_dim; ++j) A(s, j) += feature_jitter * rng.gaussian();
    Eigen::VectorXd y(s_i);
    for (int s = 0; s < s_i; ++s)
      y(s) = A.row(s).dot(w) + margin_eps(s) >= 0.0 ? 1.0 : -1.0;
    data.features.push_back(std::move(A));
    data.labels.push_back(std::move(y));
    data.hyperplane_normals.push_back(std::move(w));
  }
  return data;
}

void export_dataset_csv(const Dataset& data, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (int i = 0; i < data.n_clients(); ++i) {
    std::ostringstream name;
    name << "client_" << std::setw(3) << std::setfill('0') << i << ".csv";
    const auto path = std::filesystem::path(dir) / name.str();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("export_dataset_csv: cannot open " + path.string());
    out << "label";
    for (int j = 0; j < data.feature_dim(); ++j) out << ",f" << j;
    out << "\n";
    out.precision(17);
    const auto& A = data.features[static_cast<std::size_t>(i)];
    const auto& y = data.labels[static_cast<std::size_t>(i)];
    for (int s = 0; s < A.rows(); ++s) {
      out << y(s);
      for (int j = 0; j < A.cols(); ++j) out << "," << A(s, j);
      out << "\n";
    }
    if (!out) throw std::runtime_error("export_dataset_csv: write failed for " + path.string());
  }
}

Dataset import_dataset_csv(const std::string& dir, int n_clients) {
  Dataset data;
  for (int i = 0; i < n_clients; ++i) {
    std::ostringstream name;
    name << "client_" << std::setw(3) << std::setfill('0') << i << ".csv";
    const auto path = std::filesystem::path(dir) / name.str();
    std::ifstream in(path);
    if (!in) throw std::runtime_error("import_dataset_csv: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line))
      throw std::runtime_error("import_dataset_csv: empty file " + path.string());
    const int n_cols = static_cast<int>(std::count(line.begin(), line.end(), ',')) + 1;
    const int d = n_cols - 1;
    std::vector<double> values;
    int rows = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string cell;
      int got = 0;
      while (std::getline(ss, cell, ',')) {
        values.push_back(std::stod(cell));
        ++got;
      }
      if (got != n_cols)
        throw std::runtime_error("import_dataset_csv: ragged row in " + path.string());
      ++rows;
    }
    Matrix A(rows, d);
    Eigen::VectorXd y(rows);
    for (int s = 0; s < rows; ++s) {
      y(s) = values[static_cast<std::size_t>(s) * static_cast<std::size_t>(n_cols)];
      for (int j = 0; j < d; ++j)
        A(s, j) = values[static_cast<std::size_t>(s) * static_cast<std::size_t>(n_cols) +
                         static_cast<std::size_t>(j) + 1];
    }
    data.features.push_back(std::move(A));
    data.labels.push_back(std::move(y));
    // Normals are generation metadata and are not round-tripped.
    data.hyperplane_normals.emplace_back(Eigen::VectorXd::Zero(d));
  }
  return data;
}

// ---------------------------------------------------------------------------

LayeredMatrix Objective::full_gradient(int client, const LayeredMatrix& x) const {
  std::vector<int> all(static_cast<std::size_t>(client_samples(client)));
  for (std::size_t s = 0; s < all.size(); ++s) all[s] = static_cast<int>(s);
  return batch_gradient(client, x, all);
}

double Objective::global_loss(const LayeredMatrix& x) const {
  double total = 0.0;
  for (int i = 0; i < n_clients(); ++i) total += loss(i, x);
  return total / static_cast<double>(n_clients());
}

LayeredMatrix Objective::global_gradient(const LayeredMatrix& x) const {
  std::vector<LayeredMatrix> grads;
  grads.reserve(static_cast<std::size_t>(n_clients()));
  for (int i = 0; i < n_clients(); ++i) grads.push_back(full_gradient(i, x));
  return average(grads);
}

Matrix Objective::newton_hessian(const LayeredMatrix&) const {
  throw std::logic_error("newton_hessian: objective is not Newton-capable");
}

LayeredMatrix minibatch_gradient(const Objective& obj, int client, const LayeredMatrix& x,
                                 int batch_size, Rng& rng) {
  const int s = obj.client_samples(client);
  if (batch_size < 1 || batch_size > s)
    throw std::invalid_argument("minibatch_gradient: batch_size " + std::to_string(batch_size) +
                                " outside [1, " + std::to_string(s) + "]");
  if (batch_size == s) return obj.full_gradient(client, x);
  std::vector<int> batch = sample_without_replacement(s, batch_size, rng);
  std::sort(batch.begin(), batch.end());
  return obj.batch_gradient(client, x, batch);
}

namespace {

void check_client(int client, int n, const char* who) {
  if (client < 0 || client >= n)
    throw std::invalid_argument(std::string(who) + ": client " + std::to_string(client) +
                                " outside [0, " + std::to_string(n) + ")");
}

void check_batch(const std::vector<int>& batch, int s, const char* who) {
  if (batch.empty()) throw std::invalid_argument(std::string(who) + ": empty batch");
  for (int idx : batch)
    if (idx < 0 || idx >= s)
      throw std::invalid_argument(std::string(who) + ": sample index " + std::to_string(idx) +
                                  " outside [0, " + std::to_string(s) + ")");
}

// log(1 + exp(-z)) without overflow for large |z|.
double log1p_exp_neg(double z) {
  return z < 0.0 ? -z + std::log1p(std::exp(z)) : std::log1p(std::exp(-z));
}

// Logistic sigmoid, stable for large |u|.
double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

class LogisticObjective final : public Objective {
 public:
  LogisticObjective(Dataset data, double lambda) : data_(std::move(data)), lambda_(lambda) {
    if (lambda_ < 0.0) throw std::invalid_argument("logistic: lambda must be >= 0");
    if (data_.n_clients() == 0) throw std::invalid_argument("logistic: empty dataset");
  }

  std::vector<LayerShape> layer_shapes() const override { return {{data_.feature_dim(), 1}}; }
  int n_clients() const override { return data_.n_clients(); }
  int client_samples(int client) const override {
    check_client(client, n_clients(), "logistic");
    return static_cast<int>(data_.features[static_cast<std::size_t>(client)].rows());
  }

  double loss(int client, const LayeredMatrix& x) const override {
    check_client(client, n_clients(), "logistic");
    const auto& A = data_.features[static_cast<std::size_t>(client)];
    const auto& y = data_.labels[static_cast<std::size_t>(client)];
    const Eigen::VectorXd w = x.layer(0).col(0);
    const Eigen::VectorXd t = A * w;
    double total = 0.0;
    for (int s = 0; s < t.size(); ++s) total += log1p_exp_neg(y(s) * t(s));
    return total / static_cast<double>(t.size()) + 0.5 * lambda_ * w.squaredNorm();
  }

  LayeredMatrix batch_gradient(int client, const LayeredMatrix& x,
                               const std::vector<int>& batch) const override {
    check_client(client, n_clients(), "logistic");
    const auto& A = data_.features[static_cast<std::size_t>(client)];
    const auto& y = data_.labels[static_cast<std::size_t>(client)];
    check_batch(batch, static_cast<int>(A.rows()), "logistic");
    const int b = static_cast<int>(batch.size());
    Matrix Ab(b, A.cols());
    Eigen::VectorXd yb(b);
    for (int s = 0; s < b; ++s) {
      Ab.row(s) = A.row(batch[static_cast<std::size_t>(s)]);
      yb(s) = y(batch[static_cast<std::size_t>(s)]);
    }
    const Eigen::VectorXd w = x.layer(0).col(0);
    const Eigen::VectorXd t = Ab * w;
    Eigen::VectorXd c(b);
    for (int s = 0; s < b; ++s) c(s) = -yb(s) * sigmoid(-yb(s) * t(s)) / static_cast<double>(b);
    Matrix g = Ab.transpose() * c + lambda_ * w;
    return LayeredMatrix({std::move(g)});
  }

  std::optional<double> smoothness_bound() const override {
    // Per-sample curvature of the logistic loss is at most 1/4, so client i
    // is smooth with constant lambda + lambda_max(A_i^T A_i) / (4 s_i).
    double worst = 0.0;
    for (const auto& A : data_.features) {
      Eigen::SelfAdjointEigenSolver<Matrix> eig(Matrix(A.transpose() * A));
      worst = std::max(worst, eig.eigenvalues().maxCoeff() / (4.0 * static_cast<double>(A.rows())));
    }
    return lambda_ + worst;
  }

  bool newton_capable() const override { return lambda_ > 0.0; }

  Matrix newton_hessian(const LayeredMatrix& x) const override {
    const int m = data_.feature_dim();
    const Eigen::VectorXd w = x.layer(0).col(0);
    Matrix H = Matrix::Zero(m, m);
    for (int i = 0; i < n_clients(); ++i) {
      const auto& A = data_.features[static_cast<std::size_t>(i)];
      const Eigen::VectorXd t = A * w;
      Eigen::VectorXd d(t.size());
      for (int s = 0; s < t.size(); ++s) {
        const double p = sigmoid(t(s));
        d(s) = p * (1.0 - p) / static_cast<double>(t.size());
      }
      H += A.transpose() * d.asDiagonal() * A;
    }
    H /= static_cast<double>(n_clients());
    H += lambda_ * Matrix::Identity(m, m);
    return H;
  }

 private:
  Dataset data_;
  double lambda_;
};

class QuadraticObjective final : public Objective {
 public:
  QuadraticObjective(std::vector<std::vector<Matrix>> A, std::vector<std::vector<Matrix>> b)
      : A_(std::move(A)), b_(std::move(b)) {
    if (A_.empty() || A_.size() != b_.size())
      throw std::invalid_argument("quadratic: need matching nonempty A and b client lists");
    for (std::size_t i = 0; i < A_.size(); ++i) {
      if (A_[i].size() != A_[0].size() || b_[i].size() != A_[0].size())
        throw std::invalid_argument("quadratic: inconsistent layer count at client " +
                                    std::to_string(i));
      for (std::size_t l = 0; l < A_[i].size(); ++l) {
        if (A_[i][l].rows() != A_[i][l].cols() || A_[i][l].rows() != b_[i][l].rows())
          throw std::invalid_argument("quadratic: A/b dimension mismatch at client " +
                                      std::to_string(i) + ", layer " + std::to_string(l));
      }
    }
  }

  std::vector<LayerShape> layer_shapes() const override {
    std::vector<LayerShape> shapes;
    for (std::size_t l = 0; l < b_[0].size(); ++l)
      shapes.push_back({static_cast<int>(b_[0][l].rows()), static_cast<int>(b_[0][l].cols())});
    return shapes;
  }
  int n_clients() const override { return static_cast<int>(A_.size()); }
  // A quadratic has no per-sample structure; it behaves as one "sample".
  int client_samples(int client) const override {
    check_client(client, n_clients(), "quadratic");
    return 1;
  }

  double loss(int client, const LayeredMatrix& x) const override {
    check_client(client, n_clients(), "quadratic");
    double total = 0.0;
    for (std::size_t l = 0; l < A_[0].size(); ++l) {
      const auto& xl = x.layer(static_cast<int>(l));
      const auto& A = A_[static_cast<std::size_t>(client)][l];
      const auto& b = b_[static_cast<std::size_t>(client)][l];
      total += 0.5 * (xl.transpose() * (A * xl)).trace() - (b.transpose() * xl).trace();
    }
    return total;
  }

  LayeredMatrix batch_gradient(int client, const LayeredMatrix& x,
                               const std::vector<int>& batch) const override {
    check_client(client, n_clients(), "quadratic");
    check_batch(batch, 1, "quadratic");
    std::vector<Matrix> out;
    for (std::size_t l = 0; l < A_[0].size(); ++l)
      out.push_back(A_[static_cast<std::size_t>(client)][l] * x.layer(static_cast<int>(l)) -
                    b_[static_cast<std::size_t>(client)][l]);
    return LayeredMatrix(std::move(out));
  }

  std::optional<double> smoothness_bound() const override {
    double worst = 0.0;
    for (const auto& client : A_)
      for (const auto& A : client) {
        Eigen::SelfAdjointEigenSolver<Matrix> eig(A);
        worst = std::max(worst, eig.eigenvalues().maxCoeff());
      }
    return worst;
  }

  std::optional<LayeredMatrix> closed_form_minimizer() const override {
    // Global objective is layer-separable: x_l* solves mean(A_l) x = mean(b_l).
    std::vector<Matrix> out;
    for (std::size_t l = 0; l < A_[0].size(); ++l) {
      Matrix Abar = Matrix::Zero(A_[0][l].rows(), A_[0][l].cols());
      Matrix bbar = Matrix::Zero(b_[0][l].rows(), b_[0][l].cols());
      for (std::size_t i = 0; i < A_.size(); ++i) {
        Abar += A_[i][l];
        bbar += b_[i][l];
      }
      Abar /= static_cast<double>(A_.size());
      bbar /= static_cast<double>(A_.size());
      Eigen::LDLT<Matrix> ldlt(Abar);
      if (ldlt.info() != Eigen::Success)
        throw std::runtime_error("quadratic: mean coefficient matrix is not factorizable");
      out.push_back(ldlt.solve(bbar));
    }
    return LayeredMatrix(std::move(out));
  }

 private:
  std::vector<std::vector<Matrix>> A_;  // [client][layer], SPD m x m
  std::vector<std::vector<Matrix>> b_;  // [client][layer], m x d
};

class MlpObjective final : public Objective {
 public:
  MlpObjective(Dataset data, int hidden_width, double lambda)
      : data_(std::move(data)), hidden_(hidden_width), lambda_(lambda) {
    if (hidden_ < 1) throw std::invalid_argument("mlp: hidden width must be >= 1");
    if (lambda_ < 0.0) throw std::invalid_argument("mlp: lambda must be >= 0");
    if (data_.n_clients() == 0) throw std::invalid_argument("mlp: empty dataset");
  }

  std::vector<LayerShape> layer_shapes() const override {
    return {{data_.feature_dim(), hidden_}, {hidden_, 1}};
  }
  int n_clients() const override { return data_.n_clients(); }
  int client_samples(int client) const override {
    check_client(client, n_clients(), "mlp");
    return static_cast<int>(data_.features[static_cast<std::size_t>(client)].rows());
  }

  double loss(int client, const LayeredMatrix& x) const override {
    check_client(client, n_clients(), "mlp");
    const auto& A = data_.features[static_cast<std::size_t>(client)];
    const auto& y = data_.labels[static_cast<std::size_t>(client)];
    const Matrix H = (A * x.layer(0)).array().tanh();
    const Eigen::VectorXd out = H * x.layer(1).col(0);
    const double fit = 0.5 * (out - y).squaredNorm() / static_cast<double>(A.rows());
    return fit + 0.5 * lambda_ * (x.layer(0).squaredNorm() + x.layer(1).squaredNorm());
  }

  LayeredMatrix batch_gradient(int client, const LayeredMatrix& x,
                               const std::vector<int>& batch) const override {
    check_client(client, n_clients(), "mlp");
    const auto& A = data_.features[static_cast<std::size_t>(client)];
    const auto& y = data_.labels[static_cast<std::size_t>(client)];
    check_batch(batch, static_cast<int>(A.rows()), "mlp");
    const int b = static_cast<int>(batch.size());
    Matrix Ab(b, A.cols());
    Eigen::VectorXd yb(b);
    for (int s = 0; s < b; ++s) {
      Ab.row(s) = A.row(batch[static_cast<std::size_t>(s)]);
      yb(s) = y(batch[static_cast<std::size_t>(s)]);
    }
    const Matrix H = (Ab * x.layer(0)).array().tanh();
    const Eigen::VectorXd err = (H * x.layer(1).col(0) - yb) / static_cast<double>(b);
    Matrix g2 = H.transpose() * err + lambda_ * x.layer(1);
    const Matrix dH =
        (err * x.layer(1).col(0).transpose()).array() * (1.0 - H.array().square());
    Matrix g1 = Ab.transpose() * dH + lambda_ * x.layer(0);
    return LayeredMatrix({std::move(g1), std::move(g2)});
  }

 private:
  Dataset data_;
  int hidden_;
  double lambda_;
};

}  // namespace

std::unique_ptr<Objective> make_logistic(Dataset data, double lambda) {
  return std::make_unique<LogisticObjective>(std::move(data), lambda);
}

std::unique_ptr<Objective> make_random_quadratic(int n_clients,
                                                 const std::vector<LayerShape>& shapes,
                                                 std::uint64_t seed, const QuadraticOptions& opt) {
  if (n_clients < 1) throw std::invalid_argument("make_random_quadratic: n_clients must be >= 1");
  if (shapes.empty()) throw std::invalid_argument("make_random_quadratic: no layers");
  if (!(opt.eig_min > 0.0) || opt.eig_max < opt.eig_min)
    throw std::invalid_argument("make_random_quadratic: need 0 < eig_min <= eig_max");
  if (opt.heterogeneity < 0.0)
    throw std::invalid_argument("make_random_quadratic: heterogeneity must be >= 0");

  // Common base (A0, b0) per layer plus SPD client perturbations scaled by
  // the heterogeneity knob; heterogeneity 0 gives identical clients.
  std::vector<std::vector<Matrix>> A0, b0;
  {
    std::vector<Matrix> Al, bl;
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      Rng rng(derive_seed(seed, {kSeedData, 0xA0, static_cast<std::uint64_t>(l)}));
      const int m = shapes[l].rows, d = shapes[l].cols;
      Matrix G(m, m);
      for (int j = 0; j < m; ++j)
        for (int i = 0; i < m; ++i) G(i, j) = rng.gaussian();
      Eigen::HouseholderQR<Matrix> qr(G);
      const Matrix Q = qr.householderQ() * Matrix::Identity(m, m);
      Eigen::VectorXd eigs(m);
      for (int i = 0; i < m; ++i)
        eigs(i) = opt.eig_min + (opt.eig_max - opt.eig_min) * rng.uniform();
      Al.push_back(Q * eigs.asDiagonal() * Q.transpose());
      Matrix bmat(m, d);
      for (int j = 0; j < d; ++j)
        for (int i = 0; i < m; ++i) bmat(i, j) = rng.gaussian();
      bl.push_back(std::move(bmat));
    }
    A0.push_back(Al);
    b0.push_back(bl);
  }

  std::vector<std::vector<Matrix>> A, b;
  for (int i = 0; i < n_clients; ++i) {
    std::vector<Matrix> Al, bl;
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      Rng rng(derive_seed(seed, {kSeedData, static_cast<std::uint64_t>(i) + 1,
                                 static_cast<std::uint64_t>(l)}));
      const int m = shapes[l].rows, d = shapes[l].cols;
      Matrix G(m, m);
      for (int j = 0; j < m; ++j)
        for (int i2 = 0; i2 < m; ++i2) G(i2, j) = rng.gaussian();
      // G G^T / m is SPD with O(1) eigenvalues; adding it keeps A_i SPD.
      Al.push_back(A0[0][l] + opt.heterogeneity * Matrix(G * G.transpose()) /
                                  static_cast<double>(m));
      Matrix db(m, d);
      for (int j = 0; j < d; ++j)
        for (int i2 = 0; i2 < m; ++i2) db(i2, j) = rng.gaussian();
      bl.push_back(b0[0][l] + opt.heterogeneity * db);
    }
    A.push_back(std::move(Al));
    b.push_back(std::move(bl));
  }
  return std::make_unique<QuadraticObjective>(std::move(A), std::move(b));
}

std::unique_ptr<Objective> make_quadratic(std::vector<std::vector<Matrix>> A,
                                          std::vector<std::vector<Matrix>> b) {
  return std::make_unique<QuadraticObjective>(std::move(A), std::move(b));
}

std::unique_ptr<Objective> make_mlp(Dataset data, int hidden_width, double lambda) {
  return std::make_unique<MlpObjective>(std::move(data), hidden_width, lambda);
}

LayeredMatrix random_init(const std::vector<LayerShape>& shapes, std::uint64_t seed) {
  std::vector<Matrix> layers;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    Rng rng(derive_seed(seed, {kSeedInit, static_cast<std::uint64_t>(l)}));
    const int m = shapes[l].rows, d = shapes[l].cols;
    Matrix W(m, d);
    const double s = 1.0 / std::sqrt(static_cast<double>(m));
    for (int j = 0; j < d; ++j)
      for (int i = 0; i < m; ++i) W(i, j) = s * rng.gaussian();
    layers.push_back(std::move(W));
  }
  return LayeredMatrix(std::move(layers));
}

ReferenceSolution solve_reference(const Objective& obj, double tol, int max_iters) {
  if (auto closed = obj.closed_form_minimizer()) {
    ReferenceSolution ref;
    ref.x_star = std::move(*closed);
    ref.f_star = obj.global_loss(ref.x_star);
    ref.grad_norm = std::sqrt(norm_sq(obj.global_gradient(ref.x_star)));
    ref.iterations = 0;
    return ref;
  }
  if (!obj.newton_capable())
    throw std::invalid_argument("solve_reference: objective has no closed form and is not "
                                "Newton-capable");

  // Damped Newton with Armijo backtracking on the global objective.
  LayeredMatrix x = LayeredMatrix::zeros(obj.layer_shapes());
  if (x.num_layers() != 1 || x.layer(0).cols() != 1)
    throw std::invalid_argument("solve_reference: Newton path expects a single vector layer");
  int it = 0;
  for (; it < max_iters; ++it) {
    const LayeredMatrix g = obj.global_gradient(x);
    const double gn = std::sqrt(norm_sq(g));
    if (gn <= tol) {
      ReferenceSolution ref;
      ref.x_star = x;
      ref.f_star = obj.global_loss(x);
      ref.grad_norm = gn;
      ref.iterations = it;
      return ref;
    }
    const Matrix H = obj.newton_hessian(x);
    Eigen::LDLT<Matrix> ldlt(H);
    if (ldlt.info() != Eigen::Success)
      throw std::runtime_error("solve_reference: Hessian factorization failed");
    const Eigen::VectorXd step = ldlt.solve(g.layer(0).col(0));
    // Near the optimum the loss differences fall below machine precision and
    // an Armijo test on f becomes noise, so accept the full Newton step on
    // gradient-norm decrease first (locally it contracts quadratically) and
    // only fall back to damped f-descent when the full step overshoots.
    LayeredMatrix cand = x;
    cand.layer(0).col(0) = x.layer(0).col(0) - step;
    if (std::sqrt(norm_sq(obj.global_gradient(cand))) < gn) {
      x = cand;
      continue;
    }
    const double slope = g.layer(0).col(0).dot(step);
    const double f0 = obj.global_loss(x);
    double t = 0.5;
    bool accepted = false;
    for (int half = 0; half < 60; ++half) {
      cand.layer(0).col(0) = x.layer(0).col(0) - t * step;
      if (obj.global_loss(cand) <= f0 - 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;  // no representable descent left
    x = cand;
  }
  const double gn = std::sqrt(norm_sq(obj.global_gradient(x)));
  if (gn > tol)
    throw std::runtime_error("solve_reference: Newton stalled at gradient norm " +
                             std::to_string(gn) + " after " + std::to_string(max_iters) +
                             " iterations");
  ReferenceSolution ref;
  ref.x_star = x;
  ref.f_star = obj.global_loss(x);
  ref.grad_norm = gn;
  ref.iterations = it;
  return ref;
}

}  // namespace fedsub
