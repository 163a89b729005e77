#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "fedsub/layered.hpp"
#include "fedsub/objectives.hpp"
#include "fedsub/rng.hpp"

using namespace fedsub;

namespace {

LayeredMatrix random_point(const std::vector<LayerShape>& shapes, std::uint64_t seed) {
  Rng rng(seed);
  LayeredMatrix x = LayeredMatrix::zeros(shapes);
  for (int l = 0; l < x.num_layers(); ++l)
    for (int i = 0; i < x.layer(l).rows(); ++i)
      for (int j = 0; j < x.layer(l).cols(); ++j) x.layer(l)(i, j) = 0.5 * rng.gaussian();
  return x;
}

// Central-difference gradient of the global loss, coordinate by coordinate.
// Entirely independent of batch_gradient, so it certifies the analytic path.
LayeredMatrix fd_global_gradient(const Objective& obj, const LayeredMatrix& x, double h) {
  LayeredMatrix g = LayeredMatrix::zeros(obj.layer_shapes());
  LayeredMatrix probe = x;
  for (int l = 0; l < x.num_layers(); ++l) {
    for (int i = 0; i < x.layer(l).rows(); ++i) {
      for (int j = 0; j < x.layer(l).cols(); ++j) {
        const double keep = probe.layer(l)(i, j);
        probe.layer(l)(i, j) = keep + h;
        const double fp = obj.global_loss(probe);
        probe.layer(l)(i, j) = keep - h;
        const double fm = obj.global_loss(probe);
        probe.layer(l)(i, j) = keep;
        g.layer(l)(i, j) = (fp - fm) / (2.0 * h);
      }
    }
  }
  return g;
}

double rel_err(const LayeredMatrix& got, const LayeredMatrix& want) {
  return std::sqrt(norm_sq(sub(got, want))) / std::max(1.0, std::sqrt(norm_sq(want)));
}

}  // namespace

TEST_CASE("data: generator is deterministic and splits samples round-robin") {
  const Dataset a = generate_clustered_data(5, 23, 4, 0.3, 42);
  const Dataset b = generate_clustered_data(5, 23, 4, 0.3, 42);
  const Dataset c = generate_clustered_data(5, 23, 4, 0.3, 43);

  REQUIRE(a.n_clients() == 5);
  CHECK(a.feature_dim() == 4);
  CHECK(a.total_samples() == 23);
  // 23 = 5*4 + 3: the first three clients carry the extra row.
  for (int i = 0; i < 5; ++i) {
    const int want = 4 + (i < 3 ? 1 : 0);
    CHECK(a.features[i].rows() == want);
    CHECK(a.labels[i].size() == want);
  }
  bool same = true, differs = false;
  for (int i = 0; i < 5; ++i) {
    same = same && (a.features[i] == b.features[i]) && (a.labels[i] == b.labels[i]);
    differs = differs || (a.features[i] != c.features[i]);
  }
  CHECK(same);
  CHECK(differs);

  for (int i = 0; i < 5; ++i) {
    CHECK(a.hyperplane_normals[i].norm() == doctest::Approx(1.0).epsilon(1e-12));
    for (int s = 0; s < a.labels[i].size(); ++s)
      CHECK(std::abs(a.labels[i](s)) == 1.0);
  }
}

TEST_CASE("data: zero heterogeneity collapses every client onto the shared pool") {
  const Dataset d = generate_clustered_data(4, 10, 3, 0.0, 7);
  // 10 = 4*2 + 2: clients 0,1 hold 3 rows; clients 2,3 hold 2. Each client is
  // a prefix of the same pool, so equal-size clients match bit for bit and
  // shorter ones are prefixes of longer ones.
  CHECK(d.features[0] == d.features[1]);
  CHECK(d.labels[0] == d.labels[1]);
  CHECK(d.features[2] == d.features[3]);
  CHECK(d.features[2] == d.features[0].topRows(2));
  CHECK(d.labels[2] == d.labels[0].head(2));
  CHECK(d.hyperplane_normals[0] == d.hyperplane_normals[3]);
}

TEST_CASE("data: heterogeneity separates clients") {
  const Dataset d = generate_clustered_data(3, 9, 5, 0.5, 11);
  CHECK(d.features[0] != d.features[1]);
  CHECK(d.hyperplane_normals[0] != d.hyperplane_normals[1]);
}

TEST_CASE("data: generator rejects bad arguments") {
  CHECK_THROWS_AS(generate_clustered_data(0, 10, 3, 0.1, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_clustered_data(4, 3, 3, 0.1, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_clustered_data(2, 10, 0, 0.1, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_clustered_data(2, 10, 3, -0.1, 1), std::invalid_argument);
}

TEST_CASE("data: CSV export/import round-trips bit-exactly") {
  const Dataset d = generate_clustered_data(3, 17, 4, 0.2, 99);
  const auto dir = std::filesystem::temp_directory_path() / "fedsub_csv_roundtrip_test";
  std::filesystem::remove_all(dir);
  export_dataset_csv(d, dir.string());
  const Dataset back = import_dataset_csv(dir.string(), 3);
  REQUIRE(back.n_clients() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(back.features[i] == d.features[i]);
    CHECK(back.labels[i] == d.labels[i]);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("logistic: value and gradient at zero match the closed forms") {
  const Dataset d = generate_clustered_data(3, 30, 4, 0.2, 5);
  const double lambda = 0.05;
  const auto obj = make_logistic(d, lambda);
  const LayeredMatrix zero = LayeredMatrix::zeros(obj->layer_shapes());

  for (int i = 0; i < 3; ++i) {
    // log(1 + e^0) = log 2 per sample; the regularizer vanishes at zero.
    CHECK(obj->loss(i, zero) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    const int s = obj->client_samples(i);
    Eigen::VectorXd want = Eigen::VectorXd::Zero(4);
    for (int k = 0; k < s; ++k)
      want -= d.labels[i](k) / (2.0 * s) * d.features[i].row(k).transpose();
    const LayeredMatrix g = obj->full_gradient(i, zero);
    CHECK((g.layer(0).col(0) - want).cwiseAbs().maxCoeff() <= 1e-14);
  }
}

TEST_CASE("logistic: analytic gradient matches central differences") {
  const Dataset d = generate_clustered_data(3, 24, 4, 0.3, 8);
  const auto obj = make_logistic(d, 0.01);
  for (std::uint64_t s : {1ull, 2ull, 3ull}) {
    const LayeredMatrix x = random_point(obj->layer_shapes(), s);
    const LayeredMatrix g = obj->global_gradient(x);
    CHECK(rel_err(g, fd_global_gradient(*obj, x, 1e-6)) <= 1e-7);
  }
}

TEST_CASE("logistic: global gradient is the client average") {
  const Dataset d = generate_clustered_data(4, 20, 3, 0.4, 2);
  const auto obj = make_logistic(d, 0.1);
  const LayeredMatrix x = random_point(obj->layer_shapes(), 9);
  LayeredMatrix acc = LayeredMatrix::zeros(obj->layer_shapes());
  for (int i = 0; i < 4; ++i) acc = add(acc, obj->full_gradient(i, x));
  CHECK(rel_err(obj->global_gradient(x), scale(0.25, acc)) <= 1e-15);
}

TEST_CASE("logistic: smoothness bound is a Lipschitz constant in practice") {
  const Dataset d = generate_clustered_data(3, 30, 5, 0.3, 21);
  const auto obj = make_logistic(d, 0.02);
  const auto L = obj->smoothness_bound();
  REQUIRE(L.has_value());
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const LayeredMatrix x = random_point(obj->layer_shapes(), 100 + trial);
    const LayeredMatrix y = random_point(obj->layer_shapes(), 200 + trial);
    for (int i = 0; i < obj->n_clients(); ++i) {
      const double num =
          std::sqrt(norm_sq(sub(obj->full_gradient(i, x), obj->full_gradient(i, y))));
      const double den = std::sqrt(norm_sq(sub(x, y)));
      CHECK(num <= *L * den * (1.0 + 1e-12));
    }
  }
}

TEST_CASE("minibatch: full-size batch reproduces the full gradient bit-for-bit") {
  const Dataset d = generate_clustered_data(2, 16, 3, 0.2, 6);
  const auto obj = make_logistic(d, 0.01);
  const LayeredMatrix x = random_point(obj->layer_shapes(), 12);
  Rng rng(55);
  for (int i = 0; i < 2; ++i) {
    const LayeredMatrix mb = minibatch_gradient(*obj, i, x, obj->client_samples(i), rng);
    const LayeredMatrix full = obj->full_gradient(i, x);
    CHECK(mb.layer(0) == full.layer(0));
  }
}

TEST_CASE("minibatch: estimator is unbiased for the full gradient") {
  const Dataset d = generate_clustered_data(1, 40, 4, 0.2, 14);
  const auto obj = make_logistic(d, 0.01);
  const LayeredMatrix x = random_point(obj->layer_shapes(), 3);
  const Eigen::VectorXd full = obj->full_gradient(0, x).layer(0).col(0);

  const int draws = 3000;
  Rng rng(777);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(4);
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(4);
  for (int t = 0; t < draws; ++t) {
    const Eigen::VectorXd g = minibatch_gradient(*obj, 0, x, 8, rng).layer(0).col(0);
    const Eigen::VectorXd delta = g - mean;
    mean += delta / static_cast<double>(t + 1);
    m2 += delta.cwiseProduct(g - mean);
  }
  for (int j = 0; j < 4; ++j) {
    const double sd = std::sqrt(m2(j) / (draws - 1));
    // 4 sigma of the mean estimator, plus slack for sd == 0 coordinates.
    CHECK(std::abs(mean(j) - full(j)) <= 4.0 * sd / std::sqrt(double(draws)) + 1e-12);
  }
}

TEST_CASE("minibatch: batch size validation") {
  const Dataset d = generate_clustered_data(1, 10, 3, 0.2, 1);
  const auto obj = make_logistic(d, 0.0);
  const LayeredMatrix x = LayeredMatrix::zeros(obj->layer_shapes());
  Rng rng(1);
  CHECK_THROWS_AS(minibatch_gradient(*obj, 0, x, 0, rng), std::invalid_argument);
  CHECK_THROWS_AS(minibatch_gradient(*obj, 0, x, 11, rng), std::invalid_argument);
  CHECK_THROWS_AS(minibatch_gradient(*obj, 1, x, 2, rng), std::invalid_argument);
}

TEST_CASE("quadratic: explicit coefficients give gradient A x - b exactly") {
  // Two clients, two layers, hand-entered SPD blocks.
  const int n = 2;
  std::vector<std::vector<Matrix>> A(n), b(n);
  Rng rng(31);
  for (int i = 0; i < n; ++i) {
    for (int mdim : {3, 2}) {
      Matrix R(mdim, mdim);
      for (int p = 0; p < mdim; ++p)
        for (int q = 0; q < mdim; ++q) R(p, q) = rng.gaussian();
      A[i].push_back(R.transpose() * R + Matrix::Identity(mdim, mdim));
      Matrix bb(mdim, i + 1 == n ? 1 : 1);
      for (int p = 0; p < mdim; ++p) bb(p, 0) = rng.gaussian();
      b[i].push_back(bb);
    }
  }
  const auto obj = make_quadratic(A, b);
  const LayeredMatrix x = random_point(obj->layer_shapes(), 77);
  for (int i = 0; i < n; ++i) {
    const LayeredMatrix g = obj->full_gradient(i, x);
    for (int l = 0; l < 2; ++l) {
      Matrix want = Matrix::Zero(A[i][l].rows(), 1);
      for (int p = 0; p < want.rows(); ++p) {
        for (int q = 0; q < A[i][l].cols(); ++q) want(p, 0) += A[i][l](p, q) * x.layer(l)(q, 0);
        want(p, 0) -= b[i][l](p, 0);
      }
      CHECK((g.layer(l) - want).cwiseAbs().maxCoeff() <= 1e-13);
    }
    // Loss oracle: 0.5 x^T A x - b^T x summed over layers.
    double want_loss = 0.0;
    for (int l = 0; l < 2; ++l) {
      const Eigen::VectorXd xv = x.layer(l).col(0);
      want_loss += 0.5 * xv.dot(A[i][l] * xv) - b[i][l].col(0).dot(xv);
    }
    CHECK(obj->loss(i, x) == doctest::Approx(want_loss).epsilon(1e-13));
  }
}

TEST_CASE("quadratic: closed-form minimizer solves the averaged system") {
  const std::vector<LayerShape> shapes = {{4, 1}};
  const auto obj = make_random_quadratic(3, shapes, 17);
  const ReferenceSolution ref = solve_reference(*obj);
  CHECK(ref.iterations == 0);
  CHECK(ref.grad_norm <= 1e-10);
  // Independent certificate: the global gradient vanishes at x_star.
  CHECK(std::sqrt(norm_sq(obj->global_gradient(ref.x_star))) <= 1e-10);
  // And x_star is a strict minimum against random perturbations.
  for (std::uint64_t s : {1ull, 2ull}) {
    LayeredMatrix y = ref.x_star;
    const LayeredMatrix dx = random_point(shapes, 400 + s);
    y = add(y, scale(1e-3, dx));
    CHECK(obj->global_loss(y) > ref.f_star);
  }
}

TEST_CASE("quadratic: zero heterogeneity makes clients identical") {
  QuadraticOptions opt;
  opt.heterogeneity = 0.0;
  const auto obj = make_random_quadratic(4, {{3, 2}}, 23, opt);
  const LayeredMatrix x = random_point(obj->layer_shapes(), 5);
  const LayeredMatrix g0 = obj->full_gradient(0, x);
  for (int i = 1; i < 4; ++i) CHECK(obj->full_gradient(i, x).layer(0) == g0.layer(0));
}

TEST_CASE("quadratic: smoothness bound respects the configured spectrum") {
  QuadraticOptions opt;
  opt.eig_min = 1.0;
  opt.eig_max = 2.5;
  const auto obj = make_random_quadratic(3, {{5, 1}}, 29, opt);
  const auto L = obj->smoothness_bound();
  REQUIRE(L.has_value());
  CHECK(*L >= 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    const LayeredMatrix x = random_point(obj->layer_shapes(), 600 + trial);
    const LayeredMatrix y = random_point(obj->layer_shapes(), 700 + trial);
    for (int i = 0; i < 3; ++i) {
      const double num =
          std::sqrt(norm_sq(sub(obj->full_gradient(i, x), obj->full_gradient(i, y))));
      CHECK(num <= *L * std::sqrt(norm_sq(sub(x, y))) * (1.0 + 1e-12));
    }
  }
}

TEST_CASE("mlp: analytic gradient matches central differences") {
  const Dataset d = generate_clustered_data(2, 20, 4, 0.3, 44);
  const auto obj = make_mlp(d, 5, 0.01);
  const std::vector<LayerShape> shapes = obj->layer_shapes();
  REQUIRE(shapes.size() == 2);
  CHECK(shapes[0] == LayerShape{4, 5});
  CHECK(shapes[1] == LayerShape{5, 1});
  for (std::uint64_t s : {1ull, 2ull, 3ull}) {
    const LayeredMatrix x = random_point(shapes, 50 + s);
    CHECK(rel_err(obj->global_gradient(x), fd_global_gradient(*obj, x, 1e-6)) <= 1e-7);
  }
}

TEST_CASE("mlp: minibatch at full size equals the full gradient") {
  const Dataset d = generate_clustered_data(2, 12, 3, 0.2, 13);
  const auto obj = make_mlp(d, 4);
  const LayeredMatrix x = random_init(obj->layer_shapes(), 2);
  Rng rng(8);
  const LayeredMatrix mb = minibatch_gradient(*obj, 0, x, obj->client_samples(0), rng);
  const LayeredMatrix full = obj->full_gradient(0, x);
  CHECK(mb.layer(0) == full.layer(0));
  CHECK(mb.layer(1) == full.layer(1));
}

TEST_CASE("mlp: no reference path exists") {
  const Dataset d = generate_clustered_data(2, 12, 3, 0.2, 13);
  const auto obj = make_mlp(d, 4);
  CHECK_THROWS_AS(solve_reference(*obj), std::invalid_argument);
}

TEST_CASE("random_init: deterministic, nonzero, fan-in scaled") {
  const std::vector<LayerShape> shapes = {{9, 4}, {4, 1}};
  const LayeredMatrix a = random_init(shapes, 3);
  const LayeredMatrix b = random_init(shapes, 3);
  const LayeredMatrix c = random_init(shapes, 4);
  CHECK(a.layer(0) == b.layer(0));
  CHECK(a.layer(0) != c.layer(0));
  CHECK(norm_sq(a) > 0.0);
}

TEST_CASE("solve_reference: Newton certifies a logistic optimum") {
  const Dataset d = generate_clustered_data(3, 60, 4, 0.2, 9);
  const auto obj = make_logistic(d, 0.05);
  const ReferenceSolution ref = solve_reference(*obj, 1e-12);
  CHECK(ref.grad_norm <= 1e-12);
  CHECK(ref.iterations > 0);
  // Recompute the certificate from scratch.
  const double gn = std::sqrt(norm_sq(obj->global_gradient(ref.x_star)));
  CHECK(gn == doctest::Approx(ref.grad_norm).epsilon(1e-9));
  CHECK(ref.f_star == doctest::Approx(obj->global_loss(ref.x_star)).epsilon(1e-15));
  // Descent certificate against random perturbations.
  for (std::uint64_t s : {1ull, 2ull, 3ull}) {
    LayeredMatrix y = add(ref.x_star, scale(1e-4, random_point(obj->layer_shapes(), 800 + s)));
    CHECK(obj->global_loss(y) > ref.f_star);
  }
}
