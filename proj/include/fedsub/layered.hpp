#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace fedsub {

using Matrix = Eigen::MatrixXd;

struct LayerShape {
  int rows = 0;  // m_l
  int cols = 0;  // d_l
  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

// Model state as an ordered list of per-layer dense matrices. All arithmetic
// below is pure (inputs are never mutated) and requires exact per-layer shape
// agreement; mismatches throw with the offending layer index in the message.
class LayeredMatrix {
 public:
  LayeredMatrix() = default;
  explicit LayeredMatrix(std::vector<Matrix> layers) : layers_(std::move(layers)) {}

  static LayeredMatrix zeros(const std::vector<LayerShape>& shapes);

  int num_layers() const { return static_cast<int>(layers_.size()); }
  const Matrix& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
  Matrix& layer(int l) { return layers_.at(static_cast<std::size_t>(l)); }

  std::vector<LayerShape> shapes() const;
  // Total scalar count across layers (the size of the flattened vector).
  std::int64_t size() const;
  bool all_finite() const;

 private:
  std::vector<Matrix> layers_;
};

// One scalar per layer, for layer-wise scaling by dimension ratios.
struct LayerScalars {
  std::vector<double> values;
};

LayeredMatrix add(const LayeredMatrix& a, const LayeredMatrix& b);
LayeredMatrix sub(const LayeredMatrix& a, const LayeredMatrix& b);
LayeredMatrix scale(double s, const LayeredMatrix& x);
LayeredMatrix scale_layerwise(const LayerScalars& s, const LayeredMatrix& x);
// Entrywise mean, summed in ascending index order so results are
// deterministic and independent of any parallelism in the caller.
LayeredMatrix average(const std::vector<LayeredMatrix>& xs);
// Squared Frobenius norm summed over layers.
double norm_sq(const LayeredMatrix& x);

std::string shape_string(const std::vector<LayerShape>& shapes);
void require_same_shapes(const LayeredMatrix& a, const LayeredMatrix& b, const char* op);

}  // namespace fedsub
