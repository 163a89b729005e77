#include "fedsub/layered.hpp"

#include <cmath>
#include <stdexcept>

namespace fedsub {

LayeredMatrix LayeredMatrix::zeros(const std::vector<LayerShape>& shapes) {
  std::vector<Matrix> layers;
  layers.reserve(shapes.size());
  for (const auto& s : shapes) {
    if (s.rows <= 0 || s.cols <= 0)
      throw std::invalid_argument("LayeredMatrix::zeros: layer dimensions must be positive, got " +
                                  std::to_string(s.rows) + "x" + std::to_string(s.cols));
    layers.push_back(Matrix::Zero(s.rows, s.cols));
  }
  return LayeredMatrix(std::move(layers));
}

std::vector<LayerShape> LayeredMatrix::shapes() const {
  std::vector<LayerShape> out;
  out.reserve(layers_.size());
  for (const auto& m : layers_)
    out.push_back({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  return out;
}

std::int64_t LayeredMatrix::size() const {
  std::int64_t n = 0;
  for (const auto& m : layers_) n += static_cast<std::int64_t>(m.size());
  return n;
}

bool LayeredMatrix::all_finite() const {
  for (const auto& m : layers_)
    if (!m.allFinite()) return false;
  return true;
}

std::string shape_string(const std::vector<LayerShape>& shapes) {
  std::string s = "[";
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shapes[i].rows) + "x" + std::to_string(shapes[i].cols);
  }
  return s + "]";
}

void require_same_shapes(const LayeredMatrix& a, const LayeredMatrix& b, const char* op) {
  if (a.num_layers() != b.num_layers())
    throw std::invalid_argument(std::string(op) + ": layer count mismatch (" +
                                std::to_string(a.num_layers()) + " vs " +
                                std::to_string(b.num_layers()) + ")");
  for (int l = 0; l < a.num_layers(); ++l) {
    if (a.layer(l).rows() != b.layer(l).rows() || a.layer(l).cols() != b.layer(l).cols())
      throw std::invalid_argument(std::string(op) + ": shape mismatch at layer " + std::to_string(l) +
                                  " (" + std::to_string(a.layer(l).rows()) + "x" +
                                  std::to_string(a.layer(l).cols()) + " vs " +
                                  std::to_string(b.layer(l).rows()) + "x" +
                                  std::to_string(b.layer(l).cols()) + ")");
  }
}

LayeredMatrix add(const LayeredMatrix& a, const LayeredMatrix& b) {
  require_same_shapes(a, b, "add");
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(a.num_layers()));
  for (int l = 0; l < a.num_layers(); ++l) out.push_back(a.layer(l) + b.layer(l));
  return LayeredMatrix(std::move(out));
}

LayeredMatrix sub(const LayeredMatrix& a, const LayeredMatrix& b) {
  require_same_shapes(a, b, "sub");
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(a.num_layers()));
  for (int l = 0; l < a.num_layers(); ++l) out.push_back(a.layer(l) - b.layer(l));
  return LayeredMatrix(std::move(out));
}

LayeredMatrix scale(double s, const LayeredMatrix& x) {
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(x.num_layers()));
  for (int l = 0; l < x.num_layers(); ++l) out.push_back(s * x.layer(l));
  return LayeredMatrix(std::move(out));
}

LayeredMatrix scale_layerwise(const LayerScalars& s, const LayeredMatrix& x) {
  if (static_cast<int>(s.values.size()) != x.num_layers())
    throw std::invalid_argument("scale_layerwise: got " + std::to_string(s.values.size()) +
                                " scalars for " + std::to_string(x.num_layers()) + " layers");
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(x.num_layers()));
  for (int l = 0; l < x.num_layers(); ++l)
    out.push_back(s.values[static_cast<std::size_t>(l)] * x.layer(l));
  return LayeredMatrix(std::move(out));
}

LayeredMatrix average(const std::vector<LayeredMatrix>& xs) {
  if (xs.empty()) throw std::invalid_argument("average: empty input");
  for (std::size_t i = 1; i < xs.size(); ++i) require_same_shapes(xs[0], xs[i], "average");
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(xs[0].num_layers()));
  for (int l = 0; l < xs[0].num_layers(); ++l) {
    Matrix acc = xs[0].layer(l);
    for (std::size_t i = 1; i < xs.size(); ++i) acc += xs[i].layer(l);
    out.push_back(acc / static_cast<double>(xs.size()));
  }
  return LayeredMatrix(std::move(out));
}

double norm_sq(const LayeredMatrix& x) {
  double s = 0.0;
  for (int l = 0; l < x.num_layers(); ++l) s += x.layer(l).squaredNorm();
  return s;
}

}  // namespace fedsub
