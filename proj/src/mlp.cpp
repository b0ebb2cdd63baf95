#include "mflb/mlp.hpp"

#include <stdexcept>

namespace mflb {

Mlp::Mlp(std::vector<int> sizes) : sizes_(std::move(sizes)) {
  if (sizes_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output size");
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    offsets_.push_back(total);
    total += static_cast<std::size_t>(sizes_[l + 1]) * (sizes_[l] + 1);
  }
  params_ = Vector::Zero(static_cast<Eigen::Index>(total));
}

Eigen::Map<Mlp::Matrix> Mlp::weight(std::size_t layer) {
  return {params_.data() + offset(layer), sizes_[layer + 1], sizes_[layer]};
}

Eigen::Map<const Mlp::Matrix> Mlp::weight(std::size_t layer) const {
  return {params_.data() + offset(layer), sizes_[layer + 1], sizes_[layer]};
}

Eigen::Map<Mlp::Vector> Mlp::bias(std::size_t layer) {
  return {params_.data() + offset(layer) + static_cast<std::size_t>(sizes_[layer + 1]) * sizes_[layer],
          sizes_[layer + 1]};
}

Eigen::Map<const Mlp::Vector> Mlp::bias(std::size_t layer) const {
  return {params_.data() + offset(layer) + static_cast<std::size_t>(sizes_[layer + 1]) * sizes_[layer],
          sizes_[layer + 1]};
}

void Mlp::initialize(Rng& rng, double hidden_scale, double output_scale) {
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const double scale = l + 1 == num_layers() ? output_scale : hidden_scale;
    auto w = weight(l);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      const double norm = w.row(r).norm();
      if (norm > 0.0) w.row(r) *= scale / norm;
    }
    bias(l).setZero();
  }
}

Mlp::Matrix Mlp::forward(const Matrix& x, Cache* cache) const {
  if (x.rows() != input_dim()) throw std::invalid_argument("Mlp::forward: input dimension mismatch");
  if (cache) {
    cache->activations.clear();
    cache->activations.push_back(x);
  }
  Matrix a = x;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    Matrix z = weight(l) * a;
    z.colwise() += bias(l);
    if (l + 1 < num_layers()) z = z.array().tanh().matrix();
    a = std::move(z);
    if (cache) cache->activations.push_back(a);
  }
  return a;
}

Mlp::Vector Mlp::forward_one(const Vector& x) const { return forward(Matrix(x)).col(0); }

Mlp::Vector Mlp::backward(const Cache& cache, const Matrix& grad_out) const {
  Vector grad = Vector::Zero(params_.size());
  Matrix delta = grad_out;
  for (std::size_t l = num_layers(); l-- > 0;) {
    const Matrix& input = cache.activations[l];
    Eigen::Map<Matrix> gw(grad.data() + offset(l), sizes_[l + 1], sizes_[l]);
    Eigen::Map<Vector> gb(
        grad.data() + offset(l) + static_cast<std::size_t>(sizes_[l + 1]) * sizes_[l], sizes_[l + 1]);
    gw.noalias() = delta * input.transpose();
    gb = delta.rowwise().sum();
    if (l > 0) {
      Matrix back = weight(l).transpose() * delta;
      // input is tanh output of the previous layer
      delta = back.array() * (1.0 - input.array().square());
    }
  }
  return grad;
}

}  // namespace mflb
