#pragma once

#include <Eigen/Dense>
#include <vector>

#include "mflb/rng.hpp"

namespace mflb {

// Fully connected network, tanh hidden layers, linear output. All parameters
// live in one flat vector (per layer: weights column-major, then bias) so
// optimizers and checkpoints can treat them uniformly.
class Mlp {
 public:
  using Matrix = Eigen::MatrixXd;
  using Vector = Eigen::VectorXd;

  Mlp() = default;
  explicit Mlp(std::vector<int> sizes);

  const std::vector<int>& sizes() const { return sizes_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  std::size_t num_layers() const { return sizes_.size() - 1; }

  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

  Eigen::Map<Matrix> weight(std::size_t layer);
  Eigen::Map<const Matrix> weight(std::size_t layer) const;
  Eigen::Map<Vector> bias(std::size_t layer);
  Eigen::Map<const Vector> bias(std::size_t layer) const;

  // Column-normalized Gaussian init (each unit's incoming weights scaled to
  // norm `scale`), zero biases. `output_scale` applies to the last layer.
  void initialize(Rng& rng, double hidden_scale, double output_scale);

  struct Cache {
    std::vector<Matrix> activations;  // activations[0] = input, back() = output
  };

  // x is input_dim x batch.
  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  Vector forward_one(const Vector& x) const;

  // Gradient of sum over the batch of <grad_out, output> w.r.t. params.
  Vector backward(const Cache& cache, const Matrix& grad_out) const;

 private:
  std::size_t offset(std::size_t layer) const { return offsets_[layer]; }

  std::vector<int> sizes_;
  std::vector<std::size_t> offsets_;
  Vector params_;
};

}  // namespace mflb
