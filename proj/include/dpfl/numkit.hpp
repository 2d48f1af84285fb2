#pragma once

// Minimal MLP kernel: dense matrices, forward/backward with explicit
// gradients, SGD with momentum, and the loss/similarity helpers the
// federated and distillation code paths share.

#include <Eigen/Core>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dpfl/rng.hpp"

namespace dpfl {

/// Dense row-major real matrix; the single numeric carrier.
using Tensor2 = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// Flat parameter / gradient vector.
using Vector = Eigen::VectorXd;

using MatrixView = Eigen::Map<Tensor2>;
using ConstMatrixView = Eigen::Map<const Tensor2>;
using RowView = Eigen::Map<Eigen::RowVectorXd>;
using ConstRowView = Eigen::Map<const Eigen::RowVectorXd>;

enum class Activation { relu, identity };

struct LayerShape {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::identity;

  bool operator==(const LayerShape&) const = default;
};

/// Chain of affine layers `y = act(x W + b)` with all parameters stored in one
/// flat vector. Layer k's weight is (in x out) row-major followed by its bias.
///
/// The activation entering the final layer is the "feature" output; layers
/// before it form the extractor and the final layer is the classifier head.
class MlpModel {
 public:
  MlpModel() = default;
  explicit MlpModel(std::vector<LayerShape> shapes);

  /// ReLU hidden layers, linear head, He-normal weights and zero biases.
  static MlpModel make(std::size_t in_dim, std::span<const std::size_t> hidden,
                       std::size_t out_dim, Rng& rng);

  std::size_t num_layers() const noexcept { return shapes_.size(); }
  std::size_t in_dim() const noexcept { return shapes_.empty() ? 0 : shapes_.front().in; }
  std::size_t out_dim() const noexcept { return shapes_.empty() ? 0 : shapes_.back().out; }
  std::size_t feature_dim() const noexcept { return shapes_.empty() ? 0 : shapes_.back().in; }
  /// Index of the activation returned as features (== num_layers() - 1).
  std::size_t split_index() const noexcept { return shapes_.empty() ? 0 : shapes_.size() - 1; }
  std::size_t num_params() const noexcept { return static_cast<std::size_t>(params_.size()); }

  const std::vector<LayerShape>& shapes() const noexcept { return shapes_; }
  bool same_shape(const MlpModel& other) const noexcept { return shapes_ == other.shapes_; }

  MatrixView weight(std::size_t layer);
  ConstMatrixView weight(std::size_t layer) const;
  RowView bias(std::size_t layer);
  ConstRowView bias(std::size_t layer) const;

  Vector& params() noexcept { return params_; }
  const Vector& params() const noexcept { return params_; }

  /// Offset of layer k's weight block inside params(); bias follows it.
  std::size_t offset(std::size_t layer) const { return offsets_.at(layer); }

 private:
  std::vector<LayerShape> shapes_;
  std::vector<std::size_t> offsets_;
  Vector params_;
};

struct ForwardOutput {
  Tensor2 logits;
  Tensor2 features;
};

/// All intermediate activations of one forward pass; activations[0] is the
/// input and activations[k + 1] the output of layer k.
struct ForwardPass {
  std::vector<Tensor2> activations;

  const Tensor2& logits() const { return activations.back(); }
  const Tensor2& features() const { return activations[activations.size() - 2]; }
};

ForwardOutput forward(const MlpModel& model, const Tensor2& x);
ForwardPass forward_pass(const MlpModel& model, const Tensor2& x);

struct BackwardRequest {
  /// Extra gradient arriving at the feature activation (may be null).
  const Tensor2* grad_features = nullptr;
  bool param_grads = true;
  /// When non-null receives dL/dx.
  Tensor2* grad_input = nullptr;
};

/// Backpropagates dL/dlogits through a recorded pass. Returns the flat
/// parameter gradient (empty when request.param_grads is false).
Vector backward(const MlpModel& model, const ForwardPass& pass, const Tensor2& grad_logits,
                const BackwardRequest& request = {});

struct LossGrad {
  double loss = 0.0;
  Vector grad;
};

struct LogitLoss {
  double loss = 0.0;
  Tensor2 grad_logits;
};

/// Row-wise softmax with temperature.
Tensor2 softmax(const Tensor2& logits, double temperature = 1.0);

/// (1/rows) * sum_n w_n * CE(logits_n, y_n) and its gradient w.r.t. logits.
LogitLoss cross_entropy(const Tensor2& logits, std::span<const int> labels,
                        std::span<const double> sample_weights);

/// Gradient of mean weighted cross-entropy w.r.t. every parameter.
LossGrad backward_ce(const MlpModel& model, const Tensor2& x, std::span<const int> labels,
                     std::span<const double> sample_weights);

/// Mean over rows of KL(softmax(p/T) || softmax(q/T)).
double softmax_kl(const Tensor2& p_logits, const Tensor2& q_logits, double temperature = 1.0);
/// KL value plus its gradient w.r.t. q_logits.
LogitLoss softmax_kl_grad(const Tensor2& p_logits, const Tensor2& q_logits,
                          double temperature = 1.0);

double cosine_sim(std::span<const double> a, std::span<const double> b);

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::size_t batch_size = 128;

  void validate() const;
};

/// v <- momentum * v - lr * (g + weight_decay * w);  w <- w + v
void sgd_step(Vector& params, const Vector& grad, const SgdConfig& cfg, Vector& velocity);
void sgd_step(MlpModel& model, const Vector& grad, const SgdConfig& cfg, Vector& velocity);

/// Index of the largest logit per row.
std::vector<int> argmax_rows(const Tensor2& logits);
/// Top-1 accuracy in percent.
double accuracy_percent(const MlpModel& model, const Tensor2& x, std::span<const int> labels);

/// Gathers the given rows into a new matrix.
Tensor2 gather_rows(const Tensor2& x, std::span<const std::size_t> rows);

/// Checkpoint codec: JSON with layer shapes and row-major values. Doubles are
/// written in shortest round-trip form, so load(save(m)) is bitwise exact.
std::string checkpoint_to_string(const MlpModel& model);
MlpModel checkpoint_from_string(const std::string& text);
void save_checkpoint(const MlpModel& model, const std::filesystem::path& path);
MlpModel load_checkpoint(const std::filesystem::path& path);

}  // namespace dpfl
