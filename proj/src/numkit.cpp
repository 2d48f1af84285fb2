#include "dpfl/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "dpfl/error.hpp"
#include "dpfl/io.hpp"

namespace dpfl {

using json = nlohmann::json;

MlpModel::MlpModel(std::vector<LayerShape> shapes) : shapes_(std::move(shapes)) {
  if (shapes_.empty()) throw ShapeError("MlpModel needs at least one layer");
  std::size_t total = 0;
  for (std::size_t k = 0; k < shapes_.size(); ++k) {
    const auto& s = shapes_[k];
    if (s.in == 0 || s.out == 0) {
      throw ShapeError("layer " + std::to_string(k) + " has a zero dimension");
    }
    if (k > 0 && shapes_[k - 1].out != s.in) {
      throw ShapeError("layer " + std::to_string(k) + " input " + std::to_string(s.in) +
                       " does not match previous output " + std::to_string(shapes_[k - 1].out));
    }
    offsets_.push_back(total);
    total += s.in * s.out + s.out;
  }
  params_ = Vector::Zero(static_cast<Eigen::Index>(total));
}

MlpModel MlpModel::make(std::size_t in_dim, std::span<const std::size_t> hidden,
                        std::size_t out_dim, Rng& rng) {
  std::vector<LayerShape> shapes;
  std::size_t prev = in_dim;
  for (std::size_t h : hidden) {
    shapes.push_back({prev, h, Activation::relu});
    prev = h;
  }
  shapes.push_back({prev, out_dim, Activation::identity});
  MlpModel model(std::move(shapes));
  for (std::size_t k = 0; k < model.num_layers(); ++k) {
    const auto& s = model.shapes_[k];
    const double gain = s.activation == Activation::relu ? 2.0 : 1.0;
    const double stddev = std::sqrt(gain / static_cast<double>(s.in));
    auto w = model.weight(k);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = stddev * rng.normal();
  }
  return model;
}

MatrixView MlpModel::weight(std::size_t layer) {
  const auto& s = shapes_.at(layer);
  return MatrixView(params_.data() + offsets_[layer], static_cast<Eigen::Index>(s.in),
                    static_cast<Eigen::Index>(s.out));
}

ConstMatrixView MlpModel::weight(std::size_t layer) const {
  const auto& s = shapes_.at(layer);
  return ConstMatrixView(params_.data() + offsets_[layer], static_cast<Eigen::Index>(s.in),
                         static_cast<Eigen::Index>(s.out));
}

RowView MlpModel::bias(std::size_t layer) {
  const auto& s = shapes_.at(layer);
  return RowView(params_.data() + offsets_[layer] + s.in * s.out, static_cast<Eigen::Index>(s.out));
}

ConstRowView MlpModel::bias(std::size_t layer) const {
  const auto& s = shapes_.at(layer);
  return ConstRowView(params_.data() + offsets_[layer] + s.in * s.out,
                      static_cast<Eigen::Index>(s.out));
}

ForwardPass forward_pass(const MlpModel& model, const Tensor2& x) {
  if (model.num_layers() == 0) throw ShapeError("forward on an empty model");
  if (static_cast<std::size_t>(x.cols()) != model.in_dim()) {
    throw ShapeError("layer 0 expects " + std::to_string(model.in_dim()) + " inputs, got " +
                     std::to_string(x.cols()));
  }
  ForwardPass pass;
  pass.activations.reserve(model.num_layers() + 1);
  pass.activations.push_back(x);
  for (std::size_t k = 0; k < model.num_layers(); ++k) {
    const Tensor2& in = pass.activations.back();
    Tensor2 out = in * model.weight(k);
    out.rowwise() += model.bias(k);
    if (model.shapes()[k].activation == Activation::relu) out = out.cwiseMax(0.0);
    pass.activations.push_back(std::move(out));
  }
  return pass;
}

ForwardOutput forward(const MlpModel& model, const Tensor2& x) {
  ForwardPass pass = forward_pass(model, x);
  ForwardOutput out;
  out.features = pass.features();
  out.logits = std::move(pass.activations.back());
  return out;
}

Vector backward(const MlpModel& model, const ForwardPass& pass, const Tensor2& grad_logits,
                const BackwardRequest& request) {
  const std::size_t layers = model.num_layers();
  if (pass.activations.size() != layers + 1) throw ShapeError("forward pass does not match model");
  if (grad_logits.rows() != pass.logits().rows() || grad_logits.cols() != pass.logits().cols()) {
    throw ShapeError("grad_logits shape does not match logits");
  }
  if (request.grad_features != nullptr &&
      (request.grad_features->rows() != pass.features().rows() ||
       request.grad_features->cols() != pass.features().cols())) {
    throw ShapeError("grad_features shape does not match features");
  }

  Vector grad;
  if (request.param_grads) grad = Vector::Zero(static_cast<Eigen::Index>(model.num_params()));

  Tensor2 g = grad_logits;
  for (std::size_t k = layers; k-- > 0;) {
    const auto& shape = model.shapes()[k];
    if (shape.activation == Activation::relu) {
      g = (pass.activations[k + 1].array() > 0.0).select(g, 0.0);
    }
    if (request.param_grads) {
      MatrixView dw(grad.data() + model.offset(k), static_cast<Eigen::Index>(shape.in),
                    static_cast<Eigen::Index>(shape.out));
      dw.noalias() = pass.activations[k].transpose() * g;
      RowView db(grad.data() + model.offset(k) + shape.in * shape.out,
                 static_cast<Eigen::Index>(shape.out));
      db = g.colwise().sum();
    }
    const bool need_prev = k > 0 || request.grad_input != nullptr;
    if (!need_prev) break;
    Tensor2 prev = g * model.weight(k).transpose();
    if (k == layers - 1 && request.grad_features != nullptr) prev += *request.grad_features;
    if (k == 0) {
      *request.grad_input = std::move(prev);
      break;
    }
    g = std::move(prev);
  }
  return grad;
}

namespace {

void check_labels(std::span<const int> labels, Eigen::Index rows, Eigen::Index classes) {
  if (static_cast<Eigen::Index>(labels.size()) != rows) {
    throw ValidationError("label count " + std::to_string(labels.size()) + " != rows " +
                          std::to_string(rows));
  }
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw ValidationError("label " + std::to_string(y) + " outside [0, " +
                            std::to_string(classes) + ")");
    }
  }
}

Tensor2 log_softmax(const Tensor2& logits, double temperature) {
  Tensor2 scaled = logits / temperature;
  Eigen::VectorXd row_max = scaled.rowwise().maxCoeff();
  scaled.colwise() -= row_max;
  Eigen::VectorXd lse = scaled.array().exp().rowwise().sum().log();
  scaled.colwise() -= lse;
  return scaled;
}

}  // namespace

Tensor2 softmax(const Tensor2& logits, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("softmax temperature must be positive");
  return log_softmax(logits, temperature).array().exp();
}

LogitLoss cross_entropy(const Tensor2& logits, std::span<const int> labels,
                        std::span<const double> sample_weights) {
  check_labels(labels, logits.rows(), logits.cols());
  if (static_cast<Eigen::Index>(sample_weights.size()) != logits.rows()) {
    throw ValidationError("sample_weights length must equal the number of rows");
  }
  const Tensor2 logp = log_softmax(logits, 1.0);
  const double inv_rows = logits.rows() > 0 ? 1.0 / static_cast<double>(logits.rows()) : 0.0;
  LogitLoss out;
  out.grad_logits = logp.array().exp();
  for (Eigen::Index n = 0; n < logits.rows(); ++n) {
    const double w = sample_weights[static_cast<std::size_t>(n)];
    const int y = labels[static_cast<std::size_t>(n)];
    out.loss -= w * logp(n, y);
    out.grad_logits(n, y) -= 1.0;
    out.grad_logits.row(n) *= w * inv_rows;
  }
  out.loss *= inv_rows;
  return out;
}

LossGrad backward_ce(const MlpModel& model, const Tensor2& x, std::span<const int> labels,
                     std::span<const double> sample_weights) {
  const ForwardPass pass = forward_pass(model, x);
  LogitLoss ce = cross_entropy(pass.logits(), labels, sample_weights);
  return {ce.loss, backward(model, pass, ce.grad_logits)};
}

LogitLoss softmax_kl_grad(const Tensor2& p_logits, const Tensor2& q_logits, double temperature) {
  if (p_logits.rows() != q_logits.rows() || p_logits.cols() != q_logits.cols()) {
    throw ShapeError("softmax_kl: logits shapes differ");
  }
  if (!(temperature > 0.0)) throw ValidationError("KL temperature must be positive");
  const Tensor2 logp = log_softmax(p_logits, temperature);
  const Tensor2 logq = log_softmax(q_logits, temperature);
  const Tensor2 p = logp.array().exp();
  const double inv_rows = p_logits.rows() > 0 ? 1.0 / static_cast<double>(p_logits.rows()) : 0.0;
  LogitLoss out;
  for (Eigen::Index n = 0; n < p.rows(); ++n) {
    const double row = (p.row(n).array() * (logp.row(n) - logq.row(n)).array()).sum();
    out.loss += std::max(row, 0.0);
  }
  out.loss *= inv_rows;
  out.grad_logits = (logq.array().exp() - p.array()) * (inv_rows / temperature);
  return out;
}

double softmax_kl(const Tensor2& p_logits, const Tensor2& q_logits, double temperature) {
  return softmax_kl_grad(p_logits, q_logits, temperature).loss;
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_sim: vectors differ in length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw ValidationError("cosine_sim: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

void SgdConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

void sgd_step(Vector& params, const Vector& grad, const SgdConfig& cfg, Vector& velocity) {
  if (grad.size() != params.size()) throw ShapeError("sgd_step: gradient/parameter size mismatch");
  if (velocity.size() == 0) velocity = Vector::Zero(params.size());
  if (velocity.size() != params.size()) throw ShapeError("sgd_step: velocity size mismatch");
  if (cfg.weight_decay != 0.0) {
    velocity = cfg.momentum * velocity - cfg.learning_rate * (grad + cfg.weight_decay * params);
  } else {
    velocity = cfg.momentum * velocity - cfg.learning_rate * grad;
  }
  params += velocity;
  if (!params.allFinite()) throw NumericError("non-finite parameter after SGD step");
}

void sgd_step(MlpModel& model, const Vector& grad, const SgdConfig& cfg, Vector& velocity) {
  sgd_step(model.params(), grad, cfg, velocity);
}

std::vector<int> argmax_rows(const Tensor2& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index n = 0; n < logits.rows(); ++n) {
    Eigen::Index best = 0;
    logits.row(n).maxCoeff(&best);
    out[static_cast<std::size_t>(n)] = static_cast<int>(best);
  }
  return out;
}

double accuracy_percent(const MlpModel& model, const Tensor2& x, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  const auto pred = argmax_rows(forward(model, x).logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

Tensor2 gather_rows(const Tensor2& x, std::span<const std::size_t> rows) {
  Tensor2 out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

std::string checkpoint_to_string(const MlpModel& model) {
  json layers = json::array();
  for (const auto& s : model.shapes()) {
    layers.push_back({{"in", s.in},
                      {"out", s.out},
                      {"activation", s.activation == Activation::relu ? "relu" : "identity"}});
  }
  const auto& p = model.params();
  json doc = {{"format", "dpfl-mlp-v1"},
              {"layers", std::move(layers)},
              {"params", std::vector<double>(p.data(), p.data() + p.size())}};
  return doc.dump();
}

MlpModel checkpoint_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("checkpoint: ") + e.what(), 1);
  }
  if (doc.value("format", "") != "dpfl-mlp-v1") throw ParseError("checkpoint: unknown format", 1);
  std::vector<LayerShape> shapes;
  for (const auto& l : doc.at("layers")) {
    const std::string act = l.at("activation").get<std::string>();
    if (act != "relu" && act != "identity") throw ParseError("checkpoint: bad activation " + act, 1);
    shapes.push_back({l.at("in").get<std::size_t>(), l.at("out").get<std::size_t>(),
                      act == "relu" ? Activation::relu : Activation::identity});
  }
  MlpModel model(std::move(shapes));
  const auto values = doc.at("params").get<std::vector<double>>();
  if (values.size() != model.num_params()) throw ShapeError("checkpoint: parameter count mismatch");
  std::copy(values.begin(), values.end(), model.params().data());
  return model;
}

void save_checkpoint(const MlpModel& model, const std::filesystem::path& path) {
  write_file_atomic(path, checkpoint_to_string(model));
}

MlpModel load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_string(read_file(path));
}

}  // namespace dpfl
