#pragma once

// Weighted binary classifier used as a likelihood-ratio estimator.
//
// A fully connected network g maps features to a logit z with g = sigmoid(z). Training
// minimizes the weighted cross entropy
//
//     L = sum_rows  w_a * softplus(-z) + w_b * softplus(z)
//
// which is -(sum_A w log g + sum_B w log(1-g)) when every row belongs to one class
// (w_b = 0 for A rows and w_a = 0 for B rows). Rows carrying both weights describe the same
// point appearing in both classes, which halves the work when A and B share their features.
// Weights may be negative. The trained ratio g/(1-g) estimates the weighted density ratio of
// class A over class B.
//
// Everything is templated on the scalar type: training runs in float, gradient checks in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "unfoldkit/dataset.hpp"
#include "unfoldkit/errors.hpp"
#include "unfoldkit/rng.hpp"

namespace unfoldkit::nn {

struct NetworkConfig {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_layers{50, 50, 50};
  std::size_t epochs = 200;
  std::size_t batch_size = 2000;
  std::size_t patience = 10;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-7;
  double validation_fraction = 0.2;
  double ratio_clamp_epsilon = 1e-5;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim == 0) throw ConfigError("network.input_dim must be >= 1");
    for (std::size_t w : hidden_layers)
      if (w == 0) throw ConfigError("network.hidden_layers entries must be >= 1");
    if (epochs == 0) throw ConfigError("network.epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("network.batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("network.learning_rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("network.beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("network.beta2 must lie in [0, 1)");
    if (!(adam_epsilon > 0.0)) throw ConfigError("network.adam_epsilon must be > 0");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
      throw ConfigError("network.validation_fraction must lie in (0, 1)");
    if (!(ratio_clamp_epsilon > 0.0 && ratio_clamp_epsilon < 0.5))
      throw ConfigError("network.ratio_clamp_epsilon must lie in (0, 0.5)");
  }
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"input_dim", c.input_dim},
                     {"hidden_layers", c.hidden_layers},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"patience", c.patience},
                     {"learning_rate", c.learning_rate},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_epsilon", c.adam_epsilon},
                     {"validation_fraction", c.validation_fraction},
                     {"ratio_clamp_epsilon", c.ratio_clamp_epsilon},
                     {"seed", c.seed}};
}

/// Overlays the keys present in `j` onto `c`. Unknown keys are rejected with their path.
inline void merge_json(const nlohmann::json& j, NetworkConfig& c, const std::string& where = "network") {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "input_dim") c.input_dim = value.get<std::size_t>();
      else if (key == "hidden_layers") c.hidden_layers = value.get<std::vector<std::size_t>>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "patience") c.patience = value.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "adam_epsilon") c.adam_epsilon = value.get<double>();
      else if (key == "validation_fraction") c.validation_fraction = value.get<double>();
      else if (key == "ratio_clamp_epsilon") c.ratio_clamp_epsilon = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown configuration key '" + where + "." + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for '" + where + "." + key + "': " + e.what());
    }
  }
}

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

inline Eigen::Index eidx(std::size_t i) { return static_cast<Eigen::Index>(i); }

/// Numerically stable log(1 + exp(x)).
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Rows with a feature column and the weight of that row in class A and in class B.
template <typename Scalar>
struct TrainingSet {
  Matrix<Scalar> features;  // input_dim x rows
  Vector<Scalar> weight_a;
  Vector<Scalar> weight_b;

  std::size_t rows() const noexcept { return static_cast<std::size_t>(features.cols()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(features.rows()); }

  /// Class A rows followed by class B rows.
  static TrainingSet two_class(const FeatureMatrix& a, std::span<const double> wa, const FeatureMatrix& b,
                               std::span<const double> wb) {
    if (a.rows() != b.rows()) throw UnfoldError("class A and class B feature dimensions differ");
    if (static_cast<std::size_t>(a.cols()) != wa.size() || static_cast<std::size_t>(b.cols()) != wb.size())
      throw UnfoldError("feature/weight length mismatch");
    TrainingSet s;
    s.features.resize(a.rows(), a.cols() + b.cols());
    s.features.leftCols(a.cols()) = a.template cast<Scalar>();
    s.features.rightCols(b.cols()) = b.template cast<Scalar>();
    s.weight_a = Vector<Scalar>::Zero(s.features.cols());
    s.weight_b = Vector<Scalar>::Zero(s.features.cols());
    for (std::size_t i = 0; i < wa.size(); ++i) s.weight_a(eidx(i)) = static_cast<Scalar>(wa[i]);
    for (std::size_t i = 0; i < wb.size(); ++i) s.weight_b(eidx(i) + a.cols()) = static_cast<Scalar>(wb[i]);
    return s;
  }

  static TrainingSet two_class(const EventSet& a, const EventSet& b) {
    if (a.dimension() != b.dimension()) throw UnfoldError("class A and class B feature dimensions differ");
    return two_class(to_matrix(a), a.weights, to_matrix(b), b.weights);
  }

  /// Every point belongs to both classes, with weight wa[i] in A and wb[i] in B.
  static TrainingSet paired(const FeatureMatrix& x, std::span<const double> wa, std::span<const double> wb) {
    if (static_cast<std::size_t>(x.cols()) != wa.size() || wa.size() != wb.size())
      throw UnfoldError("feature/weight length mismatch");
    TrainingSet s;
    s.features = x.template cast<Scalar>();
    s.weight_a.resize(x.cols());
    s.weight_b.resize(x.cols());
    for (std::size_t i = 0; i < wa.size(); ++i) {
      s.weight_a(eidx(i)) = static_cast<Scalar>(wa[i]);
      s.weight_b(eidx(i)) = static_cast<Scalar>(wb[i]);
    }
    return s;
  }
};

template <typename Scalar>
struct Layer {
  Matrix<Scalar> weight;  // fan_out x fan_in
  Vector<Scalar> bias;
};

template <typename Scalar>
using Parameters = std::vector<Layer<Scalar>>;

/// Feed-forward network: ReLU hidden layers and a single linear logit output.
template <typename Scalar>
class Mlp {
 public:
  Mlp() = default;

  /// He-uniform initialization (limit sqrt(6 / fan_in)), zero biases.
  Mlp(std::size_t input_dim, std::span<const std::size_t> hidden, Rng& rng) {
    std::size_t fan_in = input_dim;
    auto add = [&](std::size_t fan_out) {
      Layer<Scalar> layer;
      layer.weight.resize(eidx(fan_out), eidx(fan_in));
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
          layer.weight(r, c) = static_cast<Scalar>((2.0 * rng.uniform() - 1.0) * limit);
      layer.bias = Vector<Scalar>::Zero(eidx(fan_out));
      layers_.push_back(std::move(layer));
      fan_in = fan_out;
    };
    for (std::size_t w : hidden) add(w);
    add(1);
  }

  const Parameters<Scalar>& layers() const noexcept { return layers_; }
  Parameters<Scalar>& layers() noexcept { return layers_; }
  std::size_t input_dim() const { return layers_.empty() ? 0 : static_cast<std::size_t>(layers_.front().weight.cols()); }

  /// Logits for a batch of (already scaled) inputs; returns a 1 x n row.
  RowVector<Scalar> logits(const Matrix<Scalar>& x) const {
    Matrix<Scalar> a = x;
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l)
      a = ((layers_[l].weight * a).colwise() + layers_[l].bias).cwiseMax(Scalar(0));
    const auto& out = layers_.back();
    return (out.weight * a).array() + out.bias(0);
  }

  /// Weighted loss of the batch (sum over rows) and the gradient of scale * loss, written
  /// into grad (resized as needed).
  double backprop(const Matrix<Scalar>& x, const Vector<Scalar>& wa, const Vector<Scalar>& wb, Scalar scale,
                  Parameters<Scalar>& grad) const {
    const std::size_t n_layers = layers_.size();
    if (grad.size() != n_layers) grad.resize(n_layers);
    std::vector<Matrix<Scalar>> acts(n_layers);  // acts[l] is the input of layer l (acts[0] unused)
    const Matrix<Scalar>* input = &x;
    for (std::size_t l = 0; l + 1 < n_layers; ++l) {
      acts[l + 1] = ((layers_[l].weight * *input).colwise() + layers_[l].bias).cwiseMax(Scalar(0));
      input = &acts[l + 1];
    }
    RowVector<Scalar> delta = (layers_.back().weight * *input).array() + layers_.back().bias(0);

    double loss = 0.0;
    for (Eigen::Index i = 0; i < delta.cols(); ++i) {
      const double z = static_cast<double>(delta(i));
      const double a = static_cast<double>(wa(i));
      const double b = static_cast<double>(wb(i));
      loss += a * softplus(-z) + b * softplus(z);
      const double g = sigmoid(z);
      delta(i) = static_cast<Scalar>((b * g - a * (1.0 - g)) * static_cast<double>(scale));
    }

    Matrix<Scalar> d = delta;
    for (std::size_t l = n_layers; l-- > 0;) {
      const Matrix<Scalar>& a_in = l == 0 ? x : acts[l];
      grad[l].weight.noalias() = d * a_in.transpose();
      grad[l].bias = d.rowwise().sum();
      if (l > 0) {
        Matrix<Scalar> back = layers_[l].weight.transpose() * d;
        d = back.cwiseProduct((acts[l].array() > Scalar(0)).template cast<Scalar>().matrix());
      }
    }
    return loss;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  /// Parameters in layer order, each weight matrix column-major followed by its bias.
  std::vector<double> flatten() const { return flatten(layers_); }

  static std::vector<double> flatten(const Parameters<Scalar>& params) {
    std::vector<double> out;
    for (const auto& l : params) {
      for (Eigen::Index i = 0; i < l.weight.size(); ++i) out.push_back(static_cast<double>(l.weight.data()[i]));
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) out.push_back(static_cast<double>(l.bias(i)));
    }
    return out;
  }

  void assign(std::span<const double> values) {
    if (values.size() != parameter_count()) throw UnfoldError("parameter vector has the wrong length");
    std::size_t k = 0;
    for (auto& l : layers_) {
      for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = static_cast<Scalar>(values[k++]);
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = static_cast<Scalar>(values[k++]);
    }
  }

 private:
  Parameters<Scalar> layers_;
};

struct TrainingHistory {
  std::vector<double> train_loss;       // mean weighted loss per training row, per epoch
  std::vector<double> validation_loss;  // mean weighted loss per validation row, per epoch
  std::size_t best_epoch = 0;           // 0-based epoch whose parameters were kept
  double best_validation_loss = std::numeric_limits<double>::infinity();
};

/// Trained network plus the affine input standardization learned on its training rows.
template <typename Scalar = float>
struct Classifier {
  NetworkConfig config;
  Eigen::VectorXd input_shift;
  Eigen::VectorXd input_scale;
  Mlp<Scalar> network;
  TrainingHistory history;

  /// Freshly initialized network with identity input scaling.
  static Classifier untrained(const NetworkConfig& cfg) {
    cfg.validate();
    Classifier c;
    c.config = cfg;
    c.input_shift = Eigen::VectorXd::Zero(eidx(cfg.input_dim));
    c.input_scale = Eigen::VectorXd::Ones(eidx(cfg.input_dim));
    Rng rng(derive_seed(cfg.seed, {1}));
    c.network = Mlp<Scalar>(cfg.input_dim, cfg.hidden_layers, rng);
    return c;
  }

  Matrix<Scalar> prepare(const FeatureMatrix& x) const {
    if (static_cast<std::size_t>(x.rows()) != config.input_dim)
      throw UnfoldError("feature dimension " + std::to_string(x.rows()) + " does not match classifier input_dim " +
                        std::to_string(config.input_dim));
    return ((x.colwise() - input_shift).array().colwise() * input_scale.array()).matrix().template cast<Scalar>();
  }

  /// Logits for many points, evaluated in chunks.
  std::vector<double> logits(const FeatureMatrix& x) const {
    std::vector<double> out(static_cast<std::size_t>(x.cols()));
    constexpr Eigen::Index chunk = 8192;
    for (Eigen::Index start = 0; start < x.cols(); start += chunk) {
      const Eigen::Index n = std::min(chunk, x.cols() - start);
      const RowVector<Scalar> z = network.logits(prepare(x.middleCols(start, n)));
      for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(start + i)] = static_cast<double>(z(i));
    }
    return out;
  }

  /// Classifier output g(x), strictly inside (0, 1).
  std::vector<double> probabilities(const FeatureMatrix& x) const {
    auto p = logits(x);
    const double lo = std::numeric_limits<double>::min();
    const double hi = std::nextafter(1.0, 0.0);
    for (double& v : p) v = std::clamp(sigmoid(v), lo, hi);
    return p;
  }

  /// g/(1-g) with g clamped to [eps, 1-eps].
  std::vector<double> ratios(const FeatureMatrix& x) const {
    auto p = logits(x);
    const double eps = config.ratio_clamp_epsilon;
    for (double& v : p) {
      const double g = std::clamp(sigmoid(v), eps, 1.0 - eps);
      v = g / (1.0 - g);
    }
    return p;
  }

  double probability(std::span<const double> x) const { return probabilities(column(x)).front(); }
  double ratio(std::span<const double> x) const { return ratios(column(x)).front(); }

 private:
  static FeatureMatrix column(std::span<const double> x) {
    FeatureMatrix m(eidx(x.size()), 1);
    for (std::size_t i = 0; i < x.size(); ++i) m(eidx(i), 0) = x[i];
    return m;
  }
};

template <typename Scalar>
void check_dimensions(const Classifier<Scalar>& c, const EventSet& a, const EventSet& b) {
  for (const auto* set : {&a, &b})
    if (!set->empty() && set->dimension() != c.config.input_dim) throw UnfoldError("feature dimension mismatch");
}

/// -(sum_A w log g + sum_B w log(1-g)), accumulated in double.
template <typename Scalar>
double weighted_bce_loss(const Classifier<Scalar>& c, const EventSet& a, const EventSet& b) {
  check_dimensions(c, a, b);
  const auto za = c.logits(to_matrix(a.events, c.config.input_dim));
  const auto zb = c.logits(to_matrix(b.events, c.config.input_dim));
  double loss = 0.0;
  for (std::size_t i = 0; i < za.size(); ++i) loss += a.weights[i] * softplus(-za[i]);
  for (std::size_t i = 0; i < zb.size(); ++i) loss += b.weights[i] * softplus(zb[i]);
  return loss;
}

/// Gradient of weighted_bce_loss with respect to every network parameter (input scaling fixed).
template <typename Scalar>
Parameters<Scalar> loss_gradient(const Classifier<Scalar>& c, const EventSet& a, const EventSet& b) {
  check_dimensions(c, a, b);
  auto set = TrainingSet<double>::two_class(to_matrix(a.events, c.config.input_dim), a.weights,
                                            to_matrix(b.events, c.config.input_dim), b.weights);
  Parameters<Scalar> grad;
  FeatureMatrix scaled = ((set.features.colwise() - c.input_shift).array().colwise() * c.input_scale.array()).matrix();
  c.network.backprop(scaled.template cast<Scalar>(), set.weight_a.template cast<Scalar>(),
                     set.weight_b.template cast<Scalar>(), Scalar(1), grad);
  return grad;
}

namespace detail {

template <typename Scalar>
struct Adam {
  Parameters<Scalar> m, v;
  std::size_t step = 0;

  void update(Parameters<Scalar>& params, const Parameters<Scalar>& grad, const NetworkConfig& cfg) {
    if (m.empty()) {
      for (const auto& l : params) {
        m.push_back({Matrix<Scalar>::Zero(l.weight.rows(), l.weight.cols()), Vector<Scalar>::Zero(l.bias.size())});
        v.push_back({Matrix<Scalar>::Zero(l.weight.rows(), l.weight.cols()), Vector<Scalar>::Zero(l.bias.size())});
      }
    }
    ++step;
    const double t = static_cast<double>(step);
    const auto lr = static_cast<Scalar>(cfg.learning_rate * std::sqrt(1.0 - std::pow(cfg.beta2, t)) /
                                        (1.0 - std::pow(cfg.beta1, t)));
    const auto b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
    const auto eps = static_cast<Scalar>(cfg.adam_epsilon);
    auto apply = [&](auto& p, auto& mm, auto& vv, const auto& g) {
      mm = b1 * mm + (Scalar(1) - b1) * g;
      vv = (b2 * vv.array() + (Scalar(1) - b2) * g.array().square()).matrix();
      p.array() -= lr * mm.array() / (vv.array().sqrt() + eps);
    };
    for (std::size_t l = 0; l < params.size(); ++l) {
      apply(params[l].weight, m[l].weight, v[l].weight, grad[l].weight);
      apply(params[l].bias, m[l].bias, v[l].bias, grad[l].bias);
    }
  }
};

template <typename Scalar>
void gather(const TrainingSet<Scalar>& src, std::span<const std::size_t> rows, Matrix<Scalar>& x, Vector<Scalar>& wa,
            Vector<Scalar>& wb) {
  const auto n = eidx(rows.size());
  x.resize(src.features.rows(), n);
  wa.resize(n);
  wb.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto r = eidx(rows[static_cast<std::size_t>(j)]);
    x.col(j) = src.features.col(r);
    wa(j) = src.weight_a(r);
    wb(j) = src.weight_b(r);
  }
}

template <typename Scalar>
double mean_loss(const Mlp<Scalar>& net, const TrainingSet<Scalar>& set) {
  constexpr Eigen::Index chunk = 8192;
  double loss = 0.0;
  for (Eigen::Index start = 0; start < set.features.cols(); start += chunk) {
    const Eigen::Index n = std::min(chunk, set.features.cols() - start);
    const RowVector<Scalar> z = net.logits(set.features.middleCols(start, n));
    for (Eigen::Index i = 0; i < n; ++i) {
      const double zi = static_cast<double>(z(i));
      loss += static_cast<double>(set.weight_a(start + i)) * softplus(-zi) +
              static_cast<double>(set.weight_b(start + i)) * softplus(zi);
    }
  }
  return loss / static_cast<double>(set.features.cols());
}

}  // namespace detail

/// Mini-batch Adam on the weighted cross entropy with early stopping.
///
/// A seeded shuffle sends validation_fraction of the rows to a validation split. Inputs are
/// standardized with the mean and spread of the training rows. Each batch minimizes the mean
/// per-row loss; the last incomplete batch is kept. Training stops after `patience` epochs
/// without a new best validation loss and the best parameters are restored. With `warm_start`
/// the network starts from that classifier's parameters instead of a fresh initialization.
template <typename Scalar>
Classifier<Scalar> train(const TrainingSet<Scalar>& data, NetworkConfig cfg, const Classifier<Scalar>* warm_start = nullptr) {
  cfg.validate();
  if (data.dim() != cfg.input_dim)
    throw UnfoldError("training features have dimension " + std::to_string(data.dim()) + ", network expects " +
                      std::to_string(cfg.input_dim));
  const std::size_t n = data.rows();
  if (n < 2) throw UnfoldError("need at least two training rows");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(derive_seed(cfg.seed, {2}));
  std::shuffle(order.begin(), order.end(), split_rng.engine());
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(n))), 1, n - 1);
  const std::size_t n_train = n - n_val;

  Classifier<Scalar> c;
  c.config = cfg;
  {
    // Standardize with statistics of the training rows.
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(eidx(cfg.input_dim));
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(eidx(cfg.input_dim));
    for (std::size_t k = n_val; k < n; ++k) {
      const Eigen::VectorXd col = data.features.col(eidx(order[k])).template cast<double>();
      mean += col;
      sq += col.cwiseAbs2();
    }
    mean /= static_cast<double>(n_train);
    Eigen::VectorXd var = sq / static_cast<double>(n_train) - mean.cwiseAbs2();
    c.input_shift = mean;
    c.input_scale = var.unaryExpr([](double v) { return v > 1e-24 ? 1.0 / std::sqrt(v) : 1.0; });
  }
  if (warm_start) {
    if (warm_start->network.input_dim() != cfg.input_dim) throw UnfoldError("warm-start network has a different input_dim");
    c.network = warm_start->network;
  } else {
    Rng init_rng(derive_seed(cfg.seed, {1}));
    c.network = Mlp<Scalar>(cfg.input_dim, cfg.hidden_layers, init_rng);
  }

  auto scaled_subset = [&](std::span<const std::size_t> rows) {
    TrainingSet<Scalar> s;
    detail::gather(data, rows, s.features, s.weight_a, s.weight_b);
    const Vector<Scalar> shift = c.input_shift.template cast<Scalar>();
    const Vector<Scalar> scale = c.input_scale.template cast<Scalar>();
    s.features = ((s.features.colwise() - shift).array().colwise() * scale.array()).matrix();
    return s;
  };
  const TrainingSet<Scalar> validation = scaled_subset(std::span(order).first(n_val));
  const TrainingSet<Scalar> training = scaled_subset(std::span(order).subspan(n_val));

  std::vector<std::size_t> batch_order(n_train);
  std::iota(batch_order.begin(), batch_order.end(), std::size_t{0});
  Rng shuffle_rng(derive_seed(cfg.seed, {3}));
  detail::Adam<Scalar> adam;
  Parameters<Scalar> grad;
  Parameters<Scalar> best = c.network.layers();
  Matrix<Scalar> xb;
  Vector<Scalar> wab, wbb;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(batch_order.begin(), batch_order.end(), shuffle_rng.engine());
    double train_loss = 0.0;
    for (std::size_t start = 0; start < n_train; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n_train - start);
      detail::gather(training, std::span(batch_order).subspan(start, len), xb, wab, wbb);
      train_loss += c.network.backprop(xb, wab, wbb, Scalar(1) / static_cast<Scalar>(len), grad);
      adam.update(c.network.layers(), grad, cfg);
    }
    train_loss /= static_cast<double>(n_train);
    const double val_loss = detail::mean_loss(c.network, validation);
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss))
      throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) +
                          " (check for dominating negative weights)");
    c.history.train_loss.push_back(train_loss);
    c.history.validation_loss.push_back(val_loss);
    if (val_loss < c.history.best_validation_loss) {
      c.history.best_validation_loss = val_loss;
      c.history.best_epoch = epoch;
      best = c.network.layers();
    } else if (epoch - c.history.best_epoch >= cfg.patience) {
      break;
    }
  }
  c.network.layers() = std::move(best);
  return c;
}

/// Trains g to separate class A from class B; the resulting ratio estimates p_A / p_B.
inline Classifier<float> train(const EventSet& a, const EventSet& b, NetworkConfig cfg) {
  if (a.empty() || b.empty()) throw UnfoldError("both classes must be non-empty");
  return train(TrainingSet<float>::two_class(a, b), std::move(cfg));
}

template <typename Scalar>
nlohmann::json to_json(const Classifier<Scalar>& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : c.network.layers()) {
    std::vector<double> w(static_cast<std::size_t>(l.weight.size())), b(static_cast<std::size_t>(l.bias.size()));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<double>(l.weight.data()[i]);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<double>(l.bias(eidx(i)));
    layers.push_back({{"rows", l.weight.rows()}, {"cols", l.weight.cols()}, {"weight", w}, {"bias", b}});
  }
  nlohmann::json config;
  to_json(config, c.config);
  return {{"format", "unfoldkit.classifier/1"},
          {"scalar", sizeof(Scalar) == 4 ? "float32" : "float64"},
          {"config", config},
          {"input_shift", std::vector<double>(c.input_shift.data(), c.input_shift.data() + c.input_shift.size())},
          {"input_scale", std::vector<double>(c.input_scale.data(), c.input_scale.data() + c.input_scale.size())},
          {"layers", layers},
          {"history",
           {{"train_loss", c.history.train_loss},
            {"validation_loss", c.history.validation_loss},
            {"best_epoch", c.history.best_epoch}}}};
}

template <typename Scalar>
Classifier<Scalar> classifier_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "unfoldkit.classifier/1") throw ConfigError("unsupported classifier format");
    Classifier<Scalar> c;
    merge_json(j.at("config"), c.config, "config");
    auto shift = j.at("input_shift").get<std::vector<double>>();
    auto scale = j.at("input_scale").get<std::vector<double>>();
    c.input_shift = Eigen::Map<Eigen::VectorXd>(shift.data(), eidx(shift.size()));
    c.input_scale = Eigen::Map<Eigen::VectorXd>(scale.data(), eidx(scale.size()));
    for (const auto& lj : j.at("layers")) {
      Layer<Scalar> l;
      l.weight.resize(lj.at("rows").get<Eigen::Index>(), lj.at("cols").get<Eigen::Index>());
      const auto w = lj.at("weight").get<std::vector<double>>();
      const auto b = lj.at("bias").get<std::vector<double>>();
      if (w.size() != static_cast<std::size_t>(l.weight.size())) throw ConfigError("layer weight size mismatch");
      for (std::size_t i = 0; i < w.size(); ++i) l.weight.data()[i] = static_cast<Scalar>(w[i]);
      l.bias.resize(eidx(b.size()));
      for (std::size_t i = 0; i < b.size(); ++i) l.bias(eidx(i)) = static_cast<Scalar>(b[i]);
      c.network.layers().push_back(std::move(l));
    }
    const auto& h = j.at("history");
    c.history.train_loss = h.at("train_loss").get<std::vector<double>>();
    c.history.validation_loss = h.at("validation_loss").get<std::vector<double>>();
    c.history.best_epoch = h.at("best_epoch").get<std::size_t>();
    if (!c.history.validation_loss.empty()) c.history.best_validation_loss = c.history.validation_loss.at(c.history.best_epoch);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed classifier document: ") + e.what());
  }
}

}  // namespace unfoldkit::nn
