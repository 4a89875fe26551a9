#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace p300::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
// Sequence data is time-major: one [batch x features] matrix per timestep.
using TimeSeries = std::vector<Matrix>;

enum class Activation { identity, relu, sigmoid, tanh };

double apply_activation(Activation a, double z);
const char* activation_name(Activation a);

// Declarative layer description. `in`/`out` are the per-kind natural
// dimensions (hidden size for recurrent layers, filter count for
// temporal convolutions).
struct LayerSpec {
  enum class Kind : uint8_t {
    fully_connected,
    spatial_conv,
    temporal_conv,
    simple_rnn,
    lstm,
    sigmoid_unit,
  };

  Kind kind = Kind::fully_connected;
  Activation activation = Activation::identity;
  int in = 0;
  int out = 0;
  int kernel = 0;  // temporal conv only
  int stride = 0;  // temporal conv only

  static LayerSpec fully_connected(int in, int out, Activation act);
  static LayerSpec spatial_conv(int channels, int maps);
  static LayerSpec temporal_conv(int maps_in, int filters, int kernel,
                                 int stride, Activation act);
  static LayerSpec simple_rnn(int in, int hidden, Activation act);
  static LayerSpec lstm(int in, int hidden);
  static LayerSpec sigmoid_unit(int in);

  int64_t param_count() const;
  bool operator==(const LayerSpec&) const = default;
};

// One parameter tensor with its gradient accumulator and RMSProp cache.
struct ParamTensor {
  Matrix values;
  Matrix grad;
  Matrix opt_cache;

  ParamTensor(Eigen::Index rows, Eigen::Index cols)
      : values(Matrix::Zero(rows, cols)),
        grad(Matrix::Zero(rows, cols)),
        opt_cache(Matrix::Zero(rows, cols)) {}
};

// Ordered layer stack with a flat parameter store keyed by (layer, role).
struct Network {
  struct Param {
    int layer = 0;
    std::string role;  // "W", "U", "b"
    ParamTensor tensor;
  };

  std::vector<LayerSpec> layers;
  std::vector<Param> params;
  uint64_t rng_seed = 0;

  int64_t param_count() const;
  ParamTensor& tensor(int layer, const std::string& role);
  const ParamTensor& tensor(int layer, const std::string& role) const;
};

// Allocates parameters (seeded uniform +-sqrt(6/(fan_in+fan_out)) weights,
// zero biases) and checks that consecutive layer shapes chain.
Network build_network(const std::vector<LayerSpec>& layers, uint64_t seed);

// Non-owning view over a [batch x channels x samples] epoch block,
// channel-major within each epoch.
struct BatchView {
  const double* data = nullptr;
  int batch = 0;
  int channels = 0;
  int samples = 0;

  double at(int b, int c, int t) const {
    return data[(size_t(b) * size_t(channels) + size_t(c)) * size_t(samples) +
                size_t(t)];
  }
};

// Probability per sample, in (0,1).
Vector forward(const Network& net, const BatchView& batch);

// Mean batch loss; accumulates d(loss)/d(theta) into every parameter's
// grad (repeated calls accumulate). pos_weight scales the loss of
// label-1 samples (1.0 recovers the plain mean binary log loss).
double backward(Network& net, const BatchView& batch,
                const std::vector<double>& labels, double pos_weight = 1.0);

// d f(x|theta) / d x of the scalar network output, one row per sample,
// columns channel-major (c * samples + t).
Matrix input_gradient(const Network& net, const BatchView& batch);

// Binary log loss with probability clamped to [1e-12, 1 - 1e-12].
double bce_loss(double p, double y);
// Mean of per-sample losses; empty input is an error.
double batch_loss(const Vector& predictions, const std::vector<double>& labels);

void zero_grads(Network& net);
// cache <- rho*cache + (1-rho)*g^2; theta -= lr*g/(sqrt(cache)+eps); grads
// are zeroed afterwards.
void rmsprop_step(Network& net, double learning_rate, double rho = 0.9,
                  double eps = 1e-8);

struct GradCheckReport {
  double max_rel_err = 0.0;
  int worst_layer = -1;
  std::string worst_role;
  Eigen::Index worst_index = -1;
  double tolerance = 0.0;
  bool pass = false;
};

// Central finite differences on every parameter against analytic grads.
GradCheckReport grad_check(Network& net, const BatchView& batch,
                           const std::vector<double>& labels, double h = 1e-5,
                           double tolerance = 1e-4);
// Same check for d f/d x.
GradCheckReport input_grad_check(const Network& net, const BatchView& batch,
                                 double h = 1e-5, double tolerance = 1e-4);

// Weight checkpoint ("P3WT"): layer specs then f64 tensors. Loading
// rejects files whose spec list differs from what was saved.
void save_network(const Network& net, const std::string& path);
Network load_network(const std::string& path);

namespace detail {
// Single LSTM step; exposed for the recurrent-consistency property test.
// W: [in x 4h], U: [h x 4h], b: [1 x 4h]; gate order (f, i, o, g).
struct LstmState {
  Matrix y;  // [batch x h]
  Matrix c;  // [batch x h]
};
LstmState lstm_step(const Matrix& x, const LstmState& prev, const Matrix& W,
                    const Matrix& U, const Matrix& b);
Matrix rnn_step(const Matrix& x, const Matrix& y_prev, const Matrix& W,
                const Matrix& U, const Matrix& b, Activation act);
}  // namespace detail

}  // namespace p300::nn
