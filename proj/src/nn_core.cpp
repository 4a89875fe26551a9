#include "nn_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "errors.hpp"
#include "rng.hpp"

namespace p300::nn {

namespace {

constexpr double kProbEps = 1e-12;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

Matrix activate(Activation a, const Matrix& z) {
  switch (a) {
    case Activation::identity:
      return z;
    case Activation::relu:
      return z.cwiseMax(0.0);
    case Activation::sigmoid:
      return (1.0 / (1.0 + (-z.array()).exp())).matrix();
    case Activation::tanh:
      return z.array().tanh().matrix();
  }
  throw DataError("unknown activation");
}

// Derivative expressed through the activation output.
Matrix activate_prime(Activation a, const Matrix& y) {
  switch (a) {
    case Activation::identity:
      return Matrix::Ones(y.rows(), y.cols());
    case Activation::relu:
      return (y.array() > 0.0).cast<double>().matrix();
    case Activation::sigmoid:
      return (y.array() * (1.0 - y.array())).matrix();
    case Activation::tanh:
      return (1.0 - y.array().square()).matrix();
  }
  throw DataError("unknown activation");
}

const char* kind_name(LayerSpec::Kind k) {
  switch (k) {
    case LayerSpec::Kind::fully_connected: return "fully_connected";
    case LayerSpec::Kind::spatial_conv: return "spatial_conv";
    case LayerSpec::Kind::temporal_conv: return "temporal_conv";
    case LayerSpec::Kind::simple_rnn: return "simple_rnn";
    case LayerSpec::Kind::lstm: return "lstm";
    case LayerSpec::Kind::sigmoid_unit: return "sigmoid_unit";
  }
  return "?";
}

[[noreturn]] void structural_error(int layer, const LayerSpec& spec,
                                   const std::string& what) {
  throw DataError("layer " + std::to_string(layer) + " (" +
                  kind_name(spec.kind) + "): " + what);
}

}  // namespace

double apply_activation(Activation a, double z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::relu: return std::max(z, 0.0);
    case Activation::sigmoid: return sigmoid(z);
    case Activation::tanh: return std::tanh(z);
  }
  throw DataError("unknown activation");
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// LayerSpec
// ---------------------------------------------------------------------------

LayerSpec LayerSpec::fully_connected(int in, int out, Activation act) {
  return {Kind::fully_connected, act, in, out, 0, 0};
}
LayerSpec LayerSpec::spatial_conv(int channels, int maps) {
  return {Kind::spatial_conv, Activation::relu, channels, maps, 0, 0};
}
LayerSpec LayerSpec::temporal_conv(int maps_in, int filters, int kernel,
                                   int stride, Activation act) {
  return {Kind::temporal_conv, act, maps_in, filters, kernel, stride};
}
LayerSpec LayerSpec::simple_rnn(int in, int hidden, Activation act) {
  return {Kind::simple_rnn, act, in, hidden, 0, 0};
}
LayerSpec LayerSpec::lstm(int in, int hidden) {
  return {Kind::lstm, Activation::tanh, in, hidden, 0, 0};
}
LayerSpec LayerSpec::sigmoid_unit(int in) {
  return {Kind::sigmoid_unit, Activation::sigmoid, in, 1, 0, 0};
}

int64_t LayerSpec::param_count() const {
  const int64_t in64 = in, out64 = out;
  switch (kind) {
    case Kind::fully_connected: return (in64 + 1) * out64;
    case Kind::spatial_conv: return out64 * (in64 + 1);
    case Kind::temporal_conv: return out64 * (in64 * kernel + 1);
    case Kind::simple_rnn: return (in64 + out64 + 1) * out64;
    case Kind::lstm: return 4 * ((in64 + out64 + 1) * out64);
    case Kind::sigmoid_unit: return in64 + 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Network construction
// ---------------------------------------------------------------------------

int64_t Network::param_count() const {
  int64_t n = 0;
  for (const auto& l : layers) n += l.param_count();
  return n;
}

ParamTensor& Network::tensor(int layer, const std::string& role) {
  for (auto& p : params)
    if (p.layer == layer && p.role == role) return p.tensor;
  throw DataError("missing parameter tensor (" + std::to_string(layer) + ", " +
                  role + ")");
}

const ParamTensor& Network::tensor(int layer, const std::string& role) const {
  return const_cast<Network*>(this)->tensor(layer, role);
}

namespace {

void init_uniform(Matrix& m, Rng& rng, double limit) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      m(r, c) = rng.uniform(-limit, limit);
}

double glorot_limit(int fan_in, int fan_out) {
  return std::sqrt(6.0 / double(fan_in + fan_out));
}

}  // namespace

Network build_network(const std::vector<LayerSpec>& layers, uint64_t seed) {
  if (layers.empty()) throw ConfigError("build_network: no layers");

  // Static chain check where shapes are known before seeing data. A flat
  // output feeding a sequence layer can never work; flat widths that
  // depend on T are validated at forward time instead.
  enum class Mode { seq, flat_known, flat_from_time };
  Mode mode = Mode::seq;
  int feat = -1;  // unknown input width until forward
  for (size_t li = 0; li < layers.size(); ++li) {
    const auto& l = layers[li];
    const bool wants_seq = l.kind == LayerSpec::Kind::spatial_conv ||
                           l.kind == LayerSpec::Kind::temporal_conv ||
                           l.kind == LayerSpec::Kind::simple_rnn ||
                           l.kind == LayerSpec::Kind::lstm;
    if (wants_seq && mode != Mode::seq)
      structural_error(int(li), l, "needs sequential input but the previous "
                                   "layer emits a flat vector");
    if (l.in <= 0 || l.out <= 0)
      structural_error(int(li), l, "non-positive dimensions");
    if (l.kind == LayerSpec::Kind::temporal_conv && (l.kernel <= 0 || l.stride <= 0))
      structural_error(int(li), l, "kernel and stride must be positive");
    if (mode != Mode::flat_from_time && feat >= 0 && !wants_seq && feat != l.in &&
        mode == Mode::flat_known)
      structural_error(int(li), l,
                       "expected input width " + std::to_string(l.in) +
                           ", previous layer emits " + std::to_string(feat));
    if (wants_seq && feat >= 0 && l.in != feat)
      structural_error(int(li), l,
                       "expected " + std::to_string(l.in) +
                           " input channels, previous layer emits " +
                           std::to_string(feat));
    switch (l.kind) {
      case LayerSpec::Kind::spatial_conv:
        mode = Mode::seq;
        feat = l.out;
        break;
      case LayerSpec::Kind::temporal_conv:
        mode = Mode::flat_from_time;  // width = filters * positions
        feat = -1;
        break;
      case LayerSpec::Kind::simple_rnn:
      case LayerSpec::Kind::lstm:
        mode = Mode::flat_known;
        feat = l.out;
        break;
      case LayerSpec::Kind::fully_connected:
      case LayerSpec::Kind::sigmoid_unit:
        mode = Mode::flat_known;
        feat = l.out;
        break;
    }
  }

  Network net;
  net.layers = layers;
  net.rng_seed = seed;
  for (size_t li = 0; li < layers.size(); ++li) {
    const auto& l = layers[li];
    const int layer = int(li);
    auto add = [&](const std::string& role, Eigen::Index rows,
                   Eigen::Index cols) -> ParamTensor& {
      net.params.push_back({layer, role, ParamTensor(rows, cols)});
      return net.params.back().tensor;
    };
    auto fill = [&](ParamTensor& t, int ordinal, double limit) {
      Rng rng(derive_seed(seed, "init", uint64_t(layer), uint64_t(ordinal)));
      init_uniform(t.values, rng, limit);
    };
    switch (l.kind) {
      case LayerSpec::Kind::fully_connected:
      case LayerSpec::Kind::sigmoid_unit: {
        fill(add("W", l.in, l.out), 0, glorot_limit(l.in, l.out));
        add("b", 1, l.out);
        break;
      }
      case LayerSpec::Kind::spatial_conv: {
        fill(add("W", l.out, l.in), 0, glorot_limit(l.in, l.out));
        add("b", 1, l.out);
        break;
      }
      case LayerSpec::Kind::temporal_conv: {
        fill(add("W", l.out, l.in * l.kernel), 0,
             glorot_limit(l.in * l.kernel, l.out));
        add("b", 1, l.out);
        break;
      }
      case LayerSpec::Kind::simple_rnn: {
        fill(add("W", l.in, l.out), 0, glorot_limit(l.in, l.out));
        fill(add("U", l.out, l.out), 1, glorot_limit(l.out, l.out));
        add("b", 1, l.out);
        break;
      }
      case LayerSpec::Kind::lstm: {
        fill(add("W", l.in, 4 * l.out), 0, glorot_limit(l.in, l.out));
        fill(add("U", l.out, 4 * l.out), 1, glorot_limit(l.out, l.out));
        add("b", 1, 4 * l.out);
        break;
      }
    }
  }
  return net;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace {

struct Flow {
  TimeSeries seq;
  Matrix mat;
  bool is_seq = false;
};

struct LayerTrace {
  TimeSeries in_seq;
  Matrix in_mat;
  bool in_is_seq = false;
  bool flattened = false;  // seq input collapsed for a flat layer

  Matrix out_mat;     // fc / unit / temporal conv (post-activation)
  TimeSeries out_seq;  // spatial conv (post-activation)

  TimeSeries gates;      // lstm: [f i o g], activated, [B x 4h]
  TimeSeries cell;       // lstm c(t)
  TimeSeries tanh_cell;  // lstm tanh(c(t))
  TimeSeries y;          // lstm / rnn outputs per step
};

Matrix flatten_series(const TimeSeries& seq) {
  const Eigen::Index B = seq.front().rows();
  const Eigen::Index C = seq.front().cols();
  const Eigen::Index T = Eigen::Index(seq.size());
  Matrix m(B, C * T);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index c = 0; c < C; ++c) m.col(c * T + t) = seq[size_t(t)].col(c);
  return m;
}

TimeSeries unflatten_to_series(const Matrix& m, Eigen::Index C, Eigen::Index T) {
  TimeSeries seq(size_t(T), Matrix(m.rows(), C));
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index c = 0; c < C; ++c) seq[size_t(t)].col(c) = m.col(c * T + t);
  return seq;
}

TimeSeries batch_to_series(const BatchView& batch) {
  TimeSeries seq(size_t(batch.samples), Matrix(batch.batch, batch.channels));
  for (int t = 0; t < batch.samples; ++t) {
    Matrix& m = seq[size_t(t)];
    for (int b = 0; b < batch.batch; ++b)
      for (int c = 0; c < batch.channels; ++c) m(b, c) = batch.at(b, c, t);
  }
  return seq;
}

int temporal_positions(const LayerSpec& l, int T) {
  if (T < l.kernel) return 0;
  return (T - l.kernel) / l.stride + 1;
}

Flow forward_layer(const Network& net, int li, Flow&& x, LayerTrace& tr) {
  const LayerSpec& l = net.layers[size_t(li)];
  tr.in_is_seq = x.is_seq;

  const bool wants_seq = l.kind == LayerSpec::Kind::spatial_conv ||
                         l.kind == LayerSpec::Kind::temporal_conv ||
                         l.kind == LayerSpec::Kind::simple_rnn ||
                         l.kind == LayerSpec::Kind::lstm;
  if (wants_seq && !x.is_seq)
    structural_error(li, l, "needs sequential input");

  switch (l.kind) {
    case LayerSpec::Kind::fully_connected:
    case LayerSpec::Kind::sigmoid_unit: {
      Matrix in = x.is_seq ? flatten_series(x.seq) : std::move(x.mat);
      tr.flattened = x.is_seq;
      if (tr.flattened) tr.in_seq = std::move(x.seq);
      if (in.cols() != l.in)
        structural_error(li, l,
                         "expected input width " + std::to_string(l.in) +
                             ", got " + std::to_string(in.cols()));
      const Matrix& W = net.tensor(li, "W").values;
      const Matrix& b = net.tensor(li, "b").values;
      Matrix z = in * W;
      z.rowwise() += b.row(0);
      tr.out_mat = activate(l.activation, z);
      tr.in_mat = std::move(in);
      return {{}, tr.out_mat, false};
    }

    case LayerSpec::Kind::spatial_conv: {
      const Matrix& W = net.tensor(li, "W").values;  // [maps x channels]
      const Matrix& b = net.tensor(li, "b").values;
      tr.in_seq = std::move(x.seq);
      tr.out_seq.resize(tr.in_seq.size());
      for (size_t t = 0; t < tr.in_seq.size(); ++t) {
        if (tr.in_seq[t].cols() != l.in)
          structural_error(li, l,
                           "expected " + std::to_string(l.in) + " channels, got " +
                               std::to_string(tr.in_seq[t].cols()));
        Matrix z = tr.in_seq[t] * W.transpose();
        z.rowwise() += b.row(0);
        tr.out_seq[t] = activate(l.activation, z);
      }
      return {tr.out_seq, {}, true};
    }

    case LayerSpec::Kind::temporal_conv: {
      const Matrix& W = net.tensor(li, "W").values;  // [filters x maps*kernel]
      const Matrix& b = net.tensor(li, "b").values;
      tr.in_seq = std::move(x.seq);
      const int T = int(tr.in_seq.size());
      const int P = temporal_positions(l, T);
      if (P <= 0)
        structural_error(li, l, "input has " + std::to_string(T) +
                                    " steps, kernel needs " +
                                    std::to_string(l.kernel));
      const Eigen::Index B = tr.in_seq.front().rows();
      if (tr.in_seq.front().cols() != l.in)
        structural_error(li, l,
                         "expected " + std::to_string(l.in) + " maps, got " +
                             std::to_string(tr.in_seq.front().cols()));
      Matrix out(B, Eigen::Index(l.out) * P);
      Matrix patch(B, Eigen::Index(l.in) * l.kernel);
      for (int p = 0; p < P; ++p) {
        for (int c = 0; c < l.in; ++c)
          for (int k = 0; k < l.kernel; ++k)
            patch.col(Eigen::Index(c) * l.kernel + k) =
                tr.in_seq[size_t(p * l.stride + k)].col(c);
        Matrix z = patch * W.transpose();
        z.rowwise() += b.row(0);
        const Matrix y = activate(l.activation, z);
        for (int m = 0; m < l.out; ++m) out.col(Eigen::Index(m) * P + p) = y.col(m);
      }
      tr.out_mat = std::move(out);
      return {{}, tr.out_mat, false};
    }

    case LayerSpec::Kind::simple_rnn: {
      const Matrix& W = net.tensor(li, "W").values;
      const Matrix& U = net.tensor(li, "U").values;
      const Matrix& b = net.tensor(li, "b").values;
      tr.in_seq = std::move(x.seq);
      const Eigen::Index B = tr.in_seq.front().rows();
      if (tr.in_seq.front().cols() != l.in)
        structural_error(li, l, "input width mismatch");
      Matrix y_prev = Matrix::Zero(B, l.out);
      tr.y.resize(tr.in_seq.size());
      for (size_t t = 0; t < tr.in_seq.size(); ++t) {
        Matrix z = tr.in_seq[t] * W;
        z.noalias() += y_prev * U;
        z.rowwise() += b.row(0);
        tr.y[t] = activate(l.activation, z);
        y_prev = tr.y[t];
      }
      return {{}, tr.y.back(), false};
    }

    case LayerSpec::Kind::lstm: {
      const Matrix& W = net.tensor(li, "W").values;  // [in x 4h]
      const Matrix& U = net.tensor(li, "U").values;  // [h x 4h]
      const Matrix& b = net.tensor(li, "b").values;  // [1 x 4h]
      tr.in_seq = std::move(x.seq);
      const Eigen::Index B = tr.in_seq.front().rows();
      const int h = l.out;
      if (tr.in_seq.front().cols() != l.in)
        structural_error(li, l, "input width mismatch");
      Matrix y_prev = Matrix::Zero(B, h);
      Matrix c_prev = Matrix::Zero(B, h);
      const size_t T = tr.in_seq.size();
      tr.gates.resize(T);
      tr.cell.resize(T);
      tr.tanh_cell.resize(T);
      tr.y.resize(T);
      for (size_t t = 0; t < T; ++t) {
        Matrix z = tr.in_seq[t] * W;
        z.noalias() += y_prev * U;
        z.rowwise() += b.row(0);
        Matrix& gates = tr.gates[t];
        gates.resize(B, 4 * h);
        gates.leftCols(3 * h) =
            (1.0 / (1.0 + (-z.leftCols(3 * h).array()).exp())).matrix();
        gates.rightCols(h) = z.rightCols(h).array().tanh().matrix();
        const auto f = gates.middleCols(0 * h, h).array();
        const auto i = gates.middleCols(1 * h, h).array();
        const auto g = gates.middleCols(3 * h, h).array();
        tr.cell[t] = (f * c_prev.array() + i * g).matrix();
        tr.tanh_cell[t] = tr.cell[t].array().tanh().matrix();
        tr.y[t] =
            (gates.middleCols(2 * h, h).array() * tr.tanh_cell[t].array()).matrix();
        y_prev = tr.y[t];
        c_prev = tr.cell[t];
      }
      return {{}, tr.y.back(), false};
    }
  }
  throw DataError("unknown layer kind");
}

Flow backward_layer(const Network& net, int li, const LayerTrace& tr, Flow&& d,
                    Network* sink) {
  const LayerSpec& l = net.layers[size_t(li)];

  switch (l.kind) {
    case LayerSpec::Kind::fully_connected:
    case LayerSpec::Kind::sigmoid_unit: {
      const Matrix& W = net.tensor(li, "W").values;
      const Matrix dz =
          (d.mat.array() * activate_prime(l.activation, tr.out_mat).array())
              .matrix();
      if (sink) {
        sink->tensor(li, "W").grad.noalias() += tr.in_mat.transpose() * dz;
        sink->tensor(li, "b").grad.row(0) += dz.colwise().sum();
      }
      Matrix dx = dz * W.transpose();
      if (tr.flattened) {
        const Eigen::Index C = tr.in_seq.front().cols();
        const auto T = Eigen::Index(tr.in_seq.size());
        return {unflatten_to_series(dx, C, T), {}, true};
      }
      return {{}, std::move(dx), false};
    }

    case LayerSpec::Kind::spatial_conv: {
      const Matrix& W = net.tensor(li, "W").values;
      TimeSeries dx(tr.in_seq.size());
      for (size_t t = 0; t < tr.in_seq.size(); ++t) {
        const Matrix dz =
            (d.seq[t].array() * activate_prime(l.activation, tr.out_seq[t]).array())
                .matrix();
        if (sink) {
          sink->tensor(li, "W").grad.noalias() += dz.transpose() * tr.in_seq[t];
          sink->tensor(li, "b").grad.row(0) += dz.colwise().sum();
        }
        dx[t].noalias() = dz * W;
      }
      return {std::move(dx), {}, true};
    }

    case LayerSpec::Kind::temporal_conv: {
      const Matrix& W = net.tensor(li, "W").values;
      const int T = int(tr.in_seq.size());
      const int P = temporal_positions(l, T);
      const Eigen::Index B = tr.in_seq.front().rows();
      const Matrix dz_all =
          (d.mat.array() * activate_prime(l.activation, tr.out_mat).array())
              .matrix();
      TimeSeries dx(size_t(T), Matrix::Zero(B, l.in));
      Matrix patch(B, Eigen::Index(l.in) * l.kernel);
      Matrix dr(B, l.out);
      for (int p = 0; p < P; ++p) {
        for (int m = 0; m < l.out; ++m) dr.col(m) = dz_all.col(Eigen::Index(m) * P + p);
        if (sink) {
          for (int c = 0; c < l.in; ++c)
            for (int k = 0; k < l.kernel; ++k)
              patch.col(Eigen::Index(c) * l.kernel + k) =
                  tr.in_seq[size_t(p * l.stride + k)].col(c);
          sink->tensor(li, "W").grad.noalias() += dr.transpose() * patch;
          sink->tensor(li, "b").grad.row(0) += dr.colwise().sum();
        }
        const Matrix dpatch = dr * W;
        for (int c = 0; c < l.in; ++c)
          for (int k = 0; k < l.kernel; ++k)
            dx[size_t(p * l.stride + k)].col(c) +=
                dpatch.col(Eigen::Index(c) * l.kernel + k);
      }
      return {std::move(dx), {}, true};
    }

    case LayerSpec::Kind::simple_rnn: {
      const Matrix& W = net.tensor(li, "W").values;
      const Matrix& U = net.tensor(li, "U").values;
      const int T = int(tr.in_seq.size());
      TimeSeries dx(static_cast<size_t>(T));
      Matrix dy = std::move(d.mat);
      for (int t = T - 1; t >= 0; --t) {
        const Matrix dz =
            (dy.array() * activate_prime(l.activation, tr.y[size_t(t)]).array())
                .matrix();
        if (sink) {
          sink->tensor(li, "W").grad.noalias() += tr.in_seq[size_t(t)].transpose() * dz;
          sink->tensor(li, "b").grad.row(0) += dz.colwise().sum();
          if (t > 0)
            sink->tensor(li, "U").grad.noalias() += tr.y[size_t(t - 1)].transpose() * dz;
        }
        dx[size_t(t)].noalias() = dz * W.transpose();
        dy.noalias() = dz * U.transpose();  // reaches y(t-1)
      }
      return {std::move(dx), {}, true};
    }

    case LayerSpec::Kind::lstm: {
      const Matrix& W = net.tensor(li, "W").values;
      const Matrix& U = net.tensor(li, "U").values;
      const int T = int(tr.in_seq.size());
      const int h = l.out;
      const Eigen::Index B = tr.in_seq.front().rows();
      TimeSeries dx(static_cast<size_t>(T));
      Matrix dy = std::move(d.mat);
      Matrix dc = Matrix::Zero(B, h);
      Matrix dz(B, 4 * h);
      for (int t = T - 1; t >= 0; --t) {
        const auto& gates = tr.gates[size_t(t)];
        const auto f = gates.middleCols(0 * h, h).array();
        const auto i = gates.middleCols(1 * h, h).array();
        const auto o = gates.middleCols(2 * h, h).array();
        const auto g = gates.middleCols(3 * h, h).array();
        const auto tc = tr.tanh_cell[size_t(t)].array();

        const Eigen::ArrayXXd d_o = dy.array() * tc;
        dc.array() += dy.array() * o * (1.0 - tc.square());
        const Eigen::ArrayXXd d_g = dc.array() * i;
        const Eigen::ArrayXXd d_i = dc.array() * g;

        dz.middleCols(1 * h, h) = (d_i * i * (1.0 - i)).matrix();
        dz.middleCols(2 * h, h) = (d_o * o * (1.0 - o)).matrix();
        dz.middleCols(3 * h, h) = (d_g * (1.0 - g.square())).matrix();
        if (t > 0) {
          const auto c_prev = tr.cell[size_t(t - 1)].array();
          dz.middleCols(0 * h, h) = (dc.array() * c_prev * f * (1.0 - f)).matrix();
        } else {
          dz.middleCols(0 * h, h).setZero();  // c(-1) = 0
        }

        if (sink) {
          sink->tensor(li, "W").grad.noalias() += tr.in_seq[size_t(t)].transpose() * dz;
          sink->tensor(li, "b").grad.row(0) += dz.colwise().sum();
          if (t > 0)
            sink->tensor(li, "U").grad.noalias() += tr.y[size_t(t - 1)].transpose() * dz;
        }
        dx[size_t(t)].noalias() = dz * W.transpose();
        dy.noalias() = dz * U.transpose();
        dc = (dc.array() * f).matrix();
      }
      return {std::move(dx), {}, true};
    }
  }
  throw DataError("unknown layer kind");
}

Flow run_forward(const Network& net, const BatchView& batch,
                 std::vector<LayerTrace>* traces) {
  if (batch.batch <= 0 || batch.channels <= 0 || batch.samples <= 0)
    throw DataError("forward: empty batch");
  Flow flow{batch_to_series(batch), {}, true};
  for (int li = 0; li < int(net.layers.size()); ++li) {
    LayerTrace local;
    LayerTrace& tr = traces ? (*traces)[size_t(li)] : local;
    flow = forward_layer(net, li, std::move(flow), tr);
  }
  if (flow.is_seq || flow.mat.cols() != 1)
    throw DataError("forward: network does not end in a scalar output");
  return flow;
}

double clamp_prob(double p) {
  return std::clamp(p, kProbEps, 1.0 - kProbEps);
}

}  // namespace

Vector forward(const Network& net, const BatchView& batch) {
  return run_forward(net, batch, nullptr).mat.col(0);
}

double bce_loss(double p, double y) {
  const double q = clamp_prob(p);
  return -(y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
}

double batch_loss(const Vector& predictions, const std::vector<double>& labels) {
  if (predictions.size() == 0) throw DataError("batch_loss: empty batch");
  if (size_t(predictions.size()) != labels.size())
    throw DataError("batch_loss: prediction/label size mismatch");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < predictions.size(); ++i)
    acc += bce_loss(predictions[i], labels[size_t(i)]);
  return acc / double(predictions.size());
}

double backward(Network& net, const BatchView& batch,
                const std::vector<double>& labels, double pos_weight) {
  if (size_t(batch.batch) != labels.size())
    throw DataError("backward: batch/label size mismatch");
  for (const double y : labels)
    if (y != 0.0 && y != 1.0) throw DataError("backward: labels must be 0/1");

  std::vector<LayerTrace> traces(net.layers.size());
  const Flow out = run_forward(net, batch, &traces);
  const Eigen::Index B = out.mat.rows();

  double loss = 0.0;
  Matrix dp(B, 1);
  for (Eigen::Index b = 0; b < B; ++b) {
    const double y = labels[size_t(b)];
    const double w = (y == 1.0) ? pos_weight : 1.0;
    const double q = clamp_prob(out.mat(b, 0));
    loss += w * bce_loss(out.mat(b, 0), y);
    dp(b, 0) = w * (q - y) / (q * (1.0 - q)) / double(B);
  }
  loss /= double(B);

  Flow d{{}, std::move(dp), false};
  for (int li = int(net.layers.size()) - 1; li >= 0; --li)
    d = backward_layer(net, li, traces[size_t(li)], std::move(d), &net);
  return loss;
}

Matrix input_gradient(const Network& net, const BatchView& batch) {
  std::vector<LayerTrace> traces(net.layers.size());
  run_forward(net, batch, &traces);
  Flow d{{}, Matrix::Ones(batch.batch, 1), false};
  for (int li = int(net.layers.size()) - 1; li >= 0; --li)
    d = backward_layer(net, li, traces[size_t(li)], std::move(d), nullptr);

  if (!d.is_seq)
    return d.mat;  // first layer consumed flat input; layout already c*T+t
  Matrix out(batch.batch, Eigen::Index(batch.channels) * batch.samples);
  for (int t = 0; t < batch.samples; ++t)
    for (int c = 0; c < batch.channels; ++c)
      out.col(Eigen::Index(c) * batch.samples + t) = d.seq[size_t(t)].col(c);
  return out;
}

void zero_grads(Network& net) {
  for (auto& p : net.params) p.tensor.grad.setZero();
}

void rmsprop_step(Network& net, double learning_rate, double rho, double eps) {
  for (auto& p : net.params) {
    auto& t = p.tensor;
    t.opt_cache = rho * t.opt_cache + (1.0 - rho) * t.grad.cwiseProduct(t.grad);
    t.values.array() -=
        learning_rate * t.grad.array() / (t.opt_cache.array().sqrt() + eps);
    t.grad.setZero();
  }
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

GradCheckReport grad_check(Network& net, const BatchView& batch,
                           const std::vector<double>& labels, double h,
                           double tolerance) {
  zero_grads(net);
  backward(net, batch, labels);

  GradCheckReport report;
  report.tolerance = tolerance;
  auto loss_at = [&]() { return batch_loss(forward(net, batch), labels); };

  for (auto& p : net.params) {
    Matrix& v = p.tensor.values;
    const Matrix& g = p.tensor.grad;
    for (Eigen::Index idx = 0; idx < v.size(); ++idx) {
      const double saved = v(idx);
      v(idx) = saved + h;
      const double lp = loss_at();
      v(idx) = saved - h;
      const double lm = loss_at();
      v(idx) = saved;
      const double numeric = (lp - lm) / (2.0 * h);
      const double analytic = g(idx);
      const double rel = std::abs(numeric - analytic) /
                         std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_layer = p.layer;
        report.worst_role = p.role;
        report.worst_index = idx;
      }
    }
  }
  zero_grads(net);
  report.pass = report.max_rel_err < tolerance;
  return report;
}

GradCheckReport input_grad_check(const Network& net, const BatchView& batch,
                                 double h, double tolerance) {
  const Matrix analytic = input_gradient(net, batch);

  std::vector<double> mutable_data(
      batch.data, batch.data + size_t(batch.batch) * size_t(batch.channels) *
                                   size_t(batch.samples));
  BatchView view{mutable_data.data(), batch.batch, batch.channels, batch.samples};

  GradCheckReport report;
  report.tolerance = tolerance;
  const size_t per_sample = size_t(batch.channels) * size_t(batch.samples);
  for (int b = 0; b < batch.batch; ++b) {
    for (size_t j = 0; j < per_sample; ++j) {
      double& cell = mutable_data[size_t(b) * per_sample + j];
      const double saved = cell;
      cell = saved + h;
      const double fp = forward(net, view)(b);
      cell = saved - h;
      const double fm = forward(net, view)(b);
      cell = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double ana = analytic(b, Eigen::Index(j));
      const double rel = std::abs(numeric - ana) /
                         std::max({std::abs(numeric), std::abs(ana), 1e-6});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_layer = -1;
        report.worst_role = "input";
        report.worst_index = Eigen::Index(j);
      }
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

namespace {

constexpr char kWeightMagic[4] = {'P', '3', 'W', 'T'};
constexpr uint32_t kWeightVersion = 1;

template <typename T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

template <typename T>
T take(const std::string& bytes, size_t& pos, const std::string& path) {
  if (pos + sizeof(T) > bytes.size())
    throw DataError("load_network: truncated checkpoint: " + path);
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void save_network(const Network& net, const std::string& path) {
  std::string buf;
  buf.append(kWeightMagic, 4);
  put<uint32_t>(buf, kWeightVersion);
  put<uint32_t>(buf, uint32_t(net.layers.size()));
  for (const auto& l : net.layers) {
    put<uint8_t>(buf, uint8_t(l.kind));
    put<uint8_t>(buf, uint8_t(l.activation));
    put<int32_t>(buf, l.in);
    put<int32_t>(buf, l.out);
    put<int32_t>(buf, l.kernel);
    put<int32_t>(buf, l.stride);
  }
  put<uint32_t>(buf, uint32_t(net.params.size()));
  for (const auto& p : net.params) {
    put<int32_t>(buf, p.layer);
    put<uint8_t>(buf, uint8_t(p.role.size()));
    buf.append(p.role);
    put<uint64_t>(buf, uint64_t(p.tensor.values.rows()));
    put<uint64_t>(buf, uint64_t(p.tensor.values.cols()));
    for (Eigen::Index r = 0; r < p.tensor.values.rows(); ++r)
      for (Eigen::Index c = 0; c < p.tensor.values.cols(); ++c)
        put<double>(buf, p.tensor.values(r, c));
  }

  const std::filesystem::path target(path);
  if (target.has_parent_path())
    std::filesystem::create_directories(target.parent_path());
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("save_network: cannot open " + tmp.string());
    f.write(buf.data(), std::streamsize(buf.size()));
    if (!f) throw DataError("save_network: write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, target);
}

Network load_network(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("load_network: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  size_t pos = 0;

  char magic[4];
  for (auto& c : magic) c = take<char>(bytes, pos, path);
  if (std::memcmp(magic, kWeightMagic, 4) != 0)
    throw DataError("load_network: bad magic in " + path);
  const auto version = take<uint32_t>(bytes, pos, path);
  if (version != kWeightVersion)
    throw DataError("load_network: unsupported checkpoint version " +
                    std::to_string(version));

  const auto n_layers = take<uint32_t>(bytes, pos, path);
  std::vector<LayerSpec> layers(n_layers);
  for (auto& l : layers) {
    l.kind = LayerSpec::Kind(take<uint8_t>(bytes, pos, path));
    l.activation = Activation(take<uint8_t>(bytes, pos, path));
    l.in = take<int32_t>(bytes, pos, path);
    l.out = take<int32_t>(bytes, pos, path);
    l.kernel = take<int32_t>(bytes, pos, path);
    l.stride = take<int32_t>(bytes, pos, path);
  }

  Network net = build_network(layers, 0);
  const auto n_params = take<uint32_t>(bytes, pos, path);
  if (n_params != net.params.size())
    throw DataError("load_network: tensor list does not match the layer specs");
  for (auto& p : net.params) {
    const auto layer = take<int32_t>(bytes, pos, path);
    const auto role_len = take<uint8_t>(bytes, pos, path);
    if (pos + role_len > bytes.size())
      throw DataError("load_network: truncated checkpoint: " + path);
    const std::string role = bytes.substr(pos, role_len);
    pos += role_len;
    const auto rows = take<uint64_t>(bytes, pos, path);
    const auto cols = take<uint64_t>(bytes, pos, path);
    if (layer != p.layer || role != p.role ||
        rows != uint64_t(p.tensor.values.rows()) ||
        cols != uint64_t(p.tensor.values.cols()))
      throw DataError("load_network: tensor " + role + "@" +
                      std::to_string(layer) +
                      " does not match the declared layer specs");
    for (Eigen::Index r = 0; r < p.tensor.values.rows(); ++r)
      for (Eigen::Index c = 0; c < p.tensor.values.cols(); ++c)
        p.tensor.values(r, c) = take<double>(bytes, pos, path);
    p.tensor.grad.setZero();
    p.tensor.opt_cache.setZero();
  }
  if (pos != bytes.size())
    throw DataError("load_network: trailing bytes in " + path);
  return net;
}

// ---------------------------------------------------------------------------
// Single-step references
// ---------------------------------------------------------------------------

namespace detail {

LstmState lstm_step(const Matrix& x, const LstmState& prev, const Matrix& W,
                    const Matrix& U, const Matrix& b) {
  const int h = int(U.rows());
  Matrix z = x * W;
  z.noalias() += prev.y * U;
  z.rowwise() += b.row(0);
  Matrix gates(z.rows(), 4 * h);
  gates.leftCols(3 * h) =
      (1.0 / (1.0 + (-z.leftCols(3 * h).array()).exp())).matrix();
  gates.rightCols(h) = z.rightCols(h).array().tanh().matrix();
  LstmState out;
  out.c = (gates.middleCols(0, h).array() * prev.c.array() +
           gates.middleCols(h, h).array() * gates.middleCols(3 * h, h).array())
              .matrix();
  out.y = (gates.middleCols(2 * h, h).array() * out.c.array().tanh()).matrix();
  return out;
}

Matrix rnn_step(const Matrix& x, const Matrix& y_prev, const Matrix& W,
                const Matrix& U, const Matrix& b, Activation act) {
  Matrix z = x * W;
  z.noalias() += y_prev * U;
  z.rowwise() += b.row(0);
  return activate(act, z);
}

}  // namespace detail

}  // namespace p300::nn
