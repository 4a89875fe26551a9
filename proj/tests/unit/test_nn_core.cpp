#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "errors.hpp"
#include "nn_core.hpp"
#include "rng.hpp"

using namespace p300;
using namespace p300::nn;

namespace {

// Random batch with mixed labels for gradient checks.
struct TestBatch {
  std::vector<double> data;
  std::vector<double> labels;
  int batch, channels, samples;

  TestBatch(int b, int c, int t, uint64_t seed) : batch(b), channels(c), samples(t) {
    Rng rng(seed);
    data.resize(size_t(b) * size_t(c) * size_t(t));
    for (auto& v : data) v = rng.normal();
    labels.resize(size_t(b));
    for (size_t i = 0; i < labels.size(); ++i) labels[i] = double(i % 2);
  }
  BatchView view() const { return {data.data(), batch, channels, samples}; }
};

void set_all(Network& net, int layer, const std::string& role, double v) {
  net.tensor(layer, role).values.setConstant(v);
}

}  // namespace

TEST_CASE("param_count closed forms") {
  CHECK(LayerSpec::fully_connected(3, 2, Activation::identity).param_count() == 8);
  CHECK(LayerSpec::spatial_conv(55, 10).param_count() == 560);
  CHECK(LayerSpec::temporal_conv(10, 13, 5, 5, Activation::relu).param_count() == 663);
  CHECK(LayerSpec::simple_rnn(5, 7, Activation::tanh).param_count() == (5 + 7 + 1) * 7);
  CHECK(LayerSpec::lstm(55, 30).param_count() == 4 * ((55 + 30 + 1) * 30));
  CHECK(LayerSpec::sigmoid_unit(30).param_count() == 31);

  // Table-level sums through a network.
  const Network small =
      build_network({LayerSpec::lstm(55, 30), LayerSpec::sigmoid_unit(30)}, 0);
  CHECK(small.param_count() == 10351);
  const Network large =
      build_network({LayerSpec::lstm(55, 100), LayerSpec::sigmoid_unit(100)}, 0);
  CHECK(large.param_count() == 62501);
}

TEST_CASE("forward: zero-weight fixed points") {
  SUBCASE("zero LSTM emits zero, so the unit sees sigmoid(0) = 0.5") {
    Network net =
        build_network({LayerSpec::lstm(3, 4), LayerSpec::sigmoid_unit(4)}, 1);
    for (auto& p : net.params) p.tensor.values.setZero();
    const TestBatch batch(2, 3, 5, 11);
    const Vector p = forward(net, batch.view());
    CHECK(p(0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p(1) == doctest::Approx(0.5).epsilon(1e-15));
  }

  SUBCASE("zero sigmoid unit gives 0.5 for any input") {
    Network net = build_network({LayerSpec::sigmoid_unit(6)}, 1);
    for (auto& p : net.params) p.tensor.values.setZero();
    const TestBatch batch(3, 2, 3, 12);
    const Vector p = forward(net, batch.view());
    for (int b = 0; b < 3; ++b) CHECK(p(b) == doctest::Approx(0.5).epsilon(1e-15));
  }
}

TEST_CASE("forward: LSTM single-step hand reference") {
  // in = 1, hidden = 1, W = 0.1 for every gate, U = 0, b = 0, x = 1.
  Network net = build_network({LayerSpec::lstm(1, 1)}, 0);
  set_all(net, 0, "W", 0.1);
  set_all(net, 0, "U", 0.0);
  set_all(net, 0, "b", 0.0);
  const double x = 1.0;
  const BatchView view{&x, 1, 1, 1};
  const double y = forward(net, view)(0);

  // Step-by-step reference with scalar formulas.
  const double gate = 1.0 / (1.0 + std::exp(-0.1));
  const double cand = std::tanh(0.1);
  const double c = gate * cand;
  const double y_ref = gate * std::tanh(c);
  CHECK(gate == doctest::Approx(0.52497918747894001).epsilon(1e-15));
  CHECK(cand == doctest::Approx(0.099667994624955819).epsilon(1e-15));
  CHECK(c == doctest::Approx(0.052323622835864669).epsilon(1e-15));
  CHECK(y == doctest::Approx(y_ref).epsilon(1e-15));
  CHECK(y == doctest::Approx(0.027443772737388121).epsilon(1e-12));
}

TEST_CASE("forward is pure: repeated calls agree bitwise") {
  Network net = build_network({LayerSpec::lstm(4, 3), LayerSpec::sigmoid_unit(3)}, 5);
  const TestBatch batch(3, 4, 6, 21);
  const Vector a = forward(net, batch.view());
  const Vector b = forward(net, batch.view());
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("recurrent consistency: sequence run equals threaded single steps") {
  const int T = 6, B = 2;
  SUBCASE("lstm") {
    Network net = build_network({LayerSpec::lstm(3, 4)}, 9);
    // Make the final output width 1 irrelevant: drive layer directly.
    const TestBatch batch(B, 3, T, 31);
    TimeSeries steps(size_t(T), Matrix(B, 3));
    for (int t = 0; t < T; ++t)
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < 3; ++c) steps[size_t(t)](b, c) = batch.view().at(b, c, t);

    detail::LstmState st{Matrix::Zero(B, 4), Matrix::Zero(B, 4)};
    for (int t = 0; t < T; ++t)
      st = detail::lstm_step(steps[size_t(t)], st, net.tensor(0, "W").values,
                             net.tensor(0, "U").values, net.tensor(0, "b").values);

    Network probe = build_network({LayerSpec::lstm(3, 4), LayerSpec::sigmoid_unit(4)}, 9);
    probe.tensor(0, "W").values = net.tensor(0, "W").values;
    probe.tensor(0, "U").values = net.tensor(0, "U").values;
    probe.tensor(0, "b").values = net.tensor(0, "b").values;
    // Identity-like readout: weights picking each hidden unit in turn.
    for (int hidden = 0; hidden < 4; ++hidden) {
      probe.tensor(1, "W").values.setZero();
      probe.tensor(1, "W").values(hidden, 0) = 1.0;
      probe.tensor(1, "b").values.setZero();
      const Vector p = forward(probe, batch.view());
      for (int b = 0; b < B; ++b) {
        const double expected = 1.0 / (1.0 + std::exp(-st.y(b, hidden)));
        CHECK(p(b) == doctest::Approx(expected).epsilon(1e-14));
      }
    }
  }

  SUBCASE("simple rnn") {
    Network net = build_network(
        {LayerSpec::simple_rnn(2, 3, Activation::tanh), LayerSpec::sigmoid_unit(3)}, 4);
    const TestBatch batch(B, 2, T, 33);
    TimeSeries steps(size_t(T), Matrix(B, 2));
    for (int t = 0; t < T; ++t)
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < 2; ++c) steps[size_t(t)](b, c) = batch.view().at(b, c, t);
    Matrix y = Matrix::Zero(B, 3);
    for (int t = 0; t < T; ++t)
      y = detail::rnn_step(steps[size_t(t)], y, net.tensor(0, "W").values,
                           net.tensor(0, "U").values, net.tensor(0, "b").values,
                           Activation::tanh);
    for (int hidden = 0; hidden < 3; ++hidden) {
      net.tensor(1, "W").values.setZero();
      net.tensor(1, "W").values(hidden, 0) = 1.0;
      net.tensor(1, "b").values.setZero();
      const Vector p = forward(net, batch.view());
      for (int b = 0; b < B; ++b)
        CHECK(p(b) == doctest::Approx(1.0 / (1.0 + std::exp(-y(b, hidden))))
                          .epsilon(1e-14));
    }
  }
}

TEST_CASE("bce_loss examples") {
  CHECK(bce_loss(0.5, 1.0) == doctest::Approx(0.6931471805599453).epsilon(1e-12));
  CHECK(bce_loss(1.0 - 1e-12, 1.0) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(bce_loss(0.9, 0.0) == doctest::Approx(2.3025850929940455).epsilon(1e-12));
  // Non-negative, clamped at the boundary.
  CHECK(bce_loss(0.0, 0.0) >= 0.0);
  CHECK(bce_loss(1.0, 1.0) >= 0.0);
  CHECK(bce_loss(1.0, 1.0) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("batch_loss: means and edge cases") {
  Vector p(1);
  p << 0.7;
  CHECK(batch_loss(p, {1.0}) == doctest::Approx(bce_loss(0.7, 1.0)));

  Vector p2(2);
  p2 << 0.7, 0.2;
  const double expect = (bce_loss(0.7, 1.0) + bce_loss(0.2, 0.0)) / 2.0;
  CHECK(batch_loss(p2, {1.0, 0.0}) == doctest::Approx(expect).epsilon(1e-15));

  Vector p4(4);
  p4 << 0.7, 0.2, 0.7, 0.2;
  CHECK(batch_loss(p4, {1.0, 0.0, 1.0, 0.0}) == doctest::Approx(expect).epsilon(1e-15));

  CHECK_THROWS_AS((void)batch_loss(Vector(), {}), DataError);
}

TEST_CASE("backward: closed-form gradient of BCE through the sigmoid") {
  // Single sigmoid unit, zero weights: p = 0.5; d loss / d z = p - y = -0.5,
  // and the bias gradient is exactly d loss / d z.
  Network net = build_network({LayerSpec::sigmoid_unit(4)}, 3);
  for (auto& p : net.params) p.tensor.values.setZero();
  const TestBatch batch(1, 2, 2, 17);
  zero_grads(net);
  const double loss = backward(net, batch.view(), {1.0});
  CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(net.tensor(0, "b").grad(0, 0) == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("backward: duplicated batch leaves the mean-loss gradient unchanged") {
  Network net = build_network(
      {LayerSpec::spatial_conv(3, 2), LayerSpec::lstm(2, 3), LayerSpec::sigmoid_unit(3)},
      8);
  const TestBatch batch(3, 3, 4, 23);

  zero_grads(net);
  backward(net, batch.view(), batch.labels);
  const Matrix g1 = net.tensor(1, "W").grad;

  std::vector<double> doubled(batch.data);
  doubled.insert(doubled.end(), batch.data.begin(), batch.data.end());
  std::vector<double> labels2(batch.labels);
  labels2.insert(labels2.end(), batch.labels.begin(), batch.labels.end());
  const BatchView view2{doubled.data(), 2 * batch.batch, batch.channels, batch.samples};
  zero_grads(net);
  backward(net, view2, labels2);
  const Matrix g2 = net.tensor(1, "W").grad;

  CHECK((g1 - g2).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("backward: repeated calls accumulate") {
  Network net = build_network({LayerSpec::sigmoid_unit(4)}, 3);
  const TestBatch batch(2, 2, 2, 29);
  zero_grads(net);
  backward(net, batch.view(), batch.labels);
  const Matrix once = net.tensor(0, "W").grad;
  backward(net, batch.view(), batch.labels);
  CHECK((net.tensor(0, "W").grad - 2.0 * once).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("gradient check: every layer kind, random shapes, 10 seeds") {
  const std::vector<std::vector<LayerSpec>> stacks = {
      {LayerSpec::fully_connected(18, 7, Activation::relu),
       LayerSpec::fully_connected(7, 4, Activation::tanh),
       LayerSpec::sigmoid_unit(4)},
      {LayerSpec::spatial_conv(3, 4),
       LayerSpec::temporal_conv(4, 3, 2, 2, Activation::relu),
       LayerSpec::fully_connected(9, 5, Activation::sigmoid),
       LayerSpec::sigmoid_unit(5)},
      {LayerSpec::simple_rnn(3, 4, Activation::tanh), LayerSpec::sigmoid_unit(4)},
      {LayerSpec::simple_rnn(3, 4, Activation::relu), LayerSpec::sigmoid_unit(4)},
      {LayerSpec::lstm(3, 4), LayerSpec::sigmoid_unit(4)},
      // Smooth twins of the conv stack: relu kinks are excluded from the
      // frozen seeds above, tanh covers the same code paths everywhere.
      {LayerSpec::spatial_conv(3, 4),
       LayerSpec::temporal_conv(4, 3, 2, 2, Activation::tanh),
       LayerSpec::fully_connected(9, 5, Activation::tanh),
       LayerSpec::sigmoid_unit(5)},
  };
  for (size_t s = 0; s < stacks.size(); ++s) {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      Network net = build_network(stacks[s], seed * 13 + 1);
      const TestBatch batch(3, 3, 6, seed * 101 + 2);
      auto report = grad_check(net, batch.view(), batch.labels);
      INFO("stack ", s, " seed ", seed, " worst ", report.worst_role, "@",
           report.worst_layer);
      CHECK(report.pass);
      CHECK(report.max_rel_err < 1e-4);

      const auto input_report = input_grad_check(net, batch.view());
      INFO("input grad stack ", s, " seed ", seed);
      CHECK(input_report.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("grad_check: zero tolerance always fails") {
  Network net = build_network({LayerSpec::sigmoid_unit(4)}, 2);
  const TestBatch batch(2, 2, 2, 5);
  const auto report = grad_check(net, batch.view(), batch.labels, 1e-5, 0.0);
  CHECK_FALSE(report.pass);
}

TEST_CASE("rmsprop") {
  Network net = build_network({LayerSpec::sigmoid_unit(2)}, 1);

  SUBCASE("zero gradient leaves parameters unchanged") {
    const Matrix before = net.tensor(0, "W").values;
    zero_grads(net);
    rmsprop_step(net, 0.1);
    CHECK((net.tensor(0, "W").values - before).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("first step matches the hand computation") {
    // cache = 0.1, delta = -0.001 / (sqrt(0.1) + 1e-8)
    net.tensor(0, "W").values.setConstant(1.0);
    net.tensor(0, "W").grad.setConstant(1.0);
    rmsprop_step(net, 0.001, 0.9, 1e-8);
    CHECK(net.tensor(0, "W").opt_cache(0, 0) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(net.tensor(0, "W").values(0, 0) ==
          doctest::Approx(1.0 - 0.0031622775601683824).epsilon(1e-12));
    // Gradients are zeroed by the step.
    CHECK(net.tensor(0, "W").grad.cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("lr = 0 is the identity on values") {
    const Matrix before = net.tensor(0, "W").values;
    net.tensor(0, "W").grad.setConstant(0.3);
    rmsprop_step(net, 0.0);
    CHECK((net.tensor(0, "W").values - before).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("200 steps descend f(theta) = theta^2") {
    Network scalar = build_network({LayerSpec::sigmoid_unit(1)}, 1);
    auto& w = scalar.tensor(0, "W");
    auto& b = scalar.tensor(0, "b");
    b.values.setZero();
    w.values(0, 0) = 1.0;
    double prev = std::abs(w.values(0, 0));
    bool monotone = true;
    for (int step = 0; step < 200; ++step) {
      w.grad(0, 0) = 2.0 * w.values(0, 0);
      b.grad.setZero();
      rmsprop_step(scalar, 0.005, 0.9, 1e-8);
      const double now = std::abs(w.values(0, 0));
      if (step >= 1 && now >= prev) monotone = false;
      prev = now;
    }
    CHECK(monotone);
    CHECK(std::abs(w.values(0, 0)) < 0.1);
  }
}

TEST_CASE("input_gradient") {
  SUBCASE("linear model: gradient is sigma'(wx) * w") {
    Network net = build_network({LayerSpec::sigmoid_unit(6)}, 7);
    const TestBatch batch(1, 2, 3, 3);
    const Matrix grad = input_gradient(net, batch.view());
    REQUIRE(grad.rows() == 1);
    REQUIRE(grad.cols() == 6);

    const double p = forward(net, batch.view())(0);
    const double scale = p * (1.0 - p);
    const Matrix& w = net.tensor(0, "W").values;
    for (int j = 0; j < 6; ++j)
      CHECK(grad(0, j) == doctest::Approx(scale * w(j, 0)).epsilon(1e-12));
  }

  SUBCASE("shape equals input shape for sequential stacks") {
    Network net = build_network(
        {LayerSpec::spatial_conv(4, 3), LayerSpec::lstm(3, 5), LayerSpec::sigmoid_unit(5)},
        2);
    const TestBatch batch(3, 4, 6, 9);
    const Matrix grad = input_gradient(net, batch.view());
    CHECK(grad.rows() == 3);
    CHECK(grad.cols() == 4 * 6);
  }
}

TEST_CASE("structural errors carry the layer index") {
  SUBCASE("width mismatch at forward") {
    Network net = build_network({LayerSpec::sigmoid_unit(10)}, 1);
    const TestBatch batch(2, 3, 5, 1);  // 15 features, not 10
    try {
      (void)forward(net, batch.view());
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
    }
  }

  SUBCASE("flat output feeding a sequence layer is rejected at build") {
    CHECK_THROWS_AS((void)build_network({LayerSpec::fully_connected(4, 4, Activation::relu),
                                         LayerSpec::lstm(4, 3),
                                         LayerSpec::sigmoid_unit(3)},
                                        0),
                    DataError);
  }

  SUBCASE("channel mismatch between sequence layers is rejected at build") {
    CHECK_THROWS_AS((void)build_network({LayerSpec::spatial_conv(5, 4),
                                         LayerSpec::lstm(9, 3),
                                         LayerSpec::sigmoid_unit(3)},
                                        0),
                    DataError);
  }
}

TEST_CASE("checkpoint: save/load round-trip") {
  const auto path =
      (std::filesystem::temp_directory_path() / "p300_net.p3wt").string();
  Network net = build_network(
      {LayerSpec::spatial_conv(3, 2), LayerSpec::lstm(2, 3), LayerSpec::sigmoid_unit(3)},
      77);
  const TestBatch batch(4, 3, 4, 13);
  const Vector before = forward(net, batch.view());

  save_network(net, path);
  const Network loaded = load_network(path);
  CHECK(loaded.layers == net.layers);
  const Vector after = forward(loaded, batch.view());
  CHECK((before - after).cwiseAbs().maxCoeff() == 0.0);

  SUBCASE("bad magic is rejected") {
    std::ifstream f(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)), {});
    bytes[0] = 'Z';
    const auto bad =
        (std::filesystem::temp_directory_path() / "p300_net_bad.p3wt").string();
    std::ofstream out(bad, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.close();
    CHECK_THROWS_AS((void)load_network(bad), DataError);
  }

  SUBCASE("truncation is rejected") {
    std::ifstream f(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)), {});
    const auto bad =
        (std::filesystem::temp_directory_path() / "p300_net_trunc.p3wt").string();
    std::ofstream out(bad, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size() - 16));
    out.close();
    CHECK_THROWS_AS((void)load_network(bad), DataError);
  }
}

TEST_CASE("positive-class weighting scales target-sample gradients") {
  Network net = build_network({LayerSpec::sigmoid_unit(4)}, 5);
  const TestBatch batch(1, 2, 2, 41);  // single target sample
  zero_grads(net);
  backward(net, batch.view(), {1.0}, 1.0);
  const Matrix g1 = net.tensor(0, "W").grad;
  zero_grads(net);
  backward(net, batch.view(), {1.0}, 2.0);
  CHECK((net.tensor(0, "W").grad - 2.0 * g1).cwiseAbs().maxCoeff() < 1e-14);
}
