#include "doctest.h"

#include <cmath>
#include <vector>

#include "tcl/ops.hpp"

using namespace tcl;
using doctest::Approx;

namespace {

Tensor ones(Shape s) { return Tensor(std::move(s), 1.0f); }

Tensor random_tensor(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(s));
  for (float& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

}  // namespace

TEST_CASE("conv2d identity kernel") {
  Tape<float> tape;
  auto y = ops::conv2d(tape.constant(ones({1, 1, 3, 3})), tape.constant(ones({1, 1, 1, 1})),
                       tape.constant(Tensor({1})), 1, 0);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (float v : y.value().data()) CHECK(v == 1.0f);
}

TEST_CASE("conv2d stride 2 sums windows") {
  Tape<float> tape;
  auto y = ops::conv2d(tape.constant(ones({1, 1, 4, 4})), tape.constant(ones({1, 1, 2, 2})),
                       tape.constant(Tensor({1})), 2, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (float v : y.value().data()) CHECK(v == 4.0f);
}

TEST_CASE("conv2d output size and padding arithmetic") {
  Tape<float> tape;
  auto y = ops::conv2d(tape.constant(ones({2, 3, 7, 9})), tape.constant(ones({5, 3, 3, 3})),
                       tape.constant(Tensor({5}, 0.5f)), 2, 1);
  CHECK(y.shape() == Shape{2, 5, 4, 5});
  // Top-left output sees a 2x2 interior patch of each channel: 3 * 4 + bias.
  CHECK(y.value()[0] == 12.5f);
  // Centre output sees a full 3x3 patch: 27 + bias.
  CHECK(y.value()[1 * 5 + 1] == 27.5f);
}

TEST_CASE("conv2d rejects mismatched shapes and names the dims") {
  Tape<float> tape;
  auto x = tape.constant(ones({1, 2, 4, 4}));
  try {
    ops::conv2d(x, tape.constant(ones({1, 3, 2, 2})), tape.constant(Tensor({1})), 1, 0);
    FAIL("expected an exception");
  } catch (const InvalidShapeError& e) {
    CHECK(std::string(e.what()).find("channels 2") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::conv2d(x, tape.constant(ones({1, 2, 5, 5})), tape.constant(Tensor({1})), 1, 0),
                  InvalidShapeError);
}

TEST_CASE("max_pool2d picks the maximum") {
  Tape<float> tape;
  auto y = ops::max_pool2d(tape.constant(Tensor({1, 1, 2, 2}, {1, 2, 3, 4})), 2, 2);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.value()[0] == 4.0f);
}

TEST_CASE("max_pool2d routes tied gradients to the first position") {
  Tape<float> tape;
  auto x = tape.variable(Tensor({1, 1, 3, 3}, 2.0f));
  auto y = ops::max_pool2d(x, 2, 1);
  for (float v : y.value().data()) CHECK(v == 2.0f);
  tape.backward(ops::sum(y));
  // Windows start at (0,0), (0,1), (1,0), (1,1); each credits its top-left cell.
  const Tensor g = tape.grad(x);
  CHECK(g.values() == std::vector<float>{1, 1, 0, 1, 1, 0, 0, 0, 0});
}

TEST_CASE("max_pool2d window larger than input is a shape error") {
  Tape<float> tape;
  CHECK_THROWS_AS(ops::max_pool2d(tape.constant(ones({1, 1, 2, 3})), 3, 1), InvalidShapeError);
}

TEST_CASE("lrn with alpha 0 divides by k^beta") {
  Tape<float> tape;
  Tensor x = random_tensor({1, 4, 2, 2}, 3);
  auto y = ops::local_response_norm(tape.constant(x), ops::LrnParams{5, 2.0, 0.0, 0.75});
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(y.value()[i] == Approx(x[i] / std::pow(2.0, 0.75)).epsilon(1e-6));
  }
}

TEST_CASE("lrn single channel closed form") {
  Tape<float> tape;
  Tensor x({1, 1, 1, 3}, {-1.5f, 0.25f, 3.0f});
  auto y = ops::local_response_norm(tape.constant(x), ops::LrnParams{1, 2.0, 1.0, 1.0});
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(y.value()[i] == Approx(x[i] / (2.0 + x[i] * x[i])).epsilon(1e-6));
  }
}

TEST_CASE("lrn window is clipped at channel edges") {
  Tape<float> tape;
  Tensor x({1, 3, 1, 1}, {1, 2, 3});
  auto y = ops::local_response_norm(tape.constant(x), ops::LrnParams{3, 1.0, 1.0, 1.0});
  CHECK(y.value()[0] == Approx(1.0 / (1 + 1 + 4)));
  CHECK(y.value()[1] == Approx(2.0 / (1 + 1 + 4 + 9)));
  CHECK(y.value()[2] == Approx(3.0 / (1 + 4 + 9)));
}

TEST_CASE("dense identity") {
  Tape<float> tape;
  Tensor x = random_tensor({3, 4}, 5);
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0f;
  auto y = ops::dense(tape.constant(x), tape.constant(eye), tape.constant(Tensor({4})));
  CHECK(y.value() == x);
}

TEST_CASE("dense 4096 -> 2 has 8194 parameters") {
  Tensor w({4096, 2}), b({2});
  CHECK(w.size() + b.size() == 8194);
  Tape<float> tape;
  auto y = ops::dense(tape.constant(Tensor({1, 4096}, 1.0f)), tape.constant(w), tape.constant(b));
  CHECK(y.shape() == Shape{1, 2});
  CHECK_THROWS_AS(ops::dense(tape.constant(Tensor({1, 4095})), tape.constant(w), tape.constant(b)),
                  InvalidShapeError);
}

TEST_CASE("relu forward and zero subgradient") {
  Tape<float> tape;
  auto x = tape.variable(Tensor({3}, {-1, 0, 2}));
  auto y = ops::relu(x);
  CHECK(y.value().values() == std::vector<float>{0, 0, 2});
  tape.backward(ops::sum(y));
  CHECK(tape.grad(x).values() == std::vector<float>{0, 0, 1});
}

TEST_CASE("relu of all-negative input is zero with zero gradient") {
  Tape<float> tape;
  auto x = tape.variable(Tensor({4}, -3.0f));
  auto y = ops::relu(x);
  tape.backward(ops::sum(y));
  for (float v : y.value().data()) CHECK(v == 0.0f);
  const Tensor g = tape.grad(x);
  for (float v : g.data()) CHECK(v == 0.0f);
}

TEST_CASE("softmax symmetry, shift invariance and row sums") {
  Tape<float> tape;
  auto y = ops::softmax(tape.constant(Tensor({1, 2}, {0, 0})));
  CHECK(y.value()[0] == Approx(0.5));
  CHECK(y.value()[1] == Approx(0.5));

  Tensor x = random_tensor({4, 7}, 11);
  Tensor shifted = x;
  for (std::size_t j = 0; j < 7; ++j) shifted[7 + j] += 100.0f;
  auto a = ops::softmax(tape.constant(x));
  auto b = ops::softmax(tape.constant(shifted));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(a.value()[i] - b.value()[i]) < 1e-6);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    std::size_t best_in = 0, best_out = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      s += a.value()[r * 7 + j];
      if (x[r * 7 + j] > x[r * 7 + best_in]) best_in = j;
      if (a.value()[r * 7 + j] > a.value()[r * 7 + best_out]) best_out = j;
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
    CHECK(best_in == best_out);
  }
  CHECK_THROWS_AS(ops::softmax(tape.constant(Tensor({2, 1}))), InvalidShapeError);
}

TEST_CASE("dropout identities and invalid probability") {
  Tape<float> tape;
  Rng rng(1);
  Tensor x = random_tensor({5, 5}, 2);
  CHECK(ops::dropout(tape.constant(x), 0.0, ops::Mode::kTrain, rng).value() == x);
  CHECK(ops::dropout(tape.constant(x), 0.7, ops::Mode::kEval, rng).value() == x);
  CHECK_THROWS_AS(ops::dropout(tape.constant(x), 1.0, ops::Mode::kTrain, rng), ConfigError);
  CHECK_THROWS_AS(ops::dropout(tape.constant(x), -0.1, ops::Mode::kTrain, rng), ConfigError);
}

TEST_CASE("dropout p=0.5 statistics over a million values") {
  Tape<float> tape;
  Rng rng(2024);
  auto y = ops::dropout(tape.constant(Tensor({1000, 1000}, 1.0f)), 0.5, ops::Mode::kTrain, rng);
  std::size_t zeros = 0;
  for (float v : y.value().data()) {
    if (v == 0.0f) {
      ++zeros;
    } else {
      CHECK(v == 2.0f);
    }
  }
  const double frac = static_cast<double>(zeros) / 1e6;
  CHECK(frac >= 0.497);
  CHECK(frac <= 0.503);
}

TEST_CASE("dropout backward uses the saved mask") {
  Tape<float> tape;
  Rng rng(9);
  auto x = tape.variable(Tensor({50}, 1.0f));
  auto y = ops::dropout(x, 0.5, ops::Mode::kTrain, rng);
  tape.backward(ops::sum(y));
  const Tensor g = tape.grad(x);
  for (std::size_t i = 0; i < 50; ++i) CHECK(g[i] == y.value()[i]);
}

TEST_CASE("concat widths") {
  Tape<float> tape;
  auto y = ops::concat(tape.constant(Tensor({1, 4096})), tape.constant(Tensor({1, 4096})));
  CHECK(y.shape() == Shape{1, 8192});
  Tensor x = random_tensor({3, 5}, 4);
  auto z = ops::concat(tape.constant(x), tape.constant(Tensor({3, 0})));
  CHECK(z.value() == x);
  CHECK_THROWS_AS(ops::concat(tape.constant(Tensor({2, 3})), tape.constant(Tensor({3, 3}))),
                  InvalidShapeError);
}

namespace {

ops::GruWeights<float> zero_gru(Tape<float>& tape, std::size_t d, std::size_t h) {
  auto m = [&](Shape s) { return tape.constant(Tensor(std::move(s))); };
  return {m({d, h}), m({h, h}), m({h}), m({d, h}), m({h, h}), m({h}), m({d, h}), m({h, h}), m({h})};
}

}  // namespace

TEST_CASE("gru with zero weights halves the state every step") {
  Tape<float> tape;
  const std::size_t steps = 6, d = 3, h = 4;
  Tensor h0({1, h}, {1.0f, -2.0f, 0.5f, 8.0f});
  auto res = ops::gru_sequence(tape.constant(random_tensor({steps, 1, d}, 8)), tape.constant(h0),
                               zero_gru(tape, d, h));
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t j = 0; j < h; ++j) {
      CHECK(res.outputs.value()[t * h + j] == Approx(std::pow(0.5, t + 1) * h0[j]));
    }
  }
  CHECK(res.last.value()[3] == Approx(8.0 * std::pow(0.5, steps)));
}

TEST_CASE("gru single step equals a manual gate computation") {
  const std::size_t d = 2, h = 2;
  Tensor x({1, 1, d}, {0.3f, -0.7f});
  Tensor h0({1, h}, {0.2f, -0.4f});
  std::vector<Tensor> p;
  for (int gate = 0; gate < 3; ++gate) {
    p.push_back(random_tensor({d, h}, 100 + gate));
    p.push_back(random_tensor({h, h}, 200 + gate));
    p.push_back(random_tensor({h}, 300 + gate));
  }
  Tape<float> tape;
  std::vector<Var<float>> v;
  for (auto& t : p) v.push_back(tape.constant(t));
  auto res = ops::gru_sequence(tape.constant(x), tape.constant(h0),
                               {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]});
  auto sig = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
  auto affine = [&](const Tensor& w, const Tensor& u, const Tensor& b, const double* hv, std::size_t j) {
    double a = b[j];
    for (std::size_t i = 0; i < d; ++i) a += x[i] * w[i * h + j];
    for (std::size_t i = 0; i < h; ++i) a += hv[i] * u[i * h + j];
    return a;
  };
  const double hv[2] = {h0[0], h0[1]};
  double r[2], z[2];
  for (std::size_t j = 0; j < h; ++j) {
    z[j] = sig(affine(p[0], p[1], p[2], hv, j));
    r[j] = sig(affine(p[3], p[4], p[5], hv, j));
  }
  const double rh[2] = {r[0] * hv[0], r[1] * hv[1]};
  for (std::size_t j = 0; j < h; ++j) {
    const double c = std::tanh(affine(p[6], p[7], p[8], rh, j));
    const double expected = (1 - z[j]) * hv[j] + z[j] * c;
    CHECK(res.last.value()[j] == Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("gru over T steps equals T chained single steps bitwise") {
  const std::size_t steps = 9, n = 2, d = 5, h = 6;
  std::vector<Tensor> p;
  for (int gate = 0; gate < 3; ++gate) {
    p.push_back(random_tensor({d, h}, 10 + gate));
    p.push_back(random_tensor({h, h}, 20 + gate));
    p.push_back(random_tensor({h}, 30 + gate));
  }
  Tensor xs = random_tensor({steps, n, d}, 40);
  Tensor h0 = random_tensor({n, h}, 41);
  auto weights = [&](Tape<float>& tape) {
    std::vector<Var<float>> v;
    for (auto& t : p) v.push_back(tape.constant(t));
    return ops::GruWeights<float>{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]};
  };
  Tape<float> whole;
  auto full = ops::gru_sequence(whole.constant(xs), whole.constant(h0), weights(whole));

  Tensor state = h0;
  for (std::size_t t = 0; t < steps; ++t) {
    Tape<float> tape;
    Tensor xt({1, n, d});
    std::copy(xs.raw() + t * n * d, xs.raw() + (t + 1) * n * d, xt.raw());
    auto step = ops::gru_sequence(tape.constant(xt), tape.constant(state), weights(tape));
    state = step.last.value();
    for (std::size_t i = 0; i < n * h; ++i) CHECK(state[i] == full.outputs.value()[t * n * h + i]);
  }
}

TEST_CASE("gru shape mismatch") {
  Tape<float> tape;
  CHECK_THROWS_AS(ops::gru_sequence(tape.constant(Tensor({2, 1, 3})), tape.constant(Tensor({1, 5})),
                                    zero_gru(tape, 3, 4)),
                  InvalidShapeError);
}

TEST_CASE("cross entropy values and label errors") {
  Tape<float> tape;
  std::vector<int> t1 = {1};
  auto perfect = ops::categorical_cross_entropy(tape.constant(Tensor({1, 3}, {0, 1, 0})), std::span<const int>(t1));
  CHECK(std::abs(perfect.value().item()) < 1e-6);
  std::vector<int> t0 = {0, 1};
  auto uniform = ops::categorical_cross_entropy(tape.constant(Tensor({2, 2}, 0.5f)), std::span<const int>(t0));
  CHECK(uniform.value().item() == Approx(std::log(2.0)));
  std::vector<int> bad = {2};
  CHECK_THROWS_AS(ops::categorical_cross_entropy(tape.constant(Tensor({1, 2}, 0.5f)), std::span<const int>(bad)),
                  InvalidLabelError);
  std::vector<int> zero = {0};
  auto clamped = ops::categorical_cross_entropy(tape.constant(Tensor({1, 2}, {0, 1})), std::span<const int>(zero));
  CHECK(clamped.value().item() == Approx(-std::log(1e-7)).epsilon(1e-5));
}
