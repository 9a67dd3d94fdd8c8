#include "doctest.h"

#include "tcl/ops.hpp"
#include "tcl/tape.hpp"
#include "tcl/tensor.hpp"

using namespace tcl;

TEST_CASE("tensor size matches shape product") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rank() == 3);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), InvalidShapeError);
  CHECK(Tensor().size() == 1);
  CHECK(Tensor({4, 0}).size() == 0);
}

TEST_CASE("reshape keeps data and rejects size changes") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = t.reshaped({3, 2});
  CHECK(r.shape() == Shape{3, 2});
  CHECK(r[5] == 6.0f);
  CHECK_THROWS_AS(t.reshaped({4, 2}), InvalidShapeError);
}

TEST_CASE("backward before forward is a stale-tape error") {
  Tape<float> tape;
  Var<float> none;
  CHECK_THROWS_AS(tape.backward(none), StaleTapeError);
}

TEST_CASE("backward twice is a stale-tape error") {
  Tape<float> tape;
  Parameter<float> w("w", Tensor({3}, {1, 2, 3}));
  auto loss = ops::sum(tape.param(w));
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), StaleTapeError);
}

TEST_CASE("loss = sum(w) gives an all-ones gradient") {
  Tape<float> tape;
  Parameter<float> w("w", Tensor({2, 2}, {1, -2, 3, 0.5f}));
  tape.backward(ops::sum(tape.param(w)));
  for (float g : w.grad.data()) CHECK(g == 1.0f);
}

TEST_CASE("a parameter used twice accumulates both gradients") {
  Parameter<float> w("w", Tensor({3}, {0.5f, -1, 2}));
  {
    Tape<float> tape;
    auto v = tape.param(w);
    tape.backward(ops::sum(ops::add(v, v)));
  }
  for (float g : w.grad.data()) CHECK(g == 2.0f);

  // Same result when the parameter is bound through two distinct leaves.
  Parameter<float> copy_a("a", w.value), copy_b("b", w.value);
  {
    Tape<float> tape;
    tape.backward(ops::sum(ops::add(tape.param(copy_a), tape.param(copy_b))));
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(copy_a.grad[i] + copy_b.grad[i] == w.grad[i]);
}

TEST_CASE("gradients accumulate across tapes until zero_grad") {
  Parameter<float> w("w", Tensor({2}, {1, 1}));
  for (int i = 0; i < 3; ++i) {
    Tape<float> tape;
    tape.backward(ops::sum(tape.param(w)));
  }
  CHECK(w.grad[0] == 3.0f);
  w.zero_grad();
  CHECK(w.grad[0] == 0.0f);
}

TEST_CASE("backward needs a scalar loss") {
  Tape<float> tape;
  auto v = tape.variable(Tensor({2}, {1, 2}));
  CHECK_THROWS_AS(tape.backward(ops::relu(v)), InvalidShapeError);
}

TEST_CASE("recording onto a consumed tape fails") {
  Tape<float> tape;
  auto v = tape.variable(Tensor({2}, {1, 2}));
  tape.backward(ops::sum(v));
  CHECK_THROWS_AS(ops::relu(v), StaleTapeError);
}
