#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tcl/rng.hpp"
#include "tcl/tape.hpp"
#include "tcl/tensor.hpp"

// Differentiable operations. Every function computes its value eagerly and
// records a backward closure on the tape of its inputs. All ops are
// instantiated for float (training) and double (gradient checking).
namespace tcl::ops {

// Cross-channel normalisation constants. Defaults follow AlexNet.
struct LrnParams {
  int size = 5;
  double k = 2.0;
  double alpha = 1e-4;
  double beta = 0.75;

  bool operator==(const LrnParams&) const = default;
};

enum class Mode { kTrain, kEval };

// Input NCHW, kernel OIHW, bias O.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, int stride, int padding);

// Floor-mode pooling without padding. Ties go to the first element in
// row-major window order.
template <typename T>
Var<T> max_pool2d(Var<T> input, int window, int stride);

template <typename T>
Var<T> local_response_norm(Var<T> input, const LrnParams& params = {});

// input N x D, weights D x U, bias U.
template <typename T>
Var<T> dense(Var<T> input, Var<T> weights, Var<T> bias);

template <typename T>
Var<T> relu(Var<T> input);

// Row-wise softmax over the last axis of an N x C tensor.
template <typename T>
Var<T> softmax(Var<T> input);

// Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is identity.
template <typename T>
Var<T> dropout(Var<T> input, double p, Mode mode, Rng& rng);

// a N x D1, b N x D2 -> N x (D1 + D2).
template <typename T>
Var<T> concat(Var<T> a, Var<T> b);

template <typename T>
struct GruWeights {
  Var<T> w_update, u_update, b_update;  // D x H, H x H, H
  Var<T> w_reset, u_reset, b_reset;
  Var<T> w_cand, u_cand, b_cand;
};

template <typename T>
struct GruOutputs {
  Var<T> outputs;  // T x N x H
  Var<T> last;     // N x H, equal to outputs[T-1]
};

// z = sigmoid(x Wz + h Uz + bz); r = sigmoid(x Wr + h Ur + br);
// c = tanh(x Wc + (r * h) Uc + bc); h' = (1 - z) * h + z * c.
// Backpropagates through every step of the sequence.
template <typename T>
GruOutputs<T> gru_sequence(Var<T> inputs, Var<T> h0, const GruWeights<T>& weights);

// Mean over the batch of -log(clamp(p[n, target_n], 1e-7, 1)).
template <typename T>
Var<T> categorical_cross_entropy(Var<T> probs, std::span<const int> targets);

inline constexpr double kProbabilityFloor = 1e-7;

// Graph plumbing used by the networks and the gradient checker.
template <typename T>
Var<T> reshape(Var<T> input, Shape shape);

template <typename T>
Var<T> gather_rows(Var<T> input, std::span<const std::size_t> rows);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

template <typename T>
Var<T> sum(Var<T> input);

// sum(input * weights) with constant weights; projects any tensor to a scalar.
template <typename T>
Var<T> weighted_sum(Var<T> input, const BasicTensor<T>& weights);

}  // namespace tcl::ops
