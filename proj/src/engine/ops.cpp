#include "tcl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gemm.hpp"

namespace tcl::ops {
namespace {

template <typename T>
using TensorT = BasicTensor<T>;

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw InvalidShapeError(op + ": " + detail);
}

void require_rank(const std::string& op, const char* what, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    shape_error(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                        shape_string(s));
  }
}

template <typename T>
void same_tape(const std::string& op, Var<T> a, Var<T> b) {
  if (a.tape() != b.tape() || a.tape() == nullptr) {
    throw StaleTapeError(op + ": operands live on different tapes");
  }
}

template <typename T>
void add_into(TensorT<T>& dst, const TensorT<T>& src) {
  T* d = dst.raw();
  const T* s = src.raw();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

// Images per im2col block; bounds scratch memory independently of batch size.
std::size_t conv_group(std::size_t col_rows, std::size_t plane) {
  constexpr std::size_t kBudget = std::size_t{1} << 24;
  const std::size_t per_image = std::max<std::size_t>(1, col_rows * plane);
  return std::max<std::size_t>(1, kBudget / per_image);
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, ho, wo;
  int stride, pad;
  std::size_t col_rows() const { return c * kh * kw; }
  std::size_t plane() const { return ho * wo; }
};

template <typename T>
void im2col(const ConvGeometry& g, const T* input, std::size_t first, std::size_t count, T* col) {
  const std::size_t plane = g.plane();
  const std::size_t width = count * plane;
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((ch * g.kh + i) * g.kw + j) * width;
        for (std::size_t b = 0; b < count; ++b) {
          const T* img = input + ((first + b) * g.c + ch) * g.h * g.w;
          T* dst = row + b * plane;
          for (std::size_t y = 0; y < g.ho; ++y) {
            const long sy = static_cast<long>(y) * g.stride + static_cast<long>(i) - g.pad;
            for (std::size_t x = 0; x < g.wo; ++x) {
              const long sx = static_cast<long>(x) * g.stride + static_cast<long>(j) - g.pad;
              const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(g.h) &&
                                  sx < static_cast<long>(g.w);
              dst[y * g.wo + x] = inside ? img[sy * static_cast<long>(g.w) + sx] : T{0};
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, std::size_t first, std::size_t count, T* grad) {
  const std::size_t plane = g.plane();
  const std::size_t width = count * plane;
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((ch * g.kh + i) * g.kw + j) * width;
        for (std::size_t b = 0; b < count; ++b) {
          T* img = grad + ((first + b) * g.c + ch) * g.h * g.w;
          const T* src = row + b * plane;
          for (std::size_t y = 0; y < g.ho; ++y) {
            const long sy = static_cast<long>(y) * g.stride + static_cast<long>(i) - g.pad;
            if (sy < 0 || sy >= static_cast<long>(g.h)) continue;
            for (std::size_t x = 0; x < g.wo; ++x) {
              const long sx = static_cast<long>(x) * g.stride + static_cast<long>(j) - g.pad;
              if (sx < 0 || sx >= static_cast<long>(g.w)) continue;
              img[sy * static_cast<long>(g.w) + sx] += src[y * g.wo + x];
            }
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, int stride, int padding) {
  const std::string op = "conv2d";
  same_tape(op, input, kernel);
  same_tape(op, input, bias);
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  require_rank(op, "input", is, 4);
  require_rank(op, "kernel", ks, 4);
  if (stride < 1) throw ConfigError("conv2d: stride must be positive");
  if (padding < 0) throw ConfigError("conv2d: padding must be nonnegative");
  if (is[1] != ks[1]) {
    shape_error(op, "input channels " + std::to_string(is[1]) + " != kernel input channels " +
                        std::to_string(ks[1]));
  }
  if (bias.value().size() != ks[0]) {
    shape_error(op, "bias has " + std::to_string(bias.value().size()) + " values for " +
                        std::to_string(ks[0]) + " output channels");
  }
  const std::size_t p2 = 2 * static_cast<std::size_t>(padding);
  if (is[2] + p2 < ks[2] || is[3] + p2 < ks[3]) {
    shape_error(op, "padded input " + std::to_string(is[2] + p2) + "x" +
                        std::to_string(is[3] + p2) + " smaller than kernel " +
                        std::to_string(ks[2]) + "x" + std::to_string(ks[3]));
  }
  ConvGeometry g{is[0], is[1], is[2], is[3], ks[0], ks[2], ks[3],
                 (is[2] + p2 - ks[2]) / stride + 1, (is[3] + p2 - ks[3]) / stride + 1,
                 stride, padding};

  const TensorT<T>& x = input.value();
  const TensorT<T>& k = kernel.value();
  const TensorT<T>& b = bias.value();
  TensorT<T> out({g.n, g.o, g.ho, g.wo});
  const std::size_t rows = g.col_rows();
  const std::size_t plane = g.plane();
  const std::size_t group = conv_group(rows, plane);
  std::vector<T> col, prod;
  for (std::size_t first = 0; first < g.n; first += group) {
    const std::size_t count = std::min(group, g.n - first);
    col.assign(rows * count * plane, T{0});
    prod.assign(g.o * count * plane, T{0});
    im2col(g, x.raw(), first, count, col.data());
    detail::gemm(false, false, g.o, count * plane, rows, k.raw(), col.data(), prod.data(), false);
    for (std::size_t bi = 0; bi < count; ++bi) {
      for (std::size_t oc = 0; oc < g.o; ++oc) {
        T* dst = out.raw() + ((first + bi) * g.o + oc) * plane;
        const T* src = prod.data() + oc * count * plane + bi * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b[oc];
      }
    }
  }

  Tape<T>& tape = *input.tape();
  const std::size_t in_id = input.id(), k_id = kernel.id(), b_id = bias.id();
  return tape.record(op, std::move(out), {input, kernel, bias},
                     [g, in_id, k_id, b_id](Tape<T>& t, const TensorT<T>& grad) {
                       const std::size_t rows = g.col_rows();
                       const std::size_t plane = g.plane();
                       const std::size_t group = conv_group(rows, plane);
                       const bool need_x = t.requires_grad(in_id);
                       const bool need_k = t.requires_grad(k_id);
                       if (t.requires_grad(b_id)) {
                         TensorT<T>& db = t.grad_buffer(b_id);
                         for (std::size_t n = 0; n < g.n; ++n) {
                           for (std::size_t oc = 0; oc < g.o; ++oc) {
                             const T* src = grad.raw() + (n * g.o + oc) * plane;
                             T acc{0};
                             for (std::size_t p = 0; p < plane; ++p) acc += src[p];
                             db[oc] += acc;
                           }
                         }
                       }
                       if (!need_x && !need_k) return;
                       const TensorT<T>& x = t.value(in_id);
                       const TensorT<T>& k = t.value(k_id);
                       std::vector<T> col, dout, dcol;
                       for (std::size_t first = 0; first < g.n; first += group) {
                         const std::size_t count = std::min(group, g.n - first);
                         const std::size_t width = count * plane;
                         dout.resize(g.o * width);
                         for (std::size_t bi = 0; bi < count; ++bi) {
                           for (std::size_t oc = 0; oc < g.o; ++oc) {
                             const T* src = grad.raw() + ((first + bi) * g.o + oc) * plane;
                             std::copy(src, src + plane, dout.data() + oc * width + bi * plane);
                           }
                         }
                         if (need_k) {
                           col.assign(rows * width, T{0});
                           im2col(g, x.raw(), first, count, col.data());
                           detail::gemm(false, true, g.o, rows, width, dout.data(), col.data(),
                                        t.grad_buffer(k_id).raw(), true);
                         }
                         if (need_x) {
                           dcol.assign(rows * width, T{0});
                           detail::gemm(true, false, rows, width, g.o, k.raw(), dout.data(),
                                        dcol.data(), false);
                           col2im(g, dcol.data(), first, count, t.grad_buffer(in_id).raw());
                         }
                       }
                     });
}

template <typename T>
Var<T> max_pool2d(Var<T> input, int window, int stride) {
  const std::string op = "max_pool2d";
  const Shape& s = input.shape();
  require_rank(op, "input", s, 4);
  if (window < 1 || stride < 1) throw ConfigError("max_pool2d: window and stride must be positive");
  const auto win = static_cast<std::size_t>(window);
  if (win > s[2] || win > s[3]) {
    shape_error(op, "window " + std::to_string(window) + " larger than spatial dims " +
                        std::to_string(s[2]) + "x" + std::to_string(s[3]));
  }
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::size_t ho = (h - win) / stride + 1, wo = (w - win) / stride + 1;
  const TensorT<T>& x = input.value();
  TensorT<T> out({n, c, ho, wo});
  std::vector<std::size_t> argmax(out.size());
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t xo = 0; xo < wo; ++xo, ++o) {
        std::size_t best = base + (y * stride) * w + xo * stride;
        for (std::size_t i = 0; i < win; ++i) {
          for (std::size_t j = 0; j < win; ++j) {
            const std::size_t idx = base + (y * stride + i) * w + xo * stride + j;
            if (x[idx] > x[best]) best = idx;
          }
        }
        argmax[o] = best;
        out[o] = x[best];
      }
    }
  }
  const std::size_t in_id = input.id();
  return input.tape()->record(op, std::move(out), {input},
                              [in_id, argmax = std::move(argmax)](Tape<T>& t, const TensorT<T>& g) {
                                TensorT<T>& dx = t.grad_buffer(in_id);
                                for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += g[i];
                              });
}

template <typename T>
Var<T> local_response_norm(Var<T> input, const LrnParams& params) {
  const std::string op = "local_response_norm";
  const Shape& s = input.shape();
  require_rank(op, "input", s, 4);
  if (params.size < 1) throw ConfigError("local_response_norm: size must be >= 1");
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  const long lo = (params.size - 1) / 2;
  const long hi = params.size / 2;
  const T k = static_cast<T>(params.k), alpha = static_cast<T>(params.alpha),
          beta = static_cast<T>(params.beta);
  const TensorT<T>& x = input.value();
  TensorT<T> out(s);
  TensorT<T> scale(s);
  for (std::size_t b = 0; b < n; ++b) {
    const T* a = x.raw() + b * c * hw;
    T* sc = scale.raw() + b * c * hw;
    T* y = out.raw() + b * c * hw;
    for (long ch = 0; ch < static_cast<long>(c); ++ch) {
      const long first = std::max(0L, ch - lo);
      const long last = std::min(static_cast<long>(c) - 1, ch + hi);
      T* sc_row = sc + ch * hw;
      std::fill(sc_row, sc_row + hw, T{0});
      for (long cc = first; cc <= last; ++cc) {
        const T* src = a + cc * hw;
        for (std::size_t p = 0; p < hw; ++p) sc_row[p] += src[p] * src[p];
      }
      for (std::size_t p = 0; p < hw; ++p) {
        sc_row[p] = k + alpha * sc_row[p];
        y[ch * hw + p] = a[ch * hw + p] * std::pow(sc_row[p], -beta);
      }
    }
  }
  const std::size_t in_id = input.id();
  return input.tape()->record(
      op, std::move(out), {input},
      [in_id, n, c, hw, lo, hi, alpha, beta, scale = std::move(scale)](Tape<T>& t,
                                                                        const TensorT<T>& g) {
        const TensorT<T>& x = t.value(in_id);
        TensorT<T>& dx = t.grad_buffer(in_id);
        std::vector<T> coef(c * hw), acc(c * hw);
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t off = b * c * hw;
          for (std::size_t i = 0; i < c * hw; ++i) {
            coef[i] = g[off + i] * x[off + i] * std::pow(scale[off + i], -beta - T{1});
          }
          std::fill(acc.begin(), acc.end(), T{0});
          for (long ch = 0; ch < static_cast<long>(c); ++ch) {
            const long first = std::max(0L, ch - lo);
            const long last = std::min(static_cast<long>(c) - 1, ch + hi);
            for (long cc = first; cc <= last; ++cc) {
              for (std::size_t p = 0; p < hw; ++p) acc[cc * hw + p] += coef[ch * hw + p];
            }
          }
          for (std::size_t i = 0; i < c * hw; ++i) {
            dx[off + i] += g[off + i] * std::pow(scale[off + i], -beta) -
                           T{2} * alpha * beta * x[off + i] * acc[i];
          }
        }
      });
}

template <typename T>
Var<T> dense(Var<T> input, Var<T> weights, Var<T> bias) {
  const std::string op = "dense";
  same_tape(op, input, weights);
  same_tape(op, input, bias);
  const Shape& xs = input.shape();
  const Shape& ws = weights.shape();
  require_rank(op, "input", xs, 2);
  require_rank(op, "weights", ws, 2);
  if (xs[1] != ws[0]) {
    shape_error(op, "input width " + std::to_string(xs[1]) + " != weight rows " +
                        std::to_string(ws[0]));
  }
  if (bias.value().size() != ws[1]) {
    shape_error(op, "bias has " + std::to_string(bias.value().size()) + " values for " +
                        std::to_string(ws[1]) + " units");
  }
  const std::size_t n = xs[0], d = xs[1], u = ws[1];
  TensorT<T> out({n, u});
  detail::gemm(false, false, n, u, d, input.value().raw(), weights.value().raw(), out.raw(), false);
  const TensorT<T>& b = bias.value();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < u; ++j) out[r * u + j] += b[j];
  }
  const std::size_t x_id = input.id(), w_id = weights.id(), b_id = bias.id();
  return input.tape()->record(op, std::move(out), {input, weights, bias},
                              [=](Tape<T>& t, const TensorT<T>& g) {
                                if (t.requires_grad(x_id)) {
                                  detail::gemm(false, true, n, d, u, g.raw(), t.value(w_id).raw(),
                                               t.grad_buffer(x_id).raw(), true);
                                }
                                if (t.requires_grad(w_id)) {
                                  detail::gemm(true, false, d, u, n, t.value(x_id).raw(), g.raw(),
                                               t.grad_buffer(w_id).raw(), true);
                                }
                                if (t.requires_grad(b_id)) {
                                  TensorT<T>& db = t.grad_buffer(b_id);
                                  for (std::size_t r = 0; r < n; ++r) {
                                    for (std::size_t j = 0; j < u; ++j) db[j] += g[r * u + j];
                                  }
                                }
                              });
}

template <typename T>
Var<T> relu(Var<T> input) {
  TensorT<T> out = input.value();
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  const std::size_t in_id = input.id();
  return input.tape()->record("relu", std::move(out), {input},
                              [in_id](Tape<T>& t, const TensorT<T>& g) {
                                const TensorT<T>& x = t.value(in_id);
                                TensorT<T>& dx = t.grad_buffer(in_id);
                                for (std::size_t i = 0; i < g.size(); ++i) {
                                  if (x[i] > T{0}) dx[i] += g[i];
                                }
                              });
}

template <typename T>
Var<T> softmax(Var<T> input) {
  const std::string op = "softmax";
  const Shape& s = input.shape();
  require_rank(op, "input", s, 2);
  if (s[1] < 2) shape_error(op, "needs at least 2 classes, got " + std::to_string(s[1]));
  const std::size_t n = s[0], c = s[1];
  TensorT<T> out = input.value();
  for (std::size_t r = 0; r < n; ++r) {
    T* row = out.raw() + r * c;
    const T mx = *std::max_element(row, row + c);
    T total{0};
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= total;
  }
  const std::size_t in_id = input.id();
  TensorT<T> saved = out;
  return input.tape()->record(op, std::move(out), {input},
                              [in_id, n, c, y = std::move(saved)](Tape<T>& t, const TensorT<T>& g) {
                                TensorT<T>& dx = t.grad_buffer(in_id);
                                for (std::size_t r = 0; r < n; ++r) {
                                  const T* yr = y.raw() + r * c;
                                  const T* gr = g.raw() + r * c;
                                  T dot{0};
                                  for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
                                  for (std::size_t j = 0; j < c; ++j) {
                                    dx[r * c + j] += yr[j] * (gr[j] - dot);
                                  }
                                }
                              });
}

template <typename T>
Var<T> dropout(Var<T> input, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::kEval || p == 0.0) return input;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  TensorT<T> mask(input.shape());
  for (T& m : mask.data()) m = rng.uniform() < p ? T{0} : keep_scale;
  TensorT<T> out = input.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const std::size_t in_id = input.id();
  return input.tape()->record("dropout", std::move(out), {input},
                              [in_id, mask = std::move(mask)](Tape<T>& t, const TensorT<T>& g) {
                                TensorT<T>& dx = t.grad_buffer(in_id);
                                for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * mask[i];
                              });
}

template <typename T>
Var<T> concat(Var<T> a, Var<T> b) {
  const std::string op = "concat";
  same_tape(op, a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require_rank(op, "first operand", as, 2);
  require_rank(op, "second operand", bs, 2);
  if (as[0] != bs[0]) {
    shape_error(op, "leading dims differ: " + std::to_string(as[0]) + " vs " +
                        std::to_string(bs[0]));
  }
  const std::size_t n = as[0], d1 = as[1], d2 = bs[1], d = d1 + d2;
  TensorT<T> out({n, d});
  const TensorT<T>& av = a.value();
  const TensorT<T>& bv = b.value();
  for (std::size_t r = 0; r < n; ++r) {
    std::copy(av.raw() + r * d1, av.raw() + (r + 1) * d1, out.raw() + r * d);
    std::copy(bv.raw() + r * d2, bv.raw() + (r + 1) * d2, out.raw() + r * d + d1);
  }
  const std::size_t a_id = a.id(), b_id = b.id();
  return a.tape()->record(op, std::move(out), {a, b}, [=](Tape<T>& t, const TensorT<T>& g) {
    if (t.requires_grad(a_id)) {
      TensorT<T>& da = t.grad_buffer(a_id);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d1; ++j) da[r * d1 + j] += g[r * d + j];
      }
    }
    if (t.requires_grad(b_id)) {
      TensorT<T>& db = t.grad_buffer(b_id);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d2; ++j) db[r * d2 + j] += g[r * d + d1 + j];
      }
    }
  });
}

namespace {

// acc[j] += sum_i v[i] * m[i, j] for a row-major rows x cols matrix. The
// summation order per output element is fixed (i ascending), so a sequence
// step produces the same bits whatever the sequence length.
template <typename T>
void accumulate_vm(const T* v, const T* m, std::size_t rows, std::size_t cols, T* acc) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T vi = v[i];
    const T* row = m + i * cols;
    for (std::size_t j = 0; j < cols; ++j) acc[j] += vi * row[j];
  }
}

// out[i] += sum_j v[j] * m[i, j]
template <typename T>
void accumulate_mv(const T* m, const T* v, std::size_t rows, std::size_t cols, T* out) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = m + i * cols;
    T s{0};
    for (std::size_t j = 0; j < cols; ++j) s += row[j] * v[j];
    out[i] += s;
  }
}

// m[i, j] += a[i] * b[j]
template <typename T>
void accumulate_outer(const T* a, const T* b, std::size_t rows, std::size_t cols, T* m) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T ai = a[i];
    T* row = m + i * cols;
    for (std::size_t j = 0; j < cols; ++j) row[j] += ai * b[j];
  }
}

}  // namespace

template <typename T>
GruOutputs<T> gru_sequence(Var<T> inputs, Var<T> h0, const GruWeights<T>& wts) {
  const std::string op = "gru_sequence";
  const std::vector<Var<T>> all = {inputs,        h0,          wts.w_update, wts.u_update,
                                   wts.b_update,  wts.w_reset, wts.u_reset,  wts.b_reset,
                                   wts.w_cand,    wts.u_cand,  wts.b_cand};
  for (const Var<T>& v : all) same_tape(op, inputs, v);
  const Shape& xs = inputs.shape();
  const Shape& hs = h0.shape();
  require_rank(op, "inputs", xs, 3);
  require_rank(op, "h0", hs, 2);
  const std::size_t steps = xs[0], n = xs[1], d = xs[2], h = hs[1];
  if (steps == 0) shape_error(op, "sequence must have at least one step");
  if (hs[0] != n) {
    shape_error(op, "h0 batch " + std::to_string(hs[0]) + " != input batch " + std::to_string(n));
  }
  auto expect = [&](Var<T> v, const Shape& want, const char* name) {
    if (v.shape() != want) {
      shape_error(op, std::string(name) + " has shape " + shape_string(v.shape()) +
                          ", expected " + shape_string(want));
    }
  };
  expect(wts.w_update, {d, h}, "w_update");
  expect(wts.w_reset, {d, h}, "w_reset");
  expect(wts.w_cand, {d, h}, "w_cand");
  expect(wts.u_update, {h, h}, "u_update");
  expect(wts.u_reset, {h, h}, "u_reset");
  expect(wts.u_cand, {h, h}, "u_cand");
  expect(wts.b_update, {h}, "b_update");
  expect(wts.b_reset, {h}, "b_reset");
  expect(wts.b_cand, {h}, "b_cand");

  const T* x = inputs.value().raw();
  const T* wz = wts.w_update.value().raw();
  const T* wr = wts.w_reset.value().raw();
  const T* wc = wts.w_cand.value().raw();
  const T* uz = wts.u_update.value().raw();
  const T* ur = wts.u_reset.value().raw();
  const T* uc = wts.u_cand.value().raw();
  const T* bz = wts.b_update.value().raw();
  const T* br = wts.b_reset.value().raw();
  const T* bc = wts.b_cand.value().raw();

  TensorT<T> out({steps, n, h});
  // Saved activations for the backward pass.
  std::vector<T> zs(steps * n * h), rs(steps * n * h), cs(steps * n * h), rhs(steps * n * h);
  std::vector<T> az(h), ar(h), ac(h);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < n; ++b) {
      const T* xt = x + (t * n + b) * d;
      const T* hp = t == 0 ? h0.value().raw() + b * h : out.raw() + ((t - 1) * n + b) * h;
      const std::size_t off = (t * n + b) * h;
      std::copy(bz, bz + h, az.begin());
      std::copy(br, br + h, ar.begin());
      std::copy(bc, bc + h, ac.begin());
      accumulate_vm(xt, wz, d, h, az.data());
      accumulate_vm(xt, wr, d, h, ar.data());
      accumulate_vm(xt, wc, d, h, ac.data());
      accumulate_vm(hp, uz, h, h, az.data());
      accumulate_vm(hp, ur, h, h, ar.data());
      for (std::size_t j = 0; j < h; ++j) {
        zs[off + j] = sigmoid(az[j]);
        rs[off + j] = sigmoid(ar[j]);
        rhs[off + j] = rs[off + j] * hp[j];
      }
      accumulate_vm(rhs.data() + off, uc, h, h, ac.data());
      T* ht = out.raw() + off;
      for (std::size_t j = 0; j < h; ++j) {
        cs[off + j] = std::tanh(ac[j]);
        ht[j] = (T{1} - zs[off + j]) * hp[j] + zs[off + j] * cs[off + j];
      }
    }
  }

  Tape<T>& tape = *inputs.tape();
  std::vector<std::size_t> ids;
  for (const Var<T>& v : all) ids.push_back(v.id());
  Var<T> outputs = tape.record(
      op, std::move(out),
      {inputs, h0, wts.w_update, wts.u_update, wts.b_update, wts.w_reset, wts.u_reset,
       wts.b_reset, wts.w_cand, wts.u_cand, wts.b_cand},
      [=, zs = std::move(zs), rs = std::move(rs), cs = std::move(cs), rhs = std::move(rhs)](
          Tape<T>& tp, const TensorT<T>& g) {
        enum { kX, kH0, kWz, kUz, kBz, kWr, kUr, kBr, kWc, kUc, kBc };
        const T* xv = tp.value(ids[kX]).raw();
        const T* h0v = tp.value(ids[kH0]).raw();
        const T* wzv = tp.value(ids[kWz]).raw();
        const T* wrv = tp.value(ids[kWr]).raw();
        const T* wcv = tp.value(ids[kWc]).raw();
        const T* uzv = tp.value(ids[kUz]).raw();
        const T* urv = tp.value(ids[kUr]).raw();
        const T* ucv = tp.value(ids[kUc]).raw();
        // Hidden states rebuilt from the saved gates with the forward formula,
        // so they match the recorded outputs bit for bit.
        std::vector<T> hist(steps * n * h);
        for (std::size_t t = 0; t < steps; ++t) {
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (t * n + b) * h;
            const T* hp = t == 0 ? h0v + b * h : hist.data() + ((t - 1) * n + b) * h;
            for (std::size_t j = 0; j < h; ++j) {
              hist[off + j] = (T{1} - zs[off + j]) * hp[j] + zs[off + j] * cs[off + j];
            }
          }
        }
        std::vector<T> dwz(d * h, T{0}), dwr(d * h, T{0}), dwc(d * h, T{0});
        std::vector<T> duz(h * h, T{0}), dur(h * h, T{0}), duc(h * h, T{0});
        std::vector<T> dbz(h, T{0}), dbr(h, T{0}), dbc(h, T{0});
        std::vector<T> dx(steps * n * d, T{0});
        std::vector<T> dh_next(n * h, T{0});
        std::vector<T> dh(h), daz(h), dar(h), dac(h), drh(h), dhp(h);
        for (std::size_t t = steps; t-- > 0;) {
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (t * n + b) * h;
            const T* hp = t == 0 ? h0v + b * h : hist.data() + ((t - 1) * n + b) * h;
            const T* xt = xv + (t * n + b) * d;
            for (std::size_t j = 0; j < h; ++j) {
              dh[j] = g[off + j] + dh_next[b * h + j];
              const T z = zs[off + j], c = cs[off + j];
              const T dz = dh[j] * (c - hp[j]);
              const T dc = dh[j] * z;
              dhp[j] = dh[j] * (T{1} - z);
              dac[j] = dc * (T{1} - c * c);
              daz[j] = dz * z * (T{1} - z);
            }
            std::fill(drh.begin(), drh.end(), T{0});
            accumulate_mv(ucv, dac.data(), h, h, drh.data());
            for (std::size_t i = 0; i < h; ++i) {
              const T r = rs[off + i];
              const T dr = drh[i] * hp[i];
              dhp[i] += drh[i] * r;
              dar[i] = dr * r * (T{1} - r);
            }
            accumulate_outer(xt, daz.data(), d, h, dwz.data());
            accumulate_outer(xt, dar.data(), d, h, dwr.data());
            accumulate_outer(xt, dac.data(), d, h, dwc.data());
            accumulate_outer(hp, daz.data(), h, h, duz.data());
            accumulate_outer(hp, dar.data(), h, h, dur.data());
            accumulate_outer(rhs.data() + off, dac.data(), h, h, duc.data());
            for (std::size_t j = 0; j < h; ++j) {
              dbz[j] += daz[j];
              dbr[j] += dar[j];
              dbc[j] += dac[j];
            }
            T* dxt = dx.data() + (t * n + b) * d;
            accumulate_mv(wzv, daz.data(), d, h, dxt);
            accumulate_mv(wrv, dar.data(), d, h, dxt);
            accumulate_mv(wcv, dac.data(), d, h, dxt);
            accumulate_mv(uzv, daz.data(), h, h, dhp.data());
            accumulate_mv(urv, dar.data(), h, h, dhp.data());
            std::copy(dhp.begin(), dhp.end(), dh_next.begin() + b * h);
          }
        }
        auto flush = [&](std::size_t which, const std::vector<T>& src) {
          if (!tp.requires_grad(ids[which])) return;
          TensorT<T>& dst = tp.grad_buffer(ids[which]);
          for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        };
        flush(kX, dx);
        flush(kH0, dh_next);
        flush(kWz, dwz);
        flush(kUz, duz);
        flush(kBz, dbz);
        flush(kWr, dwr);
        flush(kUr, dur);
        flush(kBr, dbr);
        flush(kWc, dwc);
        flush(kUc, duc);
        flush(kBc, dbc);
      });

  const TensorT<T>& seq = outputs.value();
  TensorT<T> last({n, h});
  std::copy(seq.raw() + (steps - 1) * n * h, seq.raw() + steps * n * h, last.raw());
  const std::size_t seq_id = outputs.id();
  Var<T> last_var = tape.record("gru_last", std::move(last), {outputs},
                                [seq_id, steps, n, h](Tape<T>& tp, const TensorT<T>& g) {
                                  TensorT<T>& ds = tp.grad_buffer(seq_id);
                                  T* dst = ds.raw() + (steps - 1) * n * h;
                                  for (std::size_t i = 0; i < n * h; ++i) dst[i] += g[i];
                                });
  return {outputs, last_var};
}

template <typename T>
Var<T> categorical_cross_entropy(Var<T> probs, std::span<const int> targets) {
  const std::string op = "categorical_cross_entropy";
  const Shape& s = probs.shape();
  require_rank(op, "probs", s, 2);
  const std::size_t n = s[0], c = s[1];
  if (targets.size() != n) {
    shape_error(op, std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  }
  if (n == 0) shape_error(op, "empty batch");
  for (int tgt : targets) {
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= c) {
      throw InvalidLabelError(op + ": target " + std::to_string(tgt) + " outside [0, " +
                              std::to_string(c) + ")");
    }
  }
  const TensorT<T>& p = probs.value();
  const T floor = static_cast<T>(kProbabilityFloor);
  T total{0};
  for (std::size_t r = 0; r < n; ++r) {
    const T v = std::clamp(p[r * c + targets[r]], floor, T{1});
    total -= std::log(v);
  }
  std::vector<int> tg(targets.begin(), targets.end());
  const std::size_t p_id = probs.id();
  return probs.tape()->record(op, TensorT<T>::scalar(total / static_cast<T>(n)), {probs},
                              [p_id, n, c, floor, tg = std::move(tg)](Tape<T>& t,
                                                                      const TensorT<T>& g) {
                                const TensorT<T>& pv = t.value(p_id);
                                TensorT<T>& dp = t.grad_buffer(p_id);
                                const T scale = g[0] / static_cast<T>(n);
                                for (std::size_t r = 0; r < n; ++r) {
                                  const std::size_t idx = r * c + tg[r];
                                  if (pv[idx] > floor && pv[idx] <= T{1}) dp[idx] -= scale / pv[idx];
                                }
                              });
}

template <typename T>
Var<T> reshape(Var<T> input, Shape shape) {
  TensorT<T> out = input.value().reshaped(shape);
  const std::size_t in_id = input.id();
  return input.tape()->record("reshape", std::move(out), {input},
                              [in_id](Tape<T>& t, const TensorT<T>& g) {
                                TensorT<T>& dx = t.grad_buffer(in_id);
                                for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
                              });
}

template <typename T>
Var<T> gather_rows(Var<T> input, std::span<const std::size_t> rows) {
  const Shape& s = input.shape();
  if (s.empty()) shape_error("gather_rows", "input must have rank >= 1");
  const std::size_t stride = s[0] == 0 ? 0 : input.value().size() / s[0];
  for (std::size_t r : rows) {
    if (r >= s[0]) {
      shape_error("gather_rows", "row " + std::to_string(r) + " out of range " + std::to_string(s[0]));
    }
  }
  Shape os = s;
  os[0] = rows.size();
  TensorT<T> out(os);
  const TensorT<T>& x = input.value();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(x.raw() + rows[i] * stride, x.raw() + (rows[i] + 1) * stride, out.raw() + i * stride);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t in_id = input.id();
  return input.tape()->record("gather_rows", std::move(out), {input},
                              [in_id, stride, idx = std::move(idx)](Tape<T>& t, const TensorT<T>& g) {
                                TensorT<T>& dx = t.grad_buffer(in_id);
                                for (std::size_t i = 0; i < idx.size(); ++i) {
                                  T* dst = dx.raw() + idx[i] * stride;
                                  const T* src = g.raw() + i * stride;
                                  for (std::size_t k = 0; k < stride; ++k) dst[k] += src[k];
                                }
                              });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  same_tape("add", a, b);
  if (a.shape() != b.shape()) {
    shape_error("add", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  TensorT<T> out = a.value();
  add_into(out, b.value());
  const std::size_t a_id = a.id(), b_id = b.id();
  return a.tape()->record("add", std::move(out), {a, b}, [a_id, b_id](Tape<T>& t, const TensorT<T>& g) {
    if (t.requires_grad(a_id)) add_into(t.grad_buffer(a_id), g);
    if (t.requires_grad(b_id)) add_into(t.grad_buffer(b_id), g);
  });
}

template <typename T>
Var<T> sum(Var<T> input) {
  T total{0};
  for (T v : input.value().data()) total += v;
  const std::size_t in_id = input.id();
  return input.tape()->record("sum", TensorT<T>::scalar(total), {input},
                              [in_id](Tape<T>& t, const TensorT<T>& g) {
                                TensorT<T>& dx = t.grad_buffer(in_id);
                                for (T& v : dx.data()) v += g[0];
                              });
}

template <typename T>
Var<T> weighted_sum(Var<T> input, const BasicTensor<T>& weights) {
  if (weights.size() != input.value().size()) {
    shape_error("weighted_sum", "weights " + shape_string(weights.shape()) + " vs input " +
                                    shape_string(input.shape()));
  }
  T total{0};
  const TensorT<T>& x = input.value();
  for (std::size_t i = 0; i < x.size(); ++i) total += x[i] * weights[i];
  const std::size_t in_id = input.id();
  return input.tape()->record("weighted_sum", TensorT<T>::scalar(total), {input},
                              [in_id, w = weights](Tape<T>& t, const TensorT<T>& g) {
                                TensorT<T>& dx = t.grad_buffer(in_id);
                                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[0] * w[i];
                              });
}

#define TCL_INSTANTIATE_OPS(T)                                                               \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, int, int);                                  \
  template Var<T> max_pool2d(Var<T>, int, int);                                              \
  template Var<T> local_response_norm(Var<T>, const LrnParams&);                             \
  template Var<T> dense(Var<T>, Var<T>, Var<T>);                                             \
  template Var<T> relu(Var<T>);                                                              \
  template Var<T> softmax(Var<T>);                                                           \
  template Var<T> dropout(Var<T>, double, Mode, Rng&);                                       \
  template Var<T> concat(Var<T>, Var<T>);                                                    \
  template GruOutputs<T> gru_sequence(Var<T>, Var<T>, const GruWeights<T>&);                 \
  template Var<T> categorical_cross_entropy(Var<T>, std::span<const int>);                   \
  template Var<T> reshape(Var<T>, Shape);                                                    \
  template Var<T> gather_rows(Var<T>, std::span<const std::size_t>);                         \
  template Var<T> add(Var<T>, Var<T>);                                                       \
  template Var<T> sum(Var<T>);                                                               \
  template Var<T> weighted_sum(Var<T>, const BasicTensor<T>&);

TCL_INSTANTIATE_OPS(float)
TCL_INSTANTIATE_OPS(double)

#undef TCL_INSTANTIATE_OPS

}  // namespace tcl::ops
