#include "par/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "par/kernels.hpp"

namespace par {

using kernels::Trans;

std::size_t BoolMatrix::row_count(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < cols; ++c) n += data[r * cols + c];
  return n;
}

namespace {

template <typename T>
void require_matrix(const Var<T>& v, const char* op) {
  if (v.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(v.shape()));
  }
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().cols();
  if (b.value().rows() != k) {
    throw DimensionError("matmul: inner extents disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Array<T> out(Shape{m, n});
  kernels::gemm<T>(Trans::no, Trans::no, m, n, k, T{1}, a.value().data().data(), k, b.value().data().data(), n,
                   T{0}, out.data().data(), n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, n, k](Tape<T>& t, std::size_t, const Array<T>& g) {
    if (t.requires_grad(ia)) {
      kernels::gemm<T>(Trans::no, Trans::yes, m, k, n, T{1}, g.data().data(), n, t.value(ib).data().data(), n,
                       T{1}, t.grad_buffer(ia).data().data(), k);
    }
    if (t.requires_grad(ib)) {
      kernels::gemm<T>(Trans::yes, Trans::no, k, n, m, T{1}, t.value(ia).data().data(), k, g.data().data(), n,
                       T{1}, t.grad_buffer(ib).data().data(), n);
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Array<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t, const Array<T>& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, g);
  });
}

template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& bias) {
  require_matrix(x, "add_row");
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  if (bias.value().size() != cols) throw DimensionError("add_row: bias length does not match columns");
  Array<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out(r, c) += bias.value()[c];
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [ix, ib, rows, cols](Tape<T>& t, std::size_t, const Array<T>& g) {
    if (t.requires_grad(ix)) t.accumulate(ix, g);
    if (t.requires_grad(ib)) {
      auto gb = t.grad_buffer(ib).data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g(r, c);
      }
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Array<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t, const Array<T>& g) {
    if (t.requires_grad(ia)) {
      auto d = t.grad_buffer(ia).data();
      const auto& bv = t.value(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad_buffer(ib).data();
      const auto& av = t.value(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> mul_const(const Var<T>& x, const Array<T>& c) {
  if (x.shape() != c.shape()) throw DimensionError("mul_const: shape mismatch");
  Array<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, c](Tape<T>& t, std::size_t, const Array<T>& g) {
    auto d = t.grad_buffer(ix).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * c[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  Array<T> out = x.value();
  for (auto& v : out.data()) v *= s;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, s](Tape<T>& t, std::size_t, const Array<T>& g) {
    auto d = t.grad_buffer(ix).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * s;
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.tape().record(Array<T>::scalar(s), {x}, [ix](Tape<T>& t, std::size_t, const Array<T>& g) {
    const T gv = g[0];
    for (auto& d : t.grad_buffer(ix).data()) d += gv;
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_matrix(x, "linear");
  require_matrix(w, "linear");
  const std::size_t rows = x.value().rows(), in = x.value().cols(), out_cols = w.value().cols();
  if (w.value().rows() != in) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  }
  if (b.value().size() != out_cols) throw DimensionError("linear: bias length does not match output width");
  Array<T> out;
  kernels::linear(x.value(), w.value(), &b.value(), out);
  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return x.tape().record(std::move(out), {x, w, b}, [=](Tape<T>& t, std::size_t, const Array<T>& g) {
    if (t.requires_grad(ix)) {
      kernels::gemm<T>(Trans::no, Trans::yes, rows, in, out_cols, T{1}, g.data().data(), out_cols,
                       t.value(iw).data().data(), out_cols, T{1}, t.grad_buffer(ix).data().data(), in);
    }
    if (t.requires_grad(iw)) {
      kernels::gemm<T>(Trans::yes, Trans::no, in, out_cols, rows, T{1}, t.value(ix).data().data(), in,
                       g.data().data(), out_cols, T{1}, t.grad_buffer(iw).data().data(), out_cols);
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad_buffer(ib).data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < out_cols; ++c) gb[c] += g(r, c);
      }
    }
  });
}

template <typename T>
Var<T> row_slice(const Var<T>& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "row_slice");
  const std::size_t cols = x.value().cols();
  if (begin + count > x.value().rows()) throw DimensionError("row_slice: range exceeds rows");
  Array<T> out(Shape{count, cols});
  std::copy_n(x.value().row(begin), count * cols, out.data().data());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, begin, count, cols](Tape<T>& t, std::size_t, const Array<T>& g) {
    T* d = t.grad_buffer(ix).row(begin);
    for (std::size_t i = 0; i < count * cols; ++i) d[i] += g[i];
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& table, std::span<const int> ids) {
  require_matrix(table, "gather_rows");
  const std::size_t vocab = table.value().rows(), cols = table.value().cols();
  Array<T> out(Shape{ids.size(), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(vocab) + " rows");
    }
    std::copy_n(table.value().row(ids[i]), cols, out.row(i));
  }
  std::vector<int> idv(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {table}, [it, idv, cols](Tape<T>& t, std::size_t, const Array<T>& g) {
    Array<T>& d = t.grad_buffer(it);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      T* dr = d.row(idv[i]);
      const T* gr = g.row(i);
      for (std::size_t c = 0; c < cols; ++c) dr[c] += gr[c];
    }
  });
}

template <typename T>
Var<T> masked_softmax(const Var<T>& x, const BoolMatrix& mask, T scale) {
  require_matrix(x, "masked_softmax");
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  if (mask.rows != rows || mask.cols != cols) {
    throw DimensionError("masked_softmax: mask " + shape_string({mask.rows, mask.cols}) + " vs input " +
                         shape_string(x.shape()));
  }
  Array<T> out(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    if (!kernels::masked_softmax_row(x.value().row(r), mask.row(r), cols, scale, out.row(r))) {
      throw DegenerateRowError("masked_softmax: row " + std::to_string(r) + " has every entry masked");
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, rows, cols, scale](Tape<T>& t, std::size_t self,
                                                                      const Array<T>& g) {
    const Array<T>& p = t.value(self);
    Array<T>& d = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += g(r, c) * p(r, c);
      for (std::size_t c = 0; c < cols; ++c) d(r, c) += scale * p(r, c) * (g(r, c) - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  require_matrix(x, "layer_norm");
  Array<T> out, xhat;
  std::vector<T> rstd;
  kernels::layer_norm(x.value(), gain.value(), bias.value(), eps, out, &xhat, &rstd);
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  const std::size_t rows = x.value().rows(), c = x.value().cols();
  return x.tape().record(std::move(out), {x, gain, bias}, [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::size_t, const Array<T>& g) {
    const Array<T>& gv = t.value(ig);
    if (t.requires_grad(ig)) {
      T* dg = t.grad_buffer(ig).data().data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) dg[j] += g(r, j) * xhat(r, j);
      }
    }
    if (t.requires_grad(ib)) {
      T* db = t.grad_buffer(ib).data().data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) db[j] += g(r, j);
      }
    }
    if (t.requires_grad(ix)) {
      Array<T>& d = t.grad_buffer(ix);
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_d = 0, mean_dx = 0;
        for (std::size_t j = 0; j < c; ++j) {
          const T dh = g(r, j) * gv[j];
          mean_d += dh;
          mean_dx += dh * xhat(r, j);
        }
        mean_d /= static_cast<T>(c);
        mean_dx /= static_cast<T>(c);
        for (std::size_t j = 0; j < c; ++j) {
          const T dh = g(r, j) * gv[j];
          d(r, j) += rstd[r] * (dh - mean_d - xhat(r, j) * mean_dx);
        }
      }
    }
  });
}

template <typename T>
Var<T> squared_relu(const Var<T>& x) {
  Array<T> out = x.value();
  for (auto& v : out.data()) v = v > 0 ? v * v : T{0};
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& t, std::size_t, const Array<T>& g) {
    const auto& xv = t.value(ix);
    auto d = t.grad_buffer(ix).data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (xv[i] > 0) d[i] += g[i] * 2 * xv[i];
    }
  });
}

template <typename T>
Var<T> rotary(const Var<T>& x, std::span<const long long> positions, std::size_t num_heads, std::size_t head_dim,
              std::size_t rotary_dims) {
  require_matrix(x, "rotary");
  Array<T> out = x.value();
  kernels::rotary(out, positions, num_heads, head_dim, rotary_dims, +1);
  std::vector<long long> pos(positions.begin(), positions.end());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=, pos = std::move(pos)](Tape<T>& t, std::size_t, const Array<T>& g) {
    Array<T> back = g;
    kernels::rotary(back, pos, num_heads, head_dim, rotary_dims, -1);
    t.accumulate(ix, back);
  });
}

template <typename T>
Var<T> cross_entropy_zloss(const Var<T>& logits, std::span<const int> targets, std::span<const T> weights,
                           T z_coeff) {
  require_matrix(logits, "cross_entropy_zloss");
  const std::size_t rows = logits.value().rows(), vocab = logits.value().cols();
  if (targets.size() != rows || weights.size() != rows) {
    throw DimensionError("cross_entropy_zloss: targets/weights length does not match logit rows");
  }
  Array<T> probs(Shape{rows, vocab});
  std::vector<T> log_z(rows);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw DimensionError("cross_entropy_zloss: target id out of range");
    }
    const T* lr = logits.value().row(r);
    const T mx = *std::max_element(lr, lr + vocab);
    T s = 0;
    for (std::size_t c = 0; c < vocab; ++c) {
      probs(r, c) = std::exp(lr[c] - mx);
      s += probs(r, c);
    }
    for (std::size_t c = 0; c < vocab; ++c) probs(r, c) /= s;
    log_z[r] = mx + std::log(s);
    if (weights[r] != 0) total += weights[r] * (log_z[r] - lr[targets[r]] + z_coeff * log_z[r] * log_z[r]);
  }
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<T> w(weights.begin(), weights.end());
  const std::size_t il = logits.id();
  return logits.tape().record(
      Array<T>::scalar(total), {logits},
      [=, probs = std::move(probs), log_z = std::move(log_z), tg = std::move(tg), w = std::move(w)](Tape<T>& t, std::size_t, const Array<T>& g) {
        Array<T>& d = t.grad_buffer(il);
        for (std::size_t r = 0; r < rows; ++r) {
          if (w[r] == 0) continue;
          const T k = g[0] * w[r];
          const T zfactor = 1 + 2 * z_coeff * log_z[r];
          for (std::size_t c = 0; c < vocab; ++c) d(r, c) += k * zfactor * probs(r, c);
          d(r, tg[r]) -= k;
        }
      });
}

#define PAR_INSTANTIATE_OPS(T)                                                                                   \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                          \
  template Var<T> add_row<T>(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                          \
  template Var<T> mul_const<T>(const Var<T>&, const Array<T>&);                                                  \
  template Var<T> scale<T>(const Var<T>&, T);                                                                    \
  template Var<T> sum<T>(const Var<T>&);                                                                         \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                        \
  template Var<T> row_slice<T>(const Var<T>&, std::size_t, std::size_t);                                         \
  template Var<T> gather_rows<T>(const Var<T>&, std::span<const int>);                                           \
  template Var<T> masked_softmax<T>(const Var<T>&, const BoolMatrix&, T);                                        \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                                 \
  template Var<T> squared_relu<T>(const Var<T>&);                                                                \
  template Var<T> rotary<T>(const Var<T>&, std::span<const long long>, std::size_t, std::size_t, std::size_t);   \
  template Var<T> cross_entropy_zloss<T>(const Var<T>&, std::span<const int>, std::span<const T>, T);

PAR_INSTANTIATE_OPS(float)
PAR_INSTANTIATE_OPS(double)

}  // namespace par
