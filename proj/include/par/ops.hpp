#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "par/array.hpp"
#include "par/tape.hpp"

namespace par {

// Row-major boolean matrix; 1 = allowed.
struct BoolMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<unsigned char> data;

  BoolMatrix() = default;
  BoolMatrix(std::size_t r, std::size_t c, bool fill) : rows(r), cols(c), data(r * c, fill ? 1 : 0) {}

  bool operator()(std::size_t r, std::size_t c) const { return data[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { data[r * cols + c] = v ? 1 : 0; }
  const unsigned char* row(std::size_t r) const { return data.data() + r * cols; }
  std::size_t row_count(std::size_t r) const;

  friend bool operator==(const BoolMatrix&, const BoolMatrix&) = default;
};

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

// x[r, :] + bias for every row.
template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& bias);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

// Elementwise product with a fixed array (dropout keep-masks, constants).
template <typename T>
Var<T> mul_const(const Var<T>& x, const Array<T>& c);

template <typename T>
Var<T> scale(const Var<T>& x, T s);

template <typename T>
Var<T> sum(const Var<T>& x);

// x * w + b; x is [rows x in], w is [in x out], b is [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <typename T>
Var<T> row_slice(const Var<T>& x, std::size_t begin, std::size_t count);

// Embedding lookup: out[i] = table[ids[i]].
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::span<const int> ids);

template <typename T>
Var<T> masked_softmax(const Var<T>& x, const BoolMatrix& mask, T scale);

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps);

template <typename T>
Var<T> squared_relu(const Var<T>& x);

// Rotary position encoding over heads laid out contiguously along columns.
template <typename T>
Var<T> rotary(const Var<T>& x, std::span<const long long> positions, std::size_t num_heads, std::size_t head_dim,
              std::size_t rotary_dims);

// sum_r weight[r] * (CE(logits[r], target[r]) + z_coeff * logZ_r^2).
template <typename T>
Var<T> cross_entropy_zloss(const Var<T>& logits, std::span<const int> targets, std::span<const T> weights,
                           T z_coeff);

}  // namespace par
