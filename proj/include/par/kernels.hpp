#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "par/array.hpp"

// Raw kernels shared by the tape ops and the tape-free inference path.
namespace par::kernels {

enum class Trans { no, yes };

// C = alpha * op(A) * op(B) + beta * C, row-major with explicit leading dims.
template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

// out[rows x cols] = x[rows x inner] * w[inner x cols] (+ bias row).
template <typename T>
void linear(const Array<T>& x, const Array<T>& w, const Array<T>* bias, Array<T>& out);

// Per-row layer norm. Writes the normalized (pre-affine) rows and the
// reciprocal standard deviations when those outputs are non-null.
template <typename T>
void layer_norm(const Array<T>& x, const Array<T>& gain, const Array<T>& bias, T eps, Array<T>& out,
                Array<T>* normalized, std::vector<T>* inv_std);

// Rotates the first `rotary_dims` channels of every head in place.
// `sign` = +1 applies the rotation, -1 applies its inverse.
template <typename T>
void rotary(Array<T>& x, std::span<const long long> positions, std::size_t num_heads, std::size_t head_dim,
            std::size_t rotary_dims, int sign);

// Frequency of rotary pair j for a rotated span of `rotary_dims`.
double rotary_frequency(std::size_t j, std::size_t rotary_dims);

// Softmax of one row over entries where allowed[k] != 0; masked entries get
// exactly zero. Returns false when no entry is allowed.
template <typename T>
bool masked_softmax_row(const T* in, const unsigned char* allowed, std::size_t len, T scale, T* out);

inline constexpr double kMaskedLogit = -1e9;

}  // namespace par::kernels
