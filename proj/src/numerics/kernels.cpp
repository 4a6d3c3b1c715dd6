#include "par/kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace par {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace par

namespace par::kernels {

bool all_finite(const float* p, std::size_t n) {
  return Eigen::Map<const Eigen::ArrayXf>(p, static_cast<Eigen::Index>(n)).allFinite();
}

bool all_finite(const double* p, std::size_t n) {
  return Eigen::Map<const Eigen::ArrayXd>(p, static_cast<Eigen::Index>(n)).allFinite();
}

namespace {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstView = Eigen::Map<const RowMajor<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using View = Eigen::Map<RowMajor<T>, 0, Eigen::OuterStride<>>;

template <typename T, typename A, typename B>
void product(const A& a, const B& b, T alpha, T beta, View<T>& c) {
  if (beta == T{0}) {
    c.noalias() = alpha * a * b;
  } else {
    if (beta != T{1}) c *= beta;
    c.noalias() += alpha * a * b;
  }
}

}  // namespace

template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  using Index = Eigen::Index;
  const auto mi = static_cast<Index>(m), ni = static_cast<Index>(n), ki = static_cast<Index>(k);
  View<T> cv(c, mi, ni, Eigen::OuterStride<>(static_cast<Index>(ldc)));
  // op(A) is m x k, op(B) is k x n; a stored transpose is viewed with swapped extents.
  const ConstView<T> av(a, ta == Trans::no ? mi : ki, ta == Trans::no ? ki : mi,
                        Eigen::OuterStride<>(static_cast<Index>(lda)));
  const ConstView<T> bv(b, tb == Trans::no ? ki : ni, tb == Trans::no ? ni : ki,
                        Eigen::OuterStride<>(static_cast<Index>(ldb)));
  if (ta == Trans::no && tb == Trans::no) {
    product(av, bv, alpha, beta, cv);
  } else if (ta == Trans::no) {
    product(av, bv.transpose(), alpha, beta, cv);
  } else if (tb == Trans::no) {
    product(av.transpose(), bv, alpha, beta, cv);
  } else {
    product(av.transpose(), bv.transpose(), alpha, beta, cv);
  }
}

template void gemm<float>(Trans, Trans, std::size_t, std::size_t, std::size_t, float, const float*, std::size_t,
                          const float*, std::size_t, float, float*, std::size_t);
template void gemm<double>(Trans, Trans, std::size_t, std::size_t, std::size_t, double, const double*, std::size_t,
                           const double*, std::size_t, double, double*, std::size_t);

template <typename T>
void linear(const Array<T>& x, const Array<T>& w, const Array<T>* bias, Array<T>& out) {
  const std::size_t rows = x.rows();
  const std::size_t inner = x.cols();
  const std::size_t cols = w.cols();
  if (w.rows() != inner) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  }
  if (out.shape() != Shape{rows, cols}) out = Array<T>(Shape{rows, cols});
  T beta = 0;
  if (bias) {
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(bias->data().data(), cols, out.row(r));
    beta = 1;
  }
  gemm<T>(Trans::no, Trans::no, rows, cols, inner, T{1}, x.data().data(), inner, w.data().data(), cols, beta,
          out.data().data(), cols);
}

template <typename T>
void layer_norm(const Array<T>& x, const Array<T>& gain, const Array<T>& bias, T eps, Array<T>& out,
                Array<T>* normalized, std::vector<T>* inv_std) {
  const std::size_t rows = x.rows();
  const std::size_t c = x.cols();
  if (gain.size() != c || bias.size() != c) {
    throw DimensionError("layer_norm: gain/bias length does not match " + std::to_string(c) + " channels");
  }
  if (out.shape() != x.shape()) out = Array<T>(x.shape());
  if (normalized && normalized->shape() != x.shape()) *normalized = Array<T>(x.shape());
  if (inv_std) inv_std->assign(rows, T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.row(r);
    double mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<double>(c);
    double var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(c);
    const T rstd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    T* o = out.row(r);
    for (std::size_t j = 0; j < c; ++j) {
      const T xhat = (xr[j] - static_cast<T>(mean)) * rstd;
      if (normalized) (*normalized)(r, j) = xhat;
      o[j] = xhat * gain[j] + bias[j];
    }
    if (inv_std) (*inv_std)[r] = rstd;
  }
}

double rotary_frequency(std::size_t j, std::size_t rotary_dims) {
  return std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(rotary_dims));
}

template <typename T>
void rotary(Array<T>& x, std::span<const long long> positions, std::size_t num_heads, std::size_t head_dim,
            std::size_t rotary_dims, int sign) {
  if (rotary_dims == 0) return;
  if (x.rows() != positions.size()) {
    throw DimensionError("rotary: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(x.rows()) + " rows");
  }
  if (x.cols() != num_heads * head_dim) throw DimensionError("rotary: width is not heads x head_dim");
  const std::size_t pairs = rotary_dims / 2;
  std::vector<double> freq(pairs);
  for (std::size_t j = 0; j < pairs; ++j) freq[j] = rotary_frequency(j, rotary_dims);
  std::vector<T> cs(pairs), sn(pairs);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double p = static_cast<double>(positions[r]);
    for (std::size_t j = 0; j < pairs; ++j) {
      const double angle = p * freq[j];
      cs[j] = static_cast<T>(std::cos(angle));
      sn[j] = static_cast<T>(sign * std::sin(angle));
    }
    T* row = x.row(r);
    for (std::size_t h = 0; h < num_heads; ++h) {
      T* head = row + h * head_dim;
      for (std::size_t j = 0; j < pairs; ++j) {
        const T a = head[2 * j];
        const T b = head[2 * j + 1];
        head[2 * j] = a * cs[j] - b * sn[j];
        head[2 * j + 1] = a * sn[j] + b * cs[j];
      }
    }
  }
}

template <typename T>
bool masked_softmax_row(const T* in, const unsigned char* allowed, std::size_t len, T scale, T* out) {
  const T masked = static_cast<T>(kMaskedLogit);
  // Vectorized exp/sum peel differently depending on the address, so work in
  // an aligned buffer: results must not depend on where a row lives.
  thread_local Eigen::Array<T, Eigen::Dynamic, 1> buf;
  if (static_cast<std::size_t>(buf.size()) < len) buf.resize(static_cast<Eigen::Index>(len));
  T mx = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::size_t k = 0; k < len; ++k) {
    const T v = allowed[k] ? in[k] * scale : masked;
    buf[static_cast<Eigen::Index>(k)] = v;
    if (allowed[k]) any = true;
    mx = std::max(mx, v);
  }
  if (!any) return false;
  auto o = buf.head(static_cast<Eigen::Index>(len));
  o = (o - mx).exp();
  for (std::size_t k = 0; k < len; ++k) {
    if (!allowed[k]) buf[static_cast<Eigen::Index>(k)] = T{0};
  }
  const T inv = T{1} / o.sum();
  for (std::size_t k = 0; k < len; ++k) out[k] = buf[static_cast<Eigen::Index>(k)] * inv;
  return true;
}

template void linear<float>(const Array<float>&, const Array<float>&, const Array<float>*, Array<float>&);
template void linear<double>(const Array<double>&, const Array<double>&, const Array<double>*, Array<double>&);
template void layer_norm<float>(const Array<float>&, const Array<float>&, const Array<float>&, float, Array<float>&,
                                Array<float>*, std::vector<float>*);
template void layer_norm<double>(const Array<double>&, const Array<double>&, const Array<double>&, double,
                                 Array<double>&, Array<double>*, std::vector<double>*);
template void rotary<float>(Array<float>&, std::span<const long long>, std::size_t, std::size_t, std::size_t, int);
template void rotary<double>(Array<double>&, std::span<const long long>, std::size_t, std::size_t, std::size_t, int);
template bool masked_softmax_row<float>(const float*, const unsigned char*, std::size_t, float, float*);
template bool masked_softmax_row<double>(const double*, const unsigned char*, std::size_t, double, double*);

}  // namespace par::kernels
