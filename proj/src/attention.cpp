#include "par/attention.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include "par/kernels.hpp"

namespace par {

using kernels::Trans;

std::size_t HeadConfig::rotary_dims() const {
  if (rotary_fraction < 0.0 || rotary_fraction > 1.0) {
    throw ConfigError("rotary_fraction must lie in [0, 1], got " + std::to_string(rotary_fraction));
  }
  const auto dims = static_cast<std::size_t>(std::llround(rotary_fraction * static_cast<double>(head_dim)));
  if (dims % 2 != 0) {
    throw ConfigError("rotary_fraction " + std::to_string(rotary_fraction) + " x head_dim " +
                      std::to_string(head_dim) + " gives an odd rotated span of " + std::to_string(dims));
  }
  return dims;
}

void HeadConfig::validate() const {
  if (num_heads == 0 || head_dim == 0) throw ConfigError("num_heads and head_dim must be positive");
  (void)rotary_dims();
}

AttentionMask make_self_mask(std::size_t n) {
  if (n == 0) throw ConfigError("make_self_mask: n must be >= 1");
  AttentionMask mask(n, n, false);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t k = 0; k <= q; ++k) mask.set(q, k, true);
  }
  return mask;
}

namespace {
std::atomic<bool> g_cross_mask_fault{false};
}

void set_cross_mask_fault(bool enabled) { g_cross_mask_fault = enabled; }

AttentionMask make_cross_mask(std::size_t m, std::size_t n) {
  if (n == 0 || n > m) {
    throw ConfigError("make_cross_mask: need 1 <= n <= m, got m=" + std::to_string(m) + " n=" + std::to_string(n));
  }
  AttentionMask mask(n, m, false);
  for (std::size_t q = 0; q < n; ++q) {
    const std::size_t pos = m - n + q;
    for (std::size_t k = 0; k <= pos; ++k) mask.set(q, k, true);
    if (g_cross_mask_fault && pos + 1 < m) mask.set(q, pos + 1, true);
  }
  return mask;
}

AttentionMask cross_attend_key_dropout(const AttentionMask& mask, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("cross-attend dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return mask;
  const std::size_t n = mask.rows, m = mask.cols;
  std::vector<unsigned char> protect(m, 0);
  for (std::size_t q = 0; q < n; ++q) protect[m - n + q] = 1;
  AttentionMask out = mask;
  for (std::size_t k = 0; k < m; ++k) {
    const bool drop = uniform01(rng) < rate;
    if (!drop || protect[k]) continue;
    for (std::size_t q = 0; q < n; ++q) out.set(q, k, false);
  }
  return out;
}

template <typename T>
Array<T> rotary_encode(const Array<T>& x, std::span<const long long> positions, const HeadConfig& cfg) {
  if (x.rank() != 2 || x.cols() != cfg.head_dim) {
    throw DimensionError("rotary_encode: expected [positions x " + std::to_string(cfg.head_dim) + "], got " +
                         shape_string(x.shape()));
  }
  Array<T> out = x;
  kernels::rotary(out, positions, 1, cfg.head_dim, cfg.rotary_dims(), +1);
  return out;
}

namespace {

thread_local std::size_t g_attention_peak = 0;

void note_attention_buffer(std::size_t elements) { g_attention_peak = std::max(g_attention_peak, elements); }

void check_rows(const AttentionMask& mask) {
  for (std::size_t q = 0; q < mask.rows; ++q) {
    if (mask.row_count(q) == 0) {
      throw DegenerateRowError("attention mask row " + std::to_string(q) + " allows no keys");
    }
  }
}

// Fills probs[h] (n x m, contiguous per head) for heads [h0, h1) of one
// segment; q and k point at the segment's first rows.
template <typename T>
void attention_maps(const T* q, const T* k, std::size_t width, const AttentionMask& mask, std::size_t h0,
                    std::size_t h1, std::size_t head_dim, std::vector<T>& probs) {
  const std::size_t n = mask.rows, m = mask.cols;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  for (std::size_t h = h0; h < h1; ++h) {
    T* p = probs.data() + (h - h0) * n * m;
    kernels::gemm<T>(Trans::no, Trans::yes, n, m, head_dim, T{1}, q + h * head_dim, width, k + h * head_dim, width,
                     T{0}, p, m);
    for (std::size_t r = 0; r < n; ++r) kernels::masked_softmax_row(p + r * m, mask.row(r), m, scale, p + r * m);
  }
}

}  // namespace

void AttentionMemoryProbe::reset() { g_attention_peak = 0; }
std::size_t AttentionMemoryProbe::peak_elements() { return g_attention_peak; }

template <typename T>
Var<T> attention_core(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::span<const AttentionSegment> segments,
                      std::size_t num_heads, std::size_t head_dim, std::size_t heads_per_chunk) {
  const std::size_t rows_q = q.value().rows(), rows_k = k.value().rows(), width = num_heads * head_dim;
  if (q.value().cols() != width || k.value().cols() != width || v.value().cols() != width) {
    throw DimensionError("attention_core: Q/K/V width must be heads x head_dim = " + std::to_string(width));
  }
  if (v.value().rows() != rows_k) throw DimensionError("attention_core: K and V row counts differ");
  if (heads_per_chunk == 0) heads_per_chunk = num_heads;
  if (num_heads % heads_per_chunk != 0) {
    throw ConfigError("heads_per_chunk " + std::to_string(heads_per_chunk) + " does not divide " +
                      std::to_string(num_heads) + " heads");
  }
  std::size_t biggest = 0;
  for (const auto& s : segments) {
    if (s.q_begin + s.mask.rows > rows_q || s.k_begin + s.mask.cols > rows_k) {
      throw DimensionError("attention_core: mask " + shape_string({s.mask.rows, s.mask.cols}) + " at rows (" +
                           std::to_string(s.q_begin) + ", " + std::to_string(s.k_begin) + ") exceeds " +
                           std::to_string(rows_q) + " queries x " + std::to_string(rows_k) + " keys");
    }
    check_rows(s.mask);
    biggest = std::max(biggest, s.mask.rows * s.mask.cols);
  }

  Array<T> out(Shape{rows_q, width});
  std::vector<T> probs(heads_per_chunk * biggest);
  note_attention_buffer(probs.size());
  const T* qd = q.value().data().data();
  const T* kd = k.value().data().data();
  const T* vd = v.value().data().data();
  for (const auto& s : segments) {
    const std::size_t n = s.mask.rows, m = s.mask.cols;
    for (std::size_t h0 = 0; h0 < num_heads; h0 += heads_per_chunk) {
      const std::size_t h1 = h0 + heads_per_chunk;
      attention_maps(qd + s.q_begin * width, kd + s.k_begin * width, width, s.mask, h0, h1, head_dim, probs);
      for (std::size_t h = h0; h < h1; ++h) {
        kernels::gemm<T>(Trans::no, Trans::no, n, head_dim, m, T{1}, probs.data() + (h - h0) * n * m, m,
                         vd + s.k_begin * width + h * head_dim, width, T{0},
                         out.row(s.q_begin) + h * head_dim, width);
      }
    }
  }

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  std::vector<AttentionSegment> segs(segments.begin(), segments.end());
  return q.tape().record(std::move(out), {q, k, v}, [=, segs = std::move(segs)](Tape<T>& t, std::size_t,
                                                                                 const Array<T>& g) {
    const T* qv = t.value(iq).data().data();
    const T* kv = t.value(ik).data().data();
    const T* vv = t.value(iv).data().data();
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
    std::vector<T> p(heads_per_chunk * biggest);
    std::vector<T> ds(biggest);
    T* dq = t.requires_grad(iq) ? t.grad_buffer(iq).data().data() : nullptr;
    T* dk = t.requires_grad(ik) ? t.grad_buffer(ik).data().data() : nullptr;
    T* dv = t.requires_grad(iv) ? t.grad_buffer(iv).data().data() : nullptr;
    for (const auto& s : segs) {
      const std::size_t n = s.mask.rows, m = s.mask.cols;
      const std::size_t qo = s.q_begin * width, ko = s.k_begin * width;
      for (std::size_t h0 = 0; h0 < num_heads; h0 += heads_per_chunk) {
        const std::size_t h1 = h0 + heads_per_chunk;
        attention_maps(qv + qo, kv + ko, width, s.mask, h0, h1, head_dim, p);
        for (std::size_t h = h0; h < h1; ++h) {
          const T* ph = p.data() + (h - h0) * n * m;
          const T* go = g.data().data() + qo + h * head_dim;
          if (dv) {
            kernels::gemm<T>(Trans::yes, Trans::no, m, head_dim, n, T{1}, ph, m, go, width, T{1},
                             dv + ko + h * head_dim, width);
          }
          if (!dq && !dk) continue;
          kernels::gemm<T>(Trans::no, Trans::yes, n, m, head_dim, T{1}, go, width, vv + ko + h * head_dim, width,
                           T{0}, ds.data(), m);
          for (std::size_t r = 0; r < n; ++r) {
            T* dr = ds.data() + r * m;
            const T* pr = ph + r * m;
            T dot = 0;
            for (std::size_t c = 0; c < m; ++c) dot += dr[c] * pr[c];
            for (std::size_t c = 0; c < m; ++c) dr[c] = pr[c] * (dr[c] - dot);
          }
          if (dq) {
            kernels::gemm<T>(Trans::no, Trans::no, n, head_dim, m, scale, ds.data(), m, kv + ko + h * head_dim,
                             width, T{1}, dq + qo + h * head_dim, width);
          }
          if (dk) {
            kernels::gemm<T>(Trans::yes, Trans::no, m, head_dim, n, scale, ds.data(), m, qv + qo + h * head_dim,
                             width, T{1}, dk + ko + h * head_dim, width);
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> attention_core(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionMask& mask,
                      std::size_t num_heads, std::size_t head_dim, std::size_t heads_per_chunk) {
  if (mask.rows != q.value().rows() || mask.cols != k.value().rows()) {
    throw DimensionError("attention_core: mask " + shape_string({mask.rows, mask.cols}) + " does not match " +
                         std::to_string(q.value().rows()) + " queries x " + std::to_string(k.value().rows()) +
                         " keys");
  }
  const AttentionSegment seg{0, 0, mask};
  return attention_core(q, k, v, std::span<const AttentionSegment>(&seg, 1), num_heads, head_dim, heads_per_chunk);
}

namespace {

template <typename T>
Var<T> attend(const Var<T>& xq, const Var<T>& xkv, std::span<const AttentionSegment> segments,
              const AttentionWeights<T>& w,
              const HeadConfig& heads, std::span<const long long> qpos, std::span<const long long> kpos,
              std::size_t heads_per_chunk) {
  heads.validate();
  const std::size_t rot = heads.rotary_dims();
  Var<T> q = linear(xq, w.wq, w.bq);
  Var<T> k = linear(xkv, w.wk, w.bk);
  Var<T> v = linear(xkv, w.wv, w.bv);
  if (q.value().cols() != heads.width()) {
    throw DimensionError("qkv_attention: projection width " + std::to_string(q.value().cols()) +
                         " is not heads x head_dim = " + std::to_string(heads.width()));
  }
  q = rotary(q, qpos, heads.num_heads, heads.head_dim, rot);
  k = rotary(k, kpos, heads.num_heads, heads.head_dim, rot);
  Var<T> o = attention_core(q, k, v, segments, heads.num_heads, heads.head_dim, heads_per_chunk);
  return linear(o, w.wo, w.bo);
}

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, Rng& rng) {
  Array<T> keep(x.shape());
  const T inv = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& v : keep.data()) v = uniform01(rng) < rate ? T{0} : inv;
  return mul_const(x, keep);
}

}  // namespace

template <typename T>
Var<T> qkv_attention(const Var<T>& xq, const Var<T>& xkv, const AttentionMask& mask, const AttentionWeights<T>& w,
                     const HeadConfig& heads, std::span<const long long> query_positions,
                     std::span<const long long> key_positions) {
  const AttentionSegment seg{0, 0, mask};
  return attend(xq, xkv, std::span<const AttentionSegment>(&seg, 1), w, heads, query_positions, key_positions,
                heads.num_heads);
}

template <typename T>
Var<T> chunked_cross_attend(const Var<T>& xq, const Var<T>& xkv, const AttentionMask& mask,
                            const AttentionWeights<T>& w, const HeadConfig& heads,
                            std::span<const long long> query_positions, std::span<const long long> key_positions,
                            std::size_t heads_per_chunk) {
  if (heads_per_chunk == 0 || heads.num_heads % heads_per_chunk != 0) {
    throw ConfigError("heads_per_chunk " + std::to_string(heads_per_chunk) + " does not divide " +
                      std::to_string(heads.num_heads) + " heads");
  }
  const AttentionSegment seg{0, 0, mask};
  return attend(xq, xkv, std::span<const AttentionSegment>(&seg, 1), w, heads, query_positions, key_positions,
                heads_per_chunk);
}

template <typename T>
Var<T> mlp(const Var<T>& x, const MlpWeights<T>& w) {
  return linear(squared_relu(linear(x, w.w1, w.b1)), w.w2, w.b2);
}

template <typename T>
Var<T> attention_block(const Var<T>& xq, const std::optional<Var<T>>& xkv, std::span<const AttentionSegment> segments,
                       const BlockWeights<T>& w, std::span<const long long> query_positions,
                       std::span<const long long> key_positions, const BlockOptions& opts) {
  const T eps = static_cast<T>(opts.ln_eps);
  Var<T> q_ln = layer_norm(xq, w.ln_q_gain, w.ln_q_bias, eps);
  Var<T> kv_ln = xkv ? layer_norm(*xkv, w.ln_kv_gain, w.ln_kv_bias, eps) : q_ln;
  const std::size_t hpc = opts.heads_per_chunk == 0 ? opts.heads.num_heads : opts.heads_per_chunk;
  Var<T> a = attend(q_ln, kv_ln, segments, w.attn, opts.heads, query_positions, key_positions, hpc);
  const bool drop = opts.dropout > 0.0 && opts.rng != nullptr;
  if (drop) a = dropout(a, opts.dropout, *opts.rng);
  Var<T> h = add(xq, a);
  Var<T> f = mlp(layer_norm(h, w.ln_mlp_gain, w.ln_mlp_bias, eps), w.mlp);
  if (drop) f = dropout(f, opts.dropout, *opts.rng);
  return add(h, f);
}

template <typename T>
Var<T> attention_block(const Var<T>& xq, const std::optional<Var<T>>& xkv, const AttentionMask& mask,
                       const BlockWeights<T>& w, std::span<const long long> query_positions,
                       std::span<const long long> key_positions, const BlockOptions& opts) {
  const std::size_t keys = xkv ? xkv->value().rows() : xq.value().rows();
  if (mask.rows != xq.value().rows() || mask.cols != keys) {
    throw DimensionError("attention_block: mask " + shape_string({mask.rows, mask.cols}) + " does not match " +
                         std::to_string(xq.value().rows()) + " queries x " + std::to_string(keys) + " keys");
  }
  const AttentionSegment seg{0, 0, mask};
  return attention_block(xq, xkv, std::span<const AttentionSegment>(&seg, 1), w, query_positions, key_positions,
                         opts);
}

#define PAR_INSTANTIATE_ATTENTION(T)                                                                           \
  template Array<T> rotary_encode<T>(const Array<T>&, std::span<const long long>, const HeadConfig&);          \
  template Var<T> attention_core<T>(const Var<T>&, const Var<T>&, const Var<T>&, const AttentionMask&,         \
                                    std::size_t, std::size_t, std::size_t);                                    \
  template Var<T> qkv_attention<T>(const Var<T>&, const Var<T>&, const AttentionMask&,                         \
                                   const AttentionWeights<T>&, const HeadConfig&, std::span<const long long>,  \
                                   std::span<const long long>);                                                \
  template Var<T> chunked_cross_attend<T>(const Var<T>&, const Var<T>&, const AttentionMask&,                  \
                                          const AttentionWeights<T>&, const HeadConfig&,                       \
                                          std::span<const long long>, std::span<const long long>,              \
                                          std::size_t);                                                        \
  template Var<T> attention_core<T>(const Var<T>&, const Var<T>&, const Var<T>&,                             \
                                    std::span<const AttentionSegment>, std::size_t, std::size_t, std::size_t);  \
  template Var<T> attention_block<T>(const Var<T>&, const std::optional<Var<T>>&,                              \
                                     std::span<const AttentionSegment>, const BlockWeights<T>&,                \
                                     std::span<const long long>, std::span<const long long>, const BlockOptions&); \
  template Var<T> mlp<T>(const Var<T>&, const MlpWeights<T>&);                                                 \
  template Var<T> attention_block<T>(const Var<T>&, const std::optional<Var<T>>&, const AttentionMask&,        \
                                     const BlockWeights<T>&, std::span<const long long>,                       \
                                     std::span<const long long>, const BlockOptions&);

PAR_INSTANTIATE_ATTENTION(float)
PAR_INSTANTIATE_ATTENTION(double)

}  // namespace par
