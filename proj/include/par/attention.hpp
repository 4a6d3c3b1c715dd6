#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "par/array.hpp"
#include "par/ops.hpp"
#include "par/rng.hpp"
#include "par/tape.hpp"

namespace par {

// allowed(q, k): query q may read key k.
using AttentionMask = BoolMatrix;

struct HeadConfig {
  std::size_t num_heads = 1;
  std::size_t head_dim = 1;
  double rotary_fraction = 0.5;

  std::size_t width() const { return num_heads * head_dim; }
  // Number of leading channels per head that are rotated. Throws
  // ConfigError unless the rounded span is even.
  std::size_t rotary_dims() const;
  void validate() const;
};

// allowed[q][k] = (k <= q).
AttentionMask make_self_mask(std::size_t n);

// Latent q sits at input position m - n + q and reads keys up to and
// including that position.
AttentionMask make_cross_mask(std::size_t m, std::size_t n);

// Negative-control hook for the self test: while enabled, make_cross_mask
// also lets every latent read the key just after its own position.
void set_cross_mask_fault(bool enabled);

// Drops whole key columns with probability `rate` without rescaling. Columns
// that hold some latent's own position (m - n + q) are never dropped.
AttentionMask cross_attend_key_dropout(const AttentionMask& mask, double rate, Rng& rng);

// Rotary encoding of a [positions x head_dim] array.
template <typename T>
Array<T> rotary_encode(const Array<T>& x, std::span<const long long> positions, const HeadConfig& cfg);

template <typename T>
struct AttentionWeights {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct MlpWeights {
  Var<T> w1, b1, w2, b2;
};

// Pre-layernorm attention block. `ln_kv_*` is only read for
// cross-attention; self-attention normalizes once and shares the result.
template <typename T>
struct BlockWeights {
  Var<T> ln_q_gain, ln_q_bias;
  Var<T> ln_kv_gain, ln_kv_bias;
  AttentionWeights<T> attn;
  Var<T> ln_mlp_gain, ln_mlp_bias;
  MlpWeights<T> mlp;
};

struct BlockOptions {
  HeadConfig heads;
  std::size_t heads_per_chunk = 0;  // 0 = all heads at once
  double dropout = 0.0;             // post-attention / post-MLP, training only
  Rng* rng = nullptr;
  double ln_eps = 1e-5;
};

// One sequence of a row-packed batch: query rows [q_begin, q_begin +
// mask.rows) attend to key rows [k_begin, k_begin + mask.cols).
struct AttentionSegment {
  std::size_t q_begin = 0;
  std::size_t k_begin = 0;
  AttentionMask mask;
};

// Scaled masked softmax attention over pre-projected, pre-rotated Q, K, V
// laid out as [rows x heads*head_dim]. Heads are processed in groups of
// `heads_per_chunk`; the attention maps for a group are the only transient
// [group x n x m] buffer and are recomputed during the backward pass.
template <typename T>
Var<T> attention_core(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionMask& mask,
                      std::size_t num_heads, std::size_t head_dim, std::size_t heads_per_chunk);

// Packed variant: every segment is attended independently.
template <typename T>
Var<T> attention_core(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::span<const AttentionSegment> segments,
                      std::size_t num_heads, std::size_t head_dim, std::size_t heads_per_chunk);

template <typename T>
Var<T> qkv_attention(const Var<T>& xq, const Var<T>& xkv, const AttentionMask& mask, const AttentionWeights<T>& w,
                     const HeadConfig& heads, std::span<const long long> query_positions,
                     std::span<const long long> key_positions);

template <typename T>
Var<T> chunked_cross_attend(const Var<T>& xq, const Var<T>& xkv, const AttentionMask& mask,
                            const AttentionWeights<T>& w, const HeadConfig& heads,
                            std::span<const long long> query_positions, std::span<const long long> key_positions,
                            std::size_t heads_per_chunk);

// out = xq + Attn(LN(xq), LN(xkv)); out = out + MLP(LN(out)).
// Self-attention when xkv is empty.
template <typename T>
Var<T> attention_block(const Var<T>& xq, const std::optional<Var<T>>& xkv, const AttentionMask& mask,
                       const BlockWeights<T>& w, std::span<const long long> query_positions,
                       std::span<const long long> key_positions, const BlockOptions& opts);

// Packed batch form; positions are per row.
template <typename T>
Var<T> attention_block(const Var<T>& xq, const std::optional<Var<T>>& xkv, std::span<const AttentionSegment> segments,
                       const BlockWeights<T>& w, std::span<const long long> query_positions,
                       std::span<const long long> key_positions, const BlockOptions& opts);

template <typename T>
Var<T> mlp(const Var<T>& x, const MlpWeights<T>& w);

// Largest attention-map buffer (elements) allocated by attention_core since
// the last reset, per thread.
struct AttentionMemoryProbe {
  static void reset();
  static std::size_t peak_elements();
};

}  // namespace par
