#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "par/array.hpp"
#include "par/model.hpp"

namespace par {

struct SamplerConfig {
  double temperature = 1.0;
  std::size_t max_new_tokens = 0;
  std::uint64_t seed = 0;
  std::size_t eval_latents = 0;  // 0 = the model's num_latents
  bool greedy = false;

  void validate() const;
  friend bool operator==(const SamplerConfig&, const SamplerConfig&) = default;
};

// Latent-buffer occupancy under the reset protocol. A full buffer is
// discarded and rebuilt from one uncached pass with capacity/2 latents.
class ResetSchedule {
 public:
  explicit ResetSchedule(std::size_t capacity);

  std::size_t capacity() const { return capacity_; }
  std::size_t fill() const { return fill_; }

  // Latents used for the prompt pass; the buffer then holds that many.
  std::size_t prefill(std::size_t prompt_len);
  // One more position. Returns true when it is served by a reset pass.
  bool advance();

 private:
  std::size_t capacity_;
  std::size_t fill_ = 0;
};

// Per-layer latent K/V buffers plus the cross-attend K/V store. Keys are
// stored already rotated at their absolute positions.
struct KVCache {
  struct Buffer {
    Array<float> k;  // [rows x C]
    Array<float> v;
    std::size_t rows = 0;
  };

  KVCache(const ModelConfig& cfg, std::size_t n_train);

  ResetSchedule schedule;
  Buffer cross;                // capacity M; slides once the stream exceeds M
  long long cross_base = 0;    // absolute position of cross row 0
  std::vector<Buffer> layers;  // capacity n_train each
  std::size_t resets = 0;
};

// Incremental Perceiver AR decoding (trailing_query latents only).
class CachedDecoder {
 public:
  CachedDecoder(const ParameterSet<float>& params, const ModelConfig& cfg, std::size_t n_train);

  // Consumes the prompt; returns next-token logits [vocab].
  std::vector<float> prefill(std::span<const int> prompt);
  // Appends one token; returns next-token logits.
  std::vector<float> step(int token);

  // Latents that produced the most recent logits.
  std::size_t effective_latents() const { return cache_.schedule.fill(); }
  std::size_t resets() const { return cache_.resets; }
  std::size_t stream_length() const { return tokens_.size(); }
  const KVCache& cache() const { return cache_; }

 private:
  void append_cross(std::size_t first, std::size_t count);
  std::vector<float> latent_pass(std::size_t first, std::size_t count, bool reset);
  Array<float> embed_rows(std::size_t first, std::size_t count) const;

  const ParameterSet<float>& params_;
  ModelConfig cfg_;
  KVCache cache_;
  std::vector<int> tokens_;
};

struct SampleOptions {
  bool record_logits = false;
  std::function<void(int)> on_token;
};

struct SampleResult {
  std::vector<int> tokens;                    // prompt + generated
  std::vector<std::vector<float>> step_logits;  // when record_logits
  std::vector<std::size_t> step_latents;
  std::size_t resets = 0;
};

// Draws from softmax(logits / temperature), or argmax when greedy.
int sample_token(std::span<const float> logits, const SamplerConfig& sampler, Rng& rng);

// Full forward per token over the last min(len, M) tokens.
SampleResult sample_uncached(const ParameterSet<float>& params, const ModelConfig& cfg, std::span<const int> prompt,
                             const SamplerConfig& sampler, const SampleOptions& opts = {});

// Uncached reference that reproduces the cache's latent membership: each
// step runs a full forward with as many latents as the cache would hold.
SampleResult sample_uncached_with_resets(const ParameterSet<float>& params, const ModelConfig& cfg,
                                         std::span<const int> prompt, const SamplerConfig& sampler,
                                         std::size_t n_train, const SampleOptions& opts = {});

// n_train = 0 uses cfg.num_latents.
SampleResult sample_cached(const ParameterSet<float>& params, const ModelConfig& cfg, std::span<const int> prompt,
                           const SamplerConfig& sampler, const SampleOptions& opts = {}, std::size_t n_train = 0);

struct WindowRecord {
  std::size_t window_end = 0;  // exclusive end of the input window
  std::size_t targets = 0;
  double nll = 0;
};

struct EvalSummary {
  double total_nll = 0;  // nats
  std::size_t tokens_scored = 0;
  double mean_nll = 0;
  double bits_per_token = 0;
  double perplexity = 0;
  std::vector<WindowRecord> windows;
};

// Sliding-window evaluation: the first window scores all of its latent rows,
// each later window advances by `stride` and scores only its new targets.
EvalSummary strided_eval(const ParameterSet<float>& params, const ModelConfig& cfg, std::span<const int> corpus,
                         std::size_t stride, std::size_t eval_latents);

}  // namespace par
