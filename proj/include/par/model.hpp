#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "par/array.hpp"
#include "par/attention.hpp"
#include "par/rng.hpp"
#include "par/tape.hpp"

namespace par {

enum class LatentMode { trailing_query, learned };

std::string to_string(LatentMode mode);
LatentMode latent_mode_from_string(const std::string& s);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t max_context = 0;  // M
  std::size_t num_latents = 0;  // N
  std::size_t num_layers = 1;   // L, latent self-attention blocks
  std::size_t channels = 1024;  // C
  std::size_t cross_heads = 16;
  std::size_t self_heads = 16;
  double rotary_fraction = 0.5;
  LatentMode latent_mode = LatentMode::trailing_query;
  double cross_attend_dropout = 0.1;
  double post_attention_dropout = 0.0;
  bool absolute_position_embedding = false;  // additive fixed sinusoidal
  bool scale_embedding = false;              // multiply token embeddings by sqrt(C)
  std::size_t cross_heads_per_chunk = 0;     // 0 = unchunked
  double layer_norm_eps = 1e-5;

  HeadConfig cross_head_config() const;
  HeadConfig self_head_config() const;
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named arrays in insertion order. The order is the checkpoint manifest order.
template <typename T>
class ParameterSet {
 public:
  void add(std::string name, Array<T> value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Array<T>& get(const std::string& name) const;
  Array<T>& get(const std::string& name);
  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;
  const std::vector<std::pair<std::string, Array<T>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Array<T>>>& entries() { return entries_; }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& [name, a] : entries_) out.add(name, a.template cast<U>());
    return out;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<std::pair<std::string, Array<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Truncated normal (+-2 std) with std `init_std` for embeddings, projections
// and learned latents; zero biases; unit layernorm gains.
ParameterSet<float> init_params(const ModelConfig& cfg, std::uint64_t seed, double init_std = 0.02);

// Checks names and shapes against the config.
template <typename T>
void validate_params(const ParameterSet<T>& params, const ModelConfig& cfg);

// Parameters bound as leaves on one tape.
template <typename T>
struct ModelVars {
  std::vector<std::pair<std::string, Var<T>>> leaves;
  std::map<std::string, Var<T>> by_name;

  const Var<T>& operator[](const std::string& name) const;
  BlockWeights<T> block(const std::string& prefix, bool cross) const;
};

template <typename T>
ModelVars<T> bind_params(Tape<T>& tape, const ParameterSet<T>& params, bool requires_grad);

struct ForwardOptions {
  std::optional<std::size_t> eval_latents;  // defaults to cfg.num_latents
  bool training = false;
  Rng* rng = nullptr;              // required when training with dropout
  long long position_offset = 0;   // absolute position of tokens[0]
};

// Index (within `tokens`) of the token predicted by logit row `row` when
// `latents` latents read a window of `window_len` tokens. The last row
// predicts the token after the window.
constexpr std::size_t aligned_target(std::size_t window_len, std::size_t latents, std::size_t row) {
  return window_len - latents + row + 1;
}

// Perceiver AR logits [n_eff x vocab]; row q predicts
// tokens[aligned_target(m, n_eff, q)].
template <typename T>
Var<T> forward(Tape<T>& tape, std::span<const int> tokens, const ModelConfig& cfg, const ModelVars<T>& vars,
               const ForwardOptions& opts);

template <typename T>
Array<T> forward(std::span<const int> tokens, const ModelConfig& cfg, const ParameterSet<T>& params,
                 const ForwardOptions& opts = {});

// One sequence of a row-packed batch.
struct PackedWindow {
  std::span<const int> tokens;
  std::size_t latents = 0;  // ignored by the decoder-only baseline
  long long position_offset = 0;
};

// Several windows in one pass; rows of the result are the windows' logit
// rows in order. opts.eval_latents and opts.position_offset are ignored.
template <typename T>
Var<T> forward_packed(Tape<T>& tape, std::span<const PackedWindow> windows, const ModelConfig& cfg,
                      const ModelVars<T>& vars, const ForwardOptions& opts);

// L+1 causal self-attention blocks over every position (the cross-attend
// block's weights serve as the first block). Logits [m x vocab].
template <typename T>
Var<T> decoder_only_forward(Tape<T>& tape, std::span<const int> tokens, const ModelConfig& cfg,
                            const ModelVars<T>& vars, const ForwardOptions& opts);

template <typename T>
Array<T> decoder_only_forward(std::span<const int> tokens, const ModelConfig& cfg, const ParameterSet<T>& params,
                              const ForwardOptions& opts = {});

template <typename T>
Var<T> decoder_only_forward_packed(Tape<T>& tape, std::span<const PackedWindow> windows, const ModelConfig& cfg,
                                   const ModelVars<T>& vars, const ForwardOptions& opts);

// Fixed sinusoidal embedding rows for positions [offset, offset + count).
template <typename T>
Array<T> sinusoidal_embedding(long long offset, std::size_t count, std::size_t channels);

enum class Architecture { perceiver_ar, decoder_only };

std::string to_string(Architecture arch);
Architecture architecture_from_string(const std::string& s);

// Multiply-add counted as two flops.
struct FlopEstimate {
  double cross_attention = 0;  // Perceiver AR: 4 m n C. Decoder-only: 0.
  double self_attention = 0;   // Perceiver AR: 4 L n^2 C. Decoder-only: 4 (L+1) m^2 C.
  double projections = 0;      // linear layers, MLPs and the output head
  double total() const { return cross_attention + self_attention + projections; }
};

FlopEstimate count_attention_flops(const ModelConfig& cfg, std::size_t m,
                                   Architecture arch = Architecture::perceiver_ar);

}  // namespace par
