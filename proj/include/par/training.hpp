#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "par/array.hpp"
#include "par/model.hpp"
#include "par/rng.hpp"

namespace par {

enum class DecaySchedule { none, cosine };

std::string to_string(DecaySchedule d);
DecaySchedule decay_from_string(const std::string& s);

struct TrainConfig {
  std::size_t batch_size = 0;
  std::size_t total_steps = 0;
  double base_lr = 3e-4;
  std::size_t warmup_steps = 10000;
  DecaySchedule decay = DecaySchedule::none;
  std::size_t decay_steps = 0;  // cosine window at the end of training; 0 = every post-warmup step
  // 0.1 as printed in the optimizer recipe; the customary value is 0.9.
  double adam_b1 = 0.1;
  double adam_b2 = 0.999;
  double adam_eps = 1e-8;
  double max_grad_norm = 1.0;
  double z_loss_coeff = 1e-4;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  std::size_t log_interval = 100;
  std::size_t checkpoint_interval = 0;  // 0 = final checkpoint only
  std::size_t eval_interval = 0;        // 0 = no periodic validation
  std::size_t eval_sequences = 12;
  double stop_accuracy = 0.0;  // stop once validation accuracy reaches this; 0 = never

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

enum class TaskKind { copy, offset_copy };

std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

struct TaskConfig {
  TaskKind kind = TaskKind::copy;
  std::size_t data_vocab = 256;  // excludes BOS/EOS
  std::size_t k_half = 0;        // copy
  std::size_t window = 0;        // offset_copy: number of scored continuation tokens
  std::size_t offset = 0;        // offset_copy

  // Vocabulary the model must cover (copy adds BOS and EOS).
  std::size_t model_vocab() const;
  std::size_t sequence_length() const;
  void validate() const;
  friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

// tokens is [batch x seq_len]; target j of a sequence is token j + 1, and
// loss_mask is [batch x (seq_len - 1)].
struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> tokens;
  std::vector<unsigned char> loss_mask;

  std::span<const int> sequence(std::size_t b) const { return {tokens.data() + b * seq_len, seq_len}; }
  // Whether token `index` (>= 1) of sequence b is a scored target.
  bool is_target(std::size_t b, std::size_t index) const {
    return index >= 1 && index < seq_len && loss_mask[b * (seq_len - 1) + index - 1] != 0;
  }
};

// BOS/EOS take the two ids after the data vocabulary.
constexpr int copy_bos(std::size_t data_vocab) { return static_cast<int>(data_vocab); }
constexpr int copy_eos(std::size_t data_vocab) { return static_cast<int>(data_vocab) + 1; }

// [BOS, r1..rk, rk..r1, EOS]; scored targets are the mirrored half and EOS.
Batch gen_copy_batch(std::size_t k_half, std::size_t data_vocab, std::size_t batch, Rng& rng);

// A random block of `offset` tokens followed by `window` tokens that repeat
// it; every continuation token is scored.
Batch gen_offset_copy_batch(std::size_t window, std::size_t offset, std::size_t vocab, std::size_t batch, Rng& rng);

Batch generate_batch(const TaskConfig& task, std::size_t batch, Rng& rng);

struct LossMetrics {
  double loss = 0;      // ce + z_loss
  double ce = 0;        // mean cross-entropy (nats)
  double z_loss = 0;    // mean z_coeff * logZ^2
  double accuracy = 0;  // argmax hits / scored rows
  std::size_t count = 0;
};

// Mean over rows with mask != 0 of CE + z_coeff * (log Z)^2. Throws when the
// mask selects nothing.
template <typename T>
LossMetrics loss(const Array<T>& logits, std::span<const int> targets, std::span<const unsigned char> mask,
                 double z_loss_coeff);

template <typename T>
struct TrainState {
  ParameterSet<T> params;
  ParameterSet<T> m;  // Adam first moment
  ParameterSet<T> v;  // Adam second moment
  std::size_t step = 0;
  std::uint64_t seed = 0;
};

template <typename T>
TrainState<T> make_train_state(ParameterSet<T> params, std::uint64_t seed);

// One bias-corrected Adam update. Throws NonFiniteError naming the first
// parameter whose gradient is not finite.
template <typename T>
void adam_step(TrainState<T>& state, const ParameterSet<T>& grads, double lr, double b1, double b2, double eps);

double lr_schedule(std::size_t step, const TrainConfig& cfg);

// Scales every gradient by max_norm / norm when the global L2 norm exceeds
// max_norm. Returns the pre-clip norm.
template <typename T>
double clip_global_norm(ParameterSet<T>& grads, double max_norm);

template <typename T>
double global_norm(const ParameterSet<T>& grads);

// Window end e for a training example: the model reads tokens [e - M, e)
// and its n latents predict tokens e - n + 1 .. e. Chosen uniformly among
// ends whose rows all land on scored targets where possible.
std::size_t sample_window_end(const Batch& batch, std::size_t b, std::size_t latents, Rng& rng);

struct StepMetrics {
  LossMetrics loss;
  double grad_norm = 0;
  double lr = 0;
};

// Forward + backward over the batch, clipping and one Adam step.
StepMetrics train_step(TrainState<float>& state, const ModelConfig& mcfg, const TrainConfig& tcfg,
                       const Batch& batch, Rng& data_rng, Rng& dropout_rng,
                       Architecture arch = Architecture::perceiver_ar);

// Gradient of the mean batch loss (no update).
template <typename T>
ParameterSet<T> batch_gradients(const ParameterSet<T>& params, const ModelConfig& mcfg, const Batch& batch,
                                std::span<const std::size_t> window_ends, double z_loss_coeff, LossMetrics* metrics,
                                Rng* dropout_rng, Architecture arch = Architecture::perceiver_ar);

// Per-target predictions covering every scored target of every sequence,
// tiling windows of `latents` rows.
struct TargetScores {
  std::size_t scored = 0;
  std::size_t correct = 0;
  double nll = 0;  // summed, nats
  double accuracy() const { return scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0; }
};

TargetScores score_batch(const ParameterSet<float>& params, const ModelConfig& cfg, const Batch& batch,
                         std::size_t latents);

struct MetricsRecord {
  std::size_t step = 0;
  double loss = 0, ce = 0, z_loss = 0, accuracy = 0, lr = 0, grad_norm = 0, step_seconds = 0;
  std::optional<double> val_accuracy;
};

std::string to_json_line(const MetricsRecord& r);

struct TrainOptions {
  std::optional<std::filesystem::path> output_dir;  // checkpoints + metrics.jsonl
  std::function<void(const MetricsRecord&)> on_log;
  bool quiet = true;
};

struct TrainResult {
  TrainState<float> state;
  std::vector<MetricsRecord> log;
  std::optional<double> final_val_accuracy;
  bool stopped_early = false;
};

class TrainingAborted : public Error {
 public:
  using Error::Error;
};

// Deterministic given (configs, seed) apart from wall-clock fields.
TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg, const TaskConfig& task,
                  const TrainOptions& opts = {});

}  // namespace par
