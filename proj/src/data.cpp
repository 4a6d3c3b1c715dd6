#include "par/training.hpp"

namespace par {

std::string to_string(TaskKind k) { return k == TaskKind::offset_copy ? "offset_copy" : "copy"; }

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "offset_copy") return TaskKind::offset_copy;
  throw ConfigError("task.kind must be copy or offset_copy, got '" + s + "'");
}

std::size_t TaskConfig::model_vocab() const { return kind == TaskKind::copy ? data_vocab + 2 : data_vocab; }

std::size_t TaskConfig::sequence_length() const { return kind == TaskKind::copy ? 2 * k_half + 2 : offset + window; }

void TaskConfig::validate() const {
  if (data_vocab < 2) throw ConfigError("task.data_vocab must be >= 2");
  if (kind == TaskKind::copy && k_half < 1) throw ConfigError("task.k_half must be >= 1 for the copy task");
  if (kind == TaskKind::offset_copy) {
    if (window < 1) throw ConfigError("task.window must be >= 1 for offset_copy");
    if (offset < window) throw ConfigError("task.offset must be >= task.window");
  }
}

namespace {

int random_token(std::size_t vocab, Rng& rng) { return static_cast<int>(uniform_index(rng, 0, vocab - 1)); }

}  // namespace

Batch gen_copy_batch(std::size_t k_half, std::size_t data_vocab, std::size_t batch, Rng& rng) {
  if (data_vocab < 2 || k_half < 1) throw ConfigError("gen_copy_batch: need data_vocab >= 2 and k_half >= 1");
  Batch out;
  out.batch = batch;
  out.seq_len = 2 * k_half + 2;
  out.tokens.resize(batch * out.seq_len);
  out.loss_mask.assign(batch * (out.seq_len - 1), 0);
  for (std::size_t b = 0; b < batch; ++b) {
    int* s = out.tokens.data() + b * out.seq_len;
    s[0] = copy_bos(data_vocab);
    for (std::size_t i = 1; i <= k_half; ++i) s[i] = random_token(data_vocab, rng);
    for (std::size_t i = 0; i < k_half; ++i) s[k_half + 1 + i] = s[k_half - i];
    s[2 * k_half + 1] = copy_eos(data_vocab);
    unsigned char* mask = out.loss_mask.data() + b * (out.seq_len - 1);
    // Tokens k+1 .. 2k+1 are targets k .. 2k.
    for (std::size_t j = k_half; j <= 2 * k_half; ++j) mask[j] = 1;
  }
  return out;
}

Batch gen_offset_copy_batch(std::size_t window, std::size_t offset, std::size_t vocab, std::size_t batch, Rng& rng) {
  if (offset < window) throw ConfigError("gen_offset_copy_batch: offset must be >= window");
  if (window < 1 || vocab < 2) throw ConfigError("gen_offset_copy_batch: need window >= 1 and vocab >= 2");
  Batch out;
  out.batch = batch;
  out.seq_len = offset + window;
  out.tokens.resize(batch * out.seq_len);
  out.loss_mask.assign(batch * (out.seq_len - 1), 0);
  for (std::size_t b = 0; b < batch; ++b) {
    int* s = out.tokens.data() + b * out.seq_len;
    for (std::size_t i = 0; i < offset; ++i) s[i] = random_token(vocab, rng);
    for (std::size_t i = offset; i < out.seq_len; ++i) s[i] = s[i - offset];
    unsigned char* mask = out.loss_mask.data() + b * (out.seq_len - 1);
    for (std::size_t t = offset; t < out.seq_len; ++t) mask[t - 1] = 1;
  }
  return out;
}

Batch generate_batch(const TaskConfig& task, std::size_t batch, Rng& rng) {
  task.validate();
  if (task.kind == TaskKind::copy) return gen_copy_batch(task.k_half, task.data_vocab, batch, rng);
  return gen_offset_copy_batch(task.window, task.offset, task.data_vocab, batch, rng);
}

std::size_t sample_window_end(const Batch& batch, std::size_t b, std::size_t latents, Rng& rng) {
  std::size_t first = 0, last = 0;
  for (std::size_t t = 1; t < batch.seq_len; ++t) {
    if (!batch.is_target(b, t)) continue;
    if (first == 0) first = t;
    last = t;
  }
  if (first == 0) throw ConfigError("sequence " + std::to_string(b) + " has no scored targets");
  if (last < latents) {
    throw ConfigError("sequence of " + std::to_string(batch.seq_len) + " tokens is too short for " +
                      std::to_string(latents) + " latents");
  }
  const std::size_t lo = std::min(std::max(latents, first + latents - 1), last);
  return static_cast<std::size_t>(uniform_index(rng, lo, last));
}

}  // namespace par
