#include "par/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "par/checkpoint.hpp"
#include "par/ops.hpp"

namespace par {

std::string to_string(DecaySchedule d) { return d == DecaySchedule::cosine ? "cosine" : "none"; }

DecaySchedule decay_from_string(const std::string& s) {
  if (s == "none") return DecaySchedule::none;
  if (s == "cosine") return DecaySchedule::cosine;
  throw ConfigError("train.decay must be none or cosine, got '" + s + "'");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  // A zero-step run only writes its manifest, so the warmup bound is waived.
  if (total_steps > 0 && warmup_steps > total_steps) {
    throw ConfigError("train.warmup_steps (" + std::to_string(warmup_steps) + ") exceeds train.total_steps (" +
                      std::to_string(total_steps) + ")");
  }
  if (!(base_lr > 0)) throw ConfigError("train.base_lr must be > 0");
  if (adam_b1 < 0 || adam_b1 >= 1) throw ConfigError("train.adam_b1 must be in [0,1)");
  if (adam_b2 < 0 || adam_b2 >= 1) throw ConfigError("train.adam_b2 must be in [0,1)");
  if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be > 0");
  if (!(max_grad_norm > 0)) throw ConfigError("train.max_grad_norm must be > 0");
  if (z_loss_coeff < 0) throw ConfigError("train.z_loss_coeff must be >= 0");
  if (!(init_std > 0)) throw ConfigError("train.init_std must be > 0");
  if (log_interval < 1) throw ConfigError("train.log_interval must be >= 1");
  if (stop_accuracy < 0 || stop_accuracy > 1) throw ConfigError("train.stop_accuracy must be in [0,1]");
}

template <typename T>
LossMetrics loss(const Array<T>& logits, std::span<const int> targets, std::span<const unsigned char> mask,
                 double z_loss_coeff) {
  const std::size_t rows = logits.rows(), v = logits.cols();
  if (targets.size() != rows || mask.size() != rows) {
    throw DimensionError("loss: " + std::to_string(rows) + " logit rows, " + std::to_string(targets.size()) +
                         " targets, " + std::to_string(mask.size()) + " mask entries");
  }
  LossMetrics m;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const T* row = logits.row(r);
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= v) throw DimensionError("loss: target outside vocabulary");
    double mx = row[0];
    std::size_t arg = 0;
    for (std::size_t c = 1; c < v; ++c) {
      if (row[c] > mx) {
        mx = row[c];
        arg = c;
      }
    }
    double s = 0;
    for (std::size_t c = 0; c < v; ++c) s += std::exp(static_cast<double>(row[c]) - mx);
    const double log_z = mx + std::log(s);
    m.ce += log_z - static_cast<double>(row[t]);
    m.z_loss += z_loss_coeff * log_z * log_z;
    hits += arg == static_cast<std::size_t>(t);
    ++m.count;
  }
  if (m.count == 0) throw ConfigError("loss: mask selects no rows");
  const double n = static_cast<double>(m.count);
  m.ce /= n;
  m.z_loss /= n;
  m.loss = m.ce + m.z_loss;
  m.accuracy = static_cast<double>(hits) / n;
  return m;
}

template <typename T>
TrainState<T> make_train_state(ParameterSet<T> params, std::uint64_t seed) {
  TrainState<T> s;
  for (const auto& [name, a] : params.entries()) {
    s.m.add(name, Array<T>(a.shape()));
    s.v.add(name, Array<T>(a.shape()));
  }
  s.params = std::move(params);
  s.seed = seed;
  return s;
}

template <typename T>
void adam_step(TrainState<T>& state, const ParameterSet<T>& grads, double lr, double b1, double b2, double eps) {
  if (grads.size() != state.params.size()) throw DimensionError("adam_step: gradient set does not match parameters");
  for (const auto& [name, g] : grads.entries()) {
    if (!g.all_finite()) throw NonFiniteError("non-finite gradient for parameter '" + name + "'");
  }
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& [name, g] = grads.entries()[i];
    Array<T>& p = state.params.get(name);
    Array<T>& m = state.m.get(name);
    Array<T>& v = state.v.get(name);
    if (p.shape() != g.shape()) throw DimensionError("adam_step: shape mismatch for '" + name + "'");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1 - b1) * gj;
      const double vj = b2 * v[j] + (1 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      p[j] = static_cast<T>(p[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + eps));
    }
  }
  ++state.step;
}

double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  const double s = static_cast<double>(step);
  if (step < cfg.warmup_steps) return cfg.base_lr * s / static_cast<double>(cfg.warmup_steps);
  if (cfg.decay == DecaySchedule::none) return cfg.base_lr;
  const std::size_t post = cfg.total_steps > cfg.warmup_steps ? cfg.total_steps - cfg.warmup_steps : 0;
  const std::size_t window = cfg.decay_steps ? std::min(cfg.decay_steps, post) : post;
  if (window == 0) return cfg.base_lr;
  const std::size_t start = cfg.total_steps - window;
  if (step < start) return cfg.base_lr;
  const double progress = std::min(1.0, static_cast<double>(step - start) / static_cast<double>(window));
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
double global_norm(const ParameterSet<T>& grads) {
  double ss = 0;
  for (const auto& [name, g] : grads.entries()) {
    for (T v : g.data()) ss += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(ss);
}

template <typename T>
double clip_global_norm(ParameterSet<T>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NonFiniteError("non-finite gradient norm");
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [name, g] : grads.entries()) {
      for (T& v : g.data()) v = static_cast<T>(v * f);
    }
  }
  return norm;
}

namespace {

// Rows predicted by one window, with their target tokens.
struct WindowRows {
  std::size_t start = 0;    // first input token
  std::size_t latents = 0;  // logit rows
  std::vector<int> targets;
  std::vector<unsigned char> scored;
};

WindowRows window_rows(const Batch& batch, std::size_t b, std::size_t end, std::size_t max_context,
                       std::size_t latents, Architecture arch) {
  WindowRows w;
  w.start = end > max_context ? end - max_context : 0;
  const std::size_t len = end - w.start;
  w.latents = arch == Architecture::decoder_only ? len : std::min(latents, len);
  const auto seq = batch.sequence(b);
  for (std::size_t q = 0; q < w.latents; ++q) {
    const std::size_t t = w.start + aligned_target(len, w.latents, q);
    w.targets.push_back(seq[t]);
    w.scored.push_back(batch.is_target(b, t) ? 1 : 0);
  }
  return w;
}

}  // namespace

template <typename T>
ParameterSet<T> batch_gradients(const ParameterSet<T>& params, const ModelConfig& mcfg, const Batch& batch,
                                std::span<const std::size_t> window_ends, double z_loss_coeff, LossMetrics* metrics,
                                Rng* dropout_rng, Architecture arch) {
  if (window_ends.size() != batch.batch) throw DimensionError("batch_gradients: one window end per sequence");
  std::vector<WindowRows> windows;
  std::size_t total = 0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    if (window_ends[b] < 1 || window_ends[b] >= batch.seq_len) {
      throw ConfigError("batch_gradients: window end outside the sequence");
    }
    windows.push_back(window_rows(batch, b, window_ends[b], mcfg.max_context, mcfg.num_latents, arch));
    for (auto s : windows.back().scored) total += s;
  }
  if (total == 0) throw ConfigError("batch_gradients: no scored rows in the batch");

  std::vector<PackedWindow> packed;
  std::vector<int> targets;
  std::vector<unsigned char> scored;
  std::vector<T> weights;
  const T w = static_cast<T>(1.0 / static_cast<double>(total));
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const WindowRows& win = windows[b];
    const auto seq = batch.sequence(b);
    packed.push_back({seq.subspan(win.start, window_ends[b] - win.start), win.latents, 0});
    targets.insert(targets.end(), win.targets.begin(), win.targets.end());
    scored.insert(scored.end(), win.scored.begin(), win.scored.end());
    for (auto s : win.scored) weights.push_back(s ? w : T{0});
  }

  Tape<T> tape(true);
  const ModelVars<T> vars = bind_params(tape, params, true);
  ForwardOptions fo;
  fo.training = dropout_rng != nullptr;
  fo.rng = dropout_rng;
  const std::span<const PackedWindow> pw(packed);
  Var<T> logits = arch == Architecture::decoder_only ? decoder_only_forward_packed(tape, pw, mcfg, vars, fo)
                                                     : forward_packed(tape, pw, mcfg, vars, fo);
  Var<T> l = cross_entropy_zloss(logits, std::span<const int>(targets), std::span<const T>(weights),
                                 static_cast<T>(z_loss_coeff));
  tape.backward(l);
  ParameterSet<T> grads;
  for (const auto& [name, leaf] : vars.leaves) grads.add(name, tape.grad(leaf));
  if (metrics) *metrics = loss(logits.value(), targets, scored, z_loss_coeff);
  return grads;
}

StepMetrics train_step(TrainState<float>& state, const ModelConfig& mcfg, const TrainConfig& tcfg,
                       const Batch& batch, Rng& data_rng, Rng& dropout_rng, Architecture arch) {
  std::vector<std::size_t> ends(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    ends[b] = arch == Architecture::decoder_only ? batch.seq_len - 1
                                                 : sample_window_end(batch, b, mcfg.num_latents, data_rng);
  }
  StepMetrics out;
  ParameterSet<float> grads =
      batch_gradients(state.params, mcfg, batch, ends, tcfg.z_loss_coeff, &out.loss, &dropout_rng, arch);
  out.grad_norm = clip_global_norm(grads, tcfg.max_grad_norm);
  out.lr = lr_schedule(state.step, tcfg);
  adam_step(state, grads, out.lr, tcfg.adam_b1, tcfg.adam_b2, tcfg.adam_eps);
  return out;
}

TargetScores score_batch(const ParameterSet<float>& params, const ModelConfig& cfg, const Batch& batch,
                         std::size_t latents) {
  if (latents < 1) throw ConfigError("score_batch: latents must be >= 1");
  TargetScores out;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    std::size_t first = 0, last = 0;
    for (std::size_t t = 1; t < batch.seq_len; ++t) {
      if (!batch.is_target(b, t)) continue;
      if (first == 0) first = t;
      last = t;
    }
    if (first == 0) continue;
    const auto seq = batch.sequence(b);
    std::size_t covered = first - 1;
    while (covered < last) {
      const std::size_t end = std::min(covered + latents, last);
      const std::size_t start = end > cfg.max_context ? end - cfg.max_context : 0;
      const std::size_t len = end - start;
      const std::size_t n = std::min(latents, len);
      ForwardOptions fo;
      fo.eval_latents = n;
      const Array<float> logits = forward(seq.subspan(start, len), cfg, params, fo);
      for (std::size_t q = 0; q < n; ++q) {
        const std::size_t t = start + aligned_target(len, n, q);
        if (t <= covered || !batch.is_target(b, t)) continue;
        const float* row = logits.row(q);
        const std::size_t v = logits.cols();
        const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + v) - row);
        const double mx = row[arg];
        double s = 0;
        for (std::size_t c = 0; c < v; ++c) s += std::exp(static_cast<double>(row[c]) - mx);
        out.nll += mx + std::log(s) - static_cast<double>(row[seq[t]]);
        out.correct += arg == static_cast<std::size_t>(seq[t]);
        ++out.scored;
      }
      covered = end;
    }
  }
  return out;
}

std::string to_json_line(const MetricsRecord& r) {
  nlohmann::json j = {{"step", r.step},   {"loss", r.loss}, {"ce", r.ce},
                      {"z_loss", r.z_loss}, {"accuracy", r.accuracy}, {"lr", r.lr},
                      {"grad_norm", r.grad_norm}, {"step_seconds", r.step_seconds}};
  if (r.val_accuracy) j["val_accuracy"] = *r.val_accuracy;
  return j.dump();
}

namespace {

// Independent streams derived from the run seed.
Rng derived_rng(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt)};
  return Rng(seq);
}

}  // namespace

TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg, const TaskConfig& task,
                  const TrainOptions& opts) {
  mcfg.validate();
  tcfg.validate();
  task.validate();
  if (task.model_vocab() > mcfg.vocab_size) {
    throw ConfigError("task needs a vocabulary of " + std::to_string(task.model_vocab()) + ", model has " +
                      std::to_string(mcfg.vocab_size));
  }

  TrainResult result;
  result.state = make_train_state(init_params(mcfg, tcfg.seed, tcfg.init_std), tcfg.seed);
  Rng data_rng = derived_rng(tcfg.seed, 1);
  Rng dropout_rng = derived_rng(tcfg.seed, 2);
  Rng val_rng = derived_rng(tcfg.seed, 3);
  Rng test_rng = derived_rng(tcfg.seed, 4);
  const Batch val_batch = generate_batch(task, std::max<std::size_t>(tcfg.eval_sequences, 1), val_rng);

  std::ofstream metrics_file;
  if (opts.output_dir) {
    std::filesystem::create_directories(*opts.output_dir);
    metrics_file.open(*opts.output_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics_file) throw Error("cannot write " + (*opts.output_dir / "metrics.jsonl").string());
  }
  std::optional<std::filesystem::path> last_checkpoint;
  auto checkpoint = [&](const std::string& name) {
    if (!opts.output_dir) return;
    const auto path = *opts.output_dir / name;
    save_checkpoint(path, mcfg, result.state.params);
    last_checkpoint = path;
  };

  double sum_loss = 0, sum_ce = 0, sum_z = 0, sum_acc = 0, sum_secs = 0;
  std::size_t in_interval = 0;
  for (std::size_t step = 0; step < tcfg.total_steps; ++step) {
    const Batch batch = generate_batch(task, tcfg.batch_size, data_rng);
    const auto t0 = std::chrono::steady_clock::now();
    StepMetrics sm;
    try {
      sm = train_step(result.state, mcfg, tcfg, batch, data_rng, dropout_rng);
    } catch (const NonFiniteError& e) {
      throw TrainingAborted("training aborted at step " + std::to_string(step) + ": " + e.what() +
                            (last_checkpoint ? "; last good checkpoint " + last_checkpoint->string()
                                             : std::string("; no checkpoint written")));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    sum_loss += sm.loss.loss;
    sum_ce += sm.loss.ce;
    sum_z += sm.loss.z_loss;
    sum_acc += sm.loss.accuracy;
    sum_secs += secs;
    ++in_interval;

    const std::size_t done = step + 1;
    std::optional<double> val;
    if (tcfg.eval_interval && done % tcfg.eval_interval == 0) {
      val = score_batch(result.state.params, mcfg, val_batch, mcfg.num_latents).accuracy();
    }
    if (done % tcfg.log_interval == 0 || done == tcfg.total_steps || val) {
      const double k = static_cast<double>(in_interval);
      MetricsRecord r{done, sum_loss / k, sum_ce / k, sum_z / k, sum_acc / k, sm.lr, sm.grad_norm, sum_secs / k, val};
      sum_loss = sum_ce = sum_z = sum_acc = sum_secs = 0;
      in_interval = 0;
      result.log.push_back(r);
      if (metrics_file) metrics_file << to_json_line(r) << '\n' << std::flush;
      if (opts.on_log) opts.on_log(r);
    }
    if (tcfg.checkpoint_interval && done % tcfg.checkpoint_interval == 0) {
      checkpoint("step_" + std::to_string(done) + ".ckpt");
    }
    if (val && tcfg.stop_accuracy > 0 && *val >= tcfg.stop_accuracy) {
      result.stopped_early = done < tcfg.total_steps;
      break;
    }
  }
  checkpoint("final.ckpt");
  if (tcfg.total_steps > 0) {
    const Batch test = generate_batch(task, std::max<std::size_t>(tcfg.eval_sequences, 1), test_rng);
    result.final_val_accuracy = score_batch(result.state.params, mcfg, test, mcfg.num_latents).accuracy();
  }
  return result;
}

#define PAR_INSTANTIATE_TRAINING(T)                                                                              \
  template LossMetrics loss<T>(const Array<T>&, std::span<const int>, std::span<const unsigned char>, double);  \
  template TrainState<T> make_train_state<T>(ParameterSet<T>, std::uint64_t);                                  \
  template void adam_step<T>(TrainState<T>&, const ParameterSet<T>&, double, double, double, double);           \
  template double clip_global_norm<T>(ParameterSet<T>&, double);                                               \
  template double global_norm<T>(const ParameterSet<T>&);                                                      \
  template ParameterSet<T> batch_gradients<T>(const ParameterSet<T>&, const ModelConfig&, const Batch&,        \
                                              std::span<const std::size_t>, double, LossMetrics*, Rng*,       \
                                              Architecture);

PAR_INSTANTIATE_TRAINING(float)
PAR_INSTANTIATE_TRAINING(double)

}  // namespace par
