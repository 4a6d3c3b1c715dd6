#include "par/bench.hpp"

#include <algorithm>
#include <chrono>
#include <new>
#include <sstream>

namespace par {

namespace {

std::size_t attention_map_elements(const ModelConfig& cfg, Architecture arch, std::size_t m) {
  const std::size_t cross_group = cfg.cross_heads_per_chunk ? cfg.cross_heads_per_chunk : cfg.cross_heads;
  if (arch == Architecture::decoder_only) return std::max(cross_group, cfg.self_heads) * m * m;
  const std::size_t n = std::min(cfg.num_latents, m);
  return std::max(cross_group * n * m, cfg.self_heads * n * n);
}

Batch random_batch(std::size_t batch, std::size_t len, std::size_t vocab, Rng& rng) {
  Batch b;
  b.batch = batch;
  b.seq_len = len;
  b.tokens.resize(batch * len);
  for (int& t : b.tokens) t = static_cast<int>(uniform_index(rng, 0, vocab - 1));
  b.loss_mask.assign(batch * (len - 1), 1);
  return b;
}

}  // namespace

BenchPoint bench_step_time(const ModelConfig& base, const TrainConfig& tcfg, Architecture arch, std::size_t m,
                           const BenchOptions& opts) {
  if (opts.trials < 5) throw ConfigError("bench needs at least 5 trials");
  if (opts.warmup < 2) throw ConfigError("bench needs at least 2 warmup steps");
  ModelConfig cfg = base;
  cfg.max_context = m;
  cfg.num_latents = std::min(base.num_latents, m);
  BenchPoint p;
  p.arch = arch;
  p.m = m;
  p.n = arch == Architecture::decoder_only ? m : cfg.num_latents;
  p.layers = cfg.num_layers;
  p.channels = cfg.channels;
  p.heads = cfg.cross_heads;
  p.flop_estimate = count_attention_flops(cfg, m, arch).total();
  p.peak_attention_elements = attention_map_elements(cfg, arch, m);
  if (opts.max_attention_elements && p.peak_attention_elements > opts.max_attention_elements) {
    p.feasible = false;
    p.note = "attention map of " + std::to_string(p.peak_attention_elements) + " elements exceeds the limit";
    return p;
  }

  try {
    cfg.validate();
    TrainState<float> state = make_train_state(init_params(cfg, tcfg.seed, tcfg.init_std), tcfg.seed);
    Rng data_rng(tcfg.seed + 1), dropout_rng(tcfg.seed + 2);
    const std::vector<std::size_t> ends(opts.batch, m);
    auto one_step = [&] {
      const Batch batch = random_batch(opts.batch, m + 1, cfg.vocab_size, data_rng);
      const auto t0 = std::chrono::steady_clock::now();
      ParameterSet<float> grads =
          batch_gradients(state.params, cfg, batch, ends, tcfg.z_loss_coeff, nullptr, &dropout_rng, arch);
      clip_global_norm(grads, tcfg.max_grad_norm);
      adam_step(state, grads, tcfg.base_lr, tcfg.adam_b1, tcfg.adam_b2, tcfg.adam_eps);
      return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    for (std::size_t i = 0; i < opts.warmup; ++i) {
      const double s = one_step();
      if (opts.max_step_seconds > 0 && s > opts.max_step_seconds) {
        p.feasible = false;
        p.note = "warmup step took " + std::to_string(s) + " s";
        return p;
      }
    }
    for (std::size_t i = 0; i < opts.trials; ++i) p.trial_seconds.push_back(one_step());
  } catch (const std::bad_alloc&) {
    p.feasible = false;
    p.note = "out of memory";
    p.trial_seconds.clear();
    return p;
  }
  std::vector<double> sorted = p.trial_seconds;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t k = sorted.size();
  p.seconds_per_step = k % 2 ? sorted[k / 2] : 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]);
  return p;
}

std::vector<BenchPoint> bench_sweep(const BenchGrid& grid) {
  if (grid.contexts.empty() || grid.archs.empty()) throw ConfigError("bench grid is empty");
  std::vector<BenchPoint> out;
  for (Architecture arch : grid.archs) {
    for (std::size_t m : grid.contexts) out.push_back(bench_step_time(grid.base, grid.train, arch, m, grid.options));
  }
  return out;
}

std::string bench_table(const std::vector<BenchPoint>& points) {
  std::ostringstream os;
  os.precision(17);
  os << "arch\tM\tN\tL\tseconds_per_step\tflop_estimate\n";
  for (const auto& p : points) {
    os << to_string(p.arch) << '\t' << p.m << '\t' << p.n << '\t' << p.layers << '\t';
    if (p.feasible) {
      os << p.seconds_per_step;
    } else {
      os << "nan";
    }
    os << '\t' << p.flop_estimate << '\n';
  }
  return os.str();
}

std::string bench_plot_series(const std::vector<BenchPoint>& points) {
  std::ostringstream os;
  os.precision(9);
  for (Architecture arch : {Architecture::perceiver_ar, Architecture::decoder_only}) {
    bool header = false;
    for (const auto& p : points) {
      if (p.arch != arch || !p.feasible) continue;
      if (!header) {
        os << (os.tellp() > 0 ? "\n" : "") << "# " << to_string(arch) << "\n";
        header = true;
      }
      os << p.m << ' ' << p.seconds_per_step << '\n';
    }
  }
  return os.str();
}

}  // namespace par
