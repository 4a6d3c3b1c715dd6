#include "par/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "par/checkpoint.hpp"
#include "par/inference.hpp"
#include "par/ops.hpp"

namespace par {

namespace {

std::vector<int> window_targets(std::span<const int> tokens, std::size_t latents) {
  std::vector<int> t(latents);
  for (std::size_t q = 0; q < latents; ++q) t[q] = tokens[aligned_target(tokens.size() - 1, latents, q)];
  return t;
}

double window_loss(const ModelConfig& cfg, const ParameterSet<double>& params, std::span<const int> tokens,
                   std::size_t latents, double z, ParameterSet<double>* grads) {
  const auto input = tokens.first(tokens.size() - 1);
  const std::vector<int> targets = window_targets(tokens, latents);
  const std::vector<double> weights(latents, 1.0 / static_cast<double>(latents));
  Tape<double> tape(grads != nullptr);
  const ModelVars<double> vars = bind_params(tape, params, grads != nullptr);
  ForwardOptions fo;
  fo.eval_latents = latents;
  Var<double> logits = forward(tape, input, cfg, vars, fo);
  Var<double> l = cross_entropy_zloss(logits, std::span<const int>(targets), std::span<const double>(weights), z);
  if (grads) {
    tape.backward(l);
    for (const auto& [name, v] : vars.leaves) grads->add(name, tape.grad(v));
  }
  return l.value().item();
}

}  // namespace

GradCheckResult gradient_check(const ModelConfig& cfg, const ParameterSet<double>& params, std::span<const int> tokens,
                               std::size_t latents, double z_loss_coeff, double step,
                               std::size_t max_entries_per_param) {
  if (tokens.size() < 2) throw ConfigError("gradient_check needs at least two tokens");
  ParameterSet<double> analytic;
  window_loss(cfg, params, tokens, latents, z_loss_coeff, &analytic);
  ParameterSet<double> probe = params;
  GradCheckResult r;
  for (const auto& [name, g] : analytic.entries()) {
    Array<double>& p = probe.get(name);
    const std::size_t count = max_entries_per_param ? std::min(max_entries_per_param, p.size()) : p.size();
    // Spread sampled entries across the array.
    const std::size_t stride = std::max<std::size_t>(1, p.size() / count);
    double worst_abs = 0, scale = 0;
    for (std::size_t i = 0, taken = 0; i < p.size() && taken < count; i += stride, ++taken) {
      const double orig = p[i];
      p[i] = orig + step;
      const double up = window_loss(cfg, probe, tokens, latents, z_loss_coeff, nullptr);
      p[i] = orig - step;
      const double down = window_loss(cfg, probe, tokens, latents, z_loss_coeff, nullptr);
      p[i] = orig;
      const double numeric = (up - down) / (2 * step);
      worst_abs = std::max(worst_abs, std::abs(numeric - g[i]));
      scale = std::max(scale, std::abs(numeric));
    }
    const double rel = worst_abs / std::max(scale, 1e-12);
    r.per_param[name] = rel;
    if (rel >= r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_param = name;
    }
  }
  return r;
}

bool SelftestReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const SelftestCheck& c) { return c.passed; });
}

std::string SelftestReport::format() const {
  std::ostringstream os;
  for (const auto& c : checks) os << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
  os << (passed() ? "selftest passed" : "selftest FAILED") << " (" << checks.size() << " checks)\n";
  return os.str();
}

namespace {

ModelConfig toy_config(LatentMode mode) {
  ModelConfig c;
  c.vocab_size = 11;
  c.max_context = 16;
  c.num_latents = 8;
  c.num_layers = 2;
  c.channels = 8;
  c.cross_heads = 2;
  c.self_heads = 2;
  c.latent_mode = mode;
  c.cross_attend_dropout = 0.0;
  return c;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<int> t(n);
  for (int& x : t) x = static_cast<int>(uniform_index(rng, 0, vocab - 1));
  return t;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

template <typename Fn>
void run_check(SelftestReport& rep, const std::string& name, Fn&& fn) {
  SelftestCheck c{name, false, ""};
  try {
    c.passed = fn(c.detail);
  } catch (const std::exception& e) {
    c.passed = false;
    c.detail = std::string("threw: ") + e.what();
  }
  rep.checks.push_back(std::move(c));
}

struct FaultGuard {
  explicit FaultGuard(bool on) { set_cross_mask_fault(on); }
  ~FaultGuard() { set_cross_mask_fault(false); }
};

}  // namespace

SelftestReport run_selftest(const SelftestOptions& opts) {
  FaultGuard guard(opts.corrupt_cross_mask);
  SelftestReport rep;
  Rng rng(opts.seed);

  run_check(rep, "cross mask with n=m equals self mask", [&](std::string& d) {
    for (std::size_t m = 1; m <= 32; ++m) {
      if (!(make_cross_mask(m, m) == make_self_mask(m))) {
        d = "differs at m=" + std::to_string(m);
        return false;
      }
    }
    d = "m = 1..32";
    return true;
  });

  run_check(rep, "cross mask admits exactly keys at or before each latent", [&](std::string& d) {
    for (std::size_t m = 1; m <= 24; ++m) {
      for (std::size_t n = 1; n <= m; ++n) {
        const AttentionMask mask = make_cross_mask(m, n);
        for (std::size_t q = 0; q < n; ++q) {
          for (std::size_t k = 0; k < m; ++k) {
            if (mask(q, k) != (k <= m - n + q)) {
              d = "m=" + std::to_string(m) + " n=" + std::to_string(n) + " q=" + std::to_string(q) +
                  " k=" + std::to_string(k);
              return false;
            }
          }
        }
      }
    }
    d = "all 1 <= n <= m <= 24";
    return true;
  });

  run_check(rep, "rotary scores depend only on relative offset", [&](std::string& d) {
    double worst = 0;
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t dim = 2 * uniform_index(rng, 1, 16);
      HeadConfig h{1, dim, 1.0};
      Array<double> q(Shape{1, dim}), k(Shape{1, dim});
      std::normal_distribution<double> nd;
      for (auto& v : q.data()) v = nd(rng);
      for (auto& v : k.data()) v = nd(rng);
      const long long p = static_cast<long long>(uniform_index(rng, 0, 4096));
      const long long s = static_cast<long long>(uniform_index(rng, 0, 4096));
      auto score = [&](long long a, long long b) {
        const long long pa[] = {a}, pb[] = {b};
        const Array<double> qa = rotary_encode(q, pa, h), kb = rotary_encode(k, pb, h);
        double dot = 0;
        for (std::size_t i = 0; i < dim; ++i) dot += qa[i] * kb[i];
        return dot;
      };
      worst = std::max(worst, std::abs(score(p, s) - score(p + 37, s + 37)));
    }
    d = "max deviation " + fmt(worst);
    return worst <= 1e-9;
  });

  run_check(rep, "analytic gradients match central differences", [&](std::string& d) {
    ModelConfig cfg = toy_config(LatentMode::trailing_query);
    const ParameterSet<double> params = init_params(cfg, opts.seed, 0.3).cast<double>();
    const std::vector<int> tokens = random_tokens(cfg.max_context + 1, cfg.vocab_size, rng);
    const GradCheckResult g = gradient_check(cfg, params, tokens, cfg.num_latents, 1e-2, 1e-4, 6);
    d = "max relative error " + fmt(g.max_rel_error) + " (" + g.worst_param + ")";
    return g.max_rel_error <= 1e-3;
  });

  run_check(rep, "future tokens do not affect earlier predictions", [&](std::string& d) {
    for (LatentMode mode : {LatentMode::trailing_query, LatentMode::learned}) {
      ModelConfig cfg = toy_config(mode);
      const ParameterSet<float> params = init_params(cfg, opts.seed + 1, 0.3);
      for (int trial = 0; trial < 10; ++trial) {
        std::vector<int> tokens = random_tokens(cfg.max_context, cfg.vocab_size, rng);
        const std::size_t n = cfg.num_latents;
        const std::size_t pos = uniform_index(rng, cfg.max_context - n, cfg.max_context - 1);
        ForwardOptions fo;
        const Array<float> a = forward(std::span<const int>(tokens), cfg, params, fo);
        tokens[pos] = (tokens[pos] + 1) % static_cast<int>(cfg.vocab_size);
        const Array<float> b = forward(std::span<const int>(tokens), cfg, params, fo);
        for (std::size_t q = 0; q < n; ++q) {
          if (cfg.max_context - n + q >= pos) continue;  // row q reads position pos
          for (std::size_t c = 0; c < a.cols(); ++c) {
            if (std::abs(a(q, c) - b(q, c)) > 1e-6) {
              d = to_string(mode) + ": row " + std::to_string(q) + " moved when token " + std::to_string(pos) +
                  " changed";
              return false;
            }
          }
        }
      }
    }
    d = "both latent modes";
    return true;
  });

  run_check(rep, "head-chunked cross-attend matches unchunked", [&](std::string& d) {
    ModelConfig cfg = toy_config(LatentMode::trailing_query);
    cfg.channels = 16;
    cfg.cross_heads = 4;
    const ParameterSet<float> params = init_params(cfg, opts.seed + 2, 0.3);
    const std::vector<int> tokens = random_tokens(cfg.max_context, cfg.vocab_size, rng);
    const Array<float> full = forward(std::span<const int>(tokens), cfg, params);
    double worst = 0;
    for (std::size_t hpc : {1, 2}) {
      ModelConfig c2 = cfg;
      c2.cross_heads_per_chunk = hpc;
      worst = std::max(worst, static_cast<double>(max_abs_diff(full, forward(std::span<const int>(tokens), c2, params))));
    }
    d = "max abs diff " + fmt(worst);
    return worst <= 1e-6;
  });

  run_check(rep, "cached decoding matches recomputation", [&](std::string& d) {
    ModelConfig cfg = toy_config(LatentMode::trailing_query);
    cfg.max_context = 32;
    const ParameterSet<float> params = init_params(cfg, opts.seed + 3, 0.3);
    const std::vector<int> prompt = random_tokens(5, cfg.vocab_size, rng);
    SamplerConfig s;
    s.greedy = true;
    s.max_new_tokens = 20;
    SampleOptions so;
    so.record_logits = true;
    const SampleResult cached = sample_cached(params, cfg, prompt, s, so, 4);
    const SampleResult ref = sample_uncached_with_resets(params, cfg, prompt, s, 4, so);
    double worst = 0;
    for (std::size_t i = 0; i < cached.step_logits.size(); ++i) {
      for (std::size_t c = 0; c < cached.step_logits[i].size(); ++c) {
        worst = std::max(worst, static_cast<double>(std::abs(cached.step_logits[i][c] - ref.step_logits[i][c])));
      }
    }
    d = "max abs diff " + fmt(worst) + ", " + std::to_string(cached.resets) + " resets";
    return cached.tokens == ref.tokens && worst <= 1e-4 && cached.resets > 0;
  });

  run_check(rep, "checkpoint round trip is bit-exact", [&](std::string& d) {
    ModelConfig cfg = toy_config(LatentMode::learned);
    const ParameterSet<float> params = init_params(cfg, opts.seed + 4);
    const Checkpoint c = deserialize_checkpoint(serialize_checkpoint(cfg, params));
    d = std::to_string(params.parameter_count()) + " parameters";
    return c.config == cfg && c.params == params;
  });

  return rep;
}

}  // namespace par
