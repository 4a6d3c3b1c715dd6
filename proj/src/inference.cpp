#include "par/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "par/kernels.hpp"

namespace par {

using kernels::Trans;

void SamplerConfig::validate() const {
  if (!greedy && !(temperature > 0)) throw ConfigError("sampler.temperature must be > 0 (or use greedy decoding)");
  if (!std::isfinite(temperature)) throw ConfigError("sampler.temperature must be finite");
}

ResetSchedule::ResetSchedule(std::size_t capacity) : capacity_(capacity) {
  if (capacity < 2 || capacity % 2 != 0) {
    throw ConfigError("latent cache capacity must be even and >= 2, got " + std::to_string(capacity));
  }
}

std::size_t ResetSchedule::prefill(std::size_t prompt_len) {
  if (prompt_len == 0) throw ConfigError("prompt must hold at least one token");
  fill_ = std::min(prompt_len, capacity_ / 2);
  return fill_;
}

bool ResetSchedule::advance() {
  if (fill_ == 0) throw ConfigError("ResetSchedule::advance before prefill");
  if (fill_ == capacity_) {
    fill_ = capacity_ / 2;
    return true;
  }
  ++fill_;
  return false;
}

namespace {

std::size_t checked_capacity(const ModelConfig& cfg, std::size_t n_train) {
  if (n_train > cfg.max_context) {
    throw ConfigError("latent cache capacity " + std::to_string(n_train) + " exceeds max_context " +
                      std::to_string(cfg.max_context));
  }
  return n_train;
}

}  // namespace

KVCache::KVCache(const ModelConfig& cfg, std::size_t n_train) : schedule(checked_capacity(cfg, n_train)) {
  const std::size_t c = cfg.channels;
  cross.k = Array<float>(Shape{cfg.max_context, c});
  cross.v = Array<float>(Shape{cfg.max_context, c});
  layers.resize(cfg.num_layers);
  for (auto& l : layers) {
    l.k = Array<float>(Shape{n_train, c});
    l.v = Array<float>(Shape{n_train, c});
  }
}

namespace {

Array<float> row_block(const Array<float>& a, std::size_t first, std::size_t count) {
  Array<float> out(Shape{count, a.cols()});
  std::copy(a.row(first), a.row(first) + count * a.cols(), out.data().begin());
  return out;
}

std::vector<long long> positions(long long first, std::size_t count) {
  std::vector<long long> p(count);
  for (std::size_t i = 0; i < count; ++i) p[i] = first + static_cast<long long>(i);
  return p;
}

// out[i] = softmax(q_i K[0..limit_i]^T / sqrt(d)) V per head, where
// limit_i = first_limit + i (inclusive).
void attend_rows(const Array<float>& q, const Array<float>& k, const Array<float>& v, std::size_t first_limit,
                 const HeadConfig& heads, Array<float>& out) {
  const std::size_t count = q.rows(), width = heads.width(), d = heads.head_dim;
  const std::size_t keys = first_limit + count;
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));
  std::vector<float> scores(count * keys);
  std::vector<unsigned char> allowed(count * keys, 0);
  for (std::size_t i = 0; i < count; ++i) {
    std::fill_n(allowed.begin() + i * keys, first_limit + i + 1, 1);
  }
  out = Array<float>(Shape{count, width});
  for (std::size_t h = 0; h < heads.num_heads; ++h) {
    kernels::gemm<float>(Trans::no, Trans::yes, count, keys, d, 1.0f, q.data().data() + h * d, width,
                         k.data().data() + h * d, width, 0.0f, scores.data(), keys);
    for (std::size_t i = 0; i < count; ++i) {
      kernels::masked_softmax_row(scores.data() + i * keys, allowed.data() + i * keys, keys, scale,
                                  scores.data() + i * keys);
    }
    kernels::gemm<float>(Trans::no, Trans::no, count, d, keys, 1.0f, scores.data(), keys, v.data().data() + h * d,
                         width, 0.0f, out.data().data() + h * d, width);
  }
}

void add_into(Array<float>& dst, const Array<float>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

struct BlockParams {
  const Array<float>*ln_q_gain, *ln_q_bias, *ln_kv_gain, *ln_kv_bias;
  const Array<float>*wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  const Array<float>*ln_mlp_gain, *ln_mlp_bias, *w1, *b1, *w2, *b2;
};

BlockParams block_params(const ParameterSet<float>& p, const std::string& prefix, bool cross) {
  auto g = [&](const std::string& s) { return &p.get(prefix + "." + s); };
  BlockParams b{};
  b.ln_q_gain = g("ln_q.gain");
  b.ln_q_bias = g("ln_q.bias");
  if (cross) {
    b.ln_kv_gain = g("ln_kv.gain");
    b.ln_kv_bias = g("ln_kv.bias");
  }
  b.wq = g("attn.wq"), b.bq = g("attn.bq"), b.wk = g("attn.wk"), b.bk = g("attn.bk");
  b.wv = g("attn.wv"), b.bv = g("attn.bv"), b.wo = g("attn.wo"), b.bo = g("attn.bo");
  b.ln_mlp_gain = g("ln_mlp.gain"), b.ln_mlp_bias = g("ln_mlp.bias");
  b.w1 = g("mlp.w1"), b.b1 = g("mlp.b1"), b.w2 = g("mlp.w2"), b.b2 = g("mlp.b2");
  return b;
}

// h + MLP(LN(h)) in place.
void mlp_residual(Array<float>& h, const BlockParams& b, float eps) {
  Array<float> z(h.shape()), hidden, out;
  kernels::layer_norm<float>(h, *b.ln_mlp_gain, *b.ln_mlp_bias, eps, z, nullptr, nullptr);
  kernels::linear(z, *b.w1, b.b1, hidden);
  for (float& x : hidden.data()) x = x > 0 ? x * x : 0.0f;
  kernels::linear(hidden, *b.w2, b.b2, out);
  add_into(h, out);
}

// Append rows to a buffer of fixed capacity, dropping the oldest rows when
// it would overflow. Returns the number of rows dropped.
std::size_t append_rows(KVCache::Buffer& buf, const Array<float>& k, const Array<float>& v) {
  const std::size_t cap = buf.k.rows(), c = buf.k.cols(), count = k.rows();
  std::size_t dropped = 0;
  if (buf.rows + count > cap) {
    dropped = buf.rows + count - cap;
    for (Array<float>* a : {&buf.k, &buf.v}) {
      auto& s = a->storage();
      std::copy(s.begin() + static_cast<std::ptrdiff_t>(dropped * c), s.begin() + static_cast<std::ptrdiff_t>(buf.rows * c),
                s.begin());
    }
    buf.rows -= dropped;
  }
  std::copy(k.data().begin(), k.data().end(), buf.k.row(buf.rows));
  std::copy(v.data().begin(), v.data().end(), buf.v.row(buf.rows));
  buf.rows += count;
  return dropped;
}

}  // namespace

CachedDecoder::CachedDecoder(const ParameterSet<float>& params, const ModelConfig& cfg, std::size_t n_train)
    : params_(params), cfg_(cfg), cache_((cfg.validate(), cfg), n_train) {
  if (cfg.latent_mode != LatentMode::trailing_query) {
    throw ConfigError("cached decoding supports trailing_query latents only");
  }
  validate_params(params, cfg);
}

Array<float> CachedDecoder::embed_rows(std::size_t first, std::size_t count) const {
  const Array<float>& table = params_.get("embed");
  const std::size_t c = cfg_.channels;
  Array<float> x(Shape{count, c});
  const float s = cfg_.scale_embedding ? static_cast<float>(std::sqrt(static_cast<double>(c))) : 1.0f;
  for (std::size_t i = 0; i < count; ++i) {
    const int id = tokens_[first + i];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
      throw DimensionError("token id " + std::to_string(id) + " outside vocabulary of " +
                           std::to_string(cfg_.vocab_size));
    }
    for (std::size_t j = 0; j < c; ++j) x(i, j) = table(static_cast<std::size_t>(id), j) * s;
  }
  if (cfg_.absolute_position_embedding) {
    add_into(x, sinusoidal_embedding<float>(static_cast<long long>(first), count, c));
  }
  return x;
}

void CachedDecoder::append_cross(std::size_t first, std::size_t count) {
  const BlockParams b = block_params(params_, "cross", true);
  const HeadConfig heads = cfg_.cross_head_config();
  const float eps = static_cast<float>(cfg_.layer_norm_eps);
  Array<float> x = embed_rows(first, count), z(x.shape()), k, v;
  kernels::layer_norm<float>(x, *b.ln_kv_gain, *b.ln_kv_bias, eps, z, nullptr, nullptr);
  kernels::linear(z, *b.wk, b.bk, k);
  kernels::linear(z, *b.wv, b.bv, v);
  const auto pos = positions(static_cast<long long>(first), count);
  kernels::rotary(k, pos, heads.num_heads, heads.head_dim, heads.rotary_dims(), +1);
  if (cache_.cross.rows == 0) cache_.cross_base = static_cast<long long>(first);
  cache_.cross_base += static_cast<long long>(append_rows(cache_.cross, k, v));
}

std::vector<float> CachedDecoder::latent_pass(std::size_t first, std::size_t count, bool reset) {
  const float eps = static_cast<float>(cfg_.layer_norm_eps);
  const auto pos = positions(static_cast<long long>(first), count);

  // Cross-attend: latent at absolute position p reads cross rows up to p.
  const BlockParams cb = block_params(params_, "cross", true);
  const HeadConfig ch = cfg_.cross_head_config();
  Array<float> h = embed_rows(first, count), z(h.shape()), q, o, a;
  kernels::layer_norm<float>(h, *cb.ln_q_gain, *cb.ln_q_bias, eps, z, nullptr, nullptr);
  kernels::linear(z, *cb.wq, cb.bq, q);
  kernels::rotary(q, pos, ch.num_heads, ch.head_dim, ch.rotary_dims(), +1);
  const std::size_t first_limit = static_cast<std::size_t>(static_cast<long long>(first) - cache_.cross_base);
  attend_rows(q, cache_.cross.k, cache_.cross.v, first_limit, ch, o);
  kernels::linear(o, *cb.wo, cb.bo, a);
  add_into(h, a);
  mlp_residual(h, cb, eps);

  const HeadConfig sh = cfg_.self_head_config();
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const BlockParams b = block_params(params_, "self." + std::to_string(l), false);
    KVCache::Buffer& buf = cache_.layers[l];
    if (reset) buf.rows = 0;
    Array<float> k, v;
    kernels::layer_norm<float>(h, *b.ln_q_gain, *b.ln_q_bias, eps, z, nullptr, nullptr);
    kernels::linear(z, *b.wq, b.bq, q);
    kernels::linear(z, *b.wk, b.bk, k);
    kernels::linear(z, *b.wv, b.bv, v);
    kernels::rotary(q, pos, sh.num_heads, sh.head_dim, sh.rotary_dims(), +1);
    kernels::rotary(k, pos, sh.num_heads, sh.head_dim, sh.rotary_dims(), +1);
    const std::size_t before = buf.rows;
    if (append_rows(buf, k, v) != 0) throw Error("latent cache overflow");
    attend_rows(q, buf.k, buf.v, before, sh, o);
    kernels::linear(o, *b.wo, b.bo, a);
    add_into(h, a);
    mlp_residual(h, b, eps);
  }

  Array<float> last = row_block(h, count - 1, 1), zl(last.shape()), logits;
  kernels::layer_norm<float>(last, params_.get("final_ln.gain"), params_.get("final_ln.bias"), eps, zl, nullptr, nullptr);
  kernels::linear(zl, params_.get("head.w"), &params_.get("head.b"), logits);
  if (!logits.all_finite()) throw NonFiniteError("non-finite logits in cached decoding");
  return logits.storage();
}

std::vector<float> CachedDecoder::prefill(std::span<const int> prompt) {
  if (!tokens_.empty()) throw ConfigError("CachedDecoder::prefill called twice");
  if (prompt.empty()) throw ConfigError("prompt must hold at least one token");
  tokens_.assign(prompt.begin(), prompt.end());
  const std::size_t s = tokens_.size();
  const std::size_t window = std::min(s, cfg_.max_context);
  append_cross(s - window, window);
  const std::size_t n = cache_.schedule.prefill(window);
  return latent_pass(s - n, n, true);
}

std::vector<float> CachedDecoder::step(int token) {
  if (tokens_.empty()) throw ConfigError("CachedDecoder::step before prefill");
  tokens_.push_back(token);
  const std::size_t s = tokens_.size();
  append_cross(s - 1, 1);
  if (cache_.schedule.advance()) {
    ++cache_.resets;
    const std::size_t n = cache_.schedule.fill();
    return latent_pass(s - n, n, true);
  }
  return latent_pass(s - 1, 1, false);
}

int sample_token(std::span<const float> logits, const SamplerConfig& sampler, Rng& rng) {
  if (logits.empty()) throw DimensionError("sample_token: empty logits");
  const auto arg = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  if (sampler.greedy) return arg;
  sampler.validate();
  const double mx = logits[static_cast<std::size_t>(arg)];
  std::vector<double> p(logits.size());
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp((logits[i] - mx) / sampler.temperature);
  double u = uniform01(rng) * s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    u -= p[i];
    if (u < 0) return static_cast<int>(i);
  }
  return arg;
}

namespace {

std::size_t sampler_latents(const SamplerConfig& sampler, const ModelConfig& cfg) {
  return sampler.eval_latents ? sampler.eval_latents : cfg.num_latents;
}

// Next-token logits from one full forward over the tail of the stream.
std::vector<float> uncached_logits(const ParameterSet<float>& params, const ModelConfig& cfg,
                                   const std::vector<int>& stream, std::size_t latents) {
  const std::size_t window = std::min(stream.size(), cfg.max_context);
  ForwardOptions fo;
  fo.eval_latents = std::min(latents, window);
  fo.position_offset = static_cast<long long>(stream.size() - window);
  const Array<float> logits =
      forward(std::span<const int>(stream).subspan(stream.size() - window), cfg, params, fo);
  return std::vector<float>(logits.row(logits.rows() - 1), logits.row(logits.rows() - 1) + logits.cols());
}

template <typename NextLogits>
SampleResult run_sampler(std::span<const int> prompt, const SamplerConfig& sampler, const SampleOptions& opts,
                         NextLogits&& next) {
  if (prompt.empty()) throw ConfigError("prompt must hold at least one token");
  if (!sampler.greedy) sampler.validate();
  Rng rng(sampler.seed);
  SampleResult r;
  r.tokens.assign(prompt.begin(), prompt.end());
  for (std::size_t i = 0; i < sampler.max_new_tokens; ++i) {
    std::size_t latents = 0;
    const std::vector<float> logits = next(i, r.tokens, latents);
    if (opts.record_logits) r.step_logits.push_back(logits);
    r.step_latents.push_back(latents);
    const int t = sample_token(logits, sampler, rng);
    r.tokens.push_back(t);
    if (opts.on_token) opts.on_token(t);
  }
  return r;
}

}  // namespace

SampleResult sample_uncached(const ParameterSet<float>& params, const ModelConfig& cfg, std::span<const int> prompt,
                             const SamplerConfig& sampler, const SampleOptions& opts) {
  const std::size_t n = sampler_latents(sampler, cfg);
  return run_sampler(prompt, sampler, opts, [&](std::size_t, const std::vector<int>& stream, std::size_t& used) {
    used = std::min(n, std::min(stream.size(), cfg.max_context));
    return uncached_logits(params, cfg, stream, n);
  });
}

SampleResult sample_uncached_with_resets(const ParameterSet<float>& params, const ModelConfig& cfg,
                                         std::span<const int> prompt, const SamplerConfig& sampler,
                                         std::size_t n_train, const SampleOptions& opts) {
  ResetSchedule schedule(checked_capacity(cfg, n_train ? n_train : cfg.num_latents));
  std::size_t resets = 0;
  SampleResult r = run_sampler(prompt, sampler, opts, [&](std::size_t i, const std::vector<int>& stream, std::size_t& used) {
    if (i == 0) {
      schedule.prefill(std::min(stream.size(), cfg.max_context));
    } else if (schedule.advance()) {
      ++resets;
    }
    used = schedule.fill();
    return uncached_logits(params, cfg, stream, used);
  });
  r.resets = resets;
  return r;
}

SampleResult sample_cached(const ParameterSet<float>& params, const ModelConfig& cfg, std::span<const int> prompt,
                           const SamplerConfig& sampler, const SampleOptions& opts, std::size_t n_train) {
  CachedDecoder dec(params, cfg, n_train ? n_train : cfg.num_latents);
  SampleResult r = run_sampler(prompt, sampler, opts, [&](std::size_t i, const std::vector<int>& stream, std::size_t& used) {
    std::vector<float> logits = i == 0 ? dec.prefill(stream) : dec.step(stream.back());
    used = dec.effective_latents();
    return logits;
  });
  r.resets = dec.resets();
  return r;
}

EvalSummary strided_eval(const ParameterSet<float>& params, const ModelConfig& cfg, std::span<const int> corpus,
                         std::size_t stride, std::size_t eval_latents) {
  if (corpus.size() < 2) throw ConfigError("strided_eval: corpus needs at least two tokens");
  std::size_t n = eval_latents ? eval_latents : cfg.num_latents;
  if (n > cfg.max_context) throw ConfigError("strided_eval: eval_latents exceeds max_context");
  if (stride < 1 || stride > n) {
    throw ConfigError("strided_eval: stride must lie in [1, " + std::to_string(n) + "], got " + std::to_string(stride));
  }
  const std::size_t last = corpus.size() - 1;
  EvalSummary s;
  std::size_t end = std::min(cfg.max_context, last);
  if (end < n) n = end;
  std::size_t scored_upto = end - n;  // targets <= this index are not scored by this window
  while (true) {
    const std::size_t start = end > cfg.max_context ? end - cfg.max_context : 0;
    const std::size_t len = end - start;
    ForwardOptions fo;
    fo.eval_latents = n;
    const Array<float> logits = forward(corpus.subspan(start, len), cfg, params, fo);
    WindowRecord w;
    w.window_end = end;
    for (std::size_t q = 0; q < n; ++q) {
      const std::size_t t = start + aligned_target(len, n, q);
      if (t <= scored_upto) continue;
      const float* row = logits.row(q);
      const std::size_t v = logits.cols();
      const double mx = *std::max_element(row, row + v);
      double z = 0;
      for (std::size_t c = 0; c < v; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
      w.nll += mx + std::log(z) - static_cast<double>(row[corpus[t]]);
      ++w.targets;
    }
    s.total_nll += w.nll;
    s.tokens_scored += w.targets;
    s.windows.push_back(w);
    if (end == last) break;
    scored_upto = end;
    end = std::min(end + stride, last);
  }
  s.mean_nll = s.total_nll / static_cast<double>(s.tokens_scored);
  s.bits_per_token = s.mean_nll / std::numbers::ln2;
  s.perplexity = std::exp(s.mean_nll);
  return s;
}

}  // namespace par
