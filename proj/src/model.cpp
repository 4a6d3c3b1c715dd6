#include "par/model.hpp"

#include <cmath>
#include <numeric>

namespace par {

std::string to_string(LatentMode mode) { return mode == LatentMode::learned ? "learned" : "trailing_query"; }

LatentMode latent_mode_from_string(const std::string& s) {
  if (s == "trailing_query") return LatentMode::trailing_query;
  if (s == "learned") return LatentMode::learned;
  throw ConfigError("latent_mode must be trailing_query or learned, got '" + s + "'");
}

std::string to_string(Architecture arch) { return arch == Architecture::decoder_only ? "decoder_only" : "perceiver_ar"; }

Architecture architecture_from_string(const std::string& s) {
  if (s == "perceiver_ar") return Architecture::perceiver_ar;
  if (s == "decoder_only") return Architecture::decoder_only;
  throw ConfigError("architecture must be perceiver_ar or decoder_only, got '" + s + "'");
}

namespace {

HeadConfig heads_for(std::size_t channels, std::size_t heads, double rotary_fraction) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError(std::to_string(heads) + " heads do not divide " + std::to_string(channels) + " channels");
  }
  return HeadConfig{heads, channels / heads, rotary_fraction};
}

}  // namespace

HeadConfig ModelConfig::cross_head_config() const { return heads_for(channels, cross_heads, rotary_fraction); }
HeadConfig ModelConfig::self_head_config() const { return heads_for(channels, self_heads, rotary_fraction); }

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (channels == 0) throw ConfigError("channels must be >= 1");
  if (num_latents < 1 || num_latents > max_context) {
    throw ConfigError("need 1 <= num_latents <= max_context, got num_latents=" + std::to_string(num_latents) +
                      " max_context=" + std::to_string(max_context));
  }
  if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
  if (cross_attend_dropout < 0 || cross_attend_dropout >= 1) throw ConfigError("cross_attend_dropout must be in [0,1)");
  if (post_attention_dropout < 0 || post_attention_dropout >= 1) {
    throw ConfigError("post_attention_dropout must be in [0,1)");
  }
  if (absolute_position_embedding && channels % 2 != 0) {
    throw ConfigError("absolute_position_embedding needs an even channel count");
  }
  cross_head_config().validate();
  self_head_config().validate();
  if (cross_heads_per_chunk != 0 && cross_heads % cross_heads_per_chunk != 0) {
    throw ConfigError("cross_heads_per_chunk must divide cross_heads");
  }
}

template <typename T>
void ParameterSet<T>::add(std::string name, Array<T> value) {
  if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(value));
}

template <typename T>
const Array<T>& ParameterSet<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("missing parameter '" + name + "'");
  return entries_[it->second].second;
}

template <typename T>
Array<T>& ParameterSet<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("missing parameter '" + name + "'");
  return entries_[it->second].second;
}

template <typename T>
std::size_t ParameterSet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

namespace {

// Expected (name, shape) list for a config, in manifest order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg) {
  const std::size_t c = cfg.channels, v = cfg.vocab_size, hidden = 4 * c;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed", Shape{v, c});
  if (cfg.latent_mode == LatentMode::learned) out.emplace_back("latents", Shape{cfg.num_latents, c});
  auto block = [&](const std::string& p, bool cross) {
    out.emplace_back(p + ".ln_q.gain", Shape{c});
    out.emplace_back(p + ".ln_q.bias", Shape{c});
    if (cross) {
      out.emplace_back(p + ".ln_kv.gain", Shape{c});
      out.emplace_back(p + ".ln_kv.bias", Shape{c});
    }
    for (const char* w : {"q", "k", "v", "o"}) {
      out.emplace_back(p + ".attn.w" + w, Shape{c, c});
      out.emplace_back(p + ".attn.b" + w, Shape{c});
    }
    out.emplace_back(p + ".ln_mlp.gain", Shape{c});
    out.emplace_back(p + ".ln_mlp.bias", Shape{c});
    out.emplace_back(p + ".mlp.w1", Shape{c, hidden});
    out.emplace_back(p + ".mlp.b1", Shape{hidden});
    out.emplace_back(p + ".mlp.w2", Shape{hidden, c});
    out.emplace_back(p + ".mlp.b2", Shape{c});
  };
  block("cross", true);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) block("self." + std::to_string(l), false);
  out.emplace_back("final_ln.gain", Shape{c});
  out.emplace_back("final_ln.bias", Shape{c});
  out.emplace_back("head.w", Shape{c, v});
  out.emplace_back("head.b", Shape{v});
  return out;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

ParameterSet<float> init_params(const ModelConfig& cfg, std::uint64_t seed, double init_std) {
  cfg.validate();
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ParameterSet<float> params;
  for (auto& [name, shape] : parameter_layout(cfg)) {
    Array<float> a(shape);
    if (ends_with(name, ".gain")) {
      a.fill(1.0f);
    } else if (shape.size() == 2) {
      for (auto& v : a.data()) {
        double z;
        do {
          z = normal(rng);
        } while (std::abs(z) > 2.0);
        v = static_cast<float>(z * init_std);
      }
    }
    params.add(name, std::move(a));
  }
  return params;
}

template <typename T>
void validate_params(const ParameterSet<T>& params, const ModelConfig& cfg) {
  const auto layout = parameter_layout(cfg);
  if (layout.size() != params.size()) {
    throw ConfigError("parameter set has " + std::to_string(params.size()) + " arrays, config expects " +
                      std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& [name, shape] = params.entries()[i];
    if (name != layout[i].first || shape.shape() != layout[i].second) {
      throw ConfigError("parameter " + std::to_string(i) + " is '" + name + "' " + shape_string(shape.shape()) +
                        ", config expects '" + layout[i].first + "' " + shape_string(layout[i].second));
    }
    if (!shape.all_finite()) throw NonFiniteError("parameter '" + name + "' holds non-finite values");
  }
}

template <typename T>
const Var<T>& ModelVars<T>::operator[](const std::string& name) const {
  auto it = by_name.find(name);
  if (it == by_name.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

template <typename T>
BlockWeights<T> ModelVars<T>::block(const std::string& p, bool cross) const {
  const auto& v = *this;
  BlockWeights<T> w;
  w.ln_q_gain = v[p + ".ln_q.gain"];
  w.ln_q_bias = v[p + ".ln_q.bias"];
  if (cross) {
    w.ln_kv_gain = v[p + ".ln_kv.gain"];
    w.ln_kv_bias = v[p + ".ln_kv.bias"];
  }
  w.attn = {v[p + ".attn.wq"], v[p + ".attn.bq"], v[p + ".attn.wk"], v[p + ".attn.bk"],
            v[p + ".attn.wv"], v[p + ".attn.bv"], v[p + ".attn.wo"], v[p + ".attn.bo"]};
  w.ln_mlp_gain = v[p + ".ln_mlp.gain"];
  w.ln_mlp_bias = v[p + ".ln_mlp.bias"];
  w.mlp = {v[p + ".mlp.w1"], v[p + ".mlp.b1"], v[p + ".mlp.w2"], v[p + ".mlp.b2"]};
  return w;
}

template <typename T>
ModelVars<T> bind_params(Tape<T>& tape, const ParameterSet<T>& params, bool requires_grad) {
  ModelVars<T> vars;
  for (const auto& [name, a] : params.entries()) {
    Var<T> v = tape.leaf(a, requires_grad);
    vars.leaves.emplace_back(name, v);
    vars.by_name.emplace(name, v);
  }
  return vars;
}

template <typename T>
Array<T> sinusoidal_embedding(long long offset, std::size_t count, std::size_t channels) {
  Array<T> pe(Shape{count, channels});
  std::vector<double> freq(channels / 2);
  for (std::size_t j = 0; j < freq.size(); ++j) {
    freq[j] = std::pow(10000.0, -static_cast<double>(2 * j) / static_cast<double>(channels));
  }
  for (std::size_t r = 0; r < count; ++r) {
    const double pos = static_cast<double>(offset + static_cast<long long>(r));
    for (std::size_t i = 0; i + 1 < channels; i += 2) {
      pe(r, i) = static_cast<T>(std::sin(pos * freq[i / 2]));
      pe(r, i + 1) = static_cast<T>(std::cos(pos * freq[i / 2]));
    }
  }
  return pe;
}

namespace {

template <typename T>
Var<T> embed(Tape<T>& tape, std::span<const PackedWindow> windows, const ModelConfig& cfg, const ModelVars<T>& vars) {
  std::vector<int> ids;
  for (const auto& w : windows) {
    for (int id : w.tokens) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
        throw DimensionError("token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(cfg.vocab_size));
      }
    }
    ids.insert(ids.end(), w.tokens.begin(), w.tokens.end());
  }
  Var<T> x = gather_rows(vars["embed"], std::span<const int>(ids));
  if (cfg.scale_embedding) x = scale(x, static_cast<T>(std::sqrt(static_cast<double>(cfg.channels))));
  if (cfg.absolute_position_embedding) {
    Array<T> pe(Shape{ids.size(), cfg.channels});
    std::size_t row = 0;
    for (const auto& w : windows) {
      const Array<T> part = sinusoidal_embedding<T>(w.position_offset, w.tokens.size(), cfg.channels);
      std::copy(part.data().begin(), part.data().end(), pe.row(row));
      row += w.tokens.size();
    }
    x = add(x, tape.constant(std::move(pe)));
  }
  return x;
}

void append_positions(std::vector<long long>& out, long long start, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) out.push_back(start + static_cast<long long>(i));
}

template <typename T>
Var<T> output_head(const Var<T>& h, const ModelConfig& cfg, const ModelVars<T>& vars) {
  Var<T> z = layer_norm(h, vars["final_ln.gain"], vars["final_ln.bias"], static_cast<T>(cfg.layer_norm_eps));
  return linear(z, vars["head.w"], vars["head.b"]);
}

void check_window(const PackedWindow& w, const ModelConfig& cfg, const char* who) {
  const std::size_t m = w.tokens.size();
  if (m == 0) throw ConfigError(std::string(who) + ": empty token sequence");
  if (m > cfg.max_context) {
    throw ConfigError(std::string(who) + ": " + std::to_string(m) + " tokens exceed max_context " +
                      std::to_string(cfg.max_context));
  }
}

}  // namespace

template <typename T>
Var<T> forward_packed(Tape<T>& tape, std::span<const PackedWindow> windows, const ModelConfig& cfg,
                      const ModelVars<T>& vars, const ForwardOptions& opts) {
  if (windows.empty()) throw ConfigError("forward: no windows");
  const bool dropout = opts.training && opts.rng != nullptr;
  if (opts.training && opts.rng == nullptr && (cfg.cross_attend_dropout > 0 || cfg.post_attention_dropout > 0)) {
    throw ConfigError("forward: training with dropout needs an rng");
  }
  std::vector<int> query_rows;
  std::vector<long long> kpos, qpos;
  std::vector<AttentionSegment> cross_segments, self_segments;
  std::size_t k_begin = 0, q_begin = 0;
  for (const auto& w : windows) {
    check_window(w, cfg, "forward");
    const std::size_t m = w.tokens.size(), n = w.latents;
    if (n == 0 || n > m) {
      throw ConfigError("forward: need 1 <= latents <= tokens, got latents=" + std::to_string(n) +
                        " tokens=" + std::to_string(m));
    }
    if (cfg.latent_mode == LatentMode::learned && n > cfg.num_latents) {
      throw ConfigError("forward: learned latents support at most " + std::to_string(cfg.num_latents) + " latents");
    }
    for (std::size_t q = 0; q < n; ++q) {
      query_rows.push_back(static_cast<int>(cfg.latent_mode == LatentMode::learned ? cfg.num_latents - n + q
                                                                                    : k_begin + m - n + q));
    }
    append_positions(kpos, w.position_offset, m);
    append_positions(qpos, w.position_offset + static_cast<long long>(m - n), n);
    AttentionMask cross_mask = make_cross_mask(m, n);
    if (dropout && cfg.cross_attend_dropout > 0) {
      cross_mask = cross_attend_key_dropout(cross_mask, cfg.cross_attend_dropout, *opts.rng);
    }
    cross_segments.push_back({q_begin, k_begin, std::move(cross_mask)});
    self_segments.push_back({q_begin, q_begin, make_self_mask(n)});
    k_begin += m;
    q_begin += n;
  }

  Var<T> x = embed(tape, windows, cfg, vars);
  Var<T> queries = cfg.latent_mode == LatentMode::learned ? gather_rows(vars["latents"], std::span<const int>(query_rows))
                                                          : gather_rows(x, std::span<const int>(query_rows));
  BlockOptions cross_opts{cfg.cross_head_config(), cfg.cross_heads_per_chunk,
                          dropout ? cfg.post_attention_dropout : 0.0, opts.rng, cfg.layer_norm_eps};
  Var<T> h = attention_block(queries, std::optional<Var<T>>(x), std::span<const AttentionSegment>(cross_segments),
                             vars.block("cross", true), qpos, kpos, cross_opts);
  BlockOptions self_opts{cfg.self_head_config(), 0, cross_opts.dropout, opts.rng, cfg.layer_norm_eps};
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    h = attention_block(h, std::optional<Var<T>>(), std::span<const AttentionSegment>(self_segments),
                        vars.block("self." + std::to_string(l), false), qpos, qpos, self_opts);
  }
  return output_head(h, cfg, vars);
}

template <typename T>
Var<T> forward(Tape<T>& tape, std::span<const int> tokens, const ModelConfig& cfg, const ModelVars<T>& vars,
               const ForwardOptions& opts) {
  const PackedWindow w{tokens, opts.eval_latents.value_or(cfg.num_latents), opts.position_offset};
  return forward_packed(tape, std::span<const PackedWindow>(&w, 1), cfg, vars, opts);
}

template <typename T>
Array<T> forward(std::span<const int> tokens, const ModelConfig& cfg, const ParameterSet<T>& params,
                 const ForwardOptions& opts) {
  Tape<T> tape(false);
  const ModelVars<T> vars = bind_params(tape, params, false);
  return forward(tape, tokens, cfg, vars, opts).value();
}

template <typename T>
Var<T> decoder_only_forward_packed(Tape<T>& tape, std::span<const PackedWindow> windows, const ModelConfig& cfg,
                                   const ModelVars<T>& vars, const ForwardOptions& opts) {
  if (windows.empty()) throw ConfigError("decoder_only_forward: no windows");
  const bool dropout = opts.training && opts.rng != nullptr;
  std::vector<long long> pos;
  std::vector<AttentionSegment> segments;
  std::size_t begin = 0;
  for (const auto& w : windows) {
    check_window(w, cfg, "decoder_only_forward");
    append_positions(pos, w.position_offset, w.tokens.size());
    segments.push_back({begin, begin, make_self_mask(w.tokens.size())});
    begin += w.tokens.size();
  }
  Var<T> x = embed(tape, windows, cfg, vars);
  BlockOptions first{cfg.cross_head_config(), cfg.cross_heads_per_chunk, dropout ? cfg.post_attention_dropout : 0.0,
                     opts.rng, cfg.layer_norm_eps};
  const std::span<const AttentionSegment> segs(segments);
  Var<T> h = attention_block(x, std::optional<Var<T>>(x), segs, vars.block("cross", true), pos, pos, first);
  BlockOptions rest{cfg.self_head_config(), 0, first.dropout, opts.rng, cfg.layer_norm_eps};
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    h = attention_block(h, std::optional<Var<T>>(), segs, vars.block("self." + std::to_string(l), false), pos, pos,
                        rest);
  }
  return output_head(h, cfg, vars);
}

template <typename T>
Var<T> decoder_only_forward(Tape<T>& tape, std::span<const int> tokens, const ModelConfig& cfg,
                            const ModelVars<T>& vars, const ForwardOptions& opts) {
  const PackedWindow w{tokens, tokens.size(), opts.position_offset};
  return decoder_only_forward_packed(tape, std::span<const PackedWindow>(&w, 1), cfg, vars, opts);
}

template <typename T>
Array<T> decoder_only_forward(std::span<const int> tokens, const ModelConfig& cfg, const ParameterSet<T>& params,
                              const ForwardOptions& opts) {
  Tape<T> tape(false);
  const ModelVars<T> vars = bind_params(tape, params, false);
  return decoder_only_forward(tape, tokens, cfg, vars, opts).value();
}

FlopEstimate count_attention_flops(const ModelConfig& cfg, std::size_t m, Architecture arch) {
  const double c = static_cast<double>(cfg.channels);
  const double v = static_cast<double>(cfg.vocab_size);
  const double layers = static_cast<double>(cfg.num_layers);
  const double md = static_cast<double>(m);
  // Per processed row of a block: Q,K,V,O projections (8 C^2) and the 4x MLP
  // (16 C^2).
  FlopEstimate f;
  if (arch == Architecture::decoder_only) {
    f.self_attention = 4.0 * (layers + 1) * md * md * c;
    f.projections = 24.0 * c * c * md * (layers + 1) + 2.0 * md * c * v;
    return f;
  }
  const double n = static_cast<double>(std::min(cfg.num_latents, m));
  f.cross_attention = 4.0 * md * n * c;
  f.self_attention = 4.0 * layers * n * n * c;
  // Cross-attend: K,V over m inputs, Q,O and MLP over n latents.
  f.projections = 4.0 * md * c * c + 20.0 * n * c * c + 24.0 * layers * n * c * c + 2.0 * n * c * v;
  return f;
}

#define PAR_INSTANTIATE_MODEL(T)                                                                                 \
  template class ParameterSet<T>;                                                                              \
  template struct ModelVars<T>;                                                                                \
  template void validate_params<T>(const ParameterSet<T>&, const ModelConfig&);                                \
  template ModelVars<T> bind_params<T>(Tape<T>&, const ParameterSet<T>&, bool);                                \
  template Array<T> sinusoidal_embedding<T>(long long, std::size_t, std::size_t);                              \
  template Var<T> forward<T>(Tape<T>&, std::span<const int>, const ModelConfig&, const ModelVars<T>&,          \
                             const ForwardOptions&);                                                           \
  template Array<T> forward<T>(std::span<const int>, const ModelConfig&, const ParameterSet<T>&,               \
                               const ForwardOptions&);                                                         \
  template Var<T> forward_packed<T>(Tape<T>&, std::span<const PackedWindow>, const ModelConfig&,               \
                                    const ModelVars<T>&, const ForwardOptions&);                               \
  template Var<T> decoder_only_forward_packed<T>(Tape<T>&, std::span<const PackedWindow>, const ModelConfig&,  \
                                                 const ModelVars<T>&, const ForwardOptions&);                  \
  template Var<T> decoder_only_forward<T>(Tape<T>&, std::span<const int>, const ModelConfig&,                  \
                                          const ModelVars<T>&, const ForwardOptions&);                         \
  template Array<T> decoder_only_forward<T>(std::span<const int>, const ModelConfig&, const ParameterSet<T>&,   \
                                            const ForwardOptions&);

PAR_INSTANTIATE_MODEL(float)
PAR_INSTANTIATE_MODEL(double)

}  // namespace par
