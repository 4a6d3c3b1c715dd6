#include "doctest.h"

#include <random>

#include "par/checkpoint.hpp"
#include "par/model.hpp"
#include "par/selftest.hpp"

using namespace par;

namespace {

ModelConfig small_config(LatentMode mode = LatentMode::trailing_query) {
  ModelConfig c;
  c.vocab_size = 13;
  c.max_context = 24;
  c.num_latents = 8;
  c.num_layers = 2;
  c.channels = 16;
  c.cross_heads = 2;
  c.self_heads = 4;
  c.latent_mode = mode;
  return c;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(vocab) - 1);
  std::vector<int> t(n);
  for (auto& x : t) x = d(rng);
  return t;
}

ParameterSet<float> bigger_init(const ModelConfig& cfg, std::uint64_t seed) {
  // Larger weights make any leak through the masks visible.
  return init_params(cfg, seed, 0.3);
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  auto bad = [&](auto&& edit) {
    ModelConfig b = small_config();
    edit(b);
    CHECK_THROWS_AS(b.validate(), ConfigError);
  };
  bad([](ModelConfig& b) { b.num_latents = 25; });
  bad([](ModelConfig& b) { b.num_latents = 0; });
  bad([](ModelConfig& b) { b.cross_heads = 3; });
  bad([](ModelConfig& b) { b.num_layers = 0; });
  bad([](ModelConfig& b) { b.cross_attend_dropout = 1.0; });
  bad([](ModelConfig& b) { b.cross_heads_per_chunk = 3; });
  bad([](ModelConfig& b) { b.vocab_size = 1; });
  bad([](ModelConfig& b) { b.channels = 8, b.self_heads = 4, b.cross_heads = 4; });  // head_dim 2: odd rotary span
}

TEST_CASE("parameter layout does not depend on M or N") {
  ModelConfig a = small_config(), b = small_config();
  b.max_context = 100;
  b.num_latents = 50;
  CHECK(manifest(init_params(a, 1)) == manifest(init_params(b, 1)));
  CHECK(init_params(a, 1).parameter_count() == init_params(b, 1).parameter_count());
  const auto p = init_params(a, 3);
  CHECK(p.get("embed").shape() == Shape{13, 16});
  CHECK(p.get("cross.ln_kv.gain")[0] == 1.0f);
  CHECK(p.get("self.1.attn.bq")[0] == 0.0f);
  CHECK_FALSE(p.contains("self.2.attn.wq"));
  ModelConfig learned = small_config(LatentMode::learned);
  CHECK(init_params(learned, 1).get("latents").shape() == Shape{8, 16});
}

TEST_CASE("initialization is a truncated normal") {
  const auto p = init_params(small_config(), 5, 0.02);
  double sq = 0;
  const auto& w = p.get("head.w");
  for (float v : w.data()) {
    CHECK(std::abs(v) <= 0.04f + 1e-7f);
    sq += static_cast<double>(v) * v;
  }
  // Std of a N(0,1) truncated at +-2 is about 0.88.
  CHECK(std::sqrt(sq / static_cast<double>(w.size())) == doctest::Approx(0.02 * 0.88).epsilon(0.1));
  CHECK(init_params(small_config(), 5) == init_params(small_config(), 5));
  CHECK_FALSE(init_params(small_config(), 5) == init_params(small_config(), 6));
}

TEST_CASE("validate_params catches layout mismatches") {
  const auto cfg = small_config();
  auto p = init_params(cfg, 1);
  CHECK_NOTHROW(validate_params(p, cfg));
  ModelConfig other = cfg;
  other.num_layers = 3;
  CHECK_THROWS_AS(validate_params(p, other), ConfigError);
  p.get("head.b")[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(validate_params(p, cfg), NonFiniteError);
}

TEST_CASE("forward yields one logit row per latent for every latent count") {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 2);
  std::mt19937_64 rng(1);
  const auto tokens = random_tokens(20, cfg.vocab_size, rng);
  for (std::size_t n = 1; n <= tokens.size(); ++n) {
    ForwardOptions o;
    o.eval_latents = n;
    const auto logits = forward<float>(tokens, cfg, p, o);
    CHECK(logits.shape() == Shape{n, cfg.vocab_size});
  }
  ForwardOptions too_many;
  too_many.eval_latents = 21;
  CHECK_THROWS_AS(forward<float>(tokens, cfg, p, too_many), ConfigError);
  const auto long_tokens = random_tokens(25, cfg.vocab_size, rng);
  CHECK_THROWS_AS(forward<float>(long_tokens, cfg, p), ConfigError);
  std::vector<int> bad = tokens;
  bad[3] = 13;
  CHECK_THROWS_AS(forward<float>(bad, cfg, p), DimensionError);
}

TEST_CASE("target alignment helper") {
  CHECK(aligned_target(10, 10, 0) == 1);
  CHECK(aligned_target(10, 10, 9) == 10);
  CHECK(aligned_target(10, 4, 0) == 7);
  CHECK(aligned_target(10, 1, 0) == 10);
}

TEST_CASE("all-latent forward equals the decoder-only baseline") {
  ModelConfig cfg = small_config();
  cfg.absolute_position_embedding = true;
  const auto p = bigger_init(cfg, 4);
  std::mt19937_64 rng(2);
  const auto tokens = random_tokens(17, cfg.vocab_size, rng);
  ForwardOptions o;
  o.eval_latents = tokens.size();
  const auto a = forward<float>(tokens, cfg, p, o);
  const auto b = decoder_only_forward<float>(tokens, cfg, p);
  CHECK(a.shape() == b.shape());
  CHECK(max_abs_diff(a, b) <= 1e-6f);
}

TEST_CASE("end-to-end causality for both latent modes") {
  std::mt19937_64 rng(3);
  for (LatentMode mode : {LatentMode::trailing_query, LatentMode::learned}) {
    ModelConfig cfg = small_config(mode);
    if (mode == LatentMode::learned) cfg.num_latents = cfg.max_context;  // lets eval_latents reach M
    const auto p = bigger_init(cfg, 7);
    for (int trial = 0; trial < 12; ++trial) {
      const std::size_t m = cfg.max_context;
      auto tokens = random_tokens(m, cfg.vocab_size, rng);
      const std::size_t n = std::vector<std::size_t>{1, 4, 8, m}[trial % 4];
      const std::size_t pos = std::uniform_int_distribution<std::size_t>(1, m - 1)(rng);
      ForwardOptions o;
      o.eval_latents = n;
      const auto before = forward<float>(tokens, cfg, p, o);
      tokens[pos] = (tokens[pos] + 1) % static_cast<int>(cfg.vocab_size);
      const auto after = forward<float>(tokens, cfg, p, o);
      for (std::size_t q = 0; q < n; ++q) {
        if (m - n + q >= pos) continue;  // this row reads the perturbed token
        for (std::size_t v = 0; v < cfg.vocab_size; ++v) CHECK(std::abs(after(q, v) - before(q, v)) <= 1e-6f);
      }
    }
  }
}

TEST_CASE("training-mode dropout needs an rng and stays causal") {
  ModelConfig cfg = small_config();
  cfg.cross_attend_dropout = 0.3;
  cfg.post_attention_dropout = 0.1;
  const auto p = init_params(cfg, 1);
  std::mt19937_64 rng(4);
  const auto tokens = random_tokens(24, cfg.vocab_size, rng);
  ForwardOptions o;
  o.training = true;
  CHECK_THROWS_AS(forward<float>(tokens, cfg, p, o), ConfigError);
  Rng r1(9), r2(9);
  o.rng = &r1;
  const auto a = forward<float>(tokens, cfg, p, o);
  o.rng = &r2;
  CHECK(forward<float>(tokens, cfg, p, o) == a);
  // Eval mode ignores dropout entirely.
  CHECK_FALSE(forward<float>(tokens, cfg, p) == a);
}

TEST_CASE("packed forward equals per-window forwards") {
  for (bool abs_pe : {false, true}) {
    ModelConfig cfg = small_config();
    cfg.absolute_position_embedding = abs_pe;
    const auto p = init_params(cfg, 5, 0.2);
    std::mt19937_64 rng(5);
    const auto t1 = random_tokens(24, cfg.vocab_size, rng), t2 = random_tokens(11, cfg.vocab_size, rng);
    Tape<float> tape(false);
    const auto vars = bind_params(tape, p, false);
    const PackedWindow w[] = {{t1, 8, 0}, {t2, 5, 3}};
    const ArrayF packed = forward_packed<float>(tape, w, cfg, vars, {}).value();
    ForwardOptions o1, o2;
    o1.eval_latents = 8;
    o2.eval_latents = 5;
    o2.position_offset = 3;
    const ArrayF a = forward<float>(t1, cfg, p, o1), b = forward<float>(t2, cfg, p, o2);
    REQUIRE(packed.rows() == 13);
    float worst = 0;
    for (std::size_t r = 0; r < 13; ++r)
      for (std::size_t v = 0; v < cfg.vocab_size; ++v)
        worst = std::max(worst, std::abs(packed(r, v) - (r < 8 ? a(r, v) : b(r - 8, v))));
    CHECK(worst <= 1e-5f);

    const PackedWindow d[] = {{t1, 0, 0}, {t2, 0, 0}};
    const ArrayF dec = decoder_only_forward_packed<float>(tape, d, cfg, vars, {}).value();
    CHECK(dec.rows() == 35);
  }
}

TEST_CASE("position offset shifts rotary phases without changing relative structure") {
  // With no absolute embedding, only relative positions matter.
  const auto cfg = small_config();
  const auto p = init_params(cfg, 6, 0.2);
  std::mt19937_64 rng(6);
  const auto tokens = random_tokens(20, cfg.vocab_size, rng);
  ForwardOptions shifted;
  shifted.position_offset = 1000;
  CHECK(max_abs_diff(forward<float>(tokens, cfg, p), forward<float>(tokens, cfg, p, shifted)) <= 1e-4f);
}

TEST_CASE("flop estimates follow the attention cost formulas") {
  ModelConfig cfg = small_config();
  cfg.channels = 64;
  cfg.num_latents = 64;
  cfg.num_layers = 4;
  for (std::size_t m : {256, 1024, 4096}) {
    const auto pa = count_attention_flops(cfg, m);
    CHECK(pa.cross_attention == 4.0 * m * 64 * 64);
    CHECK(pa.self_attention == 4.0 * 4 * 64 * 64 * 64);
    const auto dec = count_attention_flops(cfg, m, Architecture::decoder_only);
    CHECK(dec.cross_attention == 0);
    CHECK(dec.self_attention == 4.0 * 5 * double(m) * double(m) * 64);
    CHECK(dec.total() > pa.total());
  }
  // Perceiver AR attention cost is linear in M once N is fixed.
  const double a = count_attention_flops(cfg, 1024).cross_attention, b = count_attention_flops(cfg, 4096).cross_attention;
  CHECK(b == 4 * a);
}

TEST_CASE("full-model analytic gradients match central differences") {
  ModelConfig cfg;
  cfg.vocab_size = 11;
  cfg.max_context = 16;
  cfg.num_latents = 8;
  cfg.num_layers = 2;
  cfg.channels = 8;
  cfg.cross_heads = 2;
  cfg.self_heads = 2;
  cfg.absolute_position_embedding = true;
  const auto params = init_params(cfg, 11, 0.3).cast<double>();
  std::mt19937_64 rng(12);
  const auto tokens = random_tokens(17, cfg.vocab_size, rng);
  const auto r = gradient_check(cfg, params, tokens, 8, 1e-2, 1e-4);
  CHECK(r.per_param.size() == params.size());
  INFO("worst parameter: " << r.worst_param);
  CHECK(r.max_rel_error <= 1e-3);
}
