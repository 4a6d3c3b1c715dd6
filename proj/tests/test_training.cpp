#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "helpers.hpp"
#include "par/checkpoint.hpp"
#include "par/training.hpp"

using namespace par;
using par::testing::random_array;

namespace {

ModelConfig tiny_model(std::size_t vocab, std::size_t m, std::size_t n) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.max_context = m;
  c.num_latents = n;
  c.num_layers = 1;
  c.channels = 16;
  c.cross_heads = 2;
  c.self_heads = 2;
  return c;
}

TrainConfig tiny_train(std::size_t steps) {
  TrainConfig t;
  t.batch_size = 4;
  t.total_steps = steps;
  t.warmup_steps = 0;
  t.base_lr = 1e-3;
  t.adam_b1 = 0.9;
  t.seed = 3;
  t.log_interval = 1;
  t.eval_sequences = 2;
  return t;
}

TaskConfig tiny_copy(std::size_t k = 6, std::size_t vocab = 5) {
  TaskConfig t;
  t.kind = TaskKind::copy;
  t.k_half = k;
  t.data_vocab = vocab;
  return t;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("par_unit_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("loss on uniform logits is log V plus the z term") {
  const std::size_t v = 7;
  const ArrayD logits({3, v});
  const std::vector<int> targets{0, 3, 6};
  const std::vector<unsigned char> mask{1, 1, 1};
  const auto m = loss(logits, targets, mask, 1e-4);
  CHECK(m.ce == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  CHECK(m.z_loss == doctest::Approx(1e-4 * std::log(7.0) * std::log(7.0)).epsilon(1e-12));
  CHECK(m.loss == doctest::Approx(m.ce + m.z_loss));
  CHECK(m.count == 3);
}

TEST_CASE("loss saturates for a confident correct prediction") {
  ArrayD logits({1, 4});
  logits(0, 2) = 60;
  const auto m = loss(logits, std::vector<int>{2}, std::vector<unsigned char>{1}, 0.0);
  CHECK(m.ce < 1e-20);
  CHECK(m.accuracy == 1.0);
}

TEST_CASE("loss matches a log-softmax oracle and ignores masked targets") {
  std::mt19937_64 rng(1);
  const ArrayD logits = random_array({2, 5}, rng, 2.0);
  const std::vector<int> t{4, 1};
  double want = 0;
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += std::exp(logits(r, c));
    want += (std::log(s) - logits(r, t[r])) / 2;
  }
  CHECK(loss(logits, t, std::vector<unsigned char>{1, 1}, 0.0).ce == doctest::Approx(want).epsilon(1e-6));
  const std::vector<unsigned char> first_only{1, 0};
  CHECK(loss(logits, std::vector<int>{4, 0}, first_only, 1e-4).loss ==
        loss(logits, std::vector<int>{4, 3}, first_only, 1e-4).loss);
  CHECK_THROWS_AS(loss(logits, t, std::vector<unsigned char>{0, 0}, 0.0), ConfigError);
  CHECK_THROWS_AS(loss(logits, std::vector<int>{4}, std::vector<unsigned char>{1}, 0.0), DimensionError);
}

TEST_CASE("first Adam step moves by lr times the gradient sign") {
  ParameterSet<double> p;
  p.add("w", ArrayD::matrix(1, 3, {1.0, 2.0, 3.0}));
  auto state = make_train_state(p, 0);
  ParameterSet<double> g;
  g.add("w", ArrayD::matrix(1, 3, {0.5, -4.0, 0.0}));
  adam_step(state, g, 0.01, 0.1, 0.999, 1e-8);
  const auto& w = state.params.get("w");
  CHECK(w[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-7));
  CHECK(w[1] == doctest::Approx(2.0 + 0.01).epsilon(1e-7));
  CHECK(w[2] == 3.0);
  CHECK(state.step == 1);
}

TEST_CASE("zero gradient leaves parameters and decays moments") {
  ParameterSet<double> p;
  p.add("w", ArrayD::matrix(1, 1, {1.0}));
  auto state = make_train_state(p, 0);
  ParameterSet<double> g;
  g.add("w", ArrayD::matrix(1, 1, {2.0}));
  adam_step(state, g, 0.1, 0.9, 0.999, 1e-8);
  const double m1 = state.m.get("w")[0], v1 = state.v.get("w")[0], w1 = state.params.get("w")[0];
  g.get("w")[0] = 0.0;
  state.m.get("w")[0] = 0.0;  // isolate the second moment: no first moment means no update
  adam_step(state, g, 0.1, 0.9, 0.999, 1e-8);
  CHECK(state.params.get("w")[0] == w1);
  CHECK(state.v.get("w")[0] == doctest::Approx(0.999 * v1));
  CHECK(m1 == doctest::Approx(0.2));
}

TEST_CASE("Adam on a 1-D quadratic follows a scalar oracle") {
  // f(x) = (x - 3)^2
  const double lr = 0.05, b1 = 0.1, b2 = 0.999, eps = 1e-8;
  ParameterSet<double> p;
  p.add("x", ArrayD::matrix(1, 1, {0.5}));
  auto state = make_train_state(p, 0);
  double x = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 5; ++t) {
    const double g = 2 * (x - 3);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);

    ParameterSet<double> grad;
    grad.add("x", ArrayD::matrix(1, 1, {2 * (state.params.get("x")[0] - 3)}));
    adam_step(state, grad, lr, b1, b2, eps);
    CHECK(std::abs(state.params.get("x")[0] - x) <= 1e-7);
  }
}

TEST_CASE("Adam names the parameter with a non-finite gradient") {
  ParameterSet<float> p;
  p.add("alpha", ArrayF({2}));
  p.add("beta", ArrayF({2}));
  auto state = make_train_state(p, 0);
  ParameterSet<float> g = p;
  g.get("beta")[1] = std::numeric_limits<float>::infinity();
  try {
    adam_step(state, g, 0.1, 0.9, 0.999, 1e-8);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("beta") != std::string::npos);
  }
  CHECK(state.step == 0);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.base_lr = 3e-4;
  c.warmup_steps = 1000;
  c.total_steps = 5000;
  c.decay = DecaySchedule::none;
  CHECK(lr_schedule(0, c) == 0.0);
  CHECK(lr_schedule(500, c) == doctest::Approx(1.5e-4));
  CHECK(lr_schedule(1000, c) == doctest::Approx(3e-4));
  CHECK(lr_schedule(4999, c) == doctest::Approx(3e-4));
  c.decay = DecaySchedule::cosine;
  CHECK(lr_schedule(1000, c) == doctest::Approx(3e-4));
  CHECK(lr_schedule(3000, c) == doctest::Approx(1.5e-4));
  CHECK(lr_schedule(5000, c) == doctest::Approx(0.0));
  c.decay_steps = 2000;  // constant until the final 2000 steps
  CHECK(lr_schedule(2500, c) == doctest::Approx(3e-4));
  CHECK(lr_schedule(4000, c) == doctest::Approx(1.5e-4));
  double prev = 1;
  for (std::size_t s = 3000; s <= 5000; s += 100) {
    CHECK(lr_schedule(s, c) <= prev);
    prev = lr_schedule(s, c);
  }
}

TEST_CASE("global norm clipping") {
  ParameterSet<double> g;
  g.add("a", ArrayD::matrix(1, 2, {0.3, 0.0}));
  g.add("b", ArrayD::matrix(1, 1, {0.4}));
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(0.5));
  CHECK(g.get("a")[0] == 0.3);
  g.get("a")[0] = 1.2, g.get("b")[0] = 1.6;  // norm 2
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(2.0));
  CHECK(g.get("a")[0] == doctest::Approx(0.6));
  CHECK(g.get("b")[0] == doctest::Approx(0.8));

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    ParameterSet<float> r;
    r.add("x", random_array({5, 7}, rng, 3.0).cast<float>());
    r.add("y", random_array({11}, rng, 3.0).cast<float>());
    clip_global_norm(r, 0.7);
    CHECK(global_norm(r) <= 0.7 + 1e-6);
  }
}

TEST_CASE("copy batches mirror the first half") {
  Rng rng(5);
  const Batch b = gen_copy_batch(3, 10, 4, rng);
  CHECK(b.seq_len == 8);
  for (std::size_t s = 0; s < 4; ++s) {
    const auto seq = b.sequence(s);
    CHECK(seq[0] == copy_bos(10));
    CHECK(seq[7] == copy_eos(10));
    for (std::size_t i = 0; i < 3; ++i) CHECK(seq[4 + i] == seq[3 - i]);
    for (std::size_t t = 1; t < 8; ++t) CHECK(b.is_target(s, t) == (t >= 4));
    // Target at mirrored position j is first-half token k - j.
    for (std::size_t j = 0; j < 3; ++j) CHECK(seq[4 + j] == seq[3 - j]);
  }
  Rng a(9), c(9);
  CHECK(gen_copy_batch(5, 7, 3, a).tokens == gen_copy_batch(5, 7, 3, c).tokens);
}

TEST_CASE("copy targets line up with logit rows through the alignment helper") {
  Rng rng(6);
  const std::size_t k = 5;
  const Batch b = gen_copy_batch(k, 9, 1, rng);
  const auto seq = b.sequence(0);
  const std::size_t m = b.seq_len - 1;  // window of all but the final EOS
  for (std::size_t q = 0; q < m; ++q) {
    const std::size_t t = aligned_target(m, m, q);
    if (t >= k + 1 && t <= 2 * k) CHECK(seq[t] == seq[k - (t - (k + 1))]);
  }
  CHECK(seq[aligned_target(m, m, m - 1)] == copy_eos(9));
}

TEST_CASE("offset-copy batches repeat with the offset period") {
  Rng rng(7);
  const Batch b = gen_offset_copy_batch(3, 4, 6, 2, rng);
  CHECK(b.seq_len == 7);
  for (std::size_t s = 0; s < 2; ++s) {
    const auto seq = b.sequence(s);
    for (std::size_t t = 4; t < 7; ++t) {
      CHECK(seq[t] == seq[t - 4]);
      CHECK(b.is_target(s, t));
    }
    for (std::size_t t = 1; t < 4; ++t) CHECK_FALSE(b.is_target(s, t));
  }
  CHECK_THROWS_AS(gen_offset_copy_batch(5, 4, 6, 1, rng), ConfigError);
}

TEST_CASE("window ends keep every latent row on scored targets") {
  Rng rng(8);
  const Batch b = gen_copy_batch(10, 5, 1, rng);  // targets 11..21
  for (int i = 0; i < 200; ++i) {
    const std::size_t e = sample_window_end(b, 0, 4, rng);
    CHECK(e >= 14);
    CHECK(e <= 21);
  }
  CHECK_THROWS_AS(sample_window_end(b, 0, 22, rng), ConfigError);
}

TEST_CASE("batch gradients match central differences in double") {
  ModelConfig cfg = tiny_model(7, 10, 4);
  cfg.channels = 8;
  cfg.absolute_position_embedding = true;
  const auto params = init_params(cfg, 2, 0.3).cast<double>();
  Rng rng(9);
  const Batch batch = gen_copy_batch(5, 5, 2, rng);
  const std::vector<std::size_t> ends{9, 11};
  const auto grads = batch_gradients<double>(params, cfg, batch, ends, 1e-2, nullptr, nullptr);
  auto value = [&](const ParameterSet<double>& p) {
    LossMetrics m;
    batch_gradients<double>(p, cfg, batch, ends, 1e-2, &m, nullptr);
    return m.loss;
  };
  // Spot-check a few entries of a few arrays.
  for (const char* name : {"embed", "cross.attn.wq", "self.0.mlp.w1", "head.b"}) {
    const auto& g = grads.get(name);
    for (std::size_t i = 0; i < g.size(); i += std::max<std::size_t>(1, g.size() / 7)) {
      auto p = params;
      const double h = 1e-5;
      p.get(name)[i] += h;
      const double up = value(p);
      p.get(name)[i] -= 2 * h;
      const double down = value(p);
      CHECK(g[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-4).scale(1e-6));
    }
  }
}

TEST_CASE("a few training steps reduce the loss and are reproducible") {
  const auto task = tiny_copy();
  const ModelConfig cfg = tiny_model(task.model_vocab(), task.sequence_length(), 4);
  const auto r1 = train(cfg, tiny_train(30), task);
  const auto r2 = train(cfg, tiny_train(30), task);
  REQUIRE(r1.log.size() == 30);
  CHECK(r1.state.params == r2.state.params);
  for (std::size_t i = 0; i < r1.log.size(); ++i) {
    CHECK(r1.log[i].loss == r2.log[i].loss);
    CHECK(r1.log[i].grad_norm == r2.log[i].grad_norm);
  }
  double early = 0, late = 0;
  for (std::size_t i = 0; i < 5; ++i) early += r1.log[i].ce, late += r1.log[25 + i].ce;
  CHECK(late < early);
  CHECK(r1.final_val_accuracy.has_value());
}

TEST_CASE("zero training steps leave the initial parameters") {
  const auto task = tiny_copy();
  const ModelConfig cfg = tiny_model(task.model_vocab(), task.sequence_length(), 4);
  const auto r = train(cfg, tiny_train(0), task);
  CHECK(r.log.empty());
  CHECK(r.state.params == init_params(cfg, 3, 0.02));
  CHECK_FALSE(r.final_val_accuracy.has_value());
}

TEST_CASE("training writes metrics and checkpoints") {
  const auto dir = fresh_dir("train_out");
  const auto task = tiny_copy();
  const ModelConfig cfg = tiny_model(task.model_vocab(), task.sequence_length(), 4);
  TrainConfig t = tiny_train(6);
  t.log_interval = 2;
  t.checkpoint_interval = 3;
  TrainOptions o;
  o.output_dir = dir;
  std::size_t seen = 0;
  o.on_log = [&](const MetricsRecord&) { ++seen; };
  const auto r = train(cfg, t, task, o);
  CHECK(seen == 3);
  CHECK(std::filesystem::exists(dir / "step_3.ckpt"));
  CHECK(std::filesystem::exists(dir / "step_6.ckpt"));
  CHECK(load_checkpoint(dir / "final.ckpt").params == r.state.params);
  std::ifstream in(dir / "metrics.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    CHECK(line.find("\"grad_norm\"") != std::string::npos);
  }
  CHECK(lines == 3);
  std::filesystem::remove_all(dir);
}

TEST_CASE("validation-based early stop") {
  const auto task = tiny_copy(3, 3);
  ModelConfig cfg = tiny_model(task.model_vocab(), task.sequence_length(), 4);
  TrainConfig t = tiny_train(400);
  t.base_lr = 3e-3;
  t.eval_interval = 10;
  t.stop_accuracy = 0.5;
  const auto r = train(cfg, t, task);
  CHECK(r.stopped_early);
  CHECK(r.log.back().val_accuracy.value() >= 0.5);
}

TEST_CASE("training config validation") {
  TrainConfig t = tiny_train(10);
  CHECK_NOTHROW(t.validate());
  t.warmup_steps = 11;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = tiny_train(0);
  t.warmup_steps = 100;
  CHECK_NOTHROW(t.validate());
  t = tiny_train(10);
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  const auto task = tiny_copy(6, 300);
  CHECK_THROWS_AS(train(tiny_model(10, 14, 4), tiny_train(1), task), ConfigError);
}

TEST_CASE("score_batch covers every scored target once") {
  const auto task = tiny_copy(9, 5);
  const ModelConfig cfg = tiny_model(task.model_vocab(), 8, 4);  // M shorter than the sequence
  const auto p = init_params(cfg, 1);
  Rng rng(2);
  const Batch b = generate_batch(task, 3, rng);
  for (std::size_t n : {1, 3, 4, 8}) CHECK(score_batch(p, cfg, b, n).scored == 3 * 10);
}
