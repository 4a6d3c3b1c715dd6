#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "par/checkpoint.hpp"
#include "par/config_io.hpp"

using namespace par;

namespace {

const char* kTrainYaml = R"(
model:
  vocab_size: 258
  max_context: 258
  num_latents: 64
  num_layers: 2
  channels: 128
  cross_heads: 4
  self_heads: 4
  absolute_position_embedding: true
train:
  batch_size: 32
  total_steps: 100
  seed: 5
  warmup_steps: 10
  decay: cosine
  adam_b1: 0.9
task:
  kind: copy
  data_vocab: 256
  k_half: 128
sampler:
  temperature: 0.7
)";

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  REQUIRE(pos != std::string::npos);
  return s.replace(pos, from.size(), to);
}

void check_config_error(const std::string& yaml, const std::string& needle, bool for_training = true) {
  try {
    parse_run_config(yaml, for_training);
    FAIL("expected ConfigError mentioning " << needle);
  } catch (const ConfigError& e) {
    CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
  }
}

}  // namespace

TEST_CASE("run config parses every section") {
  const RunConfig c = parse_run_config(kTrainYaml, true);
  CHECK(c.model.num_latents == 64);
  CHECK(c.model.absolute_position_embedding);
  CHECK(c.train.decay == DecaySchedule::cosine);
  CHECK(c.train.adam_b1 == 0.9);
  CHECK(c.train.adam_b2 == 0.999);
  CHECK(c.task.kind == TaskKind::copy);
  CHECK(c.task.sequence_length() == 258);
  CHECK(c.sampler.temperature == 0.7);
}

TEST_CASE("config errors name the offending field") {
  check_config_error(replace(kTrainYaml, "  num_latents: 64\n", ""), "model.num_latents");
  check_config_error(replace(kTrainYaml, "  channels: 128\n", "  channels: 128\n  chanels: 3\n"), "model.chanels");
  check_config_error(replace(kTrainYaml, "  seed: 5\n", ""), "train.seed");
  check_config_error(replace(kTrainYaml, "decay: cosine", "decay: linear"), "train.decay");
  check_config_error(replace(kTrainYaml, "batch_size: 32", "batch_size: many"), "train.batch_size");
  check_config_error(replace(kTrainYaml, "kind: copy", "kind: sort"), "task.kind");
  check_config_error(std::string(kTrainYaml) + "extra:\n  a: 1\n", "extra");
  check_config_error("model:\n  vocab_size: 4\n  max_context: 8\n  num_latents: 2\n  num_layers: 1\n  channels: 8\n"
                     "  cross_heads: 2\n  self_heads: 2\n",
                     "train", true);
}

TEST_CASE("model-only configs parse without train or task") {
  const std::string y = "model:\n  vocab_size: 4\n  max_context: 8\n  num_latents: 2\n  num_layers: 1\n"
                        "  channels: 8\n  cross_heads: 2\n  self_heads: 2\n";
  CHECK_NOTHROW(parse_run_config(y, false));
  CHECK_THROWS_AS(parse_run_config("model: [1, 2]\n", false), ConfigError);
  CHECK_THROWS_AS(parse_run_config("model: {vocab_size: 4\n", false), ConfigError);
}

TEST_CASE("emitted configs round-trip") {
  const RunConfig c = parse_run_config(kTrainYaml, true);
  const std::string text = emit_run_config(c);
  const RunConfig back = parse_run_config(text, true);
  CHECK(back == c);
  CHECK(emit_run_config(back) == text);
  CHECK(parse_model_config(emit_model_config(c.model)) == c.model);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const RunConfig c = parse_run_config(kTrainYaml, true);
  ModelConfig m = c.model;
  m.channels = 16;
  m.cross_heads = m.self_heads = 2;
  const auto p = init_params(m, 3);
  const auto bytes = serialize_checkpoint(m, p);
  const Checkpoint ck = deserialize_checkpoint(bytes);
  CHECK(ck.config == m);
  CHECK(ck.params == p);
  CHECK(serialize_checkpoint(ck.config, ck.params) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "par_unit_ckpt.bin";
  save_checkpoint(path, m, p);
  CHECK(load_checkpoint(path).params == p);
  std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected") {
  ModelConfig m;
  m.vocab_size = 5;
  m.max_context = 8;
  m.num_latents = 4;
  m.channels = 8;
  m.cross_heads = m.self_heads = 2;
  const auto bytes = serialize_checkpoint(m, init_params(m, 1));
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(deserialize_checkpoint(truncated), Error);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), Error);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize_checkpoint(trailing), Error);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/par.ckpt"), Error);
}

TEST_CASE("manifest lists name, dtype and shape") {
  ModelConfig m;
  m.vocab_size = 5;
  m.max_context = 8;
  m.num_latents = 4;
  m.channels = 8;
  m.cross_heads = m.self_heads = 2;
  const auto lines = manifest(init_params(m, 1));
  REQUIRE_FALSE(lines.empty());
  CHECK(lines.front().find("embed") == 0);
  CHECK(lines.front().find("f32") != std::string::npos);
}
