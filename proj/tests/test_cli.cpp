#include "doctest.h"

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "par/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(PAR_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path work_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("par_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string model_yaml(std::size_t vocab, std::size_t m, std::size_t n) {
  std::ostringstream os;
  os << "model:\n  vocab_size: " << vocab << "\n  max_context: " << m << "\n  num_latents: " << n
     << "\n  num_layers: 1\n  channels: 16\n  cross_heads: 2\n  self_heads: 2\n";
  return os.str();
}

const std::string kTrainSection =
    "train:\n  batch_size: 2\n  total_steps: 0\n  seed: 1\n  warmup_steps: 0\n"
    "task:\n  kind: copy\n  data_vocab: 254\n  k_half: 8\n";

// Zero-step run: writes the initial parameters as final.ckpt.
fs::path make_checkpoint(const fs::path& dir, std::size_t vocab = 256, std::size_t m = 32, std::size_t n = 8) {
  write(dir / "cfg.yaml", model_yaml(vocab, m, n) + kTrainSection);
  const Run r = run("train -q -c " + (dir / "cfg.yaml").string() + " -o " + (dir / "run").string());
  REQUIRE_MESSAGE(r.code == 0, r.out);
  return dir / "run" / "final.ckpt";
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string l;
  while (std::getline(in, l)) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("selftest passes and its negative control fails") {
  const Run ok = run("selftest");
  CHECK_MESSAGE(ok.code == 0, ok.out);
  CHECK(ok.out.find("FAIL") == std::string::npos);
  const Run bad = run("selftest --corrupt-cross-mask");
  CHECK(bad.code != 0);
  CHECK(bad.out.find("FAIL future tokens") != std::string::npos);
}

TEST_CASE("usage errors exit 1") {
  CHECK(run("").code == 1);
  CHECK(run("frobnicate").code == 1);
  CHECK(run("train").code == 1);
  CHECK(run("--version").out.find("0.1.0") != std::string::npos);
}

TEST_CASE("a missing required field is reported by name") {
  const auto d = work_dir("missing");
  std::string y = model_yaml(256, 32, 8) + kTrainSection;
  y.erase(y.find("  num_latents: 8\n"), std::string("  num_latents: 8\n").size());
  write(d / "cfg.yaml", y);
  const Run r = run("train -c " + (d / "cfg.yaml").string() + " -o " + (d / "run").string());
  CHECK(r.code == 1);
  CHECK(r.out.find("num_latents") != std::string::npos);
}

TEST_CASE("zero-step training writes a manifest and an empty metrics log") {
  const auto d = work_dir("zero");
  const auto ckpt = make_checkpoint(d);
  CHECK(fs::exists(ckpt));
  CHECK(fs::file_size(d / "run" / "metrics.jsonl") == 0);
  std::ifstream m(d / "run" / "manifest.yaml");
  std::stringstream ss;
  ss << m.rdbuf();
  CHECK(ss.str().find("num_latents: 8") != std::string::npos);
  CHECK(ss.str().find("start_time") != std::string::npos);
  // The manifest is itself a valid config.
  write(d / "again.yaml", ss.str());
  CHECK(run("train -q -c " + (d / "again.yaml").string() + " -o " + (d / "run2").string()).code == 0);
  std::ifstream m2(d / "run2" / "manifest.yaml");
  std::stringstream ss2;
  ss2 << m2.rdbuf();
  auto strip = [](const std::string& s) { return s.substr(0, s.find("run:")); };
  CHECK(strip(ss2.str()) == strip(ss.str()));
}

TEST_CASE("the output directory can come from the environment") {
  const auto d = work_dir("env");
  write(d / "cfg.yaml", model_yaml(256, 32, 8) + kTrainSection);
  const std::string cmd = "env PERCEIVER_AR_OUTPUT_DIR=" + (d / "fromenv").string() + " " + PAR_CLI_PATH +
                          " train -q -c " + (d / "cfg.yaml").string() + " > /dev/null 2>&1";
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(d / "fromenv" / "final.ckpt"));
}

TEST_CASE("evaluating an untrained byte model costs about eight bits per byte") {
  const auto d = work_dir("eval");
  const auto ckpt = make_checkpoint(d);
  std::mt19937_64 rng(1);
  std::string bytes(100, '\0');
  for (auto& c : bytes) c = static_cast<char>(rng() & 0xff);
  write(d / "corpus.bin", bytes);
  const Run r = run("eval --checkpoint " + ckpt.string() + " --corpus " + (d / "corpus.bin").string());
  REQUIRE_MESSAGE(r.code == 0, r.out);
  const auto j = nlohmann::json::parse(lines(r.out).back());
  CHECK(std::abs(j["bits_per_token"].get<double>() - 8.0) <= 0.5);
  CHECK(j["tokens_scored"].get<std::size_t>() == 8 + (99 - 32));

  const Run w = run("eval --windows --stride 8 --checkpoint " + ckpt.string() + " --corpus " + (d / "corpus.bin").string());
  CHECK(lines(w.out).size() > 2);
}

TEST_CASE("eval rejects byte mode for small vocabularies") {
  const auto d = work_dir("eval_small");
  write(d / "cfg.yaml", model_yaml(20, 16, 4) +
                            "train:\n  batch_size: 2\n  total_steps: 0\n  seed: 1\n  warmup_steps: 0\n"
                            "task:\n  kind: copy\n  data_vocab: 10\n  k_half: 4\n");
  REQUIRE(run("train -q -c " + (d / "cfg.yaml").string() + " -o " + (d / "run").string()).code == 0);
  write(d / "corpus.bin", "abcdefghijklmnop");
  const Run r = run("eval --checkpoint " + (d / "run" / "final.ckpt").string() + " --corpus " + (d / "corpus.bin").string());
  CHECK(r.code == 1);
  CHECK(r.out.find("256") != std::string::npos);
}

TEST_CASE("sampling zero tokens echoes the prompt") {
  const auto d = work_dir("sample0");
  const auto ckpt = make_checkpoint(d);
  write(d / "prompt.txt", "1 2 3 4 5 6 7 8 9 10\n");
  const Run r = run("sample --checkpoint " + ckpt.string() + " --prompt " + (d / "prompt.txt").string() +
                    " --max-new-tokens 0");
  REQUIRE_MESSAGE(r.code == 0, r.out);
  CHECK(lines(r.out) == std::vector<std::string>{"1", "2", "3", "4", "5", "6", "7", "8", "9", "10"});
}

TEST_CASE("greedy sampling is the same with and without the cache under matching resets") {
  const auto d = work_dir("greedy");
  const auto ckpt = make_checkpoint(d);
  write(d / "prompt.txt", "5 9 13 200 7 7 1 0 44 3\n");
  const std::string base = "sample --greedy --max-new-tokens 12 --checkpoint " + ckpt.string() + " --prompt " +
                           (d / "prompt.txt").string();
  const Run cached = run(base + " --cache-latents 16");
  const Run plain = run(base + " --no-cache --cache-latents 16");
  REQUIRE(cached.code == 0);
  CHECK(cached.out == plain.out);
  CHECK(lines(cached.out).size() == 22);
}

TEST_CASE("sampling rejects prompts shorter than the latent count") {
  const auto d = work_dir("short_prompt");
  const auto ckpt = make_checkpoint(d);
  write(d / "prompt.txt", "1 2\n");
  const Run r = run("sample --checkpoint " + ckpt.string() + " --prompt " + (d / "prompt.txt").string());
  CHECK(r.code == 1);
  CHECK(r.out.find("latents") != std::string::npos);
}

TEST_CASE("bench writes a table") {
  const auto d = work_dir("bench");
  const Run r = run("bench --contexts 16,32 --latents 8 --layers 1 --channels 16 --heads 2 --vocab 16 --out " +
                    d.string());
  REQUIRE_MESSAGE(r.code == 0, r.out);
  std::ifstream t(d / "bench.tsv");
  std::string header;
  std::getline(t, header);
  CHECK(header == "arch\tM\tN\tL\tseconds_per_step\tflop_estimate");
  CHECK(fs::exists(d / "bench_series.txt"));
}

TEST_CASE("two identical training runs give identical checkpoints") {
  const auto d = work_dir("determinism");
  write(d / "cfg.yaml", model_yaml(20, 16, 4) +
                            "train:\n  batch_size: 2\n  total_steps: 5\n  seed: 9\n  warmup_steps: 2\n"
                            "task:\n  kind: copy\n  data_vocab: 18\n  k_half: 7\n");
  REQUIRE(run("train -q -c " + (d / "cfg.yaml").string() + " -o " + (d / "a").string()).code == 0);
  REQUIRE(run("train -q -c " + (d / "cfg.yaml").string() + " -o " + (d / "b").string()).code == 0);
  std::ifstream a(d / "a" / "final.ckpt", std::ios::binary), b(d / "b" / "final.ckpt", std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());
  CHECK_FALSE(sa.str().empty());
}
