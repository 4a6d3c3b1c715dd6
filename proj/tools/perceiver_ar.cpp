// Command-line front end: train / eval / sample / bench / selftest.
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "par/bench.hpp"
#include "par/checkpoint.hpp"
#include "par/config_io.hpp"
#include "par/inference.hpp"
#include "par/selftest.hpp"
#include "par/training.hpp"

namespace fs = std::filesystem;
using namespace par;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr const char* kOutputDirEnv = "PERCEIVER_AR_OUTPUT_DIR";

// Usage problems exit 1, runtime failures exit 2.
struct UsageError : Error {
  using Error::Error;
};

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot read " + p.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

// bytes: one token per byte. u32: little-endian 32-bit ids. text: whitespace
// separated decimal ids.
std::vector<int> read_tokens(const fs::path& p, const std::string& format, std::size_t vocab) {
  std::vector<int> out;
  if (format == "bytes") {
    if (vocab < 256) {
      throw UsageError("byte mode needs a vocabulary of at least 256, checkpoint has " + std::to_string(vocab));
    }
    for (std::uint8_t b : read_file(p)) out.push_back(b);
    return out;
  }
  if (format == "u32") {
    const auto bytes = read_file(p);
    if (bytes.size() % 4 != 0) throw UsageError("u32 corpus length is not a multiple of 4 bytes");
    for (std::size_t i = 0; i < bytes.size(); i += 4) {
      const std::uint32_t v = bytes[i] | bytes[i + 1] << 8 | bytes[i + 2] << 16 | static_cast<std::uint32_t>(bytes[i + 3]) << 24;
      out.push_back(static_cast<int>(v));
    }
  } else if (format == "text") {
    std::ifstream in(p);
    if (!in) throw UsageError("cannot read " + p.string());
    long long v;
    while (in >> v) out.push_back(static_cast<int>(v));
    if (!in.eof()) throw UsageError("non-numeric token in " + p.string());
  } else {
    throw UsageError("unknown token format '" + format + "' (bytes, u32 or text)");
  }
  for (int t : out) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw UsageError("token id " + std::to_string(t) + " outside the checkpoint vocabulary of " +
                       std::to_string(vocab));
    }
  }
  return out;
}

int cmd_train(const std::string& config_path, std::string output_dir, bool quiet) {
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) output_dir = env;
  if (output_dir.empty()) throw UsageError("train needs --output-dir (or " + std::string(kOutputDirEnv) + ")");
  const RunConfig cfg = load_run_config(config_path, true);
  cfg.model.validate();
  cfg.train.validate();
  cfg.task.validate();
  const fs::path out(output_dir);
  fs::create_directories(out);
  {
    std::ofstream m(out / "manifest.yaml");
    m << emit_run_config(cfg);
    m << "run:\n  version: \"" << kVersion << "\"\n  seed: " << cfg.train.seed << "\n  start_time: \"" << utc_now()
      << "\"\n  output_dir: \"" << fs::absolute(out).string() << "\"\n";
    if (!m) throw Error("cannot write manifest in " + out.string());
  }
  TrainOptions opts;
  opts.output_dir = out;
  opts.quiet = quiet;
  if (!quiet) opts.on_log = [](const MetricsRecord& r) { std::cout << to_json_line(r) << std::endl; };
  const TrainResult r = train(cfg.model, cfg.train, cfg.task, opts);
  if (r.final_val_accuracy) {
    nlohmann::json j = {{"held_out_accuracy", *r.final_val_accuracy},
                        {"steps", r.state.step},
                        {"stopped_early", r.stopped_early}};
    std::cout << j.dump() << std::endl;
  }
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& corpus_path, const std::string& format, std::size_t stride,
             std::size_t eval_latents, bool windows) {
  const Checkpoint c = load_checkpoint(ckpt);
  const std::vector<int> corpus = read_tokens(corpus_path, format, c.config.vocab_size);
  const std::size_t n = eval_latents ? eval_latents : c.config.num_latents;
  const EvalSummary s = strided_eval(c.params, c.config, corpus, stride ? stride : std::max<std::size_t>(1, n / 2), n);
  if (windows) {
    for (const auto& w : s.windows) {
      std::cout << nlohmann::json{{"window_end", w.window_end}, {"targets", w.targets}, {"nll", w.nll}}.dump() << '\n';
    }
  }
  nlohmann::json j = {{"tokens_scored", s.tokens_scored}, {"total_nll", s.total_nll}, {"mean_nll", s.mean_nll},
                      {"bits_per_token", s.bits_per_token}, {"perplexity", s.perplexity},
                      {"eval_latents", n},      {"windows", s.windows.size()}};
  std::cout << j.dump() << std::endl;
  return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& prompt_path, const std::string& format,
               SamplerConfig sampler, bool no_cache, std::size_t n_train) {
  const Checkpoint c = load_checkpoint(ckpt);
  const std::vector<int> prompt = read_tokens(prompt_path, format, c.config.vocab_size);
  const std::size_t n = sampler.eval_latents ? sampler.eval_latents : c.config.num_latents;
  if (prompt.size() < n) {
    throw UsageError("prompt has " + std::to_string(prompt.size()) + " tokens but sampling uses " + std::to_string(n) +
                     " latents; supply a longer prompt or lower --eval-latents");
  }
  sampler.validate();
  SampleOptions so;
  so.on_token = [](int t) { std::cout << t << '\n' << std::flush; };
  for (int t : prompt) std::cout << t << '\n';
  if (no_cache && n_train) {
    // same latent membership as the cache would have, recomputed each step
    sample_uncached_with_resets(c.params, c.config, prompt, sampler, n_train, so);
  } else if (no_cache) {
    sample_uncached(c.params, c.config, prompt, sampler, so);
  } else {
    sample_cached(c.params, c.config, prompt, sampler, so, n_train ? n_train : n);
  }
  return 0;
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
  if (out.empty()) throw UsageError("empty list '" + s + "'");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Perceiver AR: train, evaluate, sample and benchmark"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string config, output_dir;
  bool quiet = false;
  auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
  train_cmd->add_option("--config,-c", config, "YAML run config")->required();
  train_cmd->add_option("--output-dir,-o", output_dir, std::string("output directory (env ") + kOutputDirEnv + " overrides)");
  train_cmd->add_flag("--quiet,-q", quiet, "do not print metrics records");

  std::string ckpt, corpus, format = "bytes";
  std::size_t stride = 0, eval_latents = 0;
  bool windows = false;
  auto* eval_cmd = app.add_subcommand("eval", "strided evaluation of a checkpoint on a token corpus");
  eval_cmd->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--corpus", corpus, "corpus file")->required();
  eval_cmd->add_option("--format", format, "bytes | u32 | text")->capture_default_str();
  eval_cmd->add_option("--stride", stride, "window stride (default eval_latents/2)");
  eval_cmd->add_option("--eval-latents", eval_latents, "latents at test time (default: trained N)");
  eval_cmd->add_flag("--windows", windows, "print one record per window");

  std::string prompt;
  SamplerConfig sampler;
  bool no_cache = false;
  std::size_t n_train = 0;
  std::string prompt_format = "text";
  auto* sample_cmd = app.add_subcommand("sample", "generate tokens from a prompt");
  sample_cmd->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  sample_cmd->add_option("--prompt", prompt, "prompt file")->required();
  sample_cmd->add_option("--format", prompt_format, "bytes | u32 | text")->capture_default_str();
  sample_cmd->add_option("--temperature", sampler.temperature, "softmax temperature")->capture_default_str();
  sample_cmd->add_option("--max-new-tokens", sampler.max_new_tokens, "tokens to generate")->capture_default_str();
  sample_cmd->add_option("--seed", sampler.seed, "sampling seed")->capture_default_str();
  sample_cmd->add_option("--eval-latents", sampler.eval_latents, "latents (default: trained N)");
  sample_cmd->add_option("--cache-latents", n_train, "latent cache capacity (default: eval latents); with --no-cache, replay its reset schedule");
  sample_cmd->add_flag("--greedy", sampler.greedy, "argmax decoding");
  sample_cmd->add_flag("--no-cache", no_cache, "recompute every step without the activation cache");

  BenchGrid grid;
  std::string contexts = "1024,4096", archs = "perceiver_ar,decoder_only", bench_out;
  std::size_t latents = 64, layers = 4, channels = 64, heads = 4, vocab = 256;
  auto* bench_cmd = app.add_subcommand("bench", "training step time across context lengths");
  bench_cmd->add_option("--contexts", contexts, "comma-separated M values")->capture_default_str();
  bench_cmd->add_option("--archs", archs, "perceiver_ar,decoder_only")->capture_default_str();
  bench_cmd->add_option("--latents", latents)->capture_default_str();
  bench_cmd->add_option("--layers", layers)->capture_default_str();
  bench_cmd->add_option("--channels", channels)->capture_default_str();
  bench_cmd->add_option("--heads", heads)->capture_default_str();
  bench_cmd->add_option("--vocab", vocab)->capture_default_str();
  bench_cmd->add_option("--trials", grid.options.trials)->capture_default_str();
  bench_cmd->add_option("--warmup", grid.options.warmup)->capture_default_str();
  bench_cmd->add_option("--batch", grid.options.batch)->capture_default_str();
  bench_cmd->add_option("--max-step-seconds", grid.options.max_step_seconds, "skip slower points (0 = never)");
  bench_cmd->add_option("--out", bench_out, "directory for bench.tsv and bench_series.txt");

  bool corrupt = false;
  auto* selftest_cmd = app.add_subcommand("selftest", "fast invariant suite");
  selftest_cmd->add_flag("--corrupt-cross-mask", corrupt, "negative control: leak one future key");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) return cmd_train(config, output_dir, quiet);
    if (*eval_cmd) return cmd_eval(ckpt, corpus, format, stride, eval_latents, windows);
    if (*sample_cmd) return cmd_sample(ckpt, prompt, prompt_format, sampler, no_cache, n_train);
    if (*bench_cmd) {
      grid.base.vocab_size = vocab;
      grid.base.num_latents = latents;
      grid.base.num_layers = layers;
      grid.base.channels = channels;
      grid.base.cross_heads = grid.base.self_heads = heads;
      grid.base.max_context = latents;
      grid.train.batch_size = grid.options.batch;
      grid.contexts = parse_list(contexts);
      grid.archs.clear();
      std::stringstream ss(archs);
      std::string a;
      while (std::getline(ss, a, ',')) grid.archs.push_back(architecture_from_string(a));
      const auto points = bench_sweep(grid);
      const std::string table = bench_table(points);
      std::cout << table;
      for (const auto& p : points) {
        if (!p.feasible) std::cerr << "skipped " << to_string(p.arch) << " M=" << p.m << ": " << p.note << '\n';
      }
      if (!bench_out.empty()) {
        fs::create_directories(bench_out);
        std::ofstream(fs::path(bench_out) / "bench.tsv") << table;
        std::ofstream(fs::path(bench_out) / "bench_series.txt") << bench_plot_series(points);
      }
      return 0;
    }
    if (*selftest_cmd) {
      SelftestOptions o;
      o.corrupt_cross_mask = corrupt;
      const SelftestReport rep = run_selftest(o);
      std::cout << rep.format();
      return rep.passed() ? 0 : 2;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
