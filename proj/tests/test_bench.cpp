#include "doctest.h"

#include <sstream>

#include "par/bench.hpp"

using namespace par;

namespace {

BenchGrid tiny_grid() {
  BenchGrid g;
  g.base.vocab_size = 16;
  g.base.num_latents = 8;
  g.base.num_layers = 1;
  g.base.channels = 16;
  g.base.cross_heads = 2;
  g.base.self_heads = 2;
  g.base.max_context = 8;
  g.train.batch_size = 1;
  g.train.total_steps = 1;
  g.train.warmup_steps = 0;
  g.contexts = {16, 32};
  return g;
}

}  // namespace

TEST_CASE("sweep returns one point per architecture and context") {
  const BenchGrid g = tiny_grid();
  const auto points = bench_sweep(g);
  REQUIRE(points.size() == 4);
  for (const auto& p : points) {
    CHECK(p.feasible);
    CHECK(p.trial_seconds.size() == 5);
    CHECK(p.seconds_per_step > 0);
    ModelConfig c = g.base;
    c.max_context = p.m;
    CHECK(p.flop_estimate == count_attention_flops(c, p.m, p.arch).total());
  }
  CHECK(points[0].arch == Architecture::perceiver_ar);
  CHECK(points[0].n == 8);
  CHECK(points[3].arch == Architecture::decoder_only);
  CHECK(points[3].n == 32);
}

TEST_CASE("table has the documented header and one row per point") {
  const auto points = bench_sweep(tiny_grid());
  const std::string table = bench_table(points);
  std::istringstream in(table);
  std::string line;
  std::getline(in, line);
  CHECK(line == "arch\tM\tN\tL\tseconds_per_step\tflop_estimate");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 4);
  const std::string series = bench_plot_series(points);
  CHECK(series.find("# perceiver_ar\n16 ") != std::string::npos);
  CHECK(series.find("# decoder_only\n") != std::string::npos);
}

TEST_CASE("infeasible points are flagged, not fatal") {
  BenchGrid g = tiny_grid();
  g.options.max_attention_elements = 2 * 8 * 32;  // perceiver at M=32 fits; decoder-only does not
  const auto points = bench_sweep(g);
  REQUIRE(points.size() == 4);
  CHECK(points[1].feasible);
  CHECK_FALSE(points[3].feasible);
  CHECK_FALSE(points[3].note.empty());
  CHECK(bench_table(points).find("decoder_only\t32\t32\t1\tnan\t") != std::string::npos);
}

TEST_CASE("decoder-only flops grow faster with context") {
  ModelConfig c = tiny_grid().base;
  double prev_pa = 0, prev_dec = 0;
  for (std::size_t m : {64, 128, 256, 512}) {
    const double pa = count_attention_flops(c, m).total(), dec = count_attention_flops(c, m, Architecture::decoder_only).total();
    CHECK(pa > prev_pa);
    CHECK(dec > prev_dec);
    if (prev_pa > 0) CHECK(dec / prev_dec > pa / prev_pa);
    prev_pa = pa, prev_dec = dec;
  }
}

TEST_CASE("bench refuses too few trials") {
  BenchGrid g = tiny_grid();
  g.options.trials = 2;
  CHECK_THROWS_AS(bench_sweep(g), ConfigError);
  g = tiny_grid();
  g.contexts.clear();
  CHECK_THROWS_AS(bench_sweep(g), ConfigError);
}
