#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "par/model.hpp"
#include "par/training.hpp"

namespace par {

struct BenchPoint {
  Architecture arch = Architecture::perceiver_ar;
  std::size_t m = 0, n = 0, layers = 0, channels = 0, heads = 0;
  double seconds_per_step = 0;  // median over trials
  double flop_estimate = 0;     // count_attention_flops(...).total()
  // Largest transient attention map (elements) one training step allocates.
  std::size_t peak_attention_elements = 0;
  bool feasible = true;
  std::string note;  // why a point was skipped
  std::vector<double> trial_seconds;
};

struct BenchOptions {
  std::size_t trials = 5;
  std::size_t warmup = 2;
  std::size_t batch = 1;
  double max_step_seconds = 0;  // > 0: skip the point if a warmup step is slower
  std::size_t max_attention_elements = 0;  // > 0: skip points whose maps would be larger
};

// Times full training steps (forward, backward, clipping, Adam) on random
// batches of m + 1 tokens. The model config's max_context is set to m.
BenchPoint bench_step_time(const ModelConfig& cfg, const TrainConfig& tcfg, Architecture arch, std::size_t m,
                           const BenchOptions& opts = {});

struct BenchGrid {
  ModelConfig base;  // N, L, C and heads come from here
  TrainConfig train;
  std::vector<Architecture> archs{Architecture::perceiver_ar, Architecture::decoder_only};
  std::vector<std::size_t> contexts;
  BenchOptions options;
};

// Points in (arch, M) order; infeasible points are kept and flagged.
std::vector<BenchPoint> bench_sweep(const BenchGrid& grid);

// Tab-separated table with header
// arch M N L seconds_per_step flop_estimate.
std::string bench_table(const std::vector<BenchPoint>& points);

// One block per architecture: "# arch" then "M seconds_per_step" lines.
std::string bench_plot_series(const std::vector<BenchPoint>& points);

}  // namespace par
