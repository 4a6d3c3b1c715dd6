#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "par/model.hpp"

namespace par {

// Finite-difference check of d(loss)/d(params) for the mean CE + z-loss
// over every latent row of one window.
struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst_param;
  std::map<std::string, double> per_param;  // max |analytic - numeric| / max |numeric|
};

GradCheckResult gradient_check(const ModelConfig& cfg, const ParameterSet<double>& params, std::span<const int> tokens,
                               std::size_t latents, double z_loss_coeff, double step = 1e-4,
                               std::size_t max_entries_per_param = 0);

struct SelftestCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelftestReport {
  std::vector<SelftestCheck> checks;
  bool passed() const;
  // One "PASS name: detail" / "FAIL name: detail" line per check.
  std::string format() const;
};

struct SelftestOptions {
  bool corrupt_cross_mask = false;  // negative control
  std::uint64_t seed = 7;
};

SelftestReport run_selftest(const SelftestOptions& opts = {});

}  // namespace par
