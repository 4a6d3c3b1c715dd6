#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "par/array.hpp"
#include "par/ops.hpp"
#include "par/tape.hpp"

namespace par::testing {

inline ArrayD random_array(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  ArrayD a(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : a.storage()) v = d(rng);
  return a;
}

// Builds a scalar loss from tape leaves.
using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Max over inputs of max|analytic - numeric| / max(max|numeric|, 1e-8),
// central differences in double.
inline double grad_rel_error(const std::vector<ArrayD>& inputs, const ScalarFn& f, double h = 1e-4) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& a : inputs) leaves.push_back(tape.leaf(a));
  Var<double> out = f(tape, leaves);
  tape.backward(out);

  auto eval = [&](const std::vector<ArrayD>& xs) {
    Tape<double> t(false);
    std::vector<Var<double>> ls;
    for (const auto& a : xs) ls.push_back(t.leaf(a));
    return f(t, ls).value().item();
  };

  double worst = 0;
  std::vector<ArrayD> xs = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const ArrayD analytic = tape.grad(leaves[i]);
    double max_err = 0, max_num = 0;
    for (std::size_t j = 0; j < xs[i].size(); ++j) {
      const double orig = xs[i][j];
      xs[i][j] = orig + h;
      const double up = eval(xs);
      xs[i][j] = orig - h;
      const double down = eval(xs);
      xs[i][j] = orig;
      const double num = (up - down) / (2 * h);
      max_err = std::max(max_err, std::abs(num - analytic[j]));
      max_num = std::max(max_num, std::abs(num));
    }
    worst = std::max(worst, max_err / std::max(max_num, 1e-8));
  }
  return worst;
}

// sum(x * w) with a fixed random w, so every output element matters.
inline Var<double> weighted_sum(const Var<double>& x, unsigned seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul_const(x, random_array(x.shape(), rng)));
}

}  // namespace par::testing
