#pragma once

// Central finite-difference verification of analytic gradients (64-bit).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "tamperlab/tensor.hpp"

namespace tamperlab {

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t coordinates = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

/// `build` records a graph on a fresh tape and returns a scalar. Every tensor in
/// `inputs` is perturbed coordinate by coordinate; `max_coords` > 0 limits the
/// number of checked coordinates per tensor (picked with a fixed-seed shuffle).
template <typename Build>
GradCheckReport finite_difference_report(Build&& build, const std::vector<TensorPtr<double>>& inputs,
                                         double epsilon = 1e-3, std::size_t max_coords = 0) {
  for (const auto& t : inputs) {
    t->set_requires_grad(true);
    t->zero_grad();
  }
  {
    BasicTape<double> tape;
    auto loss = build(tape);
    backward_pass(tape, loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) analytic.emplace_back(t->grad().begin(), t->grad().end());

  auto eval = [&]() {
    BasicTape<double> tape;
    return build(tape)->item();
  };

  GradCheckReport rep;
  std::mt19937_64 rng(0x5eed);
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = *inputs[ti];
    std::vector<std::size_t> coords(t.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords > 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double orig = t[i];
      t[i] = orig + epsilon;
      const double up = eval();
      t[i] = orig - epsilon;
      const double down = eval();
      t[i] = orig;
      const double numeric = (up - down) / (2 * epsilon);
      const double a = analytic[ti][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++rep.coordinates;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_input = ti;
        rep.worst_index = i;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  for (const auto& t : inputs) t->clear_grad();
  return rep;
}

/// Max over coordinates of |a - n| / max(|a|, |n|, 1e-8).
template <typename Build>
double finite_difference_check(Build&& build, const std::vector<TensorPtr<double>>& inputs,
                               double epsilon = 1e-3, std::size_t max_coords = 0) {
  return finite_difference_report(std::forward<Build>(build), inputs, epsilon, max_coords)
      .max_rel_error;
}

}  // namespace tamperlab
