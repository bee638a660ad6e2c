#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "hiddentask/autodiff.hpp"
#include "hiddentask/model.hpp"
#include "hiddentask/tensor.hpp"

namespace hiddentask::testing {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

/// Scalar built on a fresh tape from one leaf.
using ScalarGraph = std::function<Var(Tape&, Var)>;

inline Tensor tape_gradient(const ScalarGraph& g, const Tensor& x) {
  Tape tape;
  Var leaf = tape.leaf(x);
  return tape.backward(g(tape, leaf))[leaf];
}

inline double tape_value(const ScalarGraph& g, const Tensor& x) {
  Tape tape;
  return g(tape, tape.constant(x)).value().item();
}

inline double norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

/// ||a - b|| / max(||a||, ||b||, floor).
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  Tensor d(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return norm(d) / std::max({norm(a), norm(b), floor});
}

inline double gradient_error(const ScalarGraph& g, const Tensor& x, double h = 1e-5) {
  const Tensor analytic = tape_gradient(g, x);
  const Tensor numeric = finite_diff_gradient([&](const Tensor& p) { return tape_value(g, p); }, x, h);
  return relative_error(analytic, numeric);
}

inline MultiTaskModel small_model(std::uint64_t seed, std::size_t input_dim = 6,
                                  std::vector<std::size_t> widths = {5, 4}, HeadKind head = HeadKind::linear) {
  BackboneConfig b;
  b.input_dim = input_dim;
  b.widths = std::move(widths);
  b.input_shift = 127.5;
  b.input_scale = 1.0 / 64.0;
  return MultiTaskModel::create(b, HeadConfig{head, 3}, {{"A", 2, 1.0}, {"B", 3, 0.5}, {"C", 2, 2.0}}, seed);
}

inline Tensor random_pixels(std::mt19937_64& rng, std::size_t n, std::size_t d) {
  return random_tensor(rng, {n, d}, 20.0, 235.0);
}

}  // namespace hiddentask::testing
