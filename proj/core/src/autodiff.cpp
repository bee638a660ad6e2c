#include "hiddentask/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hiddentask/errors.hpp"

namespace hiddentask {

const Tensor& Var::value() const { return tape_->value(id_); }

Tensor Gradients::operator[](Var v) const {
  if (v.id() >= grads_.size()) throw ContractError("variable not recorded on this tape");
  if (grads_[v.id()].empty()) return Tensor(shapes_[v.id()]);
  return grads_[v.id()];
}

bool Gradients::reached(Var v) const { return v.id() < grads_.size() && !grads_[v.id()].empty(); }

void Tape::check_owner(Var v) const {
  if (&v.tape() != this || v.id() >= nodes_.size()) {
    throw ContractError("variable belongs to a different tape");
  }
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (consumed_) throw ContractError("tape already consumed by backward()");
  nodes_.push_back(Node{std::move(value), {}, nullptr, requires_grad});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (consumed_) throw ContractError("tape already consumed by backward()");
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    check_owner(v);
    node.inputs.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var output) {
  check_owner(output);
  if (consumed_) throw ContractError("tape already consumed by backward()");
  if (output.value().size() != 1) {
    throw ContractError("backward() needs a single-element output, got shape " +
                        shape_to_string(output.shape()));
  }
  consumed_ = true;

  Gradients result;
  result.grads_.resize(nodes_.size());
  result.shapes_.reserve(nodes_.size());
  for (const auto& n : nodes_) result.shapes_.push_back(n.value.shape());
  if (!nodes_[output.id()].requires_grad) return result;

  result.grads_[output.id()] = Tensor(output.shape(), 1.0);
  std::vector<Tensor*> slots;
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || result.grads_[id].empty()) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (!nodes_[in].requires_grad) continue;
      if (result.grads_[in].empty()) result.grads_[in] = Tensor(nodes_[in].value.shape());
      slots[k] = &result.grads_[in];
    }
    node.backward(result.grads_[id], slots);
  }
  return result;
}

namespace ops {
namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_to_string(a.shape()));
  }
}

template <typename F>
Var unary(Var a, F&& f, std::function<double(double x, double y)> dfdx) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return a.tape().record(std::move(out), {a},
                         [a, dfdx = std::move(dfdx)](const Tensor& g, std::span<Tensor* const> in) {
                           const Tensor& x = a.value();
                           for (std::size_t i = 0; i < x.size(); ++i) (*in[0])[i] += dfdx(x[i], g[i]);
                         });
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record(std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> in) {
    for (Tensor* slot : in) {
      if (!slot) continue;
      for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().record(std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> in) {
    if (in[0]) for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
    if (in[1]) for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](const Tensor& g, std::span<Tensor* const> in) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (in[0]) for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * bv[i];
    if (in[1]) for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] += g[i] * av[i];
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  return a.tape().record(std::move(out), {a}, [factor](const Tensor& g, std::span<Tensor* const> in) {
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += factor * g[i];
  });
}

Var add_scalar(Var a, double offset) {
  Tensor out = a.value();
  for (double& v : out.values()) v += offset;
  return a.tape().record(std::move(out), {a}, [](const Tensor& g, std::span<Tensor* const> in) {
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
  });
}

Var add_row_vector(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank("add_row_vector", av, 2);
  require_rank("add_row_vector", bv, 1);
  const std::size_t n = av.dim(0), m = av.dim(1);
  if (bv.dim(0) != m) {
    throw DimensionError("add_row_vector: shape mismatch " + shape_to_string(av.shape()) + " vs " +
                         shape_to_string(bv.shape()));
  }
  Tensor out = av;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += bv[c];
  return a.tape().record(std::move(out), {a, b}, [n, m](const Tensor& g, std::span<Tensor* const> in) {
    if (in[0]) for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
    if (in[1]) {
      Tensor& gb = *in[1];
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gb[c] += g[r * m + c];
    }
  });
}

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank("matmul", av, 2);
  require_rank("matmul", bv, 2);
  const std::size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul: shape mismatch " + shape_to_string(av.shape()) + " vs " +
                         shape_to_string(bv.shape()));
  }
  Tensor out({n, m});
  const double* A = av.data();
  const double* B = bv.data();
  double* C = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = C + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, n, k, m](const Tensor& g, std::span<Tensor* const> in) {
    const double* G = g.data();
    if (in[0]) {
      const double* B = b.value().data();
      double* dA = in[0]->data();
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = G + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = B + p * m;
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
          dA[i * k + p] += acc;
        }
      }
    }
    if (in[1]) {
      const double* A = a.value().data();
      double* dB = in[1]->data();
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = G + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          double* dbrow = dB + p * m;
          for (std::size_t j = 0; j < m; ++j) dbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

Var conv2d(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_rank("conv2d", xv, 4);
  require_rank("conv2d", wv, 4);
  require_rank("conv2d", bv, 1);
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const std::size_t o = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != c || bv.dim(0) != o || kh != kw || kh % 2 == 0) {
    throw DimensionError("conv2d: shape mismatch " + shape_to_string(xv.shape()) + " vs " +
                         shape_to_string(wv.shape()) + " / " + shape_to_string(bv.shape()));
  }
  const auto pad = static_cast<std::ptrdiff_t>(kh / 2);
  const auto H = static_cast<std::ptrdiff_t>(h);
  const auto W = static_cast<std::ptrdiff_t>(wd);
  auto xi = [=](std::size_t s, std::size_t ch, std::ptrdiff_t i, std::ptrdiff_t j) {
    return ((s * c + ch) * h + static_cast<std::size_t>(i)) * wd + static_cast<std::size_t>(j);
  };
  auto wi = [=](std::size_t oc, std::size_t ch, std::size_t u, std::size_t v) {
    return ((oc * c + ch) * kh + u) * kw + v;
  };
  auto oi = [=](std::size_t s, std::size_t oc, std::size_t i, std::size_t j) {
    return ((s * o + oc) * h + i) * wd + j;
  };
  // Visits every (output, input, weight) index triple that contributes.
  auto visit = [=](auto&& fn) {
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t oc = 0; oc < o; ++oc)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < wd; ++j)
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t u = 0; u < kh; ++u) {
                const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + u) - pad;
                if (ii < 0 || ii >= H) continue;
                for (std::size_t v = 0; v < kw; ++v) {
                  const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + v) - pad;
                  if (jj < 0 || jj >= W) continue;
                  fn(oi(s, oc, i, j), xi(s, ch, ii, jj), wi(oc, ch, u, v));
                }
              }
  };
  Tensor out({n, o, h, wd});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t p = 0; p < h * wd; ++p) out[(s * o + oc) * h * wd + p] = bv[oc];
  visit([&](std::size_t io, std::size_t ix, std::size_t iw) { out[io] += wv[iw] * xv[ix]; });

  return x.tape().record(std::move(out), {x, w, b},
                         [x, w, visit, n, o, h, wd](const Tensor& g, std::span<Tensor* const> in) {
                           const Tensor& xv = x.value();
                           const Tensor& wv = w.value();
                           if (in[0] || in[1]) {
                             visit([&](std::size_t io, std::size_t ix, std::size_t iw) {
                               if (in[0]) (*in[0])[ix] += g[io] * wv[iw];
                               if (in[1]) (*in[1])[iw] += g[io] * xv[ix];
                             });
                           }
                           if (in[2]) {
                             for (std::size_t s = 0; s < n; ++s)
                               for (std::size_t oc = 0; oc < o; ++oc)
                                 for (std::size_t p = 0; p < h * wd; ++p)
                                   (*in[2])[oc] += g[(s * o + oc) * h * wd + p];
                           }
                         });
}

Var avg_pool2d(Var x, std::size_t window) {
  const Tensor& xv = x.value();
  require_rank("avg_pool2d", xv, 4);
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (window == 0 || h % window != 0 || w % window != 0) {
    throw DimensionError("avg_pool2d: window " + std::to_string(window) + " does not tile " +
                         shape_to_string(xv.shape()));
  }
  const std::size_t oh = h / window, ow = w / window;
  const double inv = 1.0 / static_cast<double>(window * window);
  Tensor out({n, c, oh, ow});
  for (std::size_t sc = 0; sc < n * c; ++sc)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[(sc * oh + i / window) * ow + j / window] += inv * xv[(sc * h + i) * w + j];
  return x.tape().record(std::move(out), {x},
                         [=](const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t sc = 0; sc < n * c; ++sc)
                             for (std::size_t i = 0; i < h; ++i)
                               for (std::size_t j = 0; j < w; ++j)
                                 (*in[0])[(sc * h + i) * w + j] += inv * g[(sc * oh + i / window) * ow + j / window];
                         });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [](const Tensor& g, std::span<Tensor* const> in) {
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
  });
}

Var flatten_rows(Var a) {
  const Tensor& v = a.value();
  if (v.rank() == 0) throw DimensionError("flatten_rows on a scalar");
  return reshape(a, {v.dim(0), v.row_width()});
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double g) { return x > 0.0 ? g : 0.0; });
}

Var log(Var a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double g) { return g / x; });
}

Var square(Var a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double g) { return 2.0 * x * g; });
}

Var sqrt(Var a) {
  return unary(
      a, [](double x) { return std::sqrt(x); },
      [](double x, double g) { return x > 0.0 ? g * 0.5 / std::sqrt(x) : 0.0; });
}

Var softmax(Var a) {
  const Tensor& v = a.value();
  if (v.rank() != 1 && v.rank() != 2) {
    throw DimensionError("softmax: expected rank 1 or 2, got " + shape_to_string(v.shape()));
  }
  const std::size_t rows = v.rank() == 1 ? 1 : v.dim(0);
  const std::size_t cols = v.rank() == 1 ? v.dim(0) : v.dim(1);
  Tensor out(v.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = v.data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) y[j] /= total;
  }
  Tensor probs = out;
  return a.tape().record(std::move(out), {a},
                         [probs = std::move(probs), rows, cols](const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* s = probs.data() + r * cols;
                             const double* gr = g.data() + r * cols;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * s[j];
                             double* d = in[0]->data() + r * cols;
                             for (std::size_t j = 0; j < cols; ++j) d[j] += s[j] * (gr[j] - dot);
                           }
                         });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return a.tape().record(Tensor::scalar(total), {a}, [](const Tensor& g, std::span<Tensor* const> in) {
    for (double& d : in[0]->values()) d += g[0];
  });
}

Var mean(Var a) {
  const std::size_t count = a.value().size();
  if (count == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(count));
}

namespace {

struct Moments {
  double mean;
  double stddev;
};

Moments moments(std::span<const double> xs) {
  double mu = 0.0;
  for (double x : xs) mu += x;
  mu /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mu) * (x - mu);
  var /= static_cast<double>(xs.size());
  return {mu, std::sqrt(var)};
}

void std_backward(std::span<const double> xs, Moments m, double g, std::span<double> out) {
  if (m.stddev == 0.0) return;
  const double factor = g / (static_cast<double>(xs.size()) * m.stddev);
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] += factor * (xs[i] - m.mean);
}

double norm(std::span<const double> xs) {
  double total = 0.0;
  for (double x : xs) total += x * x;
  return std::sqrt(total);
}

void norm_backward(std::span<const double> xs, double nrm, double g, std::span<double> out) {
  if (nrm == 0.0) return;
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] += g * xs[i] / nrm;
}

std::size_t rows_of(const Tensor& t, const char* op) {
  if (t.rank() == 0) throw DimensionError(std::string(op) + ": needs a leading row axis");
  return t.dim(0);
}

}  // namespace

Var std_all(Var a) {
  const Tensor& v = a.value();
  if (v.size() == 0) throw DimensionError("std_all of an empty tensor");
  const Moments m = moments(v.values());
  return a.tape().record(Tensor::scalar(m.stddev), {a}, [a, m](const Tensor& g, std::span<Tensor* const> in) {
    std_backward(a.value().values(), m, g[0], in[0]->values());
  });
}

Var l2_norm(Var a) {
  const double nrm = norm(a.value().values());
  return a.tape().record(Tensor::scalar(nrm), {a}, [a, nrm](const Tensor& g, std::span<Tensor* const> in) {
    norm_backward(a.value().values(), nrm, g[0], in[0]->values());
  });
}

Var row_sum(Var a) {
  const Tensor& v = a.value();
  const std::size_t n = rows_of(v, "row_sum");
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r)
    for (double x : v.row_span(r)) out[r] += x;
  return a.tape().record(std::move(out), {a}, [](const Tensor& g, std::span<Tensor* const> in) {
    for (std::size_t r = 0; r < g.size(); ++r)
      for (double& d : in[0]->row_span(r)) d += g[r];
  });
}

Var row_l2_norm(Var a) {
  const Tensor& v = a.value();
  const std::size_t n = rows_of(v, "row_l2_norm");
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r) out[r] = norm(v.row_span(r));
  Tensor norms = out;
  return a.tape().record(std::move(out), {a},
                         [a, norms = std::move(norms)](const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t r = 0; r < g.size(); ++r)
                             norm_backward(a.value().row_span(r), norms[r], g[r], in[0]->row_span(r));
                         });
}

Var row_std(Var a) {
  const Tensor& v = a.value();
  const std::size_t n = rows_of(v, "row_std");
  if (v.row_width() == 0) throw DimensionError("row_std of empty rows");
  Tensor out({n});
  std::vector<Moments> stats(n);
  for (std::size_t r = 0; r < n; ++r) {
    stats[r] = moments(v.row_span(r));
    out[r] = stats[r].stddev;
  }
  return a.tape().record(std::move(out), {a},
                         [a, stats = std::move(stats)](const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t r = 0; r < g.size(); ++r)
                             std_backward(a.value().row_span(r), stats[r], g[r], in[0]->row_span(r));
                         });
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor& z = logits.value();
  require_rank("softmax_cross_entropy", z, 2);
  const std::size_t n = z.dim(0), c = z.dim(1);
  if (labels.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_to_string(z.shape()));
  }
  Tensor out({n});
  Tensor probs({n, c});
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= c) {
      throw ContractError("label " + std::to_string(labels[r]) + " out of range for " +
                          std::to_string(c) + " classes");
    }
    const double* x = z.data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(x[j] - mx);
    const double lse = mx + std::log(total);
    out[r] = lse - x[labels[r]];
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(x[j] - lse);
  }
  std::vector<std::size_t> y(labels.begin(), labels.end());
  return logits.tape().record(
      std::move(out), {logits},
      [probs = std::move(probs), y = std::move(y), c](const Tensor& g, std::span<Tensor* const> in) {
        for (std::size_t r = 0; r < g.size(); ++r) {
          double* d = in[0]->data() + r * c;
          for (std::size_t j = 0; j < c; ++j) d[j] += g[r] * (probs[r * c + j] - (j == y[r] ? 1.0 : 0.0));
        }
      });
}

}  // namespace ops

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite difference step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace hiddentask
