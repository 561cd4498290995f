#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kvlab/errors.hpp"
#include "kvlab/tensor/array.hpp"
#include "kvlab/tensor/tape.hpp"

// Differentiable primitives. Each call appends exactly one node to the tape
// of its inputs. Broadcasting is limited to leading-batch expansion in
// matmul and to the scalar operand of scale_by / lerp.

namespace kvlab {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

inline ConstMatrixMap as_matrix(const Array& a, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(a.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatrixMap as_matrix(Array& a, std::size_t rows, std::size_t cols) {
  return MatrixMap(a.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline Tape& tape_of(const Var& v) {
  if (!v.valid()) throw ContractError("operation on an unbound Var");
  // Nodes are only ever appended through ops; the const tape pointer in Var is
  // a read-only view for value access.
  return const_cast<Tape&>(*v.tape());
}

inline void same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ContractError("operands live on different tapes");
}

inline void same_shape(const char* op, const Array& a, const Array& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
}

inline bool is_scalar(const Array& a) { return a.size() == 1; }

}  // namespace detail

/// a[..., m, k] x b[k, n] -> [..., m, n]; leading dimensions of `a` are a batch.
inline Var matmul(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rank() < 2 || bv.rank() != 2 || av.cols() != bv.shape()[0]) {
    throw ConfigError("matmul: incompatible shapes " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Array out(out_shape);
  detail::as_matrix(out, m, n).noalias() = detail::as_matrix(av, m, k) * detail::as_matrix(bv, k, n);
  return detail::tape_of(a).record("matmul", {a.id(), b.id()}, std::move(out), [m, k, n](BackwardContext& ctx) {
    auto g = detail::as_matrix(ctx.grad_out(), m, n);
    if (ctx.needs(0)) {
      detail::as_matrix(ctx.grad(0), m, k).noalias() += g * detail::as_matrix(ctx.input(1), k, n).transpose();
    }
    if (ctx.needs(1)) {
      detail::as_matrix(ctx.grad(1), k, n).noalias() += detail::as_matrix(ctx.input(0), m, k).transpose() * g;
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::same_shape("add", a.value(), b.value());
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return detail::tape_of(a).record("add", {a.id(), b.id()}, std::move(out), [](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    for (std::size_t s = 0; s < 2; ++s) {
      if (!ctx.needs(s)) continue;
      Array& ga = ctx.grad(s);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::same_shape("sub", a.value(), b.value());
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return detail::tape_of(a).record("sub", {a.id(), b.id()}, std::move(out), [](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    if (ctx.needs(0)) {
      Array& ga = ctx.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (ctx.needs(1)) {
      Array& gb = ctx.grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::same_shape("mul", a.value(), b.value());
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return detail::tape_of(a).record("mul", {a.id(), b.id()}, std::move(out), [](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    if (ctx.needs(0)) {
      Array& ga = ctx.grad(0);
      const Array& bv = ctx.input(1);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (ctx.needs(1)) {
      Array& gb = ctx.grad(1);
      const Array& av = ctx.input(0);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// c * a for a constant c.
inline Var scale(const Var& a, double c) {
  Array out = a.value();
  for (double& v : out.values()) v *= c;
  return detail::tape_of(a).record("scale", {a.id()}, std::move(out), [c](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    Array& ga = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

/// mul_c * a + add_c for constants.
inline Var affine(const Var& a, double mul_c, double add_c) {
  Array out = a.value();
  for (double& v : out.values()) v = mul_c * v + add_c;
  return detail::tape_of(a).record("affine", {a.id()}, std::move(out), [mul_c](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    Array& ga = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += mul_c * g[i];
  });
}

/// s * a where s is a one-element Var.
inline Var scale_by(const Var& a, const Var& s) {
  detail::same_tape(a, s);
  if (!detail::is_scalar(s.value())) throw ConfigError("scale_by: scale must have one element");
  const double sv = s.value()[0];
  Array out = a.value();
  for (double& v : out.values()) v *= sv;
  return detail::tape_of(a).record("scale_by", {a.id(), s.id()}, std::move(out), [](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    const double sv = ctx.input(1)[0];
    if (ctx.needs(0)) {
      Array& ga = ctx.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += sv * g[i];
    }
    if (ctx.needs(1)) {
      const Array& av = ctx.input(0);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      ctx.grad(1)[0] += acc;
    }
  });
}

/// z * a + (1 - z) * b with a one-element z.
inline Var lerp(const Var& a, const Var& b, const Var& z) {
  detail::same_tape(a, b);
  detail::same_tape(a, z);
  detail::same_shape("lerp", a.value(), b.value());
  if (!detail::is_scalar(z.value())) throw ConfigError("lerp: weight must have one element");
  const double zv = z.value()[0];
  const double wv = 1.0 - zv;
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = zv * av[i] + wv * bv[i];
  return detail::tape_of(a).record("lerp", {a.id(), b.id(), z.id()}, std::move(out), [](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    const double zv = ctx.input(2)[0];
    if (ctx.needs(0)) {
      Array& ga = ctx.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += zv * g[i];
    }
    if (ctx.needs(1)) {
      Array& gb = ctx.grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += (1.0 - zv) * g[i];
    }
    if (ctx.needs(2)) {
      const Array& av = ctx.input(0);
      const Array& bv = ctx.input(1);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * (av[i] - bv[i]);
      ctx.grad(2)[0] += acc;
    }
  });
}

/// Swaps the last two axes.
inline Var transpose_last2(const Var& a) {
  const Array& av = a.value();
  if (av.rank() < 2) throw ConfigError("transpose_last2: rank must be >= 2");
  const std::size_t m = av.shape()[av.rank() - 2], n = av.shape()[av.rank() - 1];
  const std::size_t batch = m * n == 0 ? 0 : av.size() / (m * n);
  Shape out_shape = av.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  Array out(out_shape);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = av.data() + b * m * n;
    double* dst = out.data() + b * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  return detail::tape_of(a).record("transpose_last2", {a.id()}, std::move(out), [m, n, batch](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    Array& ga = ctx.grad(0);
    for (std::size_t b = 0; b < batch; ++b) {
      const double* src = g.data() + b * m * n;
      double* dst = ga.data() + b * m * n;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dst[i * n + j] += src[j * m + i];
    }
  });
}

/// Row-wise softmax of (x + mask). Mask entries are 0 for allowed and -inf
/// for forbidden positions (any finite additive bias is also accepted);
/// forbidden positions receive probability exactly 0.
inline Var row_softmax_with_additive_mask(const Var& x, const Var& mask) {
  detail::same_tape(x, mask);
  detail::same_shape("row_softmax_with_additive_mask", x.value(), mask.value());
  const Array& xv = x.value();
  const Array& mv = mask.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Array out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    const double* mr = mv.data() + r * cols;
    double* orow = out.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (mr[c] != -std::numeric_limits<double>::infinity()) mx = std::max(mx, xr[c] + mr[c]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw InvalidMaskError("softmax row " + std::to_string(r) + " has no allowed entry");
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mr[c] == -std::numeric_limits<double>::infinity()) {
        orow[c] = 0.0;
      } else {
        orow[c] = std::exp(xr[c] + mr[c] - mx);
        sum += orow[c];
      }
    }
    const double inv = 1.0 / sum;
    for (std::size_t c = 0; c < cols; ++c) orow[c] *= inv;
  }
  return detail::tape_of(x).record("row_softmax", {x.id(), mask.id()}, std::move(out), [rows, cols](BackwardContext& ctx) {
    if (!ctx.needs(0)) return;
    const Array& g = ctx.grad_out();
    const Array& p = ctx.output();
    Array& gx = ctx.grad(0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* pr = p.data() + r * cols;
      const double* gr = g.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += pr[c] * gr[c];
      double* out = gx.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) out[c] += pr[c] * (gr[c] - dot);
    }
  });
}

inline Var sigmoid(const Var& a) {
  Array out = a.value();
  for (double& v : out.values()) v = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  return detail::tape_of(a).record("sigmoid", {a.id()}, std::move(out), [](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    const Array& y = ctx.output();
    Array& ga = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

/// Natural log; non-positive inputs produce non-finite values.
inline Var log(const Var& a) {
  Array out = a.value();
  for (double& v : out.values()) v = std::log(v);
  return detail::tape_of(a).record("log", {a.id()}, std::move(out), [](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    const Array& x = ctx.input(0);
    Array& ga = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

inline Var exp(const Var& a) {
  Array out = a.value();
  for (double& v : out.values()) v = std::exp(v);
  return detail::tape_of(a).record("exp", {a.id()}, std::move(out), [](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    const Array& y = ctx.output();
    Array& ga = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

/// Each row divided by its root-mean-square (no learned gain).
inline Var rms_normalize(const Var& a, double eps = 1e-6) {
  const Array& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  Array out(av.shape());
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += x[c] * x[c];
    inv_rms[r] = 1.0 / std::sqrt(ss / static_cast<double>(cols) + eps);
    for (std::size_t c = 0; c < cols; ++c) out.data()[r * cols + c] = x[c] * inv_rms[r];
  }
  return detail::tape_of(a).record("rms_normalize", {a.id()}, std::move(out),
                                   [rows, cols, inv_rms = std::move(inv_rms)](BackwardContext& ctx) {
                                     const Array& g = ctx.grad_out();
                                     const Array& y = ctx.output();
                                     Array& ga = ctx.grad(0);
                                     for (std::size_t r = 0; r < rows; ++r) {
                                       const double* gr = g.data() + r * cols;
                                       const double* yr = y.data() + r * cols;
                                       double dot = 0.0;
                                       for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                                       dot /= static_cast<double>(cols);
                                       double* out = ga.data() + r * cols;
                                       for (std::size_t c = 0; c < cols; ++c) out[c] += inv_rms[r] * (gr[c] - yr[c] * dot);
                                     }
                                   });
}

/// Rows of a 2-D array selected by index (with repetition); gradient scatter-adds.
inline Var gather_rows(const Var& table, std::span<const std::size_t> indices) {
  const Array& tv = table.value();
  if (tv.rank() != 2) throw ConfigError("gather_rows: table must be 2-D");
  const std::size_t rows = tv.shape()[0], cols = tv.shape()[1];
  Array out(Shape{indices.size(), cols});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw ConfigError("gather_rows: index " + std::to_string(indices[i]) + " out of range " + std::to_string(rows));
    }
    std::copy_n(tv.data() + indices[i] * cols, cols, out.data() + i * cols);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return detail::tape_of(table).record("gather_rows", {table.id()}, std::move(out),
                                       [cols, idx = std::move(idx)](BackwardContext& ctx) {
                                         const Array& g = ctx.grad_out();
                                         Array& gt = ctx.grad(0);
                                         for (std::size_t i = 0; i < idx.size(); ++i) {
                                           const double* src = g.data() + i * cols;
                                           double* dst = gt.data() + idx[i] * cols;
                                           for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                                         }
                                       });
}

/// Token embedding: rows of `table` [vocab, dim] for each token id.
inline Var embedding_lookup(const Var& table, std::span<const std::size_t> token_ids) {
  return gather_rows(table, token_ids);
}

/// Concatenates along the last axis; all parts must share the row count.
inline Var concat_last_axis(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_last_axis: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths, ids;
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p);
    if (p.value().rows() != rows) throw ConfigError("concat_last_axis: row count mismatch");
    widths.push_back(p.value().cols());
    ids.push_back(p.id());
    total += p.value().cols();
  }
  Shape out_shape = parts[0].value().shape();
  if (out_shape.empty()) out_shape = {1};
  out_shape.back() = total;
  Array out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Array& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pv.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  return detail::tape_of(parts[0]).record("concat_last_axis", std::move(ids), std::move(out),
                                          [rows, total, widths](BackwardContext& ctx) {
                                            const Array& g = ctx.grad_out();
                                            std::size_t offset = 0;
                                            for (std::size_t k = 0; k < widths.size(); ++k) {
                                              if (ctx.needs(k)) {
                                                Array& gk = ctx.grad(k);
                                                for (std::size_t r = 0; r < rows; ++r) {
                                                  const double* src = g.data() + r * total + offset;
                                                  double* dst = gk.data() + r * widths[k];
                                                  for (std::size_t c = 0; c < widths[k]; ++c) dst[c] += src[c];
                                                }
                                              }
                                              offset += widths[k];
                                            }
                                          });
}

/// Concatenates 2-D arrays along the first axis.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no inputs");
  const std::size_t cols = parts[0].value().cols();
  std::vector<std::size_t> counts, ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p);
    if (p.value().rank() != 2 || p.value().cols() != cols) throw ConfigError("concat_rows: column mismatch");
    counts.push_back(p.value().rows());
    ids.push_back(p.id());
    total += p.value().rows();
  }
  Array out(Shape{total, cols});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    std::copy_n(parts[k].value().data(), counts[k] * cols, out.data() + offset * cols);
    offset += counts[k];
  }
  return detail::tape_of(parts[0]).record("concat_rows", std::move(ids), std::move(out), [cols, counts](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      if (ctx.needs(k)) {
        Array& gk = ctx.grad(k);
        const double* src = g.data() + offset * cols;
        for (std::size_t i = 0; i < counts[k] * cols; ++i) gk[i] += src[i];
      }
      offset += counts[k];
    }
  });
}

/// Columns [start, start + width) of every row.
inline Var slice_last_axis(const Var& a, std::size_t start, std::size_t width) {
  const Array& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  if (start + width > cols) throw ConfigError("slice_last_axis: range exceeds " + std::to_string(cols) + " columns");
  Shape out_shape = av.shape();
  out_shape.back() = width;
  Array out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.data() + r * cols + start, width, out.data() + r * width);
  return detail::tape_of(a).record("slice_last_axis", {a.id()}, std::move(out), [rows, cols, start, width](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    Array& ga = ctx.grad(0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = g.data() + r * width;
      double* dst = ga.data() + r * cols + start;
      for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
    }
  });
}

/// Mean over rows of -log softmax(logits)[target].
inline Var cross_entropy_mean(const Var& logits, std::span<const std::size_t> targets) {
  const Array& lv = logits.value();
  const std::size_t rows = lv.rows(), cols = lv.cols();
  if (targets.size() != rows) throw ConfigError("cross_entropy_mean: need one target per row");
  if (rows == 0) throw ConfigError("cross_entropy_mean: no rows");
  Array probs(Shape{rows, cols});
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= cols) throw ConfigError("cross_entropy_mean: target out of range");
    const double* x = lv.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      probs.at(r, c) = std::exp(x[c] - mx);
      sum += probs.at(r, c);
    }
    for (std::size_t c = 0; c < cols; ++c) probs.at(r, c) /= sum;
    total += (mx + std::log(sum)) - x[targets[r]];
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return detail::tape_of(logits).record(
      "cross_entropy_mean", {logits.id()}, Array::scalar(total / static_cast<double>(rows)),
      [rows, cols, tgt = std::move(tgt), probs = std::move(probs)](BackwardContext& ctx) {
        const double g = ctx.grad_out()[0] / static_cast<double>(rows);
        Array& gl = ctx.grad(0);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) gl.at(r, c) += g * probs.at(r, c);
          gl.at(r, tgt[r]) -= g;
        }
      });
}

/// min(1, max(0, x)); gradient 1 strictly inside (0, 1), 0 elsewhere.
inline Var clamp01(const Var& a) {
  Array out = a.value();
  for (double& v : out.values()) v = std::min(1.0, std::max(0.0, v));
  return detail::tape_of(a).record("clamp01", {a.id()}, std::move(out), [](BackwardContext& ctx) {
    const Array& g = ctx.grad_out();
    const Array& x = ctx.input(0);
    Array& ga = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0 && x[i] < 1.0) ga[i] += g[i];
    }
  });
}

inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return detail::tape_of(a).record("sum_all", {a.id()}, Array::scalar(s), [](BackwardContext& ctx) {
    const double g = ctx.grad_out()[0];
    for (double& v : ctx.grad(0).values()) v += g;
  });
}

inline Var mean_all(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum_all(a), 1.0 / n);
}

/// Rotary position embedding on [rows, dim] with one absolute position per
/// row. Pairs (i, i + dim/2) rotate by position * base^(-2i/dim).
inline Var rope(const Var& a, std::span<const std::size_t> positions, double base) {
  const Array& av = a.value();
  const std::size_t rows = av.rows(), dim = av.cols();
  if (dim % 2 != 0) throw ConfigError("rope: dimension must be even");
  if (positions.size() != rows) throw ConfigError("rope: need one position per row");
  const std::size_t half = dim / 2;
  std::vector<double> cosv(rows * half), sinv(rows * half);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double theta = static_cast<double>(positions[r]) *
                           std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      cosv[r * half + i] = std::cos(theta);
      sinv[r * half + i] = std::sin(theta);
    }
  }
  Array out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * dim;
    double* y = out.data() + r * dim;
    for (std::size_t i = 0; i < half; ++i) {
      const double c = cosv[r * half + i], s = sinv[r * half + i];
      y[i] = x[i] * c - x[i + half] * s;
      y[i + half] = x[i] * s + x[i + half] * c;
    }
  }
  return detail::tape_of(a).record("rope", {a.id()}, std::move(out),
                                   [rows, dim, half, cosv = std::move(cosv), sinv = std::move(sinv)](BackwardContext& ctx) {
                                     const Array& g = ctx.grad_out();
                                     Array& ga = ctx.grad(0);
                                     for (std::size_t r = 0; r < rows; ++r) {
                                       const double* gy = g.data() + r * dim;
                                       double* gx = ga.data() + r * dim;
                                       for (std::size_t i = 0; i < half; ++i) {
                                         const double c = cosv[r * half + i], s = sinv[r * half + i];
                                         gx[i] += gy[i] * c + gy[i + half] * s;
                                         gx[i + half] += -gy[i] * s + gy[i + half] * c;
                                       }
                                     }
                                   });
}

}  // namespace kvlab
