#include "xmgan/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "xmgan/errors.hpp"

namespace xmgan {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void require_rank(const Tensor& a, std::size_t r, const char* op) {
  if (a.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(a.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename F>
BackwardRule rule(F&& f) {
  return BackwardRule{std::forward<F>(f)};
}

}  // namespace

void backward(const Tensor& loss) {
  Tape* tape = Tape::current();
  if (tape == nullptr) throw ContractError("backward(): no tape installed");
  tape->backward(loss);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Buffer out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  return make_op_result({m, n}, std::move(out), {a, b},
                        rule([a, b, m, k, n](std::span<const double> g, std::span<const std::span<double>> gi) {
                          MapC G(g.data(), m, n);
                          if (!gi[0].empty())
                            Map(gi[0].data(), m, k).noalias() += G * MapC(b.data().data(), k, n).transpose();
                          if (!gi[1].empty())
                            Map(gi[1].data(), k, n).noalias() += MapC(a.data().data(), m, k).transpose() * G;
                        }));
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Buffer out(m * n);
  Map(out.data(), n, m) = MapC(a.data().data(), m, n).transpose();
  return make_op_result({n, m}, std::move(out), {a},
                        rule([m, n](std::span<const double> g, std::span<const std::span<double>> gi) {
                          Map(gi[0].data(), m, n) += MapC(g.data(), n, m).transpose();
                        }));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a, b},
                        rule([](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (auto& d : gi)
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
                        }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a, b},
                        rule([](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i];
                          for (std::size_t i = 0; i < gi[1].size(); ++i) gi[1][i] -= g[i];
                        }));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a, b},
                        rule([a, b](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i] * b.data()[i];
                          for (std::size_t i = 0; i < gi[1].size(); ++i) gi[1][i] += g[i] * a.data()[i];
                        }));
}

Tensor scale(const Tensor& a, double s) {
  Buffer out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_op_result(a.shape(), std::move(out), {a},
                        rule([s](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += s * g[i];
                        }));
}

Tensor add_scalar(const Tensor& a, double s) {
  Buffer out(a.data().begin(), a.data().end());
  for (auto& v : out) v += s;
  return make_op_result(a.shape(), std::move(out), {a},
                        rule([](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i];
                        }));
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require_rank(a, 2, "add_rowvec");
  require_rank(v, 1, "add_rowvec");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (v.dim(0) != n) {
    throw DimensionError("add_rowvec: " + shape_str(v.shape()) + " vs rows of " + shape_str(a.shape()));
  }
  Buffer out(a.data().begin(), a.data().end());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += v.data()[c];
  return make_op_result(a.shape(), std::move(out), {a, v},
                        rule([m, n](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i];
                          if (!gi[1].empty())
                            for (std::size_t r = 0; r < m; ++r)
                              for (std::size_t c = 0; c < n; ++c) gi[1][c] += g[r * n + c];
                        }));
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
  require_rank(a, 2, "mul_rowvec");
  require_rank(v, 1, "mul_rowvec");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (v.dim(0) != n) {
    throw DimensionError("mul_rowvec: " + shape_str(v.shape()) + " vs rows of " + shape_str(a.shape()));
  }
  Buffer out(a.numel());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a.data()[r * n + c] * v.data()[c];
  return make_op_result(a.shape(), std::move(out), {a, v},
                        rule([a, v, m, n](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t r = 0; r < m; ++r)
                            for (std::size_t c = 0; c < n; ++c) {
                              const std::size_t i = r * n + c;
                              if (!gi[0].empty()) gi[0][i] += g[i] * v.data()[c];
                              if (!gi[1].empty()) gi[1][c] += g[i] * a.data()[i];
                            }
                        }));
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op_result({}, {s}, {a},
                        rule([](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (auto& d : gi[0]) d += g[0];
                        }));
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean_rows(const Tensor& a) {
  require_rank(a, 2, "mean_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Buffer out(n, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c] += a.data()[r * n + c];
  for (auto& v : out) v /= static_cast<double>(m);
  return make_op_result({n}, std::move(out), {a},
                        rule([m, n](std::span<const double> g, std::span<const std::span<double>> gi) {
                          const double inv = 1.0 / static_cast<double>(m);
                          for (std::size_t r = 0; r < m; ++r)
                            for (std::size_t c = 0; c < n; ++c) gi[0][r * n + c] += g[c] * inv;
                        }));
}

Tensor relu(const Tensor& a) { return leaky_relu(a, 0.0); }

Tensor leaky_relu(const Tensor& a, double slope) {
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = x > 0.0 ? x : slope * x;
  }
  return make_op_result(a.shape(), std::move(out), {a},
                        rule([a, slope](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t i = 0; i < gi[0].size(); ++i)
                            gi[0][i] += a.data()[i] > 0.0 ? g[i] : slope * g[i];
                        }));
}

Tensor tanh_act(const Tensor& a) {
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
  auto y = std::make_shared<Buffer>(out);
  return make_op_result(a.shape(), std::move(out), {a},
                        rule([y](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t i = 0; i < gi[0].size(); ++i)
                            gi[0][i] += g[i] * (1.0 - (*y)[i] * (*y)[i]);
                        }));
}

Tensor softmax_rows(const Tensor& a) {
  require_rank(a, 2, "softmax_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Buffer out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    const double* x = a.data().data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < n; ++c) y[c] /= s;
  }
  auto y = std::make_shared<Buffer>(out);
  return make_op_result(a.shape(), std::move(out), {a},
                        rule([y, m, n](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t r = 0; r < m; ++r) {
                            double dot = 0.0;
                            for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * (*y)[r * n + c];
                            for (std::size_t c = 0; c < n; ++c)
                              gi[0][r * n + c] += (*y)[r * n + c] * (g[r * n + c] - dot);
                          }
                        }));
}

Tensor layer_norm_rows(const Tensor& a, double eps) {
  require_rank(a, 2, "layer_norm_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const double inv_n = 1.0 / static_cast<double>(n);
  Buffer out(m * n);
  auto inv_sigma = std::make_shared<Buffer>(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* x = a.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += x[c];
    mu *= inv_n;
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (x[c] - mu) * (x[c] - mu);
    var *= inv_n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = is;
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = (x[c] - mu) * is;
  }
  auto xhat = std::make_shared<Buffer>(out);
  return make_op_result(
      a.shape(), std::move(out), {a},
      rule([xhat, inv_sigma, m, n, inv_n](std::span<const double> g, std::span<const std::span<double>> gi) {
        for (std::size_t r = 0; r < m; ++r) {
          double gm = 0.0, gx = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            gm += g[r * n + c];
            gx += g[r * n + c] * (*xhat)[r * n + c];
          }
          gm *= inv_n;
          gx *= inv_n;
          for (std::size_t c = 0; c < n; ++c)
            gi[0][r * n + c] += (*inv_sigma)[r] * (g[r * n + c] - gm - (*xhat)[r * n + c] * gx);
        }
      }));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return make_op_result(std::move(shape), Buffer(a.data().begin(), a.data().end()), {a},
                        rule([](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i];
                        }));
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (begin >= end || end > n) {
    throw DimensionError("slice_cols: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") of " + shape_str(a.shape()));
  }
  const std::size_t w = end - begin;
  Buffer out(m * w);
  for (std::size_t r = 0; r < m; ++r)
    std::copy_n(a.data().data() + r * n + begin, w, out.data() + r * w);
  return make_op_result({m, w}, std::move(out), {a},
                        rule([m, n, w, begin](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t r = 0; r < m; ++r)
                            for (std::size_t c = 0; c < w; ++c) gi[0][r * n + begin + c] += g[r * w + c];
                        }));
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> offsets;
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw DimensionError("concat_cols: row counts differ");
    offsets.push_back(n);
    n += p.dim(1);
  }
  Buffer out(m * n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].dim(1);
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(parts[k].data().data() + r * w, w, out.data() + r * n + offsets[k]);
  }
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(1));
  return make_op_result({m, n}, std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                        rule([m, n, offsets, widths](std::span<const double> g,
                                                     std::span<const std::span<double>> gi) {
                          for (std::size_t k = 0; k < gi.size(); ++k) {
                            if (gi[k].empty()) continue;
                            const std::size_t w = widths[k];
                            for (std::size_t r = 0; r < m; ++r)
                              for (std::size_t c = 0; c < w; ++c) gi[k][r * w + c] += g[r * n + offsets[k] + c];
                          }
                        }));
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0) throw DimensionError("slice_rows of a scalar");
  if (begin >= end || end > a.dim(0)) {
    throw DimensionError("slice_rows: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") of " + shape_str(a.shape()));
  }
  const std::size_t row = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  Buffer out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * row),
                          a.data().begin() + static_cast<std::ptrdiff_t>(end * row));
  const std::size_t off = begin * row;
  return make_op_result(std::move(shape), std::move(out), {a},
                        rule([off](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t i = 0; i < g.size(); ++i) gi[0][off + i] += g[i];
                        }));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  Shape shape = parts[0].shape();
  if (shape.empty()) throw DimensionError("concat_rows of scalars");
  std::size_t rows = 0;
  Buffer out;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat_rows: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  shape[0] = rows;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.numel());
  return make_op_result(std::move(shape), std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                        rule([sizes](std::span<const double> g, std::span<const std::span<double>> gi) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < gi.size(); ++k) {
                            for (std::size_t i = 0; i < gi[k].size(); ++i) gi[k][i] += g[off + i];
                            off += sizes[k];
                          }
                        }));
}

Tensor row_norms(const Tensor& a) {
  require_rank(a, 2, "row_norms");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Buffer out(m);
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += a.data()[r * n + c] * a.data()[r * n + c];
    out[r] = std::sqrt(s);
  }
  auto norms = std::make_shared<Buffer>(out);
  return make_op_result({m}, std::move(out), {a},
                        rule([a, norms, m, n](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t r = 0; r < m; ++r) {
                            const double nr = (*norms)[r];
                            if (nr == 0.0) continue;
                            for (std::size_t c = 0; c < n; ++c) gi[0][r * n + c] += g[r] * a.data()[r * n + c] / nr;
                          }
                        }));
}

Tensor l2_norm(const Tensor& a) { return reshape(row_norms(reshape(a, {1, a.numel()})), {}); }

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) {
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(b) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= c) {
      throw ContractError("cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(c) + ")");
    }
  }
  auto probs = std::make_shared<Buffer>(b * c);
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    const double* x = logits.data().data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(x[k] - mx);
    const double lse = mx + std::log(s);
    total += lse - x[labels[r]];
    for (std::size_t k = 0; k < c; ++k) (*probs)[r * c + k] = std::exp(x[k] - lse);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_op_result({}, {total / static_cast<double>(b)}, {logits},
                        rule([probs, lab, b, c](std::span<const double> g, std::span<const std::span<double>> gi) {
                          const double s = g[0] / static_cast<double>(b);
                          for (std::size_t r = 0; r < b; ++r)
                            for (std::size_t k = 0; k < c; ++k) {
                              const double t = static_cast<int>(k) == lab[r] ? 1.0 : 0.0;
                              gi[0][r * c + k] += s * ((*probs)[r * c + k] - t);
                            }
                        }));
}

Tensor weighted_sum(std::span<const Tensor> xs, const Tensor& w) {
  if (xs.empty()) throw ContractError("weighted_sum of nothing");
  if (w.numel() != xs.size()) {
    throw ContractError("weighted_sum: " + std::to_string(xs.size()) + " tensors but " +
                        std::to_string(w.numel()) + " weights");
  }
  for (const auto& x : xs) require_same(x, xs[0], "weighted_sum");
  Buffer out(xs[0].numel(), 0.0);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double wk = w.data()[k];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * xs[k].data()[i];
  }
  std::vector<Tensor> inputs(xs.begin(), xs.end());
  inputs.push_back(w);
  const std::size_t count = xs.size();
  return make_op_result(xs[0].shape(), std::move(out), inputs,
                        rule([inputs, count](std::span<const double> g, std::span<const std::span<double>> gi) {
                          const Tensor& wt = inputs[count];
                          for (std::size_t k = 0; k < count; ++k) {
                            if (!gi[k].empty())
                              for (std::size_t i = 0; i < g.size(); ++i) gi[k][i] += wt.data()[k] * g[i];
                            if (!gi[count].empty()) {
                              double dot = 0.0;
                              for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * inputs[k].data()[i];
                              gi[count][k] += dot;
                            }
                          }
                        }));
}

Tensor nchw_to_tokens(const Tensor& x) {
  require_rank(x, 4, "nchw_to_tokens");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Buffer out(b * hw * c);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(n * hw + p) * c + ch] = x.data()[(n * c + ch) * hw + p];
  return make_op_result({b * hw, c}, std::move(out), {x},
                        rule([b, c, hw](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t n = 0; n < b; ++n)
                            for (std::size_t ch = 0; ch < c; ++ch)
                              for (std::size_t p = 0; p < hw; ++p)
                                gi[0][(n * c + ch) * hw + p] += g[(n * hw + p) * c + ch];
                        }));
}

Tensor tokens_to_nchw(const Tensor& t, std::size_t batch, std::size_t height, std::size_t width) {
  require_rank(t, 2, "tokens_to_nchw");
  const std::size_t hw = height * width, c = t.dim(1);
  if (t.dim(0) != batch * hw) {
    throw DimensionError("tokens_to_nchw: " + shape_str(t.shape()) + " cannot hold " + std::to_string(batch) +
                         " maps of " + std::to_string(height) + "x" + std::to_string(width));
  }
  Buffer out(t.numel());
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(n * c + ch) * hw + p] = t.data()[(n * hw + p) * c + ch];
  return make_op_result({batch, c, height, width}, std::move(out), {t},
                        rule([batch, c, hw](std::span<const double> g, std::span<const std::span<double>> gi) {
                          for (std::size_t n = 0; n < batch; ++n)
                            for (std::size_t ch = 0; ch < c; ++ch)
                              for (std::size_t p = 0; p < hw; ++p)
                                gi[0][(n * hw + p) * c + ch] += g[(n * c + ch) * hw + p];
                        }));
}

}  // namespace xmgan
