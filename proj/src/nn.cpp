#include "xmgan/nn.hpp"

#include <Eigen/Core>
#include <cmath>
#include <memory>

#include "xmgan/errors.hpp"
#include "xmgan/ops.hpp"

namespace xmgan {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

struct Geometry {
  std::size_t batch, channels, height, width;  // input of the (forward) convolution
  std::size_t kh, kw, stride, pad;
  std::size_t out_h, out_w;

  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return batch * out_h * out_w; }
};

Geometry conv_geometry(std::size_t b, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                       std::size_t stride, std::size_t pad) {
  if (stride == 0) throw DimensionError("conv: stride must be positive");
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    throw DimensionError("conv: kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " does not fit " +
                         std::to_string(h) + "x" + std::to_string(w) + " input with padding " +
                         std::to_string(pad));
  }
  return {b, c, h, w, kh, kw, stride, pad, (h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1};
}

// cols[(c*kh + ky)*kw + kx][(b*out_h + oy)*out_w + ox] = x[b][c][oy*s - p + ky][ox*s - p + kx]
void im2col(const double* x, const Geometry& g, double* cols) {
  const std::size_t ncols = g.cols(), ohw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* plane = x + (b * g.channels + c) * g.height * g.width;
          double* dst = row + b * ohw;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              const bool inside = iy >= 0 && iy < static_cast<long>(g.height) && ix >= 0 &&
                                  ix < static_cast<long>(g.width);
              dst[oy * g.out_w + ox] = inside ? plane[iy * static_cast<long>(g.width) + ix] : 0.0;
            }
          }
        }
      }
}

// Adjoint of im2col: x += scatter(cols).
void col2im(const double* cols, const Geometry& g, double* x) {
  const std::size_t ncols = g.cols(), ohw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* plane = x + (b * g.channels + c) * g.height * g.width;
          const double* src = row + b * ohw;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
              plane[iy * static_cast<long>(g.width) + ix] += src[oy * g.out_w + ox];
            }
          }
        }
      }
}

// [B x C x HW] <-> [C x B*HW]
void nchw_to_cmajor(const double* x, std::size_t b, std::size_t c, std::size_t hw, double* out) {
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(x + (n * c + ch) * hw, hw, out + ch * b * hw + n * hw);
}

void cmajor_to_nchw_add(const double* in, std::size_t b, std::size_t c, std::size_t hw, double* x) {
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* src = in + ch * b * hw + n * hw;
      double* dst = x + (n * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] += src[p];
    }
}

void require_nchw(const Tensor& x, const char* op) {
  if (x.rank() != 4) throw DimensionError(std::string(op) + ": expected NCHW input, got " + shape_str(x.shape()));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_nchw(x, "conv2d");
  if (weight.rank() != 4 || weight.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
  }
  const std::size_t co = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(co) + " channels");
  }
  const Geometry g =
      conv_geometry(x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), stride, padding);
  const std::size_t ohw = g.out_h * g.out_w;

  auto cols = std::make_shared<Buffer>(g.rows() * g.cols());
  im2col(x.data().data(), g, cols->data());
  Buffer outc(co * g.cols());
  Map(outc.data(), co, g.cols()).noalias() =
      MapC(weight.data().data(), co, g.rows()) * MapC(cols->data(), g.rows(), g.cols());
  if (bias.defined())
    for (std::size_t c = 0; c < co; ++c) Map(outc.data() + c * g.cols(), 1, g.cols()).array() += bias.data()[c];

  Buffer out(co * g.cols(), 0.0);
  cmajor_to_nchw_add(outc.data(), g.batch, co, ohw, out.data());

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_op_result(
      {g.batch, co, g.out_h, g.out_w}, std::move(out), inputs,
      BackwardRule{[weight, cols, g, co, ohw](std::span<const double> grad, std::span<const std::span<double>> gi) {
        Buffer gc(co * g.cols());
        nchw_to_cmajor(grad.data(), g.batch, co, ohw, gc.data());
        MapC G(gc.data(), co, g.cols());
        if (!gi[1].empty())
          Map(gi[1].data(), co, g.rows()).noalias() += G * MapC(cols->data(), g.rows(), g.cols()).transpose();
        if (gi.size() > 2 && !gi[2].empty())
          for (std::size_t c = 0; c < co; ++c) gi[2][c] += G.row(static_cast<Eigen::Index>(c)).sum();
        if (!gi[0].empty()) {
          Buffer dcols(g.rows() * g.cols());
          Map(dcols.data(), g.rows(), g.cols()).noalias() = MapC(weight.data().data(), co, g.rows()).transpose() * G;
          col2im(dcols.data(), g, gi[0].data());
        }
      }});
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                        std::size_t padding) {
  require_nchw(x, "conv_transpose2d");
  if (weight.rank() != 4 || weight.dim(0) != x.dim(1)) {
    throw DimensionError("conv_transpose2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t co = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (stride == 0) throw DimensionError("conv_transpose2d: stride must be positive");
  if ((h - 1) * stride + kh < 2 * padding + 1 || (w - 1) * stride + kw < 2 * padding + 1) {
    throw DimensionError("conv_transpose2d: padding " + std::to_string(padding) + " too large for input " +
                         shape_str(x.shape()));
  }
  const std::size_t oh = (h - 1) * stride + kh - 2 * padding;
  const std::size_t ow = (w - 1) * stride + kw - 2 * padding;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    throw DimensionError("conv_transpose2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(co) +
                         " channels");
  }
  // Geometry of the forward convolution this op is the adjoint of: it maps
  // [B x Co x oh x ow] to [B x Ci x h x w].
  const Geometry g = conv_geometry(b, co, oh, ow, kh, kw, stride, padding);
  if (g.out_h != h || g.out_w != w) throw DimensionError("conv_transpose2d: inconsistent geometry");
  const std::size_t hw = h * w;

  auto xc = std::make_shared<Buffer>(ci * b * hw);
  nchw_to_cmajor(x.data().data(), b, ci, hw, xc->data());
  Buffer cols(g.rows() * g.cols());
  Map(cols.data(), g.rows(), g.cols()).noalias() =
      MapC(weight.data().data(), ci, g.rows()).transpose() * MapC(xc->data(), ci, g.cols());
  Buffer out(b * co * oh * ow, 0.0);
  col2im(cols.data(), g, out.data());
  if (bias.defined())
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t c = 0; c < co; ++c) {
        double* plane = out.data() + (n * co + c) * oh * ow;
        for (std::size_t p = 0; p < oh * ow; ++p) plane[p] += bias.data()[c];
      }

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_op_result(
      {b, co, oh, ow}, std::move(out), inputs,
      BackwardRule{[weight, xc, g, ci, co, hw](std::span<const double> grad, std::span<const std::span<double>> gi) {
        Buffer gcols(g.rows() * g.cols());
        im2col(grad.data(), g, gcols.data());
        MapC GC(gcols.data(), g.rows(), g.cols());
        if (!gi[1].empty()) Map(gi[1].data(), ci, g.rows()).noalias() += MapC(xc->data(), ci, g.cols()) * GC.transpose();
        if (!gi[0].empty()) {
          Buffer dxc(ci * g.cols());
          Map(dxc.data(), ci, g.cols()).noalias() = MapC(weight.data().data(), ci, g.rows()) * GC;
          cmajor_to_nchw_add(dxc.data(), g.batch, ci, hw, gi[0].data());
        }
        if (gi.size() > 2 && !gi[2].empty()) {
          const std::size_t plane = g.height * g.width;
          for (std::size_t n = 0; n < g.batch; ++n)
            for (std::size_t c = 0; c < co; ++c) {
              const double* src = grad.data() + (n * co + c) * plane;
              double s = 0.0;
              for (std::size_t p = 0; p < plane; ++p) s += src[p];
              gi[2][c] += s;
            }
        }
      }});
}

Tensor batch_norm(const Tensor& x, BatchNormParams& p, bool training) {
  require_nchw(x, "batch_norm");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (p.gamma.numel() != c || p.beta.numel() != c || p.running_mean.numel() != c || p.running_var.numel() != c) {
    throw DimensionError("batch_norm: parameters do not match " + std::to_string(c) + " channels");
  }
  const double count = static_cast<double>(b * hw);
  Buffer mu(c, 0.0), inv_sigma(c, 0.0);
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t n = 0; n < b; ++n) {
        const double* src = x.data().data() + (n * c + ch) * hw;
        for (std::size_t q = 0; q < hw; ++q) s += src[q];
      }
      const double m = s / count;
      double v = 0.0;
      for (std::size_t n = 0; n < b; ++n) {
        const double* src = x.data().data() + (n * c + ch) * hw;
        for (std::size_t q = 0; q < hw; ++q) v += (src[q] - m) * (src[q] - m);
      }
      v /= count;
      mu[ch] = m;
      inv_sigma[ch] = 1.0 / std::sqrt(v + p.eps);
      auto rm = p.running_mean.mutable_data();
      auto rv = p.running_var.mutable_data();
      rm[ch] = p.momentum * rm[ch] + (1.0 - p.momentum) * m;
      rv[ch] = p.momentum * rv[ch] + (1.0 - p.momentum) * v;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = p.running_mean.data()[ch];
      inv_sigma[ch] = 1.0 / std::sqrt(p.running_var.data()[ch] + p.eps);
    }
  }

  auto xhat = std::make_shared<Buffer>(x.numel());
  Buffer out(x.numel());
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (n * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q) {
        const double xh = (x.data()[base + q] - mu[ch]) * inv_sigma[ch];
        (*xhat)[base + q] = xh;
        out[base + q] = p.gamma.data()[ch] * xh + p.beta.data()[ch];
      }
    }

  Tensor gamma = p.gamma;
  return make_op_result(
      x.shape(), std::move(out), {x, p.gamma, p.beta},
      BackwardRule{[xhat, inv_sigma, gamma, b, c, hw, count, training](std::span<const double> g,
                                                                       std::span<const std::span<double>> gi) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t n = 0; n < b; ++n) {
            const std::size_t base = (n * c + ch) * hw;
            for (std::size_t q = 0; q < hw; ++q) {
              sg += g[base + q];
              sgx += g[base + q] * (*xhat)[base + q];
            }
          }
          if (!gi[1].empty()) gi[1][ch] += sgx;
          if (!gi[2].empty()) gi[2][ch] += sg;
          if (gi[0].empty()) continue;
          const double k = gamma.data()[ch] * inv_sigma[ch];
          const double mg = sg / count, mgx = sgx / count;
          for (std::size_t n = 0; n < b; ++n) {
            const std::size_t base = (n * c + ch) * hw;
            for (std::size_t q = 0; q < hw; ++q) {
              gi[0][base + q] += training ? k * (g[base + q] - mg - (*xhat)[base + q] * mgx) : k * g[base + q];
            }
          }
        }
      }});
}

Tensor global_avg_pool(const Tensor& x) {
  require_nchw(x, "global_avg_pool");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Buffer out(b * c, 0.0);
  for (std::size_t i = 0; i < b * c; ++i) {
    double s = 0.0;
    for (std::size_t q = 0; q < hw; ++q) s += x.data()[i * hw + q];
    out[i] = s / static_cast<double>(hw);
  }
  return make_op_result({b, c}, std::move(out), {x},
                        BackwardRule{[b, c, hw](std::span<const double> g, std::span<const std::span<double>> gi) {
                          const double inv = 1.0 / static_cast<double>(hw);
                          for (std::size_t i = 0; i < b * c; ++i)
                            for (std::size_t q = 0; q < hw; ++q) gi[0][i * hw + q] += g[i] * inv;
                        }});
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  Tensor y = matmul(x, p.weight);
  return p.bias.defined() ? add_rowvec(y, p.bias) : y;
}

Tensor conv_block(const Tensor& x, ConvBlockParams& p, bool training, bool activate) {
  Tensor y = p.transposed ? conv_transpose2d(x, p.kernel, p.bias, p.stride, p.padding)
                          : conv2d(x, p.kernel, p.bias, p.stride, p.padding);
  if (p.use_bn) y = batch_norm(y, p.bn, training);
  return activate ? leaky_relu(y, p.leaky_slope) : y;
}

ConvBlockParams make_conv_block(Rng& rng, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, bool use_bn,
                                bool transposed, double leaky_slope) {
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky slope must lie in (0,1)");
  ConvBlockParams p;
  p.use_bn = use_bn;
  p.transposed = transposed;
  p.leaky_slope = leaky_slope;
  const double taps = static_cast<double>(kernel * kernel) / (transposed ? 4.0 : 1.0);
  const double fan_in = static_cast<double>(in_ch) * taps;
  const double stddev = std::sqrt(2.0 / ((1.0 + leaky_slope * leaky_slope) * fan_in));
  const Shape shape = transposed ? Shape{in_ch, out_ch, kernel, kernel} : Shape{out_ch, in_ch, kernel, kernel};
  std::vector<double> w(shape_numel(shape));
  for (auto& v : w) v = rng.normal() * stddev;
  p.kernel = Tensor::from(shape, std::move(w), true);
  p.bias = Tensor::zeros({out_ch}, true);
  if (use_bn) {
    p.bn.gamma = Tensor::full({out_ch}, 1.0, true);
    p.bn.beta = Tensor::zeros({out_ch}, true);
    p.bn.running_mean = Tensor::zeros({out_ch});
    p.bn.running_var = Tensor::full({out_ch}, 1.0);
  }
  return p;
}

LinearParams make_linear(Rng& rng, std::size_t in, std::size_t out, double weight_std, double bias_value) {
  std::vector<double> w(in * out);
  for (auto& v : w) v = rng.normal() * weight_std;
  return {Tensor::from({in, out}, std::move(w), true), Tensor::full({out}, bias_value, true)};
}

void append_params(ParamList& out, const std::string& prefix, const ConvBlockParams& p) {
  out.push_back({prefix + "kernel", p.kernel});
  out.push_back({prefix + "bias", p.bias});
  if (p.use_bn) {
    out.push_back({prefix + "bn_gamma", p.bn.gamma});
    out.push_back({prefix + "bn_beta", p.bn.beta});
  }
}

void append_buffers(ParamList& out, const std::string& prefix, const ConvBlockParams& p) {
  if (!p.use_bn) return;
  out.push_back({prefix + "bn_running_mean", p.bn.running_mean});
  out.push_back({prefix + "bn_running_var", p.bn.running_var});
}

void append_params(ParamList& out, const std::string& prefix, const LinearParams& p) {
  out.push_back({prefix + "weight", p.weight});
  if (p.bias.defined()) out.push_back({prefix + "bias", p.bias});
}

void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamState& s) {
  if (params.size() != grads.size()) throw ContractError("adam_step: parameter and gradient counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].numel()) {
      throw DimensionError("adam_step: gradient size mismatch for parameter " + std::to_string(i));
    }
    for (double g : grads[i])
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter " + std::to_string(i));
  }
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), 0.0);
      s.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (s.m.size() != params.size()) throw ContractError("adam_step: state belongs to a different parameter list");

  s.t += 1;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    auto& m = s.m[i];
    auto& v = s.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
      v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      data[j] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    }
  }
}

Adam::Adam(ParamList params, double lr, double beta1, double beta2, double eps) : params_(std::move(params)) {
  state_.lr = lr;
  state_.beta1 = beta1;
  state_.beta2 = beta2;
  state_.eps = eps;
}

void Adam::step() {
  std::vector<Tensor> ts;
  std::vector<std::vector<double>> gs;
  ts.reserve(params_.size());
  gs.reserve(params_.size());
  for (auto& p : params_) {
    ts.push_back(p.tensor);
    gs.push_back(p.tensor.grad());
  }
  adam_step(ts, gs, state_);
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

ParamList Adam::state_tensors(const std::string& prefix) const {
  ParamList out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& shape = params_[i].tensor.shape();
    const bool init = !state_.m.empty();
    out.push_back({prefix + "m/" + params_[i].name,
                   init ? Tensor::from(shape, state_.m[i]) : Tensor::zeros(shape)});
    out.push_back({prefix + "v/" + params_[i].name,
                   init ? Tensor::from(shape, state_.v[i]) : Tensor::zeros(shape)});
  }
  return out;
}

void Adam::load_state_tensors(const std::string& prefix, const ParamList& stored, long long t) {
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& s : stored)
      if (s.name == name) return s.tensor;
    throw ContractError("optimizer state entry missing: " + name);
  };
  state_.m.clear();
  state_.v.clear();
  for (const auto& p : params_) {
    const Tensor& m = find(prefix + "m/" + p.name);
    const Tensor& v = find(prefix + "v/" + p.name);
    if (m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape()) {
      throw DimensionError("optimizer state shape mismatch for " + p.name);
    }
    state_.m.emplace_back(m.data().begin(), m.data().end());
    state_.v.emplace_back(v.data().begin(), v.data().end());
  }
  state_.t = t;
}

}  // namespace xmgan
