#pragma once

#include <string>
#include <vector>

#include "xmgan/rng.hpp"
#include "xmgan/tensor.hpp"

namespace xmgan {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

// Cross-correlation over NCHW input. weight: [Co x Ci x kh x kw], bias: [Co]
// or undefined. Output spatial size is floor((H + 2p - k) / stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);

// Adjoint of conv2d (fractionally strided convolution). weight: [Ci x Co x kh x kw].
// Output spatial size is (H - 1) * stride - 2p + k.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                        std::size_t padding);

struct BatchNormParams {
  Tensor gamma, beta;                   // learnable, [C]
  Tensor running_mean, running_var;     // buffers, [C]
  double momentum = 0.9;                // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-5;
};

// Training mode normalises with the batch statistics (population variance)
// and updates the running buffers in place; eval mode uses the buffers.
Tensor batch_norm(const Tensor& x, BatchNormParams& p, bool training);

Tensor global_avg_pool(const Tensor& x);  // [B x C x H x W] -> [B x C]

struct LinearParams {
  Tensor weight;  // [in x out], y = x W + b
  Tensor bias;    // [out]
};
Tensor linear(const Tensor& x, const LinearParams& p);  // x: [B x in]

// conv (or transposed conv) -> optional batch norm -> optional leaky ReLU.
struct ConvBlockParams {
  Tensor kernel;
  Tensor bias;
  bool use_bn = true;
  BatchNormParams bn;
  double leaky_slope = 0.2;
  bool transposed = false;
  std::size_t stride = 2;
  std::size_t padding = 1;
};

Tensor conv_block(const Tensor& x, ConvBlockParams& p, bool training, bool activate = true);

// Fan-in scaled normal init for leaky-ReLU networks; gamma = 1, beta = 0.
ConvBlockParams make_conv_block(Rng& rng, std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                                bool use_bn, bool transposed, double leaky_slope = 0.2);
LinearParams make_linear(Rng& rng, std::size_t in, std::size_t out, double weight_std, double bias_value = 0.0);

void append_params(ParamList& out, const std::string& prefix, const ConvBlockParams& p);
void append_buffers(ParamList& out, const std::string& prefix, const ConvBlockParams& p);
void append_params(ParamList& out, const std::string& prefix, const LinearParams& p);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long long t = 0;
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update. Throws NumericError, leaving params and
// state untouched, if any gradient is non-finite.
void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamState& state);

// Adam bound to a parameter list; reads gradients from the tensors.
class Adam {
 public:
  Adam(ParamList params, double lr, double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();

  const ParamList& params() const { return params_; }
  AdamState& state() { return state_; }
  const AdamState& state() const { return state_; }

  // Moments exposed as named tensors for checkpointing ("<prefix>m/<name>", ...).
  ParamList state_tensors(const std::string& prefix) const;
  void load_state_tensors(const std::string& prefix, const ParamList& stored, long long t);

 private:
  ParamList params_;
  AdamState state_;
};

}  // namespace xmgan
