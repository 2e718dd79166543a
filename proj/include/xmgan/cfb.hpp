#pragma once

#include <span>
#include <vector>

#include "xmgan/nn.hpp"
#include "xmgan/tensor.hpp"

// Controllable fusion block: cross-attention from the base image's tokens to
// each reference image's tokens, meta-weight modulated layer normalisation,
// a point-wise FFN, and alpha-weighted fusion over references.
//
// Feature maps are token matrices [n x D]: one row per spatial position.
namespace xmgan {

// Where the modulation meta-weights come from.
enum class Modulation {
  kFull,       // w = g_ref * psi_alpha(alpha) + psi_z(z)
  kNoiseOnly,  // w = psi_z(z)
  kIdentity,   // w = 1: plain layer norm with learnable affine
};

struct CrossAttentionParams {
  // Column block [m*d, (m+1)*d) of wq/wk/wv is the projection of head m.
  Tensor wq, wk, wv;  // [D x D]
  Tensor w_out;       // [D x D]
  std::size_t heads = 4;
};

struct MappingNetworkParams {
  LinearParams psi_alpha;  // 1 -> D
  LinearParams psi_z;      // Z -> D
  LinearParams psi_g;      // D -> D, followed by average pooling over tokens
};

struct ClnParams {
  Tensor lambda_base;  // [D]
  Tensor beta_base;    // [D]
  double eps = 1e-5;
};

struct FfnParams {
  LinearParams expand;    // D -> 4D
  LinearParams contract;  // 4D -> D
  double leaky_slope = 0.2;
};

struct CfbParams {
  CrossAttentionParams attention;
  MappingNetworkParams mapping;
  ClnParams cln1, cln2;
  FfnParams ffn;

  std::size_t width() const { return attention.w_out.dim(0); }
  std::size_t noise_dim() const { return mapping.psi_z.weight.dim(0); }
};

CfbParams make_cfb_params(Rng& rng, std::size_t width, std::size_t heads, std::size_t noise_dim);
void append_params(ParamList& out, const std::string& prefix, const CfbParams& p);

// c = concat_m(softmax(q_m k_m^T / sqrt(d)) v_m) W + h_b, queries from the base,
// keys and values from the reference. If `attention` is given it receives the
// per-head attention matrices [n x n].
Tensor cross_attention(const Tensor& h_base, const Tensor& h_ref, const CrossAttentionParams& p,
                       std::vector<Tensor>* attention = nullptr);

// Meta-weights [D] for one reference. `z` has the mapping network's noise width.
Tensor mapping_network(const Tensor& h_ref, double alpha, const Tensor& z, const MappingNetworkParams& p,
                       Modulation mode = Modulation::kFull);

// lambda(w) * (c - mu) / sigma + beta(w), statistics per token over channels,
// with lambda(w) = lambda_base * w and beta(w) = beta_base * w.
Tensor cln(const Tensor& c, const Tensor& w, const ClnParams& p);

// cln2(o + FFN(o), w); the FFN acts on each token independently.
Tensor ffn_refine(const Tensor& o, const FfnParams& ffn, const Tensor& w, const ClnParams& cln2);

// sum_i alphas[i] * features[i]
Tensor fuse(std::span<const Tensor> features, const Tensor& alphas);

// Full block for one episode: per reference cross_attention -> cln -> ffn_refine,
// then fuse. One noise vector per reference.
Tensor cfb_forward(const Tensor& h_base, std::span<const Tensor> h_refs, const Tensor& alphas,
                   std::span<const Tensor> z_list, const CfbParams& p, Modulation mode = Modulation::kFull);

}  // namespace xmgan
