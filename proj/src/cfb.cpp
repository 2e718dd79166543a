#include "xmgan/cfb.hpp"

#include <cmath>

#include "xmgan/errors.hpp"
#include "xmgan/ops.hpp"

namespace xmgan {

namespace {

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal() * stddev;
  return Tensor::from({rows, cols}, std::move(v), true);
}

Tensor as_vector(const Tensor& row) { return reshape(row, {row.numel()}); }

}  // namespace

CfbParams make_cfb_params(Rng& rng, std::size_t width, std::size_t heads, std::size_t noise_dim) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("CFB width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const double d = static_cast<double>(width);
  CfbParams p;
  p.attention.heads = heads;
  p.attention.wq = random_matrix(rng, width, width, 1.0 / std::sqrt(d));
  p.attention.wk = random_matrix(rng, width, width, 1.0 / std::sqrt(d));
  p.attention.wv = random_matrix(rng, width, width, 1.0 / std::sqrt(d));
  p.attention.w_out = random_matrix(rng, width, width, 1.0 / std::sqrt(d));

  // Initialised so that w starts near 1 with a small noise-driven spread.
  p.mapping.psi_alpha = make_linear(rng, 1, width, 0.1, 1.0);
  p.mapping.psi_g = make_linear(rng, width, width, 0.1 / std::sqrt(d), 1.0);
  p.mapping.psi_z = make_linear(rng, noise_dim, width, 0.3 / std::sqrt(static_cast<double>(noise_dim)), 0.0);

  for (ClnParams* c : {&p.cln1, &p.cln2}) {
    c->lambda_base = Tensor::full({width}, 1.0, true);
    c->beta_base = Tensor::zeros({width}, true);
  }
  p.ffn.expand = make_linear(rng, width, 4 * width, std::sqrt(2.0 / d), 0.0);
  p.ffn.contract = make_linear(rng, 4 * width, width, 0.5 / std::sqrt(4.0 * d), 0.0);
  return p;
}

void append_params(ParamList& out, const std::string& prefix, const CfbParams& p) {
  out.push_back({prefix + "attn.wq", p.attention.wq});
  out.push_back({prefix + "attn.wk", p.attention.wk});
  out.push_back({prefix + "attn.wv", p.attention.wv});
  out.push_back({prefix + "attn.w_out", p.attention.w_out});
  append_params(out, prefix + "map.psi_alpha.", p.mapping.psi_alpha);
  append_params(out, prefix + "map.psi_z.", p.mapping.psi_z);
  append_params(out, prefix + "map.psi_g.", p.mapping.psi_g);
  out.push_back({prefix + "cln1.lambda", p.cln1.lambda_base});
  out.push_back({prefix + "cln1.beta", p.cln1.beta_base});
  out.push_back({prefix + "cln2.lambda", p.cln2.lambda_base});
  out.push_back({prefix + "cln2.beta", p.cln2.beta_base});
  append_params(out, prefix + "ffn.expand.", p.ffn.expand);
  append_params(out, prefix + "ffn.contract.", p.ffn.contract);
}

Tensor cross_attention(const Tensor& h_base, const Tensor& h_ref, const CrossAttentionParams& p,
                       std::vector<Tensor>* attention) {
  const std::size_t width = p.w_out.dim(0);
  if (p.heads == 0 || width % p.heads != 0) {
    throw ConfigError("cross_attention: width " + std::to_string(width) + " not divisible by " +
                      std::to_string(p.heads) + " heads");
  }
  if (h_base.rank() != 2 || h_base.dim(1) != width || h_ref.rank() != 2 || h_ref.dim(1) != width) {
    throw DimensionError("cross_attention: features " + shape_str(h_base.shape()) + " / " +
                         shape_str(h_ref.shape()) + " for width " + std::to_string(width));
  }
  const std::size_t d = width / p.heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor q = matmul(h_base, p.wq);
  Tensor k = matmul(h_ref, p.wk);
  Tensor v = matmul(h_ref, p.wv);
  std::vector<Tensor> heads;
  heads.reserve(p.heads);
  if (attention) attention->clear();
  for (std::size_t m = 0; m < p.heads; ++m) {
    Tensor qm = slice_cols(q, m * d, (m + 1) * d);
    Tensor km = slice_cols(k, m * d, (m + 1) * d);
    Tensor vm = slice_cols(v, m * d, (m + 1) * d);
    Tensor a = softmax_rows(scale(matmul(qm, transpose(km)), inv_sqrt_d));
    if (attention) attention->push_back(a);
    heads.push_back(matmul(a, vm));
  }
  return add(matmul(concat_cols(heads), p.w_out), h_base);
}

Tensor mapping_network(const Tensor& h_ref, double alpha, const Tensor& z, const MappingNetworkParams& p,
                       Modulation mode) {
  const std::size_t width = p.psi_g.weight.dim(1);
  if (mode == Modulation::kIdentity) return Tensor::full({width}, 1.0);

  if (z.numel() != p.psi_z.weight.dim(0)) {
    throw DimensionError("mapping_network: noise of size " + std::to_string(z.numel()) + ", expected " +
                         std::to_string(p.psi_z.weight.dim(0)));
  }
  Tensor noise_term = as_vector(linear(reshape(z, {1, z.numel()}), p.psi_z));
  if (mode == Modulation::kNoiseOnly) return noise_term;

  Tensor g_ref = mean_rows(linear(h_ref, p.psi_g));
  Tensor alpha_term = as_vector(linear(Tensor::from({1, 1}, {alpha}), p.psi_alpha));
  return add(mul(g_ref, alpha_term), noise_term);
}

Tensor cln(const Tensor& c, const Tensor& w, const ClnParams& p) {
  Tensor normalized = layer_norm_rows(c, p.eps);
  return add_rowvec(mul_rowvec(normalized, mul(p.lambda_base, w)), mul(p.beta_base, w));
}

Tensor ffn_refine(const Tensor& o, const FfnParams& ffn, const Tensor& w, const ClnParams& cln2) {
  Tensor hidden = leaky_relu(linear(o, ffn.expand), ffn.leaky_slope);
  return cln(add(o, linear(hidden, ffn.contract)), w, cln2);
}

Tensor fuse(std::span<const Tensor> features, const Tensor& alphas) {
  if (features.size() != alphas.numel()) {
    throw ContractError("fuse: " + std::to_string(features.size()) + " feature maps but " +
                        std::to_string(alphas.numel()) + " control weights");
  }
  return weighted_sum(features, alphas);
}

Tensor cfb_forward(const Tensor& h_base, std::span<const Tensor> h_refs, const Tensor& alphas,
                   std::span<const Tensor> z_list, const CfbParams& p, Modulation mode) {
  if (h_refs.empty()) throw ContractError("cfb_forward: no reference features");
  if (h_refs.size() != alphas.numel() || h_refs.size() != z_list.size()) {
    throw ContractError("cfb_forward: " + std::to_string(h_refs.size()) + " references, " +
                        std::to_string(alphas.numel()) + " alphas, " + std::to_string(z_list.size()) +
                        " noise vectors");
  }
  std::vector<Tensor> fused_inputs;
  fused_inputs.reserve(h_refs.size());
  for (std::size_t i = 0; i < h_refs.size(); ++i) {
    Tensor w = mapping_network(h_refs[i], alphas.data()[i], z_list[i], p.mapping, mode);
    Tensor c = cross_attention(h_base, h_refs[i], p.attention);
    Tensor o = cln(c, w, p.cln1);
    fused_inputs.push_back(ffn_refine(o, p.ffn, w, p.cln2));
  }
  return fuse(fused_inputs, alphas);
}

}  // namespace xmgan
