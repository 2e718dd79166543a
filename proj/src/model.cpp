#include "xmgan/model.hpp"

#include <cmath>

#include "xmgan/errors.hpp"
#include "xmgan/ops.hpp"

namespace xmgan {

std::vector<std::size_t> ModelConfig::widths() const {
  std::vector<std::size_t> w(depth);
  for (std::size_t i = 0; i < depth; ++i) w[i] = std::max<std::size_t>(width >> (depth - 1 - i), 1);
  return w;
}

void validate(const ModelConfig& c) {
  if (c.depth == 0 || c.width == 0 || c.noise_dim == 0 || c.classes == 0)
    throw ConfigError("model depth, width, noise_dim and classes must be positive");
  if (c.image_size == 0 || c.image_size % (std::size_t{1} << c.depth) != 0) {
    throw ConfigError("image size " + std::to_string(c.image_size) + " is not divisible by 2^depth = " +
                      std::to_string(std::size_t{1} << c.depth));
  }
  if (c.heads == 0 || c.width % c.heads != 0) {
    throw ConfigError("width " + std::to_string(c.width) + " is not divisible by " + std::to_string(c.heads) +
                      " heads");
  }
}

Model make_model(const ModelConfig& config) {
  validate(config);
  Model m;
  m.config = config;
  Rng rng(derive_seed(config.seed, 0x6d6f64656c));
  const auto w = config.widths();

  std::size_t in = 3;
  for (std::size_t i = 0; i < config.depth; ++i) {
    m.gen.encoder.push_back(make_conv_block(rng, in, w[i], 4, true, false));
    in = w[i];
  }
  m.gen.cfb = make_cfb_params(rng, config.width, config.heads, config.noise_dim);
  for (std::size_t i = config.depth; i-- > 0;) {
    const bool last = i == 0;
    const std::size_t out = last ? 3 : w[i - 1];
    m.gen.decoder.push_back(make_conv_block(rng, w[i], out, 4, !last, true));
  }
  // A small output layer starts the generator at near-flat images instead of
  // saturated tanh noise.
  for (double& v : m.gen.decoder.back().kernel.mutable_data()) v *= 0.05;

  in = 3;
  for (std::size_t i = 0; i < config.depth; ++i) {
    m.disc.trunk.push_back(make_conv_block(rng, in, w[i], 4, i > 0, false));
    in = w[i];
  }
  const std::size_t flat = config.width * config.token_side() * config.token_side();
  const double head_std = 1.0 / std::sqrt(static_cast<double>(flat));
  m.disc.adv_head = make_linear(rng, flat, 1, head_std);
  m.disc.cls_head = make_linear(rng, flat, config.classes, head_std);
  return m;
}

ParamList generator_params(const Model& m) {
  ParamList out;
  for (std::size_t i = 0; i < m.gen.encoder.size(); ++i)
    append_params(out, "gen.enc" + std::to_string(i) + ".", m.gen.encoder[i]);
  append_params(out, "gen.cfb.", m.gen.cfb);
  for (std::size_t i = 0; i < m.gen.decoder.size(); ++i)
    append_params(out, "gen.dec" + std::to_string(i) + ".", m.gen.decoder[i]);
  return out;
}

ParamList discriminator_params(const Model& m) {
  ParamList out;
  for (std::size_t i = 0; i < m.disc.trunk.size(); ++i)
    append_params(out, "disc.trunk" + std::to_string(i) + ".", m.disc.trunk[i]);
  append_params(out, "disc.adv.", m.disc.adv_head);
  append_params(out, "disc.cls.", m.disc.cls_head);
  return out;
}

ParamList model_buffers(const Model& m) {
  ParamList out;
  for (std::size_t i = 0; i < m.gen.encoder.size(); ++i)
    append_buffers(out, "gen.enc" + std::to_string(i) + ".", m.gen.encoder[i]);
  for (std::size_t i = 0; i < m.gen.decoder.size(); ++i)
    append_buffers(out, "gen.dec" + std::to_string(i) + ".", m.gen.decoder[i]);
  for (std::size_t i = 0; i < m.disc.trunk.size(); ++i)
    append_buffers(out, "disc.trunk" + std::to_string(i) + ".", m.disc.trunk[i]);
  return out;
}

Tensor encode(const Tensor& images, Generator& g, bool training) {
  Tensor h = images;
  for (auto& block : g.encoder) h = conv_block(h, block, training);
  return h;
}

Tensor decode(const Tensor& tokens, std::size_t batch, Generator& g, const ModelConfig& c, bool training) {
  const std::size_t side = c.token_side();
  Tensor h = tokens_to_nchw(tokens, batch, side, side);
  for (std::size_t i = 0; i < g.decoder.size(); ++i) {
    const bool last = i + 1 == g.decoder.size();
    h = conv_block(h, g.decoder[i], training, !last);
  }
  return tanh_act(h);
}

Tensor generate(std::span<const Episode> episodes, Model& m, Modulation mode, bool training) {
  if (episodes.empty()) throw ContractError("generate: no episodes");
  const std::size_t batch = episodes.size();
  const std::size_t refs = episodes[0].refs.size();
  if (refs == 0) throw ContractError("generate: episodes need K >= 2 images (no references given)");
  std::vector<Tensor> images;
  images.reserve(batch * (1 + refs));
  for (const auto& e : episodes) images.push_back(e.base);
  for (const auto& e : episodes) {
    if (e.refs.size() != refs || e.alphas.size() != refs || e.z_list.size() != refs) {
      throw ContractError("generate: every episode needs " + std::to_string(refs) +
                          " references with matching alphas and noise vectors");
    }
    images.insert(images.end(), e.refs.begin(), e.refs.end());
  }

  const Tensor tokens = nchw_to_tokens(encode(stack_images(images), m.gen, training));
  const std::size_t n = m.config.token_side() * m.config.token_side();
  std::vector<Tensor> fused;
  fused.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor h_base = slice_rows(tokens, b * n, (b + 1) * n);
    std::vector<Tensor> h_refs;
    for (std::size_t i = 0; i < refs; ++i) {
      const std::size_t row = (batch + b * refs + i) * n;
      h_refs.push_back(slice_rows(tokens, row, row + n));
    }
    const Tensor alphas = Tensor::from({refs}, episodes[b].alphas);
    fused.push_back(cfb_forward(h_base, h_refs, alphas, episodes[b].z_list, m.gen.cfb, mode));
  }
  return decode(batch == 1 ? fused[0] : concat_rows(fused), batch, m.gen, m.config, training);
}

DiscriminatorOutput discriminate(const Tensor& images, Model& m, bool training) {
  Tensor h = images;
  for (auto& block : m.disc.trunk) h = conv_block(h, block, training);
  const std::size_t batch = h.dim(0);
  Tensor flat = reshape(h, {batch, h.numel() / batch});
  return {reshape(linear(flat, m.disc.adv_head), {batch}), linear(flat, m.disc.cls_head)};
}

Tensor hinge_d_loss(const Tensor& d_real, const Tensor& d_fake) {
  return add(mean(relu(add_scalar(scale(d_real, -1.0), 1.0))), mean(relu(add_scalar(d_fake, 1.0))));
}

Tensor hinge_g_loss(const Tensor& d_fake) { return scale(mean(d_fake), -1.0); }

Tensor classification_loss(const Tensor& cls_logits, std::span<const int> labels) {
  return cross_entropy(cls_logits, labels);
}

Tensor perceptual_loss(const Tensor& fake_features, std::span<const Tensor> ref_features,
                       std::span<const Tensor> weights) {
  if (ref_features.size() != weights.size() || ref_features.empty()) {
    throw ContractError("perceptual_loss: " + std::to_string(ref_features.size()) + " references but " +
                        std::to_string(weights.size()) + " weight vectors");
  }
  const double inv_batch = 1.0 / static_cast<double>(fake_features.dim(0));
  Tensor total;
  for (std::size_t i = 0; i < ref_features.size(); ++i) {
    if (weights[i].numel() != fake_features.dim(0))
      throw ContractError("perceptual_loss: weight vector " + std::to_string(i) + " does not match the batch");
    Tensor term = scale(sum(mul(row_norms(sub(fake_features, ref_features[i])), weights[i])), inv_batch);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor perceptual_loss(const Tensor& x_hat, std::span<const Tensor> refs, std::span<const double> alphas,
                       const PerceptualExtractor& phi) {
  if (refs.size() != alphas.size()) {
    throw ContractError("perceptual_loss: " + std::to_string(refs.size()) + " references but " +
                        std::to_string(alphas.size()) + " alphas");
  }
  const Tensor x = x_hat.rank() == 3 ? reshape(x_hat, {1, x_hat.dim(0), x_hat.dim(1), x_hat.dim(2)}) : x_hat;
  const Tensor fake = phi.features(x);
  std::vector<Tensor> ref_feats, weights;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const Tensor r = refs[i];
    ref_feats.push_back(phi.features(reshape(r, {1, r.dim(0), r.dim(1), r.dim(2)})));
    weights.push_back(Tensor::from({1}, {alphas[i]}));
  }
  return perceptual_loss(fake, ref_feats, weights);
}

double total_g_loss(const LossParts& parts, const LossWeights& w) {
  const std::pair<const char*, double> named[] = {{"l_adv_g", parts.adv}, {"l_p", parts.p}, {"l_cl", parts.cl}};
  for (const auto& [name, v] : named)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss term ") + name);
  return parts.adv + (w.eta_p * parts.p + w.eta_cl * parts.cl);
}

Tensor total_g_loss(const Tensor& adv, const Tensor& p, const Tensor& cl, const LossWeights& w) {
  return add(adv, add(scale(p, w.eta_p), scale(cl, w.eta_cl)));
}

}  // namespace xmgan
