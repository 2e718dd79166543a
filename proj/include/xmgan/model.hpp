#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xmgan/cfb.hpp"
#include "xmgan/metrics.hpp"
#include "xmgan/nn.hpp"
#include "xmgan/synth_data.hpp"

// Few-shot generator (encoder -> fusion block -> decoder), the discriminator
// with adversarial and auxiliary-class heads, and the training losses.
namespace xmgan {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t depth = 3;      // stride-2 blocks in encoder, decoder and discriminator
  std::size_t width = 64;     // encoder output channels D
  std::size_t heads = 4;
  std::size_t noise_dim = 32;
  std::size_t classes = 5;    // seen classes for the auxiliary head
  std::uint64_t seed = 0;

  std::size_t token_side() const { return image_size >> depth; }
  std::vector<std::size_t> widths() const;  // per encoder block, ending at `width`
};

void validate(const ModelConfig& c);

struct Generator {
  std::vector<ConvBlockParams> encoder;
  CfbParams cfb;
  std::vector<ConvBlockParams> decoder;  // last block: no BN, tanh output
};

struct Discriminator {
  std::vector<ConvBlockParams> trunk;  // first block without BN
  LinearParams adv_head;               // -> 1
  LinearParams cls_head;               // -> classes
};

struct Model {
  ModelConfig config;
  Generator gen;
  Discriminator disc;
};

Model make_model(const ModelConfig& config);

ParamList generator_params(const Model& m);
ParamList discriminator_params(const Model& m);
ParamList model_buffers(const Model& m);  // batch-norm running statistics

// [N x 3 x H x W] -> [N x D x h x w]
Tensor encode(const Tensor& images, Generator& g, bool training);
// [B * n x D] fused tokens -> [B x 3 x H x W] in [-1, 1]
Tensor decode(const Tensor& tokens, std::size_t batch, Generator& g, const ModelConfig& c, bool training);

// One generated image per episode, using each episode's alphas and z_list.
// All episodes must have the same number of references (>= 1).
Tensor generate(std::span<const Episode> episodes, Model& m, Modulation mode, bool training);

struct DiscriminatorOutput {
  Tensor score;       // [B], raw
  Tensor cls_logits;  // [B x classes]
};
DiscriminatorOutput discriminate(const Tensor& images, Model& m, bool training);

Tensor hinge_d_loss(const Tensor& d_real, const Tensor& d_fake);
Tensor hinge_g_loss(const Tensor& d_fake);
Tensor classification_loss(const Tensor& cls_logits, std::span<const int> labels);

// sum_i weights[i] * mean_b |phi(x_hat_b) - phi(ref_i,b)|, with
// fake_features [B x F], ref_features[i] [B x F], weights[i] [B].
Tensor perceptual_loss(const Tensor& fake_features, std::span<const Tensor> ref_features,
                       std::span<const Tensor> weights);
// Single-image form: x_hat [1 x 3 x H x W] or [3 x H x W], refs [3 x H x W].
Tensor perceptual_loss(const Tensor& x_hat, std::span<const Tensor> refs, std::span<const double> alphas,
                       const PerceptualExtractor& phi);

struct LossWeights {
  double eta_p = 50.0;
  double eta_cl = 1.0;
};

struct LossParts {
  double adv = 0.0;  // generator adversarial term
  double p = 0.0;
  double cl = 0.0;
};

// adv + eta_p * p + eta_cl * cl. Throws NumericError naming a non-finite part.
double total_g_loss(const LossParts& parts, const LossWeights& w);
Tensor total_g_loss(const Tensor& adv, const Tensor& p, const Tensor& cl, const LossWeights& w);

struct LossReport {
  long long step = 0;
  double l_adv_d = 0.0;
  double l_adv_g = 0.0;
  double l_p = 0.0;
  double l_cl = 0.0;
  double total = 0.0;
};

}  // namespace xmgan
