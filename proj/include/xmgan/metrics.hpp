#pragma once

#include <cstdint>
#include <vector>

#include "xmgan/tensor.hpp"

// Image metrics on features from a fixed random convolutional extractor:
// a Frechet distance between feature Gaussians (lower is closer to the real
// set) and mean pairwise feature distance (higher is more diverse).
namespace xmgan {

inline constexpr std::uint64_t kDefaultExtractorSeed = 0x5eed'f00d;

// Frozen 4-layer stride-2 conv stack + leaky ReLU + global average pooling.
class PerceptualExtractor {
 public:
  explicit PerceptualExtractor(std::uint64_t seed = kDefaultExtractorSeed, std::size_t in_channels = 3);

  // images: [N x C x H x W] in [-1, 1] -> [N x F]. Differentiable w.r.t. images.
  Tensor features(const Tensor& images) const;

  // Activation maps of the first `layers` conv layers, each flattened and
  // scaled by 1/sqrt(its size), concatenated: [N x M]. Spatial, so it pins
  // down image content far more tightly than the pooled features.
  Tensor feature_maps(const Tensor& images, std::size_t layers) const;
  std::size_t layer_count() const { return weights_.size(); }

  std::size_t feature_dim() const { return weights_.back().dim(0); }
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::vector<Tensor> weights_, biases_;
};

inline Tensor extract_features(const Tensor& images, const PerceptualExtractor& phi) { return phi.features(images); }

struct FeatureGaussian {
  std::vector<double> mean;  // [F]
  std::vector<double> cov;   // [F x F], row-major
  std::size_t dim() const { return mean.size(); }
};

// Mean and unbiased covariance (+ 1e-6 I) of feature rows. Needs N >= 2.
FeatureGaussian fit_gaussian(const Tensor& features);

// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the square root taken as
// S1^(1/2) S2 S1^(1/2) through symmetric eigendecompositions clipped at 0.
double frechet_distance(const FeatureGaussian& a, const FeatureGaussian& b);

double fid_lite(const Tensor& real_images, const Tensor& fake_images, const PerceptualExtractor& phi);

// Mean over unordered pairs of |u_i - u_j| where u are unit-normalised features.
double lpips_lite(const Tensor& images, const PerceptualExtractor& phi);
double mean_pairwise_distance(const Tensor& features);

}  // namespace xmgan
