#include "xmgan/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "xmgan/errors.hpp"
#include "xmgan/nn.hpp"
#include "xmgan/ops.hpp"
#include "xmgan/rng.hpp"

namespace xmgan {

namespace {

constexpr std::size_t kWidths[] = {16, 32, 64, 64};
constexpr double kSlope = 0.2;

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat to_eigen(const std::vector<double>& v, std::size_t n) { return Eigen::Map<const Mat>(v.data(), n, n); }

Mat sqrt_psd(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

void require_finite(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("frechet_distance: non-finite ") + what);
}

}  // namespace

PerceptualExtractor::PerceptualExtractor(std::uint64_t seed, std::size_t in_channels) : seed_(seed) {
  Rng rng(seed);
  std::size_t in = in_channels;
  for (std::size_t out : kWidths) {
    const std::size_t fan_in = in * 9;
    const double std = std::sqrt(2.0 / ((1.0 + kSlope * kSlope) * static_cast<double>(fan_in)));
    weights_.push_back(Tensor::from({out, in, 3, 3}, rng.normal_vector(out * fan_in)));
    for (auto& w : weights_.back().mutable_data()) w *= std;
    std::vector<double> b(out);
    for (auto& x : b) x = rng.uniform(-0.1, 0.1);
    biases_.push_back(Tensor::from({out}, std::move(b)));
    in = out;
  }
}

Tensor PerceptualExtractor::features(const Tensor& images) const {
  if (images.rank() != 4) throw DimensionError("features: expected [N x C x H x W], got " + shape_str(images.shape()));
  // One image at a time: a batched GEMM may round an image differently
  // depending on its column position, and features must not depend on the batch.
  std::vector<Tensor> rows;
  rows.reserve(images.dim(0));
  for (std::size_t n = 0; n < images.dim(0); ++n) {
    Tensor h = images.dim(0) == 1 ? images : slice_rows(images, n, n + 1);
    for (std::size_t i = 0; i < weights_.size(); ++i) h = leaky_relu(conv2d(h, weights_[i], biases_[i], 2, 1), kSlope);
    rows.push_back(global_avg_pool(h));
  }
  return rows.size() == 1 ? rows[0] : concat_rows(rows);
}

Tensor PerceptualExtractor::feature_maps(const Tensor& images, std::size_t layers) const {
  if (images.rank() != 4) throw DimensionError("feature_maps: expected [N x C x H x W], got " + shape_str(images.shape()));
  if (layers == 0 || layers > weights_.size())
    throw ContractError("feature_maps: layer count must be in [1, " + std::to_string(weights_.size()) + "]");
  std::vector<Tensor> rows;
  rows.reserve(images.dim(0));
  for (std::size_t n = 0; n < images.dim(0); ++n) {
    Tensor h = images.dim(0) == 1 ? images : slice_rows(images, n, n + 1);
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < layers; ++i) {
      h = leaky_relu(conv2d(h, weights_[i], biases_[i], 2, 1), kSlope);
      parts.push_back(scale(reshape(h, {1, h.numel()}), 1.0 / std::sqrt(static_cast<double>(h.numel()))));
    }
    rows.push_back(parts.size() == 1 ? parts[0] : concat_cols(parts));
  }
  return rows.size() == 1 ? rows[0] : concat_rows(rows);
}

FeatureGaussian fit_gaussian(const Tensor& features) {
  if (features.rank() != 2) throw DimensionError("fit_gaussian: expected [N x F], got " + shape_str(features.shape()));
  const std::size_t n = features.dim(0), f = features.dim(1);
  if (n < 2) throw ContractError("fit_gaussian: need at least 2 samples, got " + std::to_string(n));
  Eigen::Map<const Mat> x(features.data().data(), n, f);
  Eigen::RowVectorXd mu = x.colwise().mean();
  Mat centered = x.rowwise() - mu;
  Mat cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  cov.diagonal().array() += 1e-6;
  FeatureGaussian g;
  g.mean.assign(mu.data(), mu.data() + f);
  g.cov.assign(cov.data(), cov.data() + f * f);
  return g;
}

double frechet_distance(const FeatureGaussian& a, const FeatureGaussian& b) {
  const std::size_t n = a.dim();
  if (b.dim() != n || a.cov.size() != n * n || b.cov.size() != n * n)
    throw DimensionError("frechet_distance: Gaussians of different dimension");
  require_finite(a.mean, "mean");
  require_finite(b.mean, "mean");
  require_finite(a.cov, "covariance");
  require_finite(b.cov, "covariance");

  double mean_term = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const Mat s1 = to_eigen(a.cov, n), s2 = to_eigen(b.cov, n);
  const Mat r1 = sqrt_psd(s1);
  const Mat cross = sqrt_psd(r1 * s2 * r1);
  const double d = mean_term + s1.trace() + s2.trace() - 2.0 * cross.trace();
  return std::max(d, 0.0);
}

double fid_lite(const Tensor& real_images, const Tensor& fake_images, const PerceptualExtractor& phi) {
  if (real_images.dim(0) < 2 || fake_images.dim(0) < 2) throw ContractError("fid_lite: need at least 2 images per side");
  NoGradScope no_grad;
  return frechet_distance(fit_gaussian(phi.features(real_images)), fit_gaussian(phi.features(fake_images)));
}

double mean_pairwise_distance(const Tensor& features) {
  const std::size_t n = features.dim(0), f = features.dim(1);
  if (n < 2) throw ContractError("lpips_lite: need at least 2 images, got " + std::to_string(n));
  Eigen::Map<const Mat> x(features.data().data(), n, f);
  Mat u = x;
  for (std::size_t i = 0; i < n; ++i) {
    const double norm = u.row(i).norm();
    if (norm > 0) u.row(i) /= norm;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) total += (u.row(i) - u.row(j)).norm();
  return total / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

double lpips_lite(const Tensor& images, const PerceptualExtractor& phi) {
  if (images.dim(0) < 2) throw ContractError("lpips_lite: need at least 2 images, got " + std::to_string(images.dim(0)));
  NoGradScope no_grad;
  return mean_pairwise_distance(phi.features(images));
}

}  // namespace xmgan
