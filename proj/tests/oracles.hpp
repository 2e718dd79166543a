#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "xmgan/cfb.hpp"
#include "xmgan/metrics.hpp"
#include "xmgan/rng.hpp"

// Dense-loop references for the fusion block and the Frechet distance,
// written independently of the autograd ops they check.
namespace xmgan::testing {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i * t.dim(1) + j);
  return m;
}

inline std::vector<double> flat(const Mat& m) {
  std::vector<double> out;
  for (const auto& row : m) out.insert(out.end(), row.begin(), row.end());
  return out;
}

inline Mat mat_mul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Per query position, per head: scores, softmax, weighted values.
inline Mat attention_oracle(const Tensor& hb_t, const Tensor& hr_t, const CrossAttentionParams& p) {
  const Mat hb = to_mat(hb_t), hr = to_mat(hr_t);
  const Mat q = mat_mul(hb, to_mat(p.wq)), k = mat_mul(hr, to_mat(p.wk)), v = mat_mul(hr, to_mat(p.wv));
  const std::size_t n = hb.size(), nr = hr.size(), D = hb[0].size(), d = D / p.heads;
  Mat r(n, std::vector<double>(D, 0.0));
  for (std::size_t m = 0; m < p.heads; ++m) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(nr);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < nr; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += q[i][m * d + c] * k[j][m * d + c];
        s[j] = dot / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < nr; ++j)
        for (std::size_t c = 0; c < d; ++c) r[i][m * d + c] += s[j] / z * v[j][m * d + c];
    }
  }
  Mat c = mat_mul(r, to_mat(p.w_out));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < D; ++j) c[i][j] += hb[i][j];
  return c;
}

inline std::vector<double> affine_row(const std::vector<double>& x, const LinearParams& p) {
  const std::size_t out = p.weight.dim(1);
  std::vector<double> y(out);
  for (std::size_t j = 0; j < out; ++j) {
    y[j] = p.bias.at(j);
    for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * p.weight.at(i * out + j);
  }
  return y;
}

inline std::vector<double> mapping_oracle(const Tensor& h_ref, double alpha, const Tensor& z, const MappingNetworkParams& p) {
  const Mat hr = to_mat(h_ref);
  const std::size_t D = p.psi_g.weight.dim(1);
  std::vector<double> g(D, 0.0);
  for (const auto& row : hr) {
    auto y = affine_row(row, p.psi_g);
    for (std::size_t j = 0; j < D; ++j) g[j] += y[j] / static_cast<double>(hr.size());
  }
  auto a = affine_row({alpha}, p.psi_alpha);
  auto zz = affine_row({z.data().begin(), z.data().end()}, p.psi_z);
  std::vector<double> w(D);
  for (std::size_t j = 0; j < D; ++j) w[j] = g[j] * a[j] + zz[j];
  return w;
}

inline Mat cln_oracle(const Mat& c, const std::vector<double>& w, const ClnParams& p) {
  Mat o = c;
  const std::size_t D = w.size();
  for (auto& row : o) {
    double mu = 0.0, var = 0.0;
    for (double x : row) mu += x / static_cast<double>(D);
    for (double x : row) var += (x - mu) * (x - mu) / static_cast<double>(D);
    const double sigma = std::sqrt(var + p.eps);
    for (std::size_t j = 0; j < D; ++j)
      row[j] = p.lambda_base.at(j) * w[j] * (row[j] - mu) / sigma + p.beta_base.at(j) * w[j];
  }
  return o;
}

inline Mat ffn_oracle(const Mat& o, const FfnParams& f, const std::vector<double>& w, const ClnParams& p) {
  Mat h = o;
  for (std::size_t i = 0; i < o.size(); ++i) {
    auto e = affine_row(o[i], f.expand);
    for (auto& x : e) x = x > 0 ? x : f.leaky_slope * x;
    auto c = affine_row(e, f.contract);
    for (std::size_t j = 0; j < c.size(); ++j) h[i][j] += c[j];
  }
  return cln_oracle(h, w, p);
}

inline Mat cfb_oracle(const Tensor& hb, const std::vector<Tensor>& refs, const std::vector<double>& alphas,
               const std::vector<Tensor>& zs, const CfbParams& p) {
  Mat f(hb.dim(0), std::vector<double>(hb.dim(1), 0.0));
  for (std::size_t i = 0; i < refs.size(); ++i) {
    auto w = mapping_oracle(refs[i], alphas[i], zs[i], p.mapping);
    Mat fi = ffn_oracle(cln_oracle(attention_oracle(hb, refs[i], p.attention), w, p.cln1), p.ffn, w, p.cln2);
    for (std::size_t r = 0; r < f.size(); ++r)
      for (std::size_t c = 0; c < f[0].size(); ++c) f[r][c] += alphas[i] * fi[r][c];
  }
  return f;
}

inline void randomize(Rng& rng, Tensor& t, double stddev = 0.5) {
  for (auto& x : t.mutable_data()) x = rng.normal() * stddev;
}

// Random parameters everywhere, including the modulation affine vectors.
inline CfbParams random_cfb(Rng& rng, std::size_t D, std::size_t heads, std::size_t Z) {
  CfbParams p = make_cfb_params(rng, D, heads, Z);
  for (ClnParams* c : {&p.cln1, &p.cln2}) {
    randomize(rng, c->lambda_base);
    randomize(rng, c->beta_base);
  }
  randomize(rng, p.mapping.psi_alpha.bias);
  randomize(rng, p.mapping.psi_g.bias);
  randomize(rng, p.mapping.psi_z.bias);
  randomize(rng, p.ffn.expand.bias);
  randomize(rng, p.ffn.contract.bias);
  return p;
}

inline FeatureGaussian random_gaussian(Rng& rng, std::size_t n) {
  Eigen::MatrixXd a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = rng.normal();
  Eigen::MatrixXd cov = a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(n, n);
  FeatureGaussian g;
  g.mean = rng.normal_vector(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) g.cov.push_back(cov(i, j));
  return g;
}

// Tr((S1 S2)^(1/2)) from the eigenvalues of the non-symmetric product.
inline double frechet_oracle(const FeatureGaussian& a, const FeatureGaussian& b) {
  const std::size_t n = a.dim();
  Eigen::MatrixXd s1(n, n), s2(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      s1(i, j) = a.cov[i * n + j];
      s2(i, j) = b.cov[i * n + j];
    }
  Eigen::EigenSolver<Eigen::MatrixXd> es(s1 * s2);
  double tr_sqrt = 0.0;
  for (std::size_t i = 0; i < n; ++i) tr_sqrt += std::sqrt(std::max(es.eigenvalues()[i].real(), 0.0));
  double m = 0.0;
  for (std::size_t i = 0; i < n; ++i) m += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  return m + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
}

}  // namespace xmgan::testing
