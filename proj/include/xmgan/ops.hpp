#pragma once

#include <span>
#include <vector>

#include "xmgan/tensor.hpp"

// Differentiable tensor ops. Broadcasting is limited to what the model needs:
// scalar ops, and a rank-1 vector applied to every row of a matrix
// (add_rowvec / mul_rowvec). Everything else requires equal shapes.
namespace xmgan {

// Runs backward on the current tape.
void backward(const Tensor& loss);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m x k] * [k x n]
Tensor transpose(const Tensor& a);                // rank-2 only

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor add_rowvec(const Tensor& a, const Tensor& v);  // a[m x n] + v[n] per row
Tensor mul_rowvec(const Tensor& a, const Tensor& v);  // a[m x n] * v[n] per row

Tensor sum(const Tensor& a);   // scalar
Tensor mean(const Tensor& a);  // scalar
Tensor mean_rows(const Tensor& a);  // [m x n] -> [n], average over rows

Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor tanh_act(const Tensor& a);

// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& a);

// Per-row standardisation (x - mean) / sqrt(var + eps), population variance.
Tensor layer_norm_rows(const Tensor& a, double eps);

Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);  // rank-2
Tensor concat_cols(std::span<const Tensor> parts);                        // rank-2
// Slicing and concatenation along dimension 0, any rank.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);

// Euclidean norm of each row: [m x n] -> [m]. The gradient at a zero row is 0.
Tensor row_norms(const Tensor& a);
Tensor l2_norm(const Tensor& a);

// Mean cross-entropy of logits [B x C] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// sum_i w[i] * xs[i]; all xs share one shape, w has xs.size() entries.
Tensor weighted_sum(std::span<const Tensor> xs, const Tensor& w);

// [B x C x H x W] <-> [B*H*W x C] (one row per spatial position).
Tensor nchw_to_tokens(const Tensor& x);
Tensor tokens_to_nchw(const Tensor& t, std::size_t batch, std::size_t height, std::size_t width);

}  // namespace xmgan
