#pragma once

#include <memory>
#include <vector>

#include "tic/tensor.hpp"

namespace tic::ops {

// Elementwise, identical shapes only.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// Per-channel broadcast: `b` has one entry per index of `x` along `axis`.
Tensor add_channel(const Tensor& x, const Tensor& b, int axis);
Tensor mul_channel(const Tensor& x, const Tensor& b, int axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean of (a - b)^2 over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched product [B,M,K] x [B,K,N] (or [B,N,K] when transpose_b).
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
/// x[..., in] * W^T + bias, with W [out, in]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor softmax(const Tensor& x, int axis);
/// Normalizes every row of the last axis, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);

Tensor leaky_relu(const Tensor& x, double slope = 0.01);
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
/// out[i] = x[index[i]], or 0 where index[i] < 0. Backward scatters.
Tensor gather(const Tensor& x, Shape out_shape,
              std::shared_ptr<const std::vector<std::int64_t>> index);
Tensor narrow(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
Tensor concat(const std::vector<Tensor>& xs, int axis);
/// Generic axis permutation (out axis i = in axis perm[i]).
Tensor permute(const Tensor& x, const std::vector<int>& perm);

/// Zero-padded 2-D cross-correlation; x [N,Ci,H,W], w [Co,Ci,k,k], bias [Co] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
/// Adjoint of conv2d; w [Ci,Co,k,k] (same layout as the conv it transposes).
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                        int pad, int output_pad);

/// y_c = x_c / sqrt(beta_c + sum_j gamma_cj x_j^2); inverse multiplies instead.
Tensor gdn(const Tensor& x, const Tensor& beta, const Tensor& gamma, bool inverse);

/// P(value in [v-0.5, v+0.5]) under N(mu, sigma^2), elementwise.
Tensor gaussian_likelihood(const Tensor& v, const Tensor& mu, const Tensor& sigma);
/// sigmoid(upper) - sigmoid(lower), computed on the stable side of zero.
Tensor logistic_interval(const Tensor& lower, const Tensor& upper);
/// sum(-log2(max(p, floor))). Gradient passes below the floor (it only pushes p up).
Tensor neg_log2_sum(const Tensor& p, double floor);

}  // namespace tic::ops
