#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tic/rng.hpp"
#include "tic/tensor.hpp"

namespace tic::nn {

/// Name → parameter handle. Handles share storage with the owning layer.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

/// Conv(k,s) or Tconv(k,s) with zero padding k/2.
///
/// Kernel layout is [C_out, C_in, k, k] for a forward conv and
/// [C_in, C_out, k, k] for a transpose conv, so a Tconv built from a Conv's
/// kernel is that Conv's adjoint. Stride-2 layers require even extents; the
/// transpose variant uses output padding s-1 so that extents exactly double.
struct Conv2d {
  Tensor weight;
  Tensor bias;
  int stride = 1;
  bool transpose = false;

  static Conv2d make(int in_channels, int out_channels, int kernel, int stride, bool transpose, Rng& rng);
  int kernel() const { return static_cast<int>(weight.dim(2)); }
  int padding() const { return kernel() / 2; }
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Smallest admissible beta; enforced by the parameterization.
inline constexpr double kGdnBetaMin = 1e-6;

/// GDN / IGDN with beta = beta_min + softplus(beta_raw) and gamma = softplus(gamma_raw).
struct Gdn {
  Tensor beta_raw;   // [C]
  Tensor gamma_raw;  // [C, C]
  bool inverse = false;

  static Gdn make(int channels, bool inverse);
  Tensor beta() const;
  Tensor gamma() const;
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  static Linear make(int in, int out, Rng& rng);
  /// Normal(0, stddev) weights truncated at two deviations, zero bias.
  static Linear make_normal(int in, int out, double stddev, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  double eps = 1e-6;

  static LayerNorm make(int channels);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// fc2(gelu(fc1(x))) with hidden width hidden_ratio * C.
struct Mlp {
  Linear fc1;
  Linear fc2;

  /// init_std > 0 selects truncated-normal weights instead of the fan-in uniform default.
  static Mlp make(int channels, int hidden_ratio, Rng& rng, double init_std = 0.0);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

inline constexpr double kLeakySlope = 0.01;

}  // namespace tic::nn
