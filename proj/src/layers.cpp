#include "tic/layers.hpp"

#include <cmath>

#include "tic/ops.hpp"

namespace tic::nn {

namespace {

std::vector<double> uniform_init(std::int64_t n, double bound, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return v;
}

double inverse_softplus(double y) { return std::log(std::expm1(y)); }

}  // namespace

Conv2d Conv2d::make(int in_channels, int out_channels, int kernel, int stride, bool transpose, Rng& rng) {
  if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1) {
    throw ContractError("Conv2d::make: extents must be positive");
  }
  Conv2d c;
  c.stride = stride;
  c.transpose = transpose;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels) * kernel * kernel);
  Shape ws = transpose ? Shape{in_channels, out_channels, kernel, kernel}
                       : Shape{out_channels, in_channels, kernel, kernel};
  c.weight = Tensor::parameter(ws, uniform_init(numel_of(ws), bound, rng));
  c.bias = Tensor::zeros({out_channels}, true);
  return c;
}

Tensor Conv2d::forward(const Tensor& x) const {
  if (x.ndim() != 4) throw ShapeError("Conv2d: expected NCHW input, got " + shape_str(x.shape()));
  if (!transpose && stride > 1 && (x.dim(2) % stride != 0 || x.dim(3) % stride != 0)) {
    throw ContractError("Conv2d: extents of " + shape_str(x.shape()) + " are not divisible by stride " +
                        std::to_string(stride));
  }
  if (transpose) return ops::conv_transpose2d(x, weight, bias, stride, padding(), stride - 1);
  return ops::conv2d(x, weight, bias, stride, padding());
}

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

Gdn Gdn::make(int channels, bool inverse) {
  Gdn g;
  g.inverse = inverse;
  g.beta_raw = Tensor::full({channels}, inverse_softplus(1.0 - kGdnBetaMin), true);
  std::vector<double> gr(static_cast<std::size_t>(channels) * channels, inverse_softplus(1e-6));
  for (int c = 0; c < channels; ++c) gr[static_cast<std::size_t>(c) * channels + c] = inverse_softplus(0.1);
  g.gamma_raw = Tensor::parameter({channels, channels}, std::move(gr));
  return g;
}

Tensor Gdn::beta() const { return ops::add_scalar(ops::softplus(beta_raw), kGdnBetaMin); }
Tensor Gdn::gamma() const { return ops::softplus(gamma_raw); }

Tensor Gdn::forward(const Tensor& x) const { return ops::gdn(x, beta(), gamma(), inverse); }

void Gdn::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(prefix + ".beta", beta_raw);
  out.emplace_back(prefix + ".gamma", gamma_raw);
}

Linear Linear::make(int in, int out, Rng& rng) {
  Linear l;
  l.weight = Tensor::parameter({out, in}, uniform_init(std::int64_t{out} * in, 1.0 / std::sqrt(double(in)), rng));
  l.bias = Tensor::zeros({out}, true);
  return l;
}

Linear Linear::make_normal(int in, int out, double stddev, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(out) * in);
  for (auto& v : w) {
    do v = rng.normal(); while (std::fabs(v) > 2.0);
    v *= stddev;
  }
  Linear l;
  l.weight = Tensor::parameter({out, in}, std::move(w));
  l.bias = Tensor::zeros({out}, true);
  return l;
}

Tensor Linear::forward(const Tensor& x) const { return ops::linear(x, weight, bias); }

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

LayerNorm LayerNorm::make(int channels) {
  LayerNorm n;
  n.gain = Tensor::full({channels}, 1.0, true);
  n.bias = Tensor::zeros({channels}, true);
  return n;
}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm(x, gain, bias, eps); }

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(prefix + ".gain", gain);
  out.emplace_back(prefix + ".bias", bias);
}

Mlp Mlp::make(int channels, int hidden_ratio, Rng& rng, double init_std) {
  Mlp m;
  const int hidden = channels * hidden_ratio;
  m.fc1 = init_std > 0 ? Linear::make_normal(channels, hidden, init_std, rng) : Linear::make(channels, hidden, rng);
  m.fc2 = init_std > 0 ? Linear::make_normal(hidden, channels, init_std, rng) : Linear::make(hidden, channels, rng);
  return m;
}

Tensor Mlp::forward(const Tensor& x) const { return fc2.forward(ops::gelu(fc1.forward(x))); }

void Mlp::collect(const std::string& prefix, ParamList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

}  // namespace tic::nn
