#include "tic/entropy.hpp"

#include <cmath>

#include "tic/ops.hpp"

namespace tic::entropy {

double round_half_even(double v) { return std::nearbyint(v); }

Tensor quantize_noise(const Tensor& y, Rng& rng) {
  std::vector<double> u(static_cast<std::size_t>(y.numel()));
  for (auto& v : u) v = rng.uniform() - 0.5;
  return ops::add(y, Tensor::constant(y.shape(), std::move(u)));
}

Tensor quantize_round(const Tensor& y) {
  std::vector<double> out(y.data().begin(), y.data().end());
  for (auto& v : out) v = round_half_even(v);
  return Tensor::constant(y.shape(), std::move(out));
}

Tensor quantize_round(const Tensor& y, const Tensor& mu) {
  if (y.shape() != mu.shape()) throw ShapeError("quantize_round: mean shape does not match input");
  std::vector<double> out(y.data().begin(), y.data().end());
  auto md = mu.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = round_half_even(out[i] - md[i]) + md[i];
  return Tensor::constant(y.shape(), std::move(out));
}

Tensor gaussian_bits(const Tensor& y_hat, const GaussianParams& params) {
  return ops::neg_log2_sum(ops::gaussian_likelihood(y_hat, params.mu, params.sigma), kLikelihoodFloor);
}

// ---------------------------------------------------------------------------
// FactorizedPrior

FactorizedPrior FactorizedPrior::make(int channels, Rng& rng) {
  FactorizedPrior p;
  p.channels_ = channels;
  constexpr double kInitScale = 10.0;
  const double scale = std::pow(kInitScale, 1.0 / kDepth);
  for (int l = 0; l < kDepth; ++l) {
    const int in = kWidths[l], out = kWidths[l + 1];
    const double init = std::log(std::expm1(1.0 / scale / out));
    p.matrices_.push_back(Tensor::full({channels, out, in}, init, true));
    std::vector<double> b(static_cast<std::size_t>(channels) * out);
    for (auto& v : b) v = rng.uniform(-0.5, 0.5);
    p.biases_.push_back(Tensor::parameter({channels, out}, std::move(b)));
    if (l + 1 < kDepth) p.factors_.push_back(Tensor::zeros({channels, out}, true));
  }
  return p;
}

Tensor FactorizedPrior::cdf_logits(const Tensor& values) const {
  if (values.ndim() != 2 || values.dim(0) != channels_) {
    throw ShapeError("FactorizedPrior: expected [" + std::to_string(channels_) + ", S] values, got " +
                     shape_str(values.shape()));
  }
  const std::int64_t C = channels_, S = values.dim(1);
  Tensor x = ops::reshape(values, {C, 1, S});
  for (int l = 0; l < kDepth; ++l) {
    const std::int64_t out = kWidths[l + 1];
    x = ops::bmm(ops::softplus(matrices_[static_cast<std::size_t>(l)]), x);
    Tensor flat = ops::add_channel(ops::reshape(x, {C * out, S}),
                                   ops::reshape(biases_[static_cast<std::size_t>(l)], {C * out}), 0);
    if (l + 1 < kDepth) {
      const Tensor gate = ops::tanh(ops::reshape(factors_[static_cast<std::size_t>(l)], {C * out}));
      flat = ops::add(flat, ops::mul_channel(ops::tanh(flat), gate, 0));
    }
    x = ops::reshape(flat, {C, out, S});
  }
  return ops::reshape(x, {C, S});
}

Tensor FactorizedPrior::likelihood(const Tensor& z_hat) const {
  if (z_hat.ndim() != 4 || z_hat.dim(1) != channels_) {
    throw ShapeError("FactorizedPrior: latent " + shape_str(z_hat.shape()) + " does not have " +
                     std::to_string(channels_) + " channels");
  }
  const auto N = z_hat.dim(0), C = z_hat.dim(1), h = z_hat.dim(2), w = z_hat.dim(3);
  const std::int64_t S = N * h * w;
  const Tensor v = ops::reshape(ops::permute(z_hat, {1, 0, 2, 3}), {C, S});
  const Tensor logits = cdf_logits(ops::concat({ops::add_scalar(v, -0.5), ops::add_scalar(v, 0.5)}, 1));
  const Tensor p = ops::logistic_interval(ops::narrow(logits, 1, 0, S), ops::narrow(logits, 1, S, S));
  return ops::permute(ops::reshape(p, {C, N, h, w}), {1, 0, 2, 3});
}

Tensor FactorizedPrior::bits(const Tensor& z_hat) const {
  return ops::neg_log2_sum(likelihood(z_hat), kLikelihoodFloor);
}

std::vector<double> FactorizedPrior::pmf(int channel, int range, double* tail_mass) const {
  if (channel < 0 || channel >= channels_) throw ContractError("FactorizedPrior::pmf: channel out of range");
  if (range < 0) throw ContractError("FactorizedPrior::pmf: negative symbol range");
  NoGradGuard ng;
  const std::int64_t E = 2 * std::int64_t{range} + 2;  // bin edges k - 0.5 for k = -L..L+1
  std::vector<double> edges(static_cast<std::size_t>(channels_ * E));
  for (std::int64_t c = 0; c < channels_; ++c)
    for (std::int64_t e = 0; e < E; ++e) edges[static_cast<std::size_t>(c * E + e)] = static_cast<double>(e - range) - 0.5;
  const Tensor logits = cdf_logits(Tensor::constant({channels_, E}, std::move(edges)));
  auto row = logits.data().subspan(static_cast<std::size_t>(channel * E), static_cast<std::size_t>(E));
  std::vector<double> lo(row.begin(), row.end() - 1), hi(row.begin() + 1, row.end());
  const auto n = static_cast<std::int64_t>(lo.size());
  const Tensor p = ops::logistic_interval(Tensor::constant({n}, std::move(lo)), Tensor::constant({n}, std::move(hi)));
  if (tail_mass) {
    auto sig = [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); };
    *tail_mass = sig(row.front()) + sig(-row.back());
  }
  return {p.data().begin(), p.data().end()};
}

void FactorizedPrior::collect(const std::string& prefix, nn::ParamList& out) const {
  for (int l = 0; l < kDepth; ++l) {
    const auto s = std::to_string(l);
    out.emplace_back(prefix + ".matrix" + s, matrices_[static_cast<std::size_t>(l)]);
    out.emplace_back(prefix + ".bias" + s, biases_[static_cast<std::size_t>(l)]);
    if (l + 1 < kDepth) out.emplace_back(prefix + ".factor" + s, factors_[static_cast<std::size_t>(l)]);
  }
}

// ---------------------------------------------------------------------------
// Cam

Cam Cam::make(const Config& cfg, Rng& rng) {
  if (cfg.patch < 1 || cfg.patch % 2 == 0) throw ContractError("Cam: patch size must be odd");
  if (cfg.heads < 1 || cfg.channels % cfg.heads != 0) throw ContractError("Cam: heads must divide channels");
  Cam m;
  m.cfg_ = cfg;
  const int C = cfg.channels;
  const int slots = cfg.patch * cfg.patch;
  m.embed_ = nn::Linear::make(C, C, rng);
  std::vector<double> se(static_cast<std::size_t>(slots) * C);
  for (auto& v : se) v = 0.02 * rng.normal();
  m.slot_embedding_ = Tensor::parameter({slots, C}, std::move(se));
  m.query_ = nn::Linear::make(C, C, rng);
  m.key_ = nn::Linear::make(C, C, rng);
  m.value_ = nn::Linear::make(C, C, rng);
  m.out_ = nn::Linear::make(C, C, rng);
  const int fused = C + cfg.hyper_channels;
  m.fuse1_ = nn::Linear::make(fused, cfg.fusion_ratio * C, rng);
  m.fuse2_ = nn::Linear::make(cfg.fusion_ratio * C, 2 * C, rng);
  return m;
}

GaussianParams Cam::evaluate(const Tensor& y_hat, const Tensor& hyper, const std::vector<Position>& pos) const {
  const std::int64_t C = cfg_.channels, Ch = cfg_.hyper_channels;
  if (y_hat.ndim() != 4 || y_hat.dim(1) != C) {
    throw ShapeError("Cam: latent " + shape_str(y_hat.shape()) + " does not have " + std::to_string(C) + " channels");
  }
  if (hyper.ndim() != 4 || hyper.dim(0) != y_hat.dim(0) || hyper.dim(1) != Ch || hyper.dim(2) != y_hat.dim(2) ||
      hyper.dim(3) != y_hat.dim(3)) {
    throw ShapeError("Cam: hyper features " + shape_str(hyper.shape()) + " do not match latent " +
                     shape_str(y_hat.shape()));
  }
  const std::int64_t H = y_hat.dim(2), W = y_hat.dim(3);
  const std::int64_t P = static_cast<std::int64_t>(pos.size());
  const int B = cfg_.patch, r = B / 2;
  const std::int64_t S = std::int64_t{B} * B, centre = S / 2;
  const std::int64_t heads = cfg_.heads, d = C / heads;

  auto patch_index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(P * S * C), -1);
  auto hyper_index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(P * Ch));
  for (std::int64_t p = 0; p < P; ++p) {
    const auto [n, i, j] = pos[static_cast<std::size_t>(p)];
    for (std::int64_t s = 0; s < centre; ++s) {
      const std::int64_t ii = i + s / B - r, jj = j + s % B - r;
      if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
      for (std::int64_t c = 0; c < C; ++c)
        (*patch_index)[static_cast<std::size_t>((p * S + s) * C + c)] = ((n * C + c) * H + ii) * W + jj;
    }
    for (std::int64_t c = 0; c < Ch; ++c)
      (*hyper_index)[static_cast<std::size_t>(p * Ch + c)] = ((n * Ch + c) * H + i) * W + j;
  }

  Tensor tokens = embed_.forward(ops::gather(y_hat, {P, S, C}, std::move(patch_index)));
  tokens = ops::add_channel(ops::reshape(tokens, {P, S * C}), ops::reshape(slot_embedding_, {S * C}), 1);
  tokens = ops::reshape(tokens, {P, S, C});

  auto split = [&](const Tensor& t, std::int64_t T) {
    return ops::reshape(ops::permute(ops::reshape(t, {P, T, heads, d}), {0, 2, 1, 3}), {P * heads, T, d});
  };
  const Tensor q = split(query_.forward(ops::narrow(tokens, 1, centre, 1)), 1);
  const Tensor k = split(key_.forward(tokens), S);
  const Tensor v = split(value_.forward(tokens), S);

  std::vector<double> mask(static_cast<std::size_t>(heads * S), 0.0);
  for (std::int64_t hd = 0; hd < heads; ++hd)
    for (std::int64_t s = centre; s < S; ++s) mask[static_cast<std::size_t>(hd * S + s)] = -1e9;

  Tensor logits = ops::scale(ops::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(d)));
  logits = ops::add_channel(ops::reshape(logits, {P, heads * S}), Tensor::constant({heads * S}, std::move(mask)), 1);
  const Tensor attn = ops::softmax(ops::reshape(logits, {P * heads, 1, S}), -1);
  const Tensor ctx = out_.forward(ops::reshape(ops::bmm(attn, v), {P, C}));

  const Tensor hyp = ops::gather(hyper, {P, Ch}, std::move(hyper_index));
  const Tensor f = fuse2_.forward(ops::gelu(fuse1_.forward(ops::concat({ctx, hyp}, 1))));
  GaussianParams out;
  out.mu = ops::narrow(f, 1, 0, C);
  out.sigma = ops::add_scalar(ops::softplus(ops::narrow(f, 1, C, C)), kSigmaMin);
  return out;
}

GaussianParams Cam::forward(const Tensor& y_hat, const Tensor& hyper) const {
  if (y_hat.ndim() != 4) throw ShapeError("Cam: expected NCHW latent, got " + shape_str(y_hat.shape()));
  const auto N = y_hat.dim(0), C = y_hat.dim(1), H = y_hat.dim(2), W = y_hat.dim(3);
  std::vector<Position> pos;
  pos.reserve(static_cast<std::size_t>(N * H * W));
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) pos.push_back({n, i, j});
  GaussianParams flat = evaluate(y_hat, hyper, pos);
  auto to_nchw = [&](const Tensor& t) { return ops::permute(ops::reshape(t, {N, H, W, C}), {0, 3, 1, 2}); };
  return {to_nchw(flat.mu), to_nchw(flat.sigma)};
}

GaussianParams Cam::forward_at(const Tensor& y_hat, const Tensor& hyper, std::int64_t n, std::int64_t i,
                               std::int64_t j) const {
  if (y_hat.ndim() != 4 || n < 0 || n >= y_hat.dim(0) || i < 0 || i >= y_hat.dim(2) || j < 0 || j >= y_hat.dim(3)) {
    throw ShapeError("Cam::forward_at: position outside latent grid " + shape_str(y_hat.shape()));
  }
  GaussianParams flat = evaluate(y_hat, hyper, {{n, i, j}});
  const std::int64_t C = cfg_.channels;
  return {ops::reshape(flat.mu, {C}), ops::reshape(flat.sigma, {C})};
}

void Cam::collect(const std::string& prefix, nn::ParamList& out) const {
  embed_.collect(prefix + ".embed", out);
  out.emplace_back(prefix + ".slot_embedding", slot_embedding_);
  query_.collect(prefix + ".query", out);
  key_.collect(prefix + ".key", out);
  value_.collect(prefix + ".value", out);
  out_.collect(prefix + ".out", out);
  fuse1_.collect(prefix + ".fuse1", out);
  fuse2_.collect(prefix + ".fuse2", out);
}

}  // namespace tic::entropy
