#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tic/range_coder.hpp"
#include "tic/rng.hpp"
#include "tic/swin.hpp"

// Independent reference implementations shared by the unit tests and the
// acceptance run.
namespace tic::testing {

// Plain-loop dense attention over an H x W grid of tokens [H*W, C] (row-major).
// Pairs are admitted when they share a window of the rolled grid and neither
// axis wraps around the image between them.
inline std::vector<double> dense_oracle(const std::vector<double>& x, int H, int W, int C, const swin::WindowAttention& layer,
                                 int window, int shift) {
  const int heads = layer.heads, d = C / heads, T = H * W;
  auto lin = [&](const nn::Linear& l, const double* in, int out_dim, int in_dim, double* out) {
    for (int o = 0; o < out_dim; ++o) {
      double s = l.bias.data()[o];
      for (int i = 0; i < in_dim; ++i) s += l.weight.data()[o * in_dim + i] * in[i];
      out[o] = s;
    }
  };
  // Rolled grid: rolled (r, c) holds original ((r + shift) % H, (c + shift) % W).
  std::vector<double> qkv(static_cast<std::size_t>(T * 3 * C));
  std::vector<int> orow(T), ocol(T);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const int p = r * W + c;
      orow[p] = (r + shift) % H;
      ocol[p] = (c + shift) % W;
      lin(layer.qkv, &x[static_cast<std::size_t>((orow[p] * W + ocol[p]) * C)], 3 * C, C, &qkv[static_cast<std::size_t>(p * 3 * C)]);
    }
  std::vector<double> out(static_cast<std::size_t>(T * C), 0.0);
  for (int p = 0; p < T; ++p) {
    std::vector<double> ctx(static_cast<std::size_t>(C), 0.0);
    const int pr = p / W, pc = p % W;
    for (int h = 0; h < heads; ++h) {
      std::vector<double> logit(static_cast<std::size_t>(T), -INFINITY);
      double mx = -INFINITY;
      for (int q = 0; q < T; ++q) {
        const int qr = q / W, qc = q % W;
        if (pr / window != qr / window || pc / window != qc / window) continue;
        if (std::abs(orow[p] - orow[q]) >= window || std::abs(ocol[p] - ocol[q]) >= window) continue;
        double s = 0;
        for (int k = 0; k < d; ++k)
          s += qkv[static_cast<std::size_t>(p * 3 * C + h * d + k)] * qkv[static_cast<std::size_t>(q * 3 * C + C + h * d + k)];
        s /= std::sqrt(double(d));
        const int di = pr % window - qr % window, dj = pc % window - qc % window;
        s += layer.rel_pos_bias.data()[static_cast<std::size_t>(((di + window - 1) * (2 * window - 1) + dj + window - 1) * heads + h)];
        logit[static_cast<std::size_t>(q)] = s;
        mx = std::max(mx, s);
      }
      double z = 0;
      for (auto& l : logit) z += (l = std::exp(l - mx));
      for (int q = 0; q < T; ++q)
        for (int k = 0; k < d; ++k)
          ctx[static_cast<std::size_t>(h * d + k)] += logit[static_cast<std::size_t>(q)] / z *
                                                      qkv[static_cast<std::size_t>(q * 3 * C + 2 * C + h * d + k)];
    }
    // Write back at the original position.
    lin(layer.proj, ctx.data(), C, C, &out[static_cast<std::size_t>((orow[p] * W + ocol[p]) * C)]);
  }
  return out;
}

inline Tensor windowed(const Tensor& tokens, int H, int W, const swin::WindowAttention& layer, int window, int shift) {
  const Tensor win = swin::token_window_partition(tokens, H, W, window, shift);
  const Tensor att = swin::window_attention(win, layer, window, swin::shift_mask(H, W, window, shift));
  return swin::token_window_reverse(att, tokens.dim(0), H, W, window, shift);
}

// Random pmf with a random peakedness and, sometimes, a near-empty bin.
inline std::vector<double> random_pmf(Rng& rng, int n) {
  std::vector<double> p(static_cast<std::size_t>(n));
  const double peak = rng.uniform(0.5, 8.0);
  double s = 0;
  for (auto& v : p) s += (v = std::pow(rng.uniform() + 1e-12, peak));
  for (auto& v : p) v /= s;
  if (rng.uniform() < 0.2) p[rng.below(static_cast<std::uint64_t>(n))] = 1e-9;  // a near-empty bin
  return p;
}

inline std::int32_t sample_symbol(Rng& rng, const rc::QuantizedCdf& q) {
  const auto u = static_cast<std::uint32_t>(rng.below(rc::kTotal));
  int s = 0;
  while (q.cdf[static_cast<std::size_t>(s) + 1] <= u) ++s;
  if (q.has_escape && s == q.bins() - 1) {
    const auto mag = static_cast<std::int32_t>(rng.below(30000));
    return rng.uniform() < 0.5 ? q.offset - 1 - mag : q.offset + q.value_bins() + mag;
  }
  return q.offset + s;
}

}  // namespace tic::testing
