#include "tic/swin.hpp"

#include <cmath>

#include "tic/ops.hpp"

namespace tic::swin {

using Index = std::vector<std::int64_t>;

namespace {

void require_windows(std::int64_t H, std::int64_t W, int window, const char* op) {
  if (window < 1 || H % window != 0 || W % window != 0) {
    throw ShapeError(std::string(op) + ": grid " + std::to_string(H) + "x" + std::to_string(W) +
                     " is not divisible by window " + std::to_string(window));
  }
}

// Calls f(window_id, slot, h, w) for every output position, in output order,
// where (h, w) is the source position on the unrolled grid.
template <class F>
void for_each_window_slot(std::int64_t N, std::int64_t H, std::int64_t W, int w, int shift, F f) {
  const std::int64_t nh = H / w, nw = W / w;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t wi = 0; wi < nh; ++wi)
      for (std::int64_t wj = 0; wj < nw; ++wj)
        for (int a = 0; a < w; ++a)
          for (int b = 0; b < w; ++b) {
            const std::int64_t h = (wi * w + a + shift) % H;
            const std::int64_t x = (wj * w + b + shift) % W;
            f(n, (n * nh + wi) * nw + wj, a * w + b, h, x);
          }
}

}  // namespace

Tensor feature_embed(const Tensor& x) {
  if (x.ndim() != 4) throw ShapeError("feature_embed: expected NCHW input, got " + shape_str(x.shape()));
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  return ops::reshape(ops::permute(x, {0, 2, 3, 1}), {N, H * W, C});
}

Tensor feature_unembed(const Tensor& tokens, std::int64_t H, std::int64_t W) {
  if (tokens.ndim() != 3 || tokens.dim(1) != H * W) {
    throw ShapeError("feature_unembed: " + shape_str(tokens.shape()) + " does not hold " + std::to_string(H) +
                     "x" + std::to_string(W) + " tokens");
  }
  const auto N = tokens.dim(0), C = tokens.dim(2);
  return ops::permute(ops::reshape(tokens, {N, H, W, C}), {0, 3, 1, 2});
}

Tensor window_partition(const Tensor& x, int window, int shift) {
  if (x.ndim() != 4) throw ShapeError("window_partition: expected NCHW input, got " + shape_str(x.shape()));
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require_windows(H, W, window, "window_partition");
  const std::int64_t T = std::int64_t{window} * window;
  const std::int64_t count = N * (H / window) * (W / window);
  auto index = std::make_shared<Index>(static_cast<std::size_t>(count * T * C));
  for_each_window_slot(N, H, W, window, shift, [&](auto n, auto win, auto slot, auto h, auto w) {
    for (std::int64_t c = 0; c < C; ++c)
      (*index)[static_cast<std::size_t>((win * T + slot) * C + c)] = ((n * C + c) * H + h) * W + w;
  });
  return ops::gather(x, {count, T, C}, std::move(index));
}

Tensor window_reverse(const Tensor& windows, std::int64_t N, std::int64_t C, std::int64_t H, std::int64_t W,
                      int window, int shift) {
  require_windows(H, W, window, "window_reverse");
  const std::int64_t T = std::int64_t{window} * window;
  if (windows.numel() != N * C * H * W || windows.ndim() != 3 || windows.dim(1) != T || windows.dim(2) != C) {
    throw ShapeError("window_reverse: " + shape_str(windows.shape()) + " does not match target grid");
  }
  auto index = std::make_shared<Index>(static_cast<std::size_t>(N * C * H * W));
  for_each_window_slot(N, H, W, window, shift, [&](auto n, auto win, auto slot, auto h, auto w) {
    for (std::int64_t c = 0; c < C; ++c)
      (*index)[static_cast<std::size_t>(((n * C + c) * H + h) * W + w)] = (win * T + slot) * C + c;
  });
  return ops::gather(windows, {N, C, H, W}, std::move(index));
}

Tensor token_window_partition(const Tensor& tokens, std::int64_t H, std::int64_t W, int window, int shift) {
  if (tokens.ndim() != 3 || tokens.dim(1) != H * W) throw ShapeError("token_window_partition: bad token grid");
  require_windows(H, W, window, "token_window_partition");
  const auto N = tokens.dim(0), C = tokens.dim(2);
  const std::int64_t T = std::int64_t{window} * window;
  const std::int64_t count = N * (H / window) * (W / window);
  auto index = std::make_shared<Index>(static_cast<std::size_t>(count * T * C));
  for_each_window_slot(N, H, W, window, shift, [&](auto n, auto win, auto slot, auto h, auto w) {
    for (std::int64_t c = 0; c < C; ++c)
      (*index)[static_cast<std::size_t>((win * T + slot) * C + c)] = ((n * H + h) * W + w) * C + c;
  });
  return ops::gather(tokens, {count, T, C}, std::move(index));
}

Tensor token_window_reverse(const Tensor& windows, std::int64_t N, std::int64_t H, std::int64_t W, int window,
                            int shift) {
  require_windows(H, W, window, "token_window_reverse");
  const auto C = windows.dim(2);
  const std::int64_t T = std::int64_t{window} * window;
  auto index = std::make_shared<Index>(static_cast<std::size_t>(N * H * W * C));
  for_each_window_slot(N, H, W, window, shift, [&](auto n, auto win, auto slot, auto h, auto w) {
    for (std::int64_t c = 0; c < C; ++c)
      (*index)[static_cast<std::size_t>(((n * H + h) * W + w) * C + c)] = (win * T + slot) * C + c;
  });
  return ops::gather(windows, {N, H * W, C}, std::move(index));
}

std::vector<double> shift_mask(std::int64_t H, std::int64_t W, int window, int shift) {
  if (shift == 0) return {};
  require_windows(H, W, window, "shift_mask");
  // Region label of a rolled-grid row/column: rows that wrapped around during
  // the roll form their own region.
  auto region = [&](std::int64_t i, std::int64_t extent) {
    if (i < extent - window) return 0;
    if (i < extent - shift) return 1;
    return 2;
  };
  const std::int64_t nh = H / window, nw = W / window, T = std::int64_t{window} * window;
  std::vector<double> mask(static_cast<std::size_t>(nh * nw * T * T), 0.0);
  for (std::int64_t wi = 0; wi < nh; ++wi)
    for (std::int64_t wj = 0; wj < nw; ++wj) {
      std::vector<int> label(static_cast<std::size_t>(T));
      for (int a = 0; a < window; ++a)
        for (int b = 0; b < window; ++b)
          label[static_cast<std::size_t>(a * window + b)] =
              region(wi * window + a, H) * 3 + region(wj * window + b, W);
      double* m = mask.data() + (wi * nw + wj) * T * T;
      for (std::int64_t p = 0; p < T; ++p)
        for (std::int64_t q = 0; q < T; ++q)
          if (label[static_cast<std::size_t>(p)] != label[static_cast<std::size_t>(q)]) m[p * T + q] = kMaskedLogit;
    }
  return mask;
}

WindowAttention WindowAttention::make(int channels, int window, int heads, bool shifted, Rng& rng) {
  if (heads < 1 || channels % heads != 0) {
    throw ContractError("WindowAttention: heads (" + std::to_string(heads) + ") must divide channels (" +
                        std::to_string(channels) + ")");
  }
  WindowAttention a;
  a.window = window;
  a.heads = heads;
  a.shifted = shifted;
  a.qkv = nn::Linear::make_normal(channels, 3 * channels, kSwinInitStd, rng);
  a.proj = nn::Linear::make_normal(channels, channels, kSwinInitStd, rng);
  const std::int64_t span = 2 * window - 1;
  a.rel_pos_bias = Tensor::zeros({span * span, heads}, true);
  return a;
}

void WindowAttention::collect(const std::string& prefix, nn::ParamList& out) const {
  qkv.collect(prefix + ".qkv", out);
  proj.collect(prefix + ".proj", out);
  out.emplace_back(prefix + ".rel_pos_bias", rel_pos_bias);
}

Tensor window_attention(const Tensor& tokens, const WindowAttention& layer, int window,
                        const std::vector<double>& mask) {
  if (tokens.ndim() != 3) throw ShapeError("window_attention: expected [B,T,C], got " + shape_str(tokens.shape()));
  const std::int64_t Bw = tokens.dim(0), T = tokens.dim(1), C = tokens.dim(2);
  const std::int64_t h = layer.heads, d = C / h;
  if (T != std::int64_t{window} * window) throw ShapeError("window_attention: token count is not window^2");
  if (window > layer.window) throw ContractError("window_attention: window exceeds the layer's bias table");
  if (C % h != 0) throw ContractError("window_attention: heads must divide channels");

  const Tensor qkv = layer.qkv.forward(tokens);  // [Bw, T, 3C]
  auto split_heads = [&](std::int64_t part) {
    Tensor t = ops::narrow(qkv, 2, part * C, C);
    t = ops::permute(ops::reshape(t, {Bw, T, h, d}), {0, 2, 1, 3});
    return ops::reshape(t, {Bw * h, T, d});
  };
  const Tensor q = split_heads(0), k = split_heads(1), v = split_heads(2);

  Tensor logits = ops::scale(ops::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(d)));
  logits = ops::reshape(logits, {Bw, h * T * T});

  auto bias_index = std::make_shared<Index>(static_cast<std::size_t>(h * T * T));
  for (std::int64_t hd = 0; hd < h; ++hd)
    for (std::int64_t p = 0; p < T; ++p)
      for (std::int64_t q2 = 0; q2 < T; ++q2) {
        const int di = static_cast<int>(p / window - q2 / window);
        const int dj = static_cast<int>(p % window - q2 % window);
        (*bias_index)[static_cast<std::size_t>((hd * T + p) * T + q2)] = relative_index(di, dj, layer.window) * h + hd;
      }
  logits = ops::add_channel(logits, ops::gather(layer.rel_pos_bias, {h * T * T}, std::move(bias_index)), 1);

  if (!mask.empty()) {
    const std::int64_t nW = static_cast<std::int64_t>(mask.size()) / (T * T);
    if (nW * T * T != static_cast<std::int64_t>(mask.size()) || Bw % nW != 0) {
      throw ShapeError("window_attention: mask does not tile the window batch");
    }
    std::vector<double> full(static_cast<std::size_t>(nW * h * T * T));
    for (std::int64_t w = 0; w < nW; ++w)
      for (std::int64_t hd = 0; hd < h; ++hd)
        std::copy_n(mask.begin() + w * T * T, T * T, full.begin() + (w * h + hd) * T * T);
    logits = ops::reshape(logits, {Bw / nW, nW * h * T * T});
    logits = ops::add_channel(logits, Tensor::constant({nW * h * T * T}, std::move(full)), 1);
  }

  const Tensor attn = ops::softmax(ops::reshape(logits, {Bw * h, T, T}), -1);
  Tensor out = ops::bmm(attn, v);  // [Bw*h, T, d]
  out = ops::reshape(ops::permute(ops::reshape(out, {Bw, h, T, d}), {0, 2, 1, 3}), {Bw, T, C});
  return layer.proj.forward(out);
}

WindowPlan plan_window(std::int64_t H, std::int64_t W, int window, bool shifted) {
  // Largest window that tiles both extents exactly; no shift once one window covers the grid.
  int w = std::max(1, static_cast<int>(std::min<std::int64_t>(window, std::min(H, W))));
  while (H % w != 0 || W % w != 0) --w;
  const bool whole = std::min(H, W) <= w;
  return {w, shifted && !whole ? w / 2 : 0};
}

SwinLayer SwinLayer::make(int channels, int window, int heads, int mlp_ratio, Rng& rng) {
  SwinLayer l;
  l.norm1 = nn::LayerNorm::make(channels);
  l.norm2 = nn::LayerNorm::make(channels);
  l.norm3 = nn::LayerNorm::make(channels);
  l.norm4 = nn::LayerNorm::make(channels);
  l.wa = WindowAttention::make(channels, window, heads, false, rng);
  l.mlp1 = nn::Mlp::make(channels, mlp_ratio, rng, kSwinInitStd);
  l.swa = WindowAttention::make(channels, window, heads, true, rng);
  l.mlp2 = nn::Mlp::make(channels, mlp_ratio, rng, kSwinInitStd);
  return l;
}

namespace {

Tensor attention_branch(const Tensor& tokens, std::int64_t H, std::int64_t W, const WindowAttention& layer,
                        bool shifted) {
  const WindowPlan plan = plan_window(H, W, layer.window, shifted);
  require_windows(H, W, plan.window, "SwinLayer");
  const Tensor win = token_window_partition(tokens, H, W, plan.window, plan.shift);
  const Tensor att = window_attention(win, layer, plan.window, shift_mask(H, W, plan.window, plan.shift));
  return token_window_reverse(att, tokens.dim(0), H, W, plan.window, plan.shift);
}

}  // namespace

Tensor SwinLayer::forward(const Tensor& tokens, std::int64_t H, std::int64_t W) const {
  Tensor x = tokens;
  x = ops::add(x, attention_branch(norm1.forward(x), H, W, wa, false));
  x = ops::add(x, mlp1.forward(norm2.forward(x)));
  x = ops::add(x, attention_branch(norm3.forward(x), H, W, swa, use_shift));
  x = ops::add(x, mlp2.forward(norm4.forward(x)));
  return x;
}

void SwinLayer::collect(const std::string& prefix, nn::ParamList& out) const {
  norm1.collect(prefix + ".norm1", out);
  wa.collect(prefix + ".wa", out);
  norm2.collect(prefix + ".norm2", out);
  mlp1.collect(prefix + ".mlp1", out);
  norm3.collect(prefix + ".norm3", out);
  swa.collect(prefix + ".swa", out);
  norm4.collect(prefix + ".norm4", out);
  mlp2.collect(prefix + ".mlp2", out);
}

SwinBlock SwinBlock::make(int channels, int window, int heads, int mlp_ratio, Rng& rng, int num_layers) {
  SwinBlock b;
  for (int i = 0; i < num_layers; ++i) b.layers.push_back(SwinLayer::make(channels, window, heads, mlp_ratio, rng));
  return b;
}

Tensor SwinBlock::forward(const Tensor& x) const {
  if (x.ndim() != 4) throw ShapeError("SwinBlock: expected NCHW input, got " + shape_str(x.shape()));
  const auto H = x.dim(2), W = x.dim(3);
  Tensor t = feature_embed(x);
  for (const auto& l : layers) t = l.forward(t, H, W);
  return ops::add(feature_unembed(t, H, W), x);
}

void SwinBlock::collect(const std::string& prefix, nn::ParamList& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + ".stl" + std::to_string(i), out);
}

}  // namespace tic::swin
