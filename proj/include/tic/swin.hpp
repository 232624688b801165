#pragma once

#include <memory>
#include <vector>

#include "tic/layers.hpp"

namespace tic::swin {

/// [N,C,H,W] -> [N,H*W,C], row-major over (H,W).
Tensor feature_embed(const Tensor& x);
/// Inverse of feature_embed.
Tensor feature_unembed(const Tensor& tokens, std::int64_t H, std::int64_t W);

/// Rolls the grid by (-shift,-shift), then cuts w*w windows:
/// [N,C,H,W] -> [N*(H/w)*(W/w), w*w, C]. Windows are ordered image-major,
/// then row-major over the window grid; slots are row-major inside a window.
Tensor window_partition(const Tensor& x, int window, int shift);
Tensor window_reverse(const Tensor& windows, std::int64_t N, std::int64_t C, std::int64_t H, std::int64_t W,
                      int window, int shift);

/// Same layout transforms on token tensors [N, H*W, C].
Tensor token_window_partition(const Tensor& tokens, std::int64_t H, std::int64_t W, int window, int shift);
Tensor token_window_reverse(const Tensor& windows, std::int64_t N, std::int64_t H, std::int64_t W, int window,
                            int shift);

/// Index into the relative-position table for an offset in [-(w-1), w-1]^2.
inline std::int64_t relative_index(int di, int dj, int window) {
  return static_cast<std::int64_t>(di + window - 1) * (2 * window - 1) + (dj + window - 1);
}

/// Additive logit mask for shifted windows, [num_windows, w*w, w*w]: 0 where
/// two slots come from the same contiguous region of the unrolled grid and a
/// large negative value otherwise. Empty when shift == 0.
std::vector<double> shift_mask(std::int64_t H, std::int64_t W, int window, int shift);

/// Standard deviation of the truncated-normal init of every projection inside a block.
inline constexpr double kSwinInitStd = 0.02;

/// Value added to masked logits; exp() of it underflows to exactly zero.
inline constexpr double kMaskedLogit = -1e9;

struct WindowAttention {
  int window = 8;
  int heads = 4;
  bool shifted = false;
  nn::Linear qkv;       // C -> 3C
  nn::Linear proj;      // C -> C
  Tensor rel_pos_bias;  // [(2w-1)^2, heads]

  static WindowAttention make(int channels, int window, int heads, bool shifted, Rng& rng);
  void collect(const std::string& prefix, nn::ParamList& out) const;
};

/// Multi-head attention inside each window: softmax(QK^T/sqrt(d) + bias + mask) V,
/// heads concatenated and projected. `tokens` is [B_w, w*w, C]; `mask`, if
/// non-empty, is [num_windows, w*w, w*w] and repeats over the B_w/num_windows images.
Tensor window_attention(const Tensor& tokens, const WindowAttention& layer, int window,
                        const std::vector<double>& mask = {});

/// Window and shift actually used on an H x W grid: the largest size up to
/// `window` that divides both extents, unshifted when it spans the grid.
struct WindowPlan {
  int window;
  int shift;
};
WindowPlan plan_window(std::int64_t H, std::int64_t W, int window, bool shifted);

/// LN -> WA -> residual, LN -> MLP -> residual, LN -> SWA -> residual, LN -> MLP -> residual.
struct SwinLayer {
  nn::LayerNorm norm1, norm2, norm3, norm4;
  WindowAttention wa, swa;
  nn::Mlp mlp1, mlp2;
  bool use_shift = true;

  static SwinLayer make(int channels, int window, int heads, int mlp_ratio, Rng& rng);
  Tensor forward(const Tensor& tokens, std::int64_t H, std::int64_t W) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;
};

/// FE -> STLs -> FU, plus an identity skip from the block input.
struct SwinBlock {
  std::vector<SwinLayer> layers;

  static SwinBlock make(int channels, int window, int heads, int mlp_ratio, Rng& rng, int num_layers = 1);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;
};

}  // namespace tic::swin
