#pragma once

#include <vector>

#include "tic/layers.hpp"

namespace tic::entropy {

enum class QuantMode { noise, round };

/// Scale floor of the conditional Gaussian.
inline constexpr double kSigmaMin = 0.11;
/// Probability floor used by the rate estimate (caps one symbol at ~29.9 bits).
inline constexpr double kLikelihoodFloor = 1e-9;

/// Round half to even.
double round_half_even(double v);

/// y + u with u ~ U[-0.5, 0.5) drawn from `rng`.
Tensor quantize_noise(const Tensor& y, Rng& rng);
/// round(y), or round(y - mu) + mu when mu is given. Not differentiable.
Tensor quantize_round(const Tensor& y);
Tensor quantize_round(const Tensor& y, const Tensor& mu);

struct GaussianParams {
  Tensor mu;
  Tensor sigma;
};

/// Sum over elements of -log2 P(y_hat | mu, sigma), with P the Gaussian mass
/// of the unit bin centred on y_hat.
Tensor gaussian_bits(const Tensor& y_hat, const GaussianParams& params);

/// Per-channel learned CDF built from stacked monotone 1-D transforms
/// (widths 1 -> 3 -> 3 -> 3 -> 1). Monotonicity holds by construction:
/// matrices pass through softplus and gates through tanh.
class FactorizedPrior {
 public:
  static constexpr int kDepth = 4;
  static constexpr int kWidths[kDepth + 1] = {1, 3, 3, 3, 1};

  FactorizedPrior() = default;
  static FactorizedPrior make(int channels, Rng& rng);

  int channels() const { return channels_; }
  /// CDF logits at `values` ([C, S]), differentiable. Output is [C, S].
  Tensor cdf_logits(const Tensor& values) const;
  /// Per-element bin mass of z_hat ([N, C, h, w]), same shape.
  Tensor likelihood(const Tensor& z_hat) const;
  Tensor bits(const Tensor& z_hat) const;
  /// Mass of symbols -L..L for one channel; the remainder goes to `tail_mass`.
  std::vector<double> pmf(int channel, int range, double* tail_mass) const;

  void collect(const std::string& prefix, nn::ParamList& out) const;

 private:
  int channels_ = 0;
  std::vector<Tensor> matrices_;  // [C, out, in]
  std::vector<Tensor> biases_;    // [C, out]
  std::vector<Tensor> factors_;   // [C, out]
};

/// Causal attention context model.
///
/// For each latent position the B x B neighbourhood is unfolded (zero outside
/// the grid) into B^2 tokens. The centre slot and every slot after it in raster
/// order are masked twice over: their values are zeroed before embedding and
/// their logits are suppressed. A learned query attends over the remaining
/// tokens; the attended vector is concatenated with the hyper features at the
/// same position and an MLP maps it to (mu, sigma).
class Cam {
 public:
  struct Config {
    int channels = 128;
    int hyper_channels = 256;
    int patch = 5;
    int heads = 4;
    int fusion_ratio = 4;
  };

  Cam() = default;
  static Cam make(const Config& cfg, Rng& rng);
  const Config& config() const { return cfg_; }

  /// Batched evaluation: y_hat [N,C,h,w], hyper [N,Ch,h,w] -> params [N,C,h,w].
  GaussianParams forward(const Tensor& y_hat, const Tensor& hyper) const;

  /// Params for one position (vectors of length C), computed by the same
  /// arithmetic as `forward` and therefore bit-identical to its entries.
  GaussianParams forward_at(const Tensor& y_hat, const Tensor& hyper, std::int64_t n, std::int64_t i,
                            std::int64_t j) const;

  /// Number of patch slots visible to the centre (those strictly before it).
  int causal_slots() const { return cfg_.patch * cfg_.patch / 2; }

  void collect(const std::string& prefix, nn::ParamList& out) const;

 private:
  struct Position {
    std::int64_t n, i, j;
  };
  // Returns mu and sigma as [P, C] for the listed positions.
  GaussianParams evaluate(const Tensor& y_hat, const Tensor& hyper, const std::vector<Position>& pos) const;

  Config cfg_;
  nn::Linear embed_;
  Tensor slot_embedding_;  // [B^2, C]
  nn::Linear query_, key_, value_, out_;
  nn::Linear fuse1_, fuse2_;
};

}  // namespace tic::entropy
