#pragma once

#include <vector>

#include "tic/bitstream.hpp"
#include "tic/model.hpp"
#include "tic/range_coder.hpp"

namespace tic::codec {

/// The stream was produced by a model with a different architecture hash.
class ModelMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Entropy parameters are snapped to multiples of 1/256 before they touch
/// rounding or CDF construction, at both ends of the channel.
inline constexpr double kParamGrid = 256.0;
/// Largest symbol range carried in a header; larger values take the escape path.
inline constexpr int kMaxSymbolRange = 1024;

double snap_mean(double mu);
double snap_scale(double sigma);

/// Quantized main latent with the parameters it was coded under.
struct LatentCode {
  Tensor y_hat;                      // [N,C,h,w] = symbol + mu
  Tensor mu, sigma;                  // snapped, [N,C,h,w]
  std::vector<std::int32_t> symbols; // image-major, then position-major, channel-minor
};

/// Serial raster-order quantization y -> y_hat = round(y - mu) + mu where
/// mu at each position is computed from the already-quantized prefix.
LatentCode quantize_latent(const entropy::Cam& cam, const Tensor& y, const Tensor& hyper);

/// Symbol range actually carried for a set of symbols: max|s| + 1, capped.
int symbol_range(std::span<const std::int32_t> symbols);

/// CDF for a mean-removed Gaussian symbol with the given snapped scale.
rc::QuantizedCdf gaussian_cdf(double sigma, int range);
/// CDFs for every channel of the factorized prior.
std::vector<rc::QuantizedCdf> prior_cdfs(const entropy::FactorizedPrior& prior, int range);

/// Codes (y_hat, z_hat) of a single image. z_hat is sent first under the
/// factorized prior, then y_hat position by position under CAM parameters.
BitStream encode_image_stream(const Tensor& y_hat, const Tensor& z_hat, const TicModel& model, int height, int width);

struct Decoded {
  Tensor y_hat, z_hat;
};
/// Inverse of encode_image_stream: z_hat, then h_s, then a serial CAM loop over y_hat.
Decoded decode_image_stream(const BitStream& stream, const TicModel& model);

/// Everything the encoder knows after coding one image.
struct EncodeResult {
  BitStream stream;
  Tensor x_hat;          // padded reconstruction, unclamped
  Tensor y_hat, z_hat;
  double estimated_bits; // model rate of (y_hat, z_hat)
};

/// g_a -> h_a -> round -> h_s -> serial quantization -> range coding.
/// `x` is [1,3,H',W'] with H', W' multiples of 64; (height, width) are the
/// original dimensions recorded in the header.
EncodeResult encode(const TicModel& model, const Tensor& x, int height, int width);
/// Decodes and synthesizes the padded reconstruction [1,3,H',W'].
Tensor decode(const TicModel& model, const BitStream& stream);

}  // namespace tic::codec
