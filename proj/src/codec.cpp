#include "tic/codec.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "tic/ops.hpp"

namespace tic::codec {

namespace {

constexpr double kSigmaFloorOnGrid = 28.0 / kParamGrid;  // largest grid point below the scale floor

// Standard normal CDF; erfc keeps the lower tail accurate.
double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

void require_single_image(const Tensor& t, std::int64_t channels, const char* who) {
  if (t.ndim() != 4 || t.dim(0) != 1 || t.dim(1) != channels) {
    throw ShapeError(std::string(who) + ": expected [1," + std::to_string(channels) + ",h,w], got " +
                     shape_str(t.shape()));
  }
}

class GaussianTableCache {
 public:
  explicit GaussianTableCache(int range) : range_(range) {}
  const rc::QuantizedCdf& get(double sigma) {
    const auto key = static_cast<std::int64_t>(std::llround(sigma * kParamGrid));
    auto it = tables_.find(key);
    if (it == tables_.end()) it = tables_.emplace(key, gaussian_cdf(sigma, range_)).first;
    return it->second;
  }

 private:
  int range_;
  std::map<std::int64_t, rc::QuantizedCdf> tables_;
};

std::int32_t to_symbol(double v) {
  const double r = entropy::round_half_even(v);
  if (!(std::fabs(r) < 2e9)) throw ContractError("codec: latent value " + std::to_string(v) + " cannot be coded");
  return static_cast<std::int32_t>(r);
}

}  // namespace

double snap_mean(double mu) { return entropy::round_half_even(mu * kParamGrid) / kParamGrid; }

double snap_scale(double sigma) {
  return std::max(kSigmaFloorOnGrid, entropy::round_half_even(sigma * kParamGrid) / kParamGrid);
}

LatentCode quantize_latent(const entropy::Cam& cam, const Tensor& y, const Tensor& hyper) {
  NoGradGuard ng;
  if (y.ndim() != 4) throw ShapeError("quantize_latent: expected NCHW latent, got " + shape_str(y.shape()));
  const std::int64_t N = y.dim(0), C = y.dim(1), H = y.dim(2), W = y.dim(3);
  const std::int64_t plane = H * W;

  LatentCode code;
  code.y_hat = Tensor::zeros(y.shape());
  code.mu = Tensor::zeros(y.shape());
  code.sigma = Tensor::zeros(y.shape());
  code.symbols.reserve(static_cast<std::size_t>(y.numel()));
  auto yh = code.y_hat.mutable_data();
  auto mu_out = code.mu.mutable_data();
  auto sg_out = code.sigma.mutable_data();
  const auto yv = y.data();

  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t i = 0; i < H; ++i) {
      for (std::int64_t j = 0; j < W; ++j) {
        const entropy::GaussianParams p = cam.forward_at(code.y_hat, hyper, n, i, j);
        for (std::int64_t c = 0; c < C; ++c) {
          const auto at = static_cast<std::size_t>((n * C + c) * plane + i * W + j);
          const double mu = snap_mean(p.mu.data()[static_cast<std::size_t>(c)]);
          const double sigma = snap_scale(p.sigma.data()[static_cast<std::size_t>(c)]);
          const std::int32_t s = to_symbol(yv[at] - mu);
          code.symbols.push_back(s);
          yh[at] = s + mu;
          mu_out[at] = mu;
          sg_out[at] = sigma;
        }
      }
    }
  }
  return code;
}

int symbol_range(std::span<const std::int32_t> symbols) {
  std::int64_t m = 0;
  for (auto s : symbols) m = std::max<std::int64_t>(m, std::llabs(s));
  return static_cast<int>(std::min<std::int64_t>(m + 1, kMaxSymbolRange));
}

rc::QuantizedCdf gaussian_cdf(double sigma, int range) {
  if (!(sigma > 0)) throw ContractError("gaussian_cdf: scale must be positive");
  if (range < 0) throw ContractError("gaussian_cdf: negative symbol range");
  std::vector<double> pmf(static_cast<std::size_t>(2 * range + 1));
  for (int v = -range; v <= range; ++v) {
    // Symmetric form keeps both tails accurate.
    const double a = (std::fabs(v) - 0.5) / sigma, b = (std::fabs(v) + 0.5) / sigma;
    pmf[static_cast<std::size_t>(v + range)] = v == 0 ? 1.0 - 2.0 * phi(-b) : phi(-a) - phi(-b);
  }
  const double tail = 2.0 * phi(-(range + 0.5) / sigma);
  return rc::quantize_cdf(pmf, tail, -range);
}

std::vector<rc::QuantizedCdf> prior_cdfs(const entropy::FactorizedPrior& prior, int range) {
  std::vector<rc::QuantizedCdf> out;
  out.reserve(static_cast<std::size_t>(prior.channels()));
  for (int c = 0; c < prior.channels(); ++c) {
    double tail = 0.0;
    const auto pmf = prior.pmf(c, range, &tail);
    out.push_back(rc::quantize_cdf(pmf, tail, -range));
  }
  return out;
}

BitStream encode_image_stream(const Tensor& y_hat, const Tensor& z_hat, const TicModel& model, int height,
                              int width) {
  NoGradGuard ng;
  const auto& cfg = model.config();
  require_single_image(y_hat, cfg.channels, "encode_image_stream");
  require_single_image(z_hat, cfg.channels, "encode_image_stream");
  const std::int64_t C = cfg.channels, h = y_hat.dim(2), w = y_hat.dim(3);
  const std::int64_t ph = 16 * h, pw = 16 * w;
  if (ph > 0xFFFF || pw > 0xFFFF || height < 1 || width < 1 || height > ph || width > pw) {
    throw ContractError("encode_image_stream: image dimensions do not fit the header");
  }
  if (z_hat.dim(2) * 4 != h || z_hat.dim(3) * 4 != w) {
    throw ShapeError("encode_image_stream: hyper latent " + shape_str(z_hat.shape()) + " does not match " +
                     shape_str(y_hat.shape()));
  }

  BitStream bs;
  bs.config_hash = cfg.hash();
  bs.height = static_cast<std::uint16_t>(height);
  bs.width = static_cast<std::uint16_t>(width);
  bs.padded_height = static_cast<std::uint16_t>(ph);
  bs.padded_width = static_cast<std::uint16_t>(pw);

  // z: channel-major raster order under the per-channel prior.
  std::vector<std::int32_t> zs;
  zs.reserve(static_cast<std::size_t>(z_hat.numel()));
  for (double v : z_hat.data()) zs.push_back(to_symbol(v));
  const int zl = symbol_range(zs);
  bs.z_range = static_cast<std::uint16_t>(zl);
  {
    const auto tables = prior_cdfs(model.prior(), zl);
    const std::int64_t zplane = z_hat.dim(2) * z_hat.dim(3);
    rc::RangeEncoder enc;
    for (std::size_t k = 0; k < zs.size(); ++k) enc.encode_symbol(zs[k], tables[k / static_cast<std::size_t>(zplane)]);
    bs.z_segment = enc.finish();
  }

  // y: raster over positions, channels inner, parameters from the serial CAM pass.
  const Tensor hyper = model.h_s(z_hat);
  Tensor partial = Tensor::zeros(y_hat.shape());
  auto pv = partial.mutable_data();
  const auto yv = y_hat.data();
  std::vector<std::int32_t> ys;
  std::vector<double> sigmas;
  ys.reserve(static_cast<std::size_t>(y_hat.numel()));
  sigmas.reserve(static_cast<std::size_t>(y_hat.numel()));
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      const entropy::GaussianParams p = model.cam().forward_at(partial, hyper, 0, i, j);
      for (std::int64_t c = 0; c < C; ++c) {
        const auto at = static_cast<std::size_t>((c * h + i) * w + j);
        const double mu = snap_mean(p.mu.data()[static_cast<std::size_t>(c)]);
        const std::int32_t s = to_symbol(yv[at] - mu);
        if (s + mu != yv[at]) throw ContractError("encode_image_stream: y_hat is not on the coding grid");
        ys.push_back(s);
        sigmas.push_back(snap_scale(p.sigma.data()[static_cast<std::size_t>(c)]));
        pv[at] = yv[at];
      }
    }
  }
  const int yl = symbol_range(ys);
  bs.y_range = static_cast<std::uint16_t>(yl);
  GaussianTableCache cache(yl);
  rc::RangeEncoder enc;
  for (std::size_t k = 0; k < ys.size(); ++k) enc.encode_symbol(ys[k], cache.get(sigmas[k]));
  bs.y_segment = enc.finish();
  return bs;
}

Decoded decode_image_stream(const BitStream& stream, const TicModel& model) {
  NoGradGuard ng;
  const auto& cfg = model.config();
  if (stream.config_hash != cfg.hash()) {
    throw ModelMismatchError("bitstream was produced by a different model configuration");
  }
  if (stream.padded_height % ModelConfig::kSpatialMultiple != 0 ||
      stream.padded_width % ModelConfig::kSpatialMultiple != 0) {
    throw FormatError("bitstream padded dimensions are not multiples of 64");
  }
  if (stream.z_range > kMaxSymbolRange || stream.y_range > kMaxSymbolRange) {
    throw FormatError("bitstream symbol range exceeds the format limit");
  }
  const std::int64_t C = cfg.channels;
  const std::int64_t h = stream.padded_height / 16, w = stream.padded_width / 16;

  Decoded out;
  out.z_hat = Tensor::zeros({1, C, h / 4, w / 4});
  {
    const auto tables = prior_cdfs(model.prior(), stream.z_range);
    const std::int64_t zplane = (h / 4) * (w / 4);
    rc::RangeDecoder dec(stream.z_segment);
    auto zv = out.z_hat.mutable_data();
    for (std::size_t k = 0; k < zv.size(); ++k)
      zv[k] = dec.decode_symbol(tables[k / static_cast<std::size_t>(zplane)]);
  }

  const Tensor hyper = model.h_s(out.z_hat);
  out.y_hat = Tensor::zeros({1, C, h, w});
  auto yv = out.y_hat.mutable_data();
  GaussianTableCache cache(stream.y_range);
  rc::RangeDecoder dec(stream.y_segment);
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      const entropy::GaussianParams p = model.cam().forward_at(out.y_hat, hyper, 0, i, j);
      for (std::int64_t c = 0; c < C; ++c) {
        const double mu = snap_mean(p.mu.data()[static_cast<std::size_t>(c)]);
        const double sigma = snap_scale(p.sigma.data()[static_cast<std::size_t>(c)]);
        yv[static_cast<std::size_t>((c * h + i) * w + j)] = dec.decode_symbol(cache.get(sigma)) + mu;
      }
    }
  }
  return out;
}

EncodeResult encode(const TicModel& model, const Tensor& x, int height, int width) {
  NoGradGuard ng;
  require_single_image(x, 3, "codec::encode");
  if (x.dim(2) % ModelConfig::kSpatialMultiple != 0 || x.dim(3) % ModelConfig::kSpatialMultiple != 0) {
    throw ContractError("codec::encode: padded image " + shape_str(x.shape()) + " is not a multiple of 64");
  }
  EncodeResult r;
  const Tensor y = model.g_a(x);
  r.z_hat = entropy::quantize_round(model.h_a(y));
  const Tensor hyper = model.h_s(r.z_hat);
  const LatentCode code = quantize_latent(model.cam(), y, hyper);
  r.y_hat = code.y_hat;
  r.estimated_bits = entropy::gaussian_bits(code.y_hat, {code.mu, code.sigma}).item() +
                     model.prior().bits(r.z_hat).item();
  r.stream = encode_image_stream(r.y_hat, r.z_hat, model, height, width);
  r.x_hat = model.g_s(r.y_hat);
  return r;
}

Tensor decode(const TicModel& model, const BitStream& stream) {
  NoGradGuard ng;
  return model.g_s(decode_image_stream(stream, model).y_hat);
}

}  // namespace tic::codec
