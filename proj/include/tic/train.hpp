#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <vector>

#include "tic/image.hpp"
#include "tic/model.hpp"

namespace tic::train {

struct TrainConfig {
  double lambda = 0.013;
  int batch_size = 8;
  double lr = 1e-4;
  int crop = 256;
  int steps = 1000;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm ceiling; <= 0 disables clipping.
  double clip_norm = 1.0;
};

class Adam {
 public:
  Adam(nn::ParamList params, const TrainConfig& cfg);
  /// Applies one update from the accumulated gradients, then zeroes them.
  void step();
  std::int64_t steps_taken() const { return t_; }

 private:
  nn::ParamList params_;
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// (rate_y + rate_z) / (N*H*W) + lambda * 255^2 * MSE(x, x_hat).
Tensor rd_loss(const Tensor& x, const Tensor& x_hat, const Tensor& bits_y, const Tensor& bits_z, double lambda);

struct StepMetrics {
  double loss = 0, bpp = 0, mse = 0, grad_norm = 0;
};

/// A loss term went NaN or infinite; the message names the term.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One noise-mode forward, backward, clip and Adam update. `grad_norm` is
/// the global norm before clipping; `mse` is on [0,1] pixels.
StepMetrics train_step(const Tensor& batch, const TicModel& model, Adam& opt, const TrainConfig& cfg, Rng& rng);

/// 10 log10(1 / mse) on [0,1] pixels, capped at 100 dB.
double psnr_from_mse(double mse);
double psnr(const Tensor& x, const Tensor& x_hat);
double bpp(std::size_t bytes, int height, int width);

/// |d mean_c g_a(x)[c, m, n] / d x| averaged over the input channels; H*W row-major.
std::vector<double> saliency_map(const TicModel& model, const Tensor& x, int m, int n);
/// Scales a map to 0..255 (max maps to 255; an all-zero map stays zero).
std::vector<std::uint8_t> to_gray(const std::vector<double>& map);

/// Seeded synthetic corpus: gradients, checkerboards, Gaussian blobs and noise.
std::vector<ImageBuffer> synthetic_images(int count, int size, std::uint64_t seed);

/// In-memory image set with seeded batch sampling.
class Dataset {
 public:
  explicit Dataset(std::vector<ImageBuffer> images);
  /// Loads every .ppm (and .png when supported) file in a directory, sorted by name.
  static Dataset from_directory(const std::filesystem::path& dir);

  std::size_t size() const { return images_.size(); }
  const ImageBuffer& image(std::size_t i) const { return images_[i]; }

  /// Next `batch` images of a reshuffled-per-epoch order, each randomly
  /// cropped to `crop` x `crop` (reduced to the largest multiple of 64 that
  /// fits every image, images smaller than 64 being reflection-padded).
  Tensor sample_batch(int batch, int crop, Rng& rng);

 private:
  std::vector<ImageBuffer> images_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

using StepCallback = std::function<void(int step, const StepMetrics&)>;

/// Runs cfg.steps training steps; every random draw comes from cfg.seed.
std::vector<StepMetrics> fit(const TicModel& model, Dataset& data, const TrainConfig& cfg,
                             const StepCallback& on_step = {});

/// Mean noise-mode metrics over a set of images, one image at a time, with
/// the noise drawn from `seed` (same seed, same numbers).
StepMetrics evaluate(const TicModel& model, const std::vector<ImageBuffer>& images, double lambda, std::uint64_t seed);

void write_metrics_csv(std::ostream& out, const std::vector<StepMetrics>& metrics);

}  // namespace tic::train
