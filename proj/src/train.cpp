#include "tic/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "tic/ops.hpp"

namespace tic::train {

Adam::Adam(nn::ParamList params, const TrainConfig& cfg)
    : params_(std::move(params)), lr_(cfg.lr), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.eps) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor p = params_[k].second;
    auto w = p.mutable_data();
    auto g = p.mutable_grad();
    if (g.empty()) continue;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1_ * m[i] + (1 - b1_) * g[i];
      v[i] = b2_ * v[i] + (1 - b2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
    p.zero_grad();
  }
}

Tensor rd_loss(const Tensor& x, const Tensor& x_hat, const Tensor& bits_y, const Tensor& bits_z, double lambda) {
  if (x.shape() != x_hat.shape() || x.ndim() != 4) {
    throw ShapeError("rd_loss: x " + shape_str(x.shape()) + " and x_hat " + shape_str(x_hat.shape()) + " differ");
  }
  const double pixels = static_cast<double>(x.dim(0) * x.dim(2) * x.dim(3));
  const Tensor rate = ops::scale(ops::add(bits_y, bits_z), 1.0 / pixels);
  return ops::add(rate, ops::scale(ops::mse(x, x_hat), lambda * 255.0 * 255.0));
}

StepMetrics train_step(const Tensor& batch, const TicModel& model, Adam& opt, const TrainConfig& cfg, Rng& rng) {
  const auto f = model.forward(batch, entropy::QuantMode::noise, rng);
  const Tensor mse = ops::mse(batch, f.x_hat);
  const double pixels = static_cast<double>(batch.dim(0) * batch.dim(2) * batch.dim(3));
  if (!std::isfinite(f.bits_y.item())) throw NonFiniteError("non-finite rate term for y (main latent)");
  if (!std::isfinite(f.bits_z.item())) throw NonFiniteError("non-finite rate term for z (hyper latent)");
  if (!std::isfinite(mse.item())) throw NonFiniteError("non-finite distortion term (MSE)");
  const Tensor loss = rd_loss(batch, f.x_hat, f.bits_y, f.bits_z, cfg.lambda);

  const auto params = model.parameters();
  for (auto [name, p] : params) p.zero_grad();
  loss.backward();

  double sq = 0;
  for (const auto& [name, p] : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NonFiniteError("non-finite gradient norm");
  if (cfg.clip_norm > 0 && norm > cfg.clip_norm) {
    const double s = cfg.clip_norm / norm;
    for (auto [name, p] : params)
      for (double& g : p.mutable_grad()) g *= s;
  }
  opt.step();
  return {loss.item(), (f.bits_y.item() + f.bits_z.item()) / pixels, mse.item(), norm};
}

double psnr_from_mse(double mse) {
  if (!(mse > 1e-10)) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

double psnr(const Tensor& x, const Tensor& x_hat) {
  NoGradGuard ng;
  return psnr_from_mse(ops::mse(x, x_hat).item());
}

double bpp(std::size_t bytes, int height, int width) {
  if (height < 1 || width < 1) throw ContractError("bpp: extents must be positive");
  return 8.0 * static_cast<double>(bytes) / (static_cast<double>(height) * width);
}

std::vector<double> saliency_map(const TicModel& model, const Tensor& x, int m, int n) {
  if (x.ndim() != 4 || x.dim(0) != 1 || x.dim(1) != 3) {
    throw ShapeError("saliency_map: expected [1,3,H,W], got " + shape_str(x.shape()));
  }
  Tensor input = Tensor::parameter(x.shape(), {x.data().begin(), x.data().end()});
  const Tensor y = model.g_a(input);
  const std::int64_t C = y.dim(1), h = y.dim(2), w = y.dim(3);
  if (m < 0 || m >= h || n < 0 || n >= w) throw ContractError("saliency_map: centre outside the latent grid");
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  for (std::int64_t c = 0; c < C; ++c) idx->push_back((c * h + m) * w + n);
  ops::mean(ops::gather(y, {C}, std::move(idx))).backward();

  const std::int64_t H = x.dim(2), W = x.dim(3), plane = H * W;
  std::vector<double> map(static_cast<std::size_t>(plane), 0.0);
  const auto g = input.grad();
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t p = 0; p < plane; ++p)
      map[static_cast<std::size_t>(p)] += std::fabs(g[static_cast<std::size_t>(c * plane + p)]) / 3.0;
  for (const auto& [name, t] : model.parameters()) Tensor(t).zero_grad();
  return map;
}

std::vector<std::uint8_t> to_gray(const std::vector<double>& map) {
  const double mx = map.empty() ? 0.0 : *std::max_element(map.begin(), map.end());
  std::vector<std::uint8_t> out(map.size(), 0);
  if (mx > 0)
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = static_cast<std::uint8_t>(std::lround(255.0 * map[i] / mx));
  return out;
}

std::vector<ImageBuffer> synthetic_images(int count, int size, std::uint64_t seed) {
  if (count < 0 || size < 1) throw ContractError("synthetic_images: bad count or size");
  Rng rng(seed);
  std::vector<ImageBuffer> out;
  for (int k = 0; k < count; ++k) {
    ImageBuffer img(size, size);
    std::vector<double> f(static_cast<std::size_t>(size) * size * 3);
    auto px = [&](int r, int c, int ch) -> double& { return f[(static_cast<std::size_t>(r) * size + c) * 3 + ch]; };
    double col[2][3];
    for (auto& a : col)
      for (double& v : a) v = rng.uniform();
    switch (k % 4) {
      case 0: {  // linear gradient at a random angle
        const double th = rng.uniform(0, 6.283185307179586), ct = std::cos(th), st = std::sin(th);
        for (int r = 0; r < size; ++r)
          for (int c = 0; c < size; ++c) {
            const double t = 0.5 + ((c - size / 2.0) * ct + (r - size / 2.0) * st) / (size * 1.5);
            for (int ch = 0; ch < 3; ++ch) px(r, c, ch) = col[0][ch] * (1 - t) + col[1][ch] * t;
          }
        break;
      }
      case 1: {  // checkerboard
        const int cell = 4 << rng.below(3);
        for (int r = 0; r < size; ++r)
          for (int c = 0; c < size; ++c)
            for (int ch = 0; ch < 3; ++ch) px(r, c, ch) = col[((r / cell) + (c / cell)) % 2][ch];
        break;
      }
      case 2: {  // Gaussian blobs on a flat background
        for (int r = 0; r < size; ++r)
          for (int c = 0; c < size; ++c)
            for (int ch = 0; ch < 3; ++ch) px(r, c, ch) = col[0][ch] * 0.5;
        const int blobs = 2 + static_cast<int>(rng.below(4));
        for (int b = 0; b < blobs; ++b) {
          const double cy = rng.uniform(0, size), cx = rng.uniform(0, size), s = rng.uniform(size / 16.0, size / 4.0);
          double bc[3];
          for (double& v : bc) v = rng.uniform(-0.5, 0.5);
          for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c) {
              const double g = std::exp(-((r - cy) * (r - cy) + (c - cx) * (c - cx)) / (2 * s * s));
              for (int ch = 0; ch < 3; ++ch) px(r, c, ch) += bc[ch] * g;
            }
        }
        break;
      }
      default: {  // smooth colour plus seeded noise
        const double amp = rng.uniform(0.05, 0.25);
        for (int r = 0; r < size; ++r)
          for (int c = 0; c < size; ++c)
            for (int ch = 0; ch < 3; ++ch) px(r, c, ch) = col[0][ch] + amp * rng.normal();
        break;
      }
    }
    for (std::size_t i = 0; i < f.size(); ++i)
      img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(f[i], 0.0, 1.0)));
    out.push_back(std::move(img));
  }
  return out;
}

Dataset::Dataset(std::vector<ImageBuffer> images) : images_(std::move(images)) {
  if (images_.empty()) throw ContractError("Dataset: no images");
  for (auto& img : images_)
    if (img.width < 64 || img.height < 64) img = pad_reflect(img, 64).image;
}

Dataset Dataset::from_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ImageError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (ext == ".ppm" || (ext == ".png" && png_supported())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<ImageBuffer> imgs;
  for (const auto& f : files) imgs.push_back(read_image(f));
  if (imgs.empty()) throw ImageError("no readable images in " + dir.string());
  return Dataset(std::move(imgs));
}

Tensor Dataset::sample_batch(int batch, int crop, Rng& rng) {
  if (batch < 1) throw ContractError("sample_batch: batch must be positive");
  int fit = crop;
  for (const auto& img : images_) fit = std::min({fit, img.width, img.height});
  fit = fit / 64 * 64;
  if (fit < 64) throw ContractError("sample_batch: crop must be at least 64");

  const std::size_t plane = static_cast<std::size_t>(fit) * fit;
  std::vector<double> out(static_cast<std::size_t>(batch) * 3 * plane);
  for (int b = 0; b < batch; ++b) {
    if (cursor_ == order_.size()) {
      order_.resize(images_.size());
      for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
      cursor_ = 0;
    }
    const ImageBuffer& img = images_[order_[cursor_++]];
    const int r0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(img.height - fit + 1)));
    const int c0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(img.width - fit + 1)));
    for (int ch = 0; ch < 3; ++ch)
      for (int r = 0; r < fit; ++r)
        for (int c = 0; c < fit; ++c)
          out[(static_cast<std::size_t>(b) * 3 + ch) * plane + static_cast<std::size_t>(r) * fit + c] =
              img.at(r0 + r, c0 + c, ch) / 255.0;
  }
  return Tensor::constant({batch, 3, fit, fit}, std::move(out));
}

std::vector<StepMetrics> fit(const TicModel& model, Dataset& data, const TrainConfig& cfg, const StepCallback& on_step) {
  Rng rng(cfg.seed);
  Adam opt(model.parameters(), cfg);
  std::vector<StepMetrics> log;
  for (int s = 0; s < cfg.steps; ++s) {
    const Tensor batch = data.sample_batch(cfg.batch_size, cfg.crop, rng);
    log.push_back(train_step(batch, model, opt, cfg, rng));
    if (on_step) on_step(s, log.back());
  }
  return log;
}

StepMetrics evaluate(const TicModel& model, const std::vector<ImageBuffer>& images, double lambda, std::uint64_t seed) {
  if (images.empty()) throw ContractError("evaluate: no images");
  NoGradGuard ng;
  Rng rng(seed);
  StepMetrics acc;
  for (const auto& img : images) {
    const Tensor x = pad_reflect(img, ModelConfig::kSpatialMultiple).image.to_tensor();
    const auto f = model.forward(x, entropy::QuantMode::noise, rng);
    const double pixels = static_cast<double>(x.dim(2) * x.dim(3));
    acc.loss += rd_loss(x, f.x_hat, f.bits_y, f.bits_z, lambda).item();
    acc.bpp += (f.bits_y.item() + f.bits_z.item()) / pixels;
    acc.mse += ops::mse(x, f.x_hat).item();
  }
  const double n = static_cast<double>(images.size());
  acc.loss /= n;
  acc.bpp /= n;
  acc.mse /= n;
  return acc;
}

void write_metrics_csv(std::ostream& out, const std::vector<StepMetrics>& metrics) {
  out << "step,loss,bpp,mse,grad_norm\n" << std::setprecision(17);
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    const auto& m = metrics[i];
    out << i << ',' << m.loss << ',' << m.bpp << ',' << m.mse << ',' << m.grad_norm << '\n';
  }
}

}  // namespace tic::train
