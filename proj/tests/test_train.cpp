#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "tic/train.hpp"

using namespace tic;
using namespace tic::train;

namespace {

Tensor filled(Shape s, double v) { return Tensor::full(std::move(s), v); }

}  // namespace

TEST_CASE("rd_loss worked examples") {
  const Tensor x = filled({1, 3, 4, 4}, 0.5);
  CHECK(rd_loss(x, x, Tensor::scalar(0), Tensor::scalar(0), 0.013).item() == 0.0);

  // lambda 0 leaves the rate only: 32 bits over 16 pixels
  const Tensor xh = filled({1, 3, 4, 4}, 0.25);
  CHECK(rd_loss(x, xh, Tensor::scalar(20), Tensor::scalar(12), 0.0).item() == doctest::Approx(2.0));

  // MSE of 32.5 on the 8-bit scale, 0.4 bpp, lambda 0.013
  const double d = std::sqrt(32.5) / 255.0;
  const Tensor big = filled({2, 3, 8, 8}, 0.5);
  const Tensor off = filled({2, 3, 8, 8}, 0.5 + d);
  const double bits = 0.4 * 2 * 8 * 8;
  CHECK(rd_loss(big, off, Tensor::scalar(bits * 0.75), Tensor::scalar(bits * 0.25), 0.013).item() ==
        doctest::Approx(0.8225).epsilon(1e-12));
  CHECK_THROWS_AS(rd_loss(big, x, Tensor::scalar(0), Tensor::scalar(0), 0.013), ShapeError);
}

TEST_CASE("psnr and bpp") {
  CHECK(psnr_from_mse(1e-4) == doctest::Approx(40.0).epsilon(1e-12));
  const Tensor x = filled({1, 3, 2, 2}, 0.3);
  CHECK(psnr(x, x) == 100.0);
  CHECK(bpp(2400, 240, 320) == doctest::Approx(0.25));
}

TEST_CASE("Adam first step moves each weight by lr against its gradient sign") {
  Tensor w = Tensor::parameter({3}, {1.0, -2.0, 0.5});
  TrainConfig cfg;
  cfg.lr = 0.1;
  Adam opt({{"w", w}}, cfg);
  auto g = w.mutable_grad();
  g[0] = 4.0;
  g[1] = -0.001;
  g[2] = 0.0;
  opt.step();
  CHECK(w.data()[0] == doctest::Approx(1.0 - 0.1 * 4.0 / (4.0 + 1e-8)));
  CHECK(w.data()[1] == doctest::Approx(-2.0 + 0.1 * 0.001 / (0.001 + 1e-8)));
  CHECK(w.data()[2] == 0.5);
  CHECK(w.grad()[0] == 0.0);
  CHECK(opt.steps_taken() == 1);

  // second step with the same gradient: bias-corrected moments are unchanged
  w.mutable_grad()[0] = 4.0;
  opt.step();
  CHECK(w.data()[0] == doctest::Approx(1.0 - 0.2).epsilon(1e-7));
}

TEST_CASE("train_step is deterministic and reports the pre-clip norm") {
  auto run = [] {
    const TicModel m(preset("toy-16"), 4);
    Dataset data(synthetic_images(4, 64, 1));
    TrainConfig cfg;
    cfg.steps = 2;
    cfg.batch_size = 2;
    cfg.crop = 64;
    cfg.seed = 9;
    return fit(m, data, cfg);
  };
  const auto a = run(), b = run();
  REQUIRE(a.size() == 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].loss == b[i].loss);
    CHECK(a[i].bpp == b[i].bpp);
    CHECK(a[i].mse == b[i].mse);
    CHECK(a[i].grad_norm == b[i].grad_norm);
    CHECK(std::isfinite(a[i].grad_norm));
    CHECK(a[i].grad_norm > 1.0);  // clipping to 1.0 happened afterwards
  }
  CHECK(a[0].loss != a[1].loss);
}

TEST_CASE("non-finite input names the diverging term") {
  const TicModel m(preset("toy-16"), 4);
  TrainConfig cfg;
  Adam opt(m.parameters(), cfg);
  Rng rng(1);
  std::vector<double> v(3 * 64 * 64, 0.5);
  v[100] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_step(Tensor::constant({1, 3, 64, 64}, v), m, opt, cfg, rng);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite") != std::string::npos);
    CHECK((msg.find("rate") != std::string::npos || msg.find("distortion") != std::string::npos));
  }
}

TEST_CASE("saliency map of an all-zero model is zero") {
  const TicModel m(preset("toy-16"), 0);
  for (auto [n, p] : m.parameters())
    for (double& w : p.mutable_data()) w = 0.0;
  Rng rng(2);
  const Tensor x = tic::testing::random_constant({1, 3, 32, 32}, rng, 0.0, 1.0);
  const auto map = saliency_map(m, x, 1, 1);
  CHECK(map.size() == 32 * 32);
  for (double v : map) CHECK(v == 0.0);
  CHECK(to_gray(map) == std::vector<std::uint8_t>(map.size(), 0));
}

TEST_CASE("saliency map is finite, nonzero and matches the finite-difference Jacobian row") {
  const TicModel m(preset("toy-16"), 3);
  Rng rng(5);
  std::vector<double> v = tic::testing::random_values(3 * 16 * 16, rng, 0.0, 1.0);
  const Tensor x = Tensor::constant({1, 3, 16, 16}, v);
  const auto map = saliency_map(m, x, 0, 0);
  REQUIRE(map.size() == 256);
  double total = 0;
  for (double s : map) {
    CHECK(std::isfinite(s));
    total += s;
  }
  CHECK(total > 0);

  NoGradGuard ng;
  auto centre = [&](const std::vector<double>& in) {
    const Tensor y = m.g_a(Tensor::constant({1, 3, 16, 16}, in));
    double s = 0;
    for (std::int64_t c = 0; c < y.dim(1); ++c) s += y.at({0, c, 0, 0});
    return s / static_cast<double>(y.dim(1));
  };
  const double h = 1e-6;
  double worst = 0;
  for (int p = 0; p < 256; ++p) {
    double acc = 0;
    for (int c = 0; c < 3; ++c) {
      auto up = v, dn = v;
      up[static_cast<std::size_t>(c * 256 + p)] += h;
      dn[static_cast<std::size_t>(c * 256 + p)] -= h;
      acc += std::fabs((centre(up) - centre(dn)) / (2 * h)) / 3.0;
    }
    worst = std::max(worst, std::fabs(acc - map[static_cast<std::size_t>(p)]));
  }
  CHECK(worst < 1e-4);
  CHECK_THROWS_AS(saliency_map(m, x, 1, 0), ContractError);
}

TEST_CASE("to_gray maps the maximum to 255") {
  CHECK(to_gray({0.0, 0.5, 2.0}) == std::vector<std::uint8_t>{0, 64, 255});
}

TEST_CASE("synthetic corpus is seeded and varied") {
  const auto a = synthetic_images(8, 64, 3), b = synthetic_images(8, 64, 3), c = synthetic_images(8, 64, 4);
  REQUIRE(a.size() == 8);
  std::set<std::vector<std::uint8_t>> distinct;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].width == 64);
    CHECK(a[i].height == 64);
    CHECK(a[i].pixels == b[i].pixels);
    distinct.insert(a[i].pixels);
  }
  CHECK(distinct.size() == 8);
  CHECK(a[0].pixels != c[0].pixels);
}

TEST_CASE("dataset crops and shuffles per epoch") {
  std::vector<ImageBuffer> imgs;
  for (int k = 0; k < 3; ++k) {
    ImageBuffer img(150, 130);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(k);
    imgs.push_back(img);
  }
  Dataset data(imgs);
  Rng rng(1);
  const Tensor b = data.sample_batch(3, 256, rng);
  CHECK(b.shape() == Shape{3, 3, 128, 128});  // min extent 130, rounded down to 64s
  std::set<double> seen;
  for (int i = 0; i < 3; ++i) seen.insert(b.at({i, 0, 0, 0}));
  CHECK(seen.size() == 3);  // one epoch visits every image once

  Dataset small(synthetic_images(2, 32, 1));
  CHECK(small.image(0).width == 64);
  CHECK(small.sample_batch(1, 256, rng).shape() == Shape{1, 3, 64, 64});
  CHECK_THROWS_AS(Dataset({}), ContractError);
}

TEST_CASE("directory dataset loads images in name order") {
  const auto dir = std::filesystem::temp_directory_path() / "tic_train_dir_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto imgs = synthetic_images(2, 64, 5);
  write_ppm(dir / "b.ppm", imgs[1]);
  write_ppm(dir / "a.ppm", imgs[0]);
  {
    std::ofstream(dir / "notes.txt") << "ignored";
  }
  const Dataset d = Dataset::from_directory(dir);
  CHECK(d.size() == 2);
  CHECK(d.image(0).pixels == imgs[0].pixels);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(Dataset::from_directory(dir), ImageError);
}

TEST_CASE("metrics CSV has a header and one row per step") {
  std::ostringstream out;
  write_metrics_csv(out, {{1.5, 0.25, 0.01, 3.0}, {1.25, 0.2, 0.5, 2.0}});
  CHECK(out.str() == "step,loss,bpp,mse,grad_norm\n0,1.5,0.25,0.01,3\n1,1.25,0.20000000000000001,0.5,2\n");
}

TEST_CASE("evaluate is reproducible for a fixed seed") {
  const TicModel m(preset("toy-16"), 1);
  const auto imgs = synthetic_images(2, 64, 2);
  const auto a = evaluate(m, imgs, 0.013, 5), b = evaluate(m, imgs, 0.013, 5);
  CHECK(a.loss == b.loss);
  CHECK(a.loss == doctest::Approx(a.bpp + 0.013 * 255 * 255 * a.mse));
}
