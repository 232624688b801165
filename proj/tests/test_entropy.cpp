#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "tic/entropy.hpp"

using namespace tic;
using namespace tic::entropy;
using tic::testing::grad_check;
using tic::testing::probe;
using tic::testing::random_constant;
using tic::testing::random_param;

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Composite Simpson integration of the Gaussian density over [a, b].
double boxed_mass(double a, double b, double mu, double sigma, int n = 20000) {
  const double h = (b - a) / n;
  auto f = [&](double x) {
    const double t = (x - mu) / sigma;
    return std::exp(-0.5 * t * t) / (sigma * std::sqrt(2 * M_PI));
  };
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4 : 2);
  return s * h / 3;
}

Cam make_cam(int C, std::uint64_t seed) {
  Rng rng(seed);
  Cam::Config cfg;
  cfg.channels = C;
  cfg.hyper_channels = 2 * C;
  return Cam::make(cfg, rng);
}

bool same_at(const GaussianParams& a, const GaussianParams& b, std::int64_t C, std::int64_t plane, std::int64_t p) {
  for (std::int64_t c = 0; c < C; ++c) {
    const auto i = static_cast<std::size_t>(c * plane + p);
    if (a.mu.data()[i] != b.mu.data()[i] || a.sigma.data()[i] != b.sigma.data()[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("rounding") {
  CHECK(round_half_even(1.4) == 1.0);
  CHECK(round_half_even(-0.5) == 0.0);
  CHECK(round_half_even(0.5) == 0.0);
  CHECK(round_half_even(1.5) == 2.0);
  CHECK(round_half_even(2.5) == 2.0);
  const Tensor q = quantize_round(Tensor::constant({1}, {1.4}), Tensor::constant({1}, {0.3}));
  CHECK(q.item() == doctest::Approx(1.3).epsilon(1e-15));
  const Tensor r = quantize_round(Tensor::constant({3}, {1.4, -0.5, -2.6}));
  CHECK(r.data()[0] == 1.0);
  CHECK(r.data()[1] == 0.0);
  CHECK(r.data()[2] == -3.0);
}

TEST_CASE("noise quantization: offsets in [-0.5, 0.5) with zero mean over 1e6 draws") {
  Rng rng(1);
  const std::int64_t n = 1000000;
  const Tensor y = random_constant({n}, rng, -5, 5);
  const Tensor q = quantize_noise(y, rng);
  double mean = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = q.data()[i] - y.data()[i];
    // Subtraction of nearby doubles is exact here, so the half-open bound is checked exactly.
    REQUIRE(d >= -0.5);
    REQUIRE(d < 0.5);
    mean += d;
  }
  mean /= n;
  CHECK(std::fabs(mean) < 3.0 * std::sqrt(1.0 / 12.0 / n));
}

TEST_CASE("gaussian bits") {
  auto bits = [](double v, double mu, double sigma) {
    return gaussian_bits(Tensor::constant({1}, {v}), {Tensor::constant({1}, {mu}), Tensor::constant({1}, {sigma})}).item();
  };
  // -log2(Phi(0.5) - Phi(-0.5)) from an independent CDF implementation.
  CHECK(std::fabs(bits(0.7, 0.7, 1.0) - 1.3848665342909896) < 1e-12);
  for (double d : {0.3, 1.0, 2.2, 7.5}) CHECK(bits(0.1 + d, 0.1, 1.7) == doctest::Approx(bits(0.1 - d, 0.1, 1.7)).epsilon(1e-13));

  Tensor mu = Tensor::parameter({1}, {0.25});
  gaussian_bits(Tensor::constant({1}, {0.25}), {mu, Tensor::constant({1}, {1.3})}).backward();
  CHECK(std::fabs(mu.grad()[0]) < 1e-15);

  // Large scales grow like log2(sigma) + log2(sqrt(2 pi)).
  CHECK(bits(0, 0, 1000.0) == doctest::Approx(std::log2(1000.0 * std::sqrt(2 * M_PI))).epsilon(1e-6));
}

TEST_CASE("gaussian bits match a numerical-integration oracle within 1e-6 bits") {
  for (double sigma : {0.11, 0.3, 1.0, 2.5, 10.0})
    for (double d : {0.0, 0.2, 0.5, 1.0, 1.7, 3.0}) {
      const double v = 0.4 + d, mu = 0.4;
      const double oracle = -std::log2(boxed_mass(v - 0.5, v + 0.5, mu, sigma));
      const double got =
          gaussian_bits(Tensor::constant({1}, {v}), {Tensor::constant({1}, {mu}), Tensor::constant({1}, {sigma})}).item();
      if (oracle > 29.0) continue;  // below the probability floor
      INFO("sigma " << sigma << " d " << d);
      CHECK(std::fabs(got - oracle) < 1e-6);
    }
}

TEST_CASE("noise surrogate rate within 2% of the rounded rate for sigma >= 1") {
  Rng rng(2);
  const std::int64_t n = 20000;
  std::vector<double> y(n), mu(n), sg(n);
  for (std::int64_t i = 0; i < n; ++i) {
    sg[static_cast<std::size_t>(i)] = rng.uniform(1.0, 4.0);
    mu[static_cast<std::size_t>(i)] = 0.0;
    y[static_cast<std::size_t>(i)] = sg[static_cast<std::size_t>(i)] * rng.normal();
  }
  const Tensor Y = Tensor::constant({n}, y);
  const GaussianParams p{Tensor::constant({n}, mu), Tensor::constant({n}, sg)};
  const double rounded = gaussian_bits(quantize_round(Y), p).item();
  double noisy = 0;
  const int draws = 20;
  for (int k = 0; k < draws; ++k) noisy += gaussian_bits(quantize_noise(Y, rng), p).item() / draws;
  CHECK(std::fabs(noisy - rounded) / rounded < 0.02);
}

TEST_CASE("factorized prior") {
  Rng rng(3);
  const FactorizedPrior prior = FactorizedPrior::make(4, rng);
  const int L = 40;
  for (int c = 0; c < 4; ++c) {
    double tail = 0;
    const auto pmf = prior.pmf(c, L, &tail);
    REQUIRE(pmf.size() == 2 * L + 1);
    double total = tail, m1 = 0, m2 = 0;
    for (int k = -L; k <= L; ++k) {
      const double p = pmf[static_cast<std::size_t>(k + L)];
      CHECK(p > 0.0);
      total += p;
      m1 += k * p;
      m2 += k * k * p;
    }
    CHECK(std::fabs(total - 1.0) < 1e-9);
    // Roughly centred at init: the random biases move the mean by well under one spread.
    CHECK(std::fabs(m1) < 0.5 * std::sqrt(m2 - m1 * m1));
  }

  SUBCASE("with zero biases the construction is odd, so the pmf is exactly symmetric") {
    FactorizedPrior sym = FactorizedPrior::make(4, rng);
    nn::ParamList ps;
    sym.collect("p", ps);
    for (auto& [name, t] : ps)
      if (name.find(".bias") != std::string::npos) for (auto& v : t.mutable_data()) v = 0.0;
    for (int c = 0; c < 4; ++c) {
      const auto pmf = sym.pmf(c, L, nullptr);
      for (int k = 1; k <= L; ++k)
        CHECK(pmf[static_cast<std::size_t>(L + k)] == doctest::Approx(pmf[static_cast<std::size_t>(L - k)]).epsilon(1e-12));
    }
  }

  SUBCASE("cdf strictly increasing, saturating at both ends") {
    std::vector<double> grid;
    grid.push_back(-1e4);
    for (int i = -400; i <= 400; ++i) grid.push_back(i * 0.25);
    grid.push_back(1e4);
    std::vector<double> all;
    for (int c = 0; c < 4; ++c) all.insert(all.end(), grid.begin(), grid.end());
    const Tensor logits = prior.cdf_logits(Tensor::constant({4, static_cast<std::int64_t>(grid.size())}, all));
    for (int c = 0; c < 4; ++c) {
      for (std::size_t i = 1; i < grid.size(); ++i) CHECK(logits.at({c, (std::int64_t)i}) > logits.at({c, (std::int64_t)i - 1}));
      CHECK(logits.at({c, 0}) < -20);
      CHECK(logits.at({c, (std::int64_t)grid.size() - 1}) > 20);
    }
  }

  SUBCASE("rate of a zero tensor is N * -log2 p(0)") {
    const Tensor z = Tensor::zeros({2, 4, 3, 3});
    double expect = 0;
    for (int c = 0; c < 4; ++c) {
      const auto pmf = prior.pmf(c, 0, nullptr);
      expect += 18 * -std::log2(pmf[0]);
    }
    CHECK(prior.bits(z).item() == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("factorized prior gradient check") {
  Rng rng(4);
  FactorizedPrior prior = FactorizedPrior::make(2, rng);
  nn::ParamList ps;
  prior.collect("prior", ps);
  for (auto& [name, t] : ps)
    for (auto& v : t.mutable_data()) v += rng.uniform(-0.3, 0.3);
  Tensor z = random_param({1, 2, 2, 3}, rng, -3, 3);
  ps.emplace_back("z", z);
  const auto rep = grad_check(ps, [&] { return prior.bits(z); });
  INFO(rep.worst);
  CHECK(rep.max_rel < 1e-5);
}

TEST_CASE("CAM: zero latents and constant hyper features give constant parameters") {
  const int C = 8;
  const Cam cam = make_cam(C, 5);
  Rng rng(5);
  std::vector<double> h(static_cast<std::size_t>(2 * C * 36));
  for (int c = 0; c < 2 * C; ++c) {
    const double v = rng.uniform(-1, 1);
    for (int p = 0; p < 36; ++p) h[static_cast<std::size_t>(c * 36 + p)] = v;
  }
  const GaussianParams out = cam.forward(Tensor::zeros({1, C, 6, 6}), Tensor::constant({1, 2 * C, 6, 6}, h));
  for (int c = 0; c < C; ++c)
    for (int p = 1; p < 36; ++p) {
      CHECK(out.mu.data()[c * 36 + p] == out.mu.data()[c * 36]);
      CHECK(out.sigma.data()[c * 36 + p] == out.sigma.data()[c * 36]);
    }
  for (double s : out.sigma.data()) CHECK(s >= kSigmaMin);
}

TEST_CASE("CAM causality: exhaustive perturbation on a 6x6 grid") {
  const int C = 8, H = 6, W = 6, P = H * W;
  const Cam cam = make_cam(C, 6);
  Rng rng(6);
  const Tensor y = random_constant({1, C, H, W}, rng, -3, 3);
  const Tensor hyper = random_constant({1, 2 * C, H, W}, rng);
  NoGradGuard ng;
  const GaussianParams base = cam.forward(y, hyper);
  int future_leaks = 0, past_in_window = 0, past_silent = 0;
  for (int t2 = 0; t2 < P; ++t2) {
    std::vector<double> v(y.data().begin(), y.data().end());
    for (int c = 0; c < C; ++c) v[static_cast<std::size_t>(c * P + t2)] += 1.0 + c;
    const GaussianParams pert = cam.forward(Tensor::constant(y.shape(), v), hyper);
    for (int t1 = 0; t1 < P; ++t1) {
      const bool same = same_at(base, pert, C, P, t1);
      if (t1 <= t2) {
        if (!same) ++future_leaks;
      } else if (std::abs(t1 / W - t2 / W) <= 2 && std::abs(t1 % W - t2 % W) <= 2) {
        ++past_in_window;
        if (same) ++past_silent;
      } else if (!same) {
        ++future_leaks;  // outside the 5x5 neighbourhood nothing may change either
      }
    }
  }
  CHECK(future_leaks == 0);
  CHECK(past_in_window > 0);
  CHECK(past_silent == 0);
}

TEST_CASE("CAM causality: zero gradient from later positions up to 8x8") {
  const int C = 4;
  const Cam cam = make_cam(C, 7);
  Rng rng(7);
  for (int n : {3, 5, 8}) {
    const int P = n * n;
    Tensor y = random_param({1, C, n, n}, rng, -2, 2);
    const Tensor hyper = random_constant({1, 2 * C, n, n}, rng);
    const GaussianParams out = cam.forward(y, hyper);
    for (int t1 = 0; t1 < P; ++t1) {
      y.zero_grad();
      std::vector<double> sel(static_cast<std::size_t>(C * P), 0.0);
      for (int c = 0; c < C; ++c) sel[static_cast<std::size_t>(c * P + t1)] = 1.0;
      const Tensor s = Tensor::constant(y.shape(), sel);
      ops::add(ops::sum(ops::mul(out.mu, s)), ops::sum(ops::mul(out.sigma, s))).backward();
      for (int t2 = t1; t2 < P; ++t2)
        for (int c = 0; c < C; ++c) REQUIRE(y.grad()[static_cast<std::size_t>(c * P + t2)] == 0.0);
    }
  }
}

TEST_CASE("CAM batched evaluation equals serial per-position evaluation bit for bit") {
  const int C = 16;
  const Cam cam = make_cam(C, 8);
  Rng rng(8);
  const Tensor y = random_constant({2, C, 5, 7}, rng, -4, 4);
  const Tensor hyper = random_constant({2, 2 * C, 5, 7}, rng);
  NoGradGuard ng;
  const GaussianParams all = cam.forward(y, hyper);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 7; ++j) {
        const GaussianParams one = cam.forward_at(y, hyper, n, i, j);
        for (int c = 0; c < C; ++c) {
          REQUIRE(one.mu.data()[c] == all.mu.at({n, c, i, j}));
          REQUIRE(one.sigma.data()[c] == all.sigma.at({n, c, i, j}));
        }
      }
  CHECK_THROWS_AS(cam.forward(y, random_constant({2, C, 5, 7}, rng)), ShapeError);
}

TEST_CASE("CAM gradient check") {
  const int C = 4;
  Cam cam = make_cam(C, 9);
  Rng rng(9);
  nn::ParamList ps;
  cam.collect("cam", ps);
  for (auto& [name, t] : ps)
    if (name.ends_with(".bias")) for (auto& v : t.mutable_data()) v = rng.uniform(-0.3, 0.3);
  Tensor y = random_param({1, C, 3, 3}, rng, -2, 2);
  Tensor hyper = random_param({1, 2 * C, 3, 3}, rng);
  ps.emplace_back("y", y);
  ps.emplace_back("hyper", hyper);
  const auto rep = grad_check(ps, [&] {
    const GaussianParams p = cam.forward(y, hyper);
    return ops::add(probe(p.mu, 1), probe(p.sigma, 2));
  });
  INFO(rep.worst);
  CHECK(rep.max_rel < 1e-5);
}
