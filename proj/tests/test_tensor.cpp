#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"

using namespace tic;
using tic::testing::grad_check;
using tic::testing::probe;
using tic::testing::random_constant;
using tic::testing::random_param;

namespace {

void expect_grad_ok(const std::vector<std::pair<std::string, Tensor>>& in, const std::function<Tensor()>& f,
                    double tol = 1e-5) {
  const auto rep = grad_check(in, f);
  INFO("worst: " << rep.worst);
  CHECK(rep.checked > 0);
  CHECK(rep.max_rel < tol);
}

}  // namespace

TEST_CASE("tensor construction enforces product(shape) == length(data)") {
  CHECK_THROWS_AS(Tensor::constant({2, 3}, std::vector<double>(5)), ShapeError);
  const Tensor t = Tensor::constant({2, 3}, {0, 1, 2, 3, 4, 5});
  CHECK(t.numel() == 6);
  CHECK(t.at({1, 2}) == 5.0);
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    Rng rng(1);
    const Tensor x = random_constant({3, 4}, rng);
    const Tensor eye = Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const Tensor y = ops::matmul(eye, x);
    for (std::int64_t i = 0; i < 12; ++i) CHECK(y.data()[i] == x.data()[i]);
  }
  SUBCASE("hand computed") {
    const Tensor y = ops::matmul(Tensor::constant({2, 2}, {1, 2, 3, 4}), Tensor::constant({2, 1}, {1, 1}));
    CHECK(y.shape() == Shape{2, 1});
    CHECK(y.data()[0] == 3.0);
    CHECK(y.data()[1] == 7.0);
  }
  SUBCASE("gradient of sum matches central differences") {
    Rng rng(2);
    Tensor a = random_param({5, 7}, rng), b = random_param({7, 3}, rng);
    expect_grad_ok({{"a", a}, {"b", b}}, [&] { return ops::sum(ops::matmul(a, b)); }, 1e-6);
  }
  SUBCASE("shape mismatch names both shapes") {
    try {
      ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[4x5]") != std::string::npos);
    }
  }
}

TEST_CASE("softmax") {
  const Tensor u = ops::softmax(Tensor::constant({3}, {0, 0, 0}), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

  const Tensor big = ops::softmax(Tensor::constant({2}, {1000, 0}), 0);
  CHECK(std::fabs(big.data()[0] - 1.0) < 1e-12);
  CHECK(std::fabs(big.data()[1]) < 1e-12);

  Rng rng(3);
  Tensor x = random_param({4, 6}, rng, -3, 3);
  for (int axis : {0, 1}) {
    const Tensor s = ops::softmax(x, axis);
    if (axis == 1) {
      for (int r = 0; r < 4; ++r) {
        double total = 0;
        for (int c = 0; c < 6; ++c) total += s.at({r, c});
        CHECK(std::fabs(total - 1.0) < 1e-12);
      }
    }
    expect_grad_ok({{"x", x}}, [&] { return probe(ops::softmax(x, axis)); }, 1e-6);
  }
}

TEST_CASE("backward") {
  SUBCASE("sum(w) gives ones") {
    Tensor w = Tensor::parameter({4}, {1, -2, 3, 0.5});
    ops::sum(w).backward();
    for (double g : w.grad()) CHECK(g == 1.0);
  }
  SUBCASE("sum(w*w) gives 2w") {
    Tensor w = Tensor::parameter({4}, {1, -2, 3, 0.5});
    ops::sum(ops::mul(w, w)).backward();
    for (int i = 0; i < 4; ++i) CHECK(w.grad()[i] == 2 * w.data()[i]);
  }
  SUBCASE("repeated calls accumulate until zeroed") {
    Tensor w = Tensor::parameter({2}, {1, 2});
    const Tensor loss = ops::sum(ops::mul(w, w));
    loss.backward();
    loss.backward();
    CHECK(w.grad()[1] == 8.0);
    w.zero_grad();
    loss.backward();
    CHECK(w.grad()[1] == 4.0);
  }
  SUBCASE("non-scalar loss is a contract error") {
    Tensor w = Tensor::parameter({2}, {1, 2});
    CHECK_THROWS_AS(ops::scale(w, 2.0).backward(), ContractError);
  }
  SUBCASE("no-grad guard records nothing") {
    Tensor w = Tensor::parameter({2}, {1, 2});
    Tensor y;
    {
      NoGradGuard ng;
      y = ops::sum(ops::mul(w, w));
    }
    CHECK_FALSE(y.requires_grad());
  }
}

TEST_CASE("tape determinism: identical runs give bit-identical gradients") {
  auto run = [] {
    Rng rng(11);
    Tensor a = random_param({6, 5}, rng), b = random_param({5, 4}, rng);
    Tensor g = random_param({4}, rng), bias = random_param({4}, rng);
    const Tensor h = ops::layer_norm(ops::gelu(ops::matmul(a, b)), g, bias);
    probe(ops::softmax(h, 1)).backward();
    std::vector<double> out(a.grad().begin(), a.grad().end());
    out.insert(out.end(), b.grad().begin(), b.grad().end());
    out.insert(out.end(), g.grad().begin(), g.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("per-channel broadcast matches explicit tiling exactly") {
  Rng rng(4);
  const Tensor x = random_constant({2, 3, 4}, rng);
  const Tensor b = random_constant({3}, rng);
  std::vector<double> tiled(24);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 4; ++k) tiled[static_cast<std::size_t>((n * 3 + c) * 4 + k)] = b.data()[c];
  const Tensor t = Tensor::constant({2, 3, 4}, tiled);
  const Tensor via_bc = ops::add_channel(x, b, 1), via_tile = ops::add(x, t);
  const Tensor mul_bc = ops::mul_channel(x, b, 1), mul_tile = ops::mul(x, t);
  for (int i = 0; i < 24; ++i) {
    CHECK(via_bc.data()[i] == via_tile.data()[i]);
    CHECK(mul_bc.data()[i] == mul_tile.data()[i]);
  }
  CHECK_THROWS_AS(ops::add(x, Tensor::zeros({2, 3})), ShapeError);
  CHECK_THROWS_AS(ops::add_channel(x, Tensor::zeros({4}), 1), ShapeError);
}

TEST_CASE("gradient check: elementwise and reductions") {
  Rng rng(5);
  Tensor a = random_param({3, 4}, rng), b = random_param({3, 4}, rng);
  Tensor ch = random_param({4}, rng);
  expect_grad_ok({{"a", a}, {"b", b}}, [&] { return probe(ops::add(a, b)); });
  expect_grad_ok({{"a", a}, {"b", b}}, [&] { return probe(ops::sub(a, b)); });
  expect_grad_ok({{"a", a}, {"b", b}}, [&] { return probe(ops::mul(a, b)); });
  expect_grad_ok({{"a", a}}, [&] { return probe(ops::scale(a, -1.7)); });
  expect_grad_ok({{"a", a}}, [&] { return probe(ops::add_scalar(a, 0.3)); });
  expect_grad_ok({{"a", a}, {"c", ch}}, [&] { return probe(ops::add_channel(a, ch, 1)); });
  expect_grad_ok({{"a", a}, {"c", ch}}, [&] { return probe(ops::mul_channel(a, ch, 1)); });
  expect_grad_ok({{"a", a}}, [&] { return ops::mean(ops::mul(a, a)); });
  expect_grad_ok({{"a", a}, {"b", b}}, [&] { return ops::mse(a, b); });
}

TEST_CASE("gradient check: products and normalization") {
  Rng rng(6);
  Tensor a = random_param({2, 3, 4}, rng), b = random_param({2, 4, 5}, rng), bt = random_param({2, 5, 4}, rng);
  expect_grad_ok({{"a", a}, {"b", b}}, [&] { return probe(ops::bmm(a, b)); });
  expect_grad_ok({{"a", a}, {"bt", bt}}, [&] { return probe(ops::bmm(a, bt, true)); });
  Tensor x = random_param({2, 3, 6}, rng), w = random_param({5, 6}, rng), bias = random_param({5}, rng);
  expect_grad_ok({{"x", x}, {"w", w}, {"bias", bias}}, [&] { return probe(ops::linear(x, w, bias)); });
  expect_grad_ok({{"x", x}, {"w", w}}, [&] { return probe(ops::linear(x, w, Tensor())); });
  Tensor g = random_param({6}, rng), lb = random_param({6}, rng);
  expect_grad_ok({{"x", x}, {"g", g}, {"b", lb}}, [&] { return probe(ops::layer_norm(x, g, lb)); });
}

TEST_CASE("gradient check: activations") {
  Rng rng(7);
  Tensor x = random_param({4, 5}, rng, -3, 3);
  expect_grad_ok({{"x", x}}, [&] { return probe(ops::leaky_relu(x, 0.01)); });
  expect_grad_ok({{"x", x}}, [&] { return probe(ops::gelu(x)); });
  expect_grad_ok({{"x", x}}, [&] { return probe(ops::tanh(x)); });
  expect_grad_ok({{"x", x}}, [&] { return probe(ops::sigmoid(x)); });
  expect_grad_ok({{"x", x}}, [&] { return probe(ops::softplus(x)); });
  const Tensor lr = ops::leaky_relu(Tensor::constant({2}, {-1, 2}), 0.01);
  CHECK(lr.data()[0] == doctest::Approx(-0.01));
  CHECK(lr.data()[1] == 2.0);
}

TEST_CASE("gradient check: layout ops") {
  Rng rng(8);
  Tensor x = random_param({2, 3, 4}, rng), y = random_param({2, 2, 4}, rng);
  expect_grad_ok({{"x", x}}, [&] { return probe(ops::reshape(x, {6, 4})); });
  expect_grad_ok({{"x", x}}, [&] { return probe(ops::narrow(x, 1, 1, 2)); });
  expect_grad_ok({{"x", x}, {"y", y}}, [&] { return probe(ops::concat({x, y}, 1)); });
  expect_grad_ok({{"x", x}}, [&] { return probe(ops::permute(x, {2, 0, 1})); });
  auto idx = std::make_shared<std::vector<std::int64_t>>(std::vector<std::int64_t>{0, 5, 5, -1, 23, 7, 7, 7});
  expect_grad_ok({{"x", x}}, [&] { return probe(ops::gather(x, {2, 4}, idx)); });
  const Tensor g = ops::gather(x, {2, 4}, idx);
  CHECK(g.data()[3] == 0.0);
  CHECK(g.data()[1] == x.data()[5]);
}

TEST_CASE("gradient check: convolutions, GDN and rate ops") {
  Rng rng(9);
  Tensor x = random_param({2, 3, 8, 8}, rng), w = random_param({4, 3, 3, 3}, rng), b = random_param({4}, rng);
  expect_grad_ok({{"x", x}, {"w", w}, {"b", b}}, [&] { return probe(ops::conv2d(x, w, b, 2, 1)); });
  expect_grad_ok({{"x", x}, {"w", w}, {"b", b}}, [&] { return probe(ops::conv2d(x, w, b, 1, 1)); });
  Tensor wt = random_param({3, 4, 3, 3}, rng);
  expect_grad_ok({{"x", x}, {"wt", wt}, {"b", b}}, [&] { return probe(ops::conv_transpose2d(x, wt, b, 2, 1, 1)); });

  Tensor beta = random_param({3}, rng, 0.5, 1.5), gamma = random_param({3, 3}, rng, 0.0, 0.5);
  for (bool inv : {false, true}) {
    expect_grad_ok({{"x", x}, {"beta", beta}, {"gamma", gamma}},
                   [&] { return probe(ops::gdn(x, beta, gamma, inv)); });
  }

  // Kept above the probability floor, where the estimate is a smooth function.
  Tensor v = random_param({10}, rng, -2, 2), mu = random_param({10}, rng, -1, 1), sg = random_param({10}, rng, 0.5, 3);
  expect_grad_ok({{"v", v}, {"mu", mu}, {"sigma", sg}},
                 [&] { return ops::neg_log2_sum(ops::gaussian_likelihood(v, mu, sg), 1e-9); });
  Tensor lo = random_param({10}, rng, -4, 0), hi = random_param({10}, rng, 0, 4);
  expect_grad_ok({{"lo", lo}, {"hi", hi}}, [&] { return probe(ops::logistic_interval(lo, hi)); });
}

TEST_CASE("neg_log2_sum floors the value but keeps pushing probability up") {
  Tensor p = Tensor::parameter({2}, {1e-12, 0.5});
  const Tensor bits = ops::neg_log2_sum(p, 1e-9);
  CHECK(bits.item() == doctest::Approx(-std::log2(1e-9) + 1.0));
  bits.backward();
  CHECK(p.grad()[0] < 0.0);
  CHECK(p.grad()[1] == doctest::Approx(-1.0 / (0.5 * std::log(2.0))));
}
