// igdn(gdn(x)) with identical parameters on inputs in [-10, 10].
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "tic/layers.hpp"

using namespace tic;

TEST_CASE("gdn followed by igdn with identical parameters recovers the input") {
  Rng rng(1);
  const Tensor x = tic::testing::random_constant({4, 8, 4, 4}, rng, -10, 10);
  const nn::Gdn fwd = nn::Gdn::make(8, false);
  nn::Gdn inv = nn::Gdn::make(8, true);
  inv.beta_raw = fwd.beta_raw;
  inv.gamma_raw = fwd.gamma_raw;
  const Tensor back = inv.forward(fwd.forward(x));
  double worst = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i)
    worst = std::max(worst, std::fabs(back.data()[i] - x.data()[i]) / std::max(std::fabs(x.data()[i]), 1e-12));
  INFO("max relative error " << worst);
  CHECK(worst < 1e-4);
}
