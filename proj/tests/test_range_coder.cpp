#include <doctest.h>

#include <cmath>

#include "golden.hpp"
#include "oracles.hpp"
#include "tic/bitstream.hpp"
#include "tic/range_coder.hpp"
#include "tic/rng.hpp"

using namespace tic;
using namespace tic::rc;
using tic::testing::random_pmf;
using tic::testing::sample_symbol;

namespace {

constexpr const char* kGoldenHex =
    "8d00232a05a9eff9f9141bf25fc835c8198720222faf20caed2af5807d85e06ded7c3f54fadff2cf6282162b4f80";

}  // namespace

TEST_CASE("quantize_cdf") {
  SUBCASE("exact halves") {
    const std::vector<double> p{0.5, 0.5};
    const QuantizedCdf q = quantize_cdf(p, 0.0);
    CHECK(q.cdf == std::vector<std::uint32_t>{0, 32768, 65536});
    CHECK_FALSE(q.has_escape);
  }
  SUBCASE("a 1e-9 bin keeps one LSB and stays decodable") {
    const std::vector<double> p{0.6, 1e-9, 0.4 - 1e-9};
    const QuantizedCdf q = quantize_cdf(p, 0.0, -1);
    CHECK(q.freq(1) >= 1);
    const std::vector<std::int32_t> s{0, 0, -1, 1, 0, 0, 0};
    const std::vector<QuantizedCdf> cdfs(s.size(), q);
    CHECK(rc_decode(rc_encode(s, cdfs), cdfs) == s);
  }
  SUBCASE("widths always sum to 2^16 and every bin gets at least 1") {
    Rng rng(1);
    for (int t = 0; t < 2000; ++t) {
      const int n = 1 + static_cast<int>(rng.below(t % 10 == 0 ? 3000 : 40));
      const double tail = rng.uniform() < 0.5 ? 0.0 : rng.uniform() * 0.1;
      const QuantizedCdf q = quantize_cdf(random_pmf(rng, n), tail);
      REQUIRE(q.cdf.front() == 0);
      REQUIRE(q.cdf.back() == kTotal);
      REQUIRE(q.bins() == n + (tail > 0 ? 1 : 0));
      for (int i = 0; i < q.bins(); ++i) REQUIRE(q.freq(i) >= 1);
    }
  }
  SUBCASE("deterministic and rejects degenerate input") {
    Rng rng(2);
    const auto p = random_pmf(rng, 17);
    CHECK(quantize_cdf(p, 0.01).cdf == quantize_cdf(p, 0.01).cdf);
    CHECK_THROWS_AS(quantize_cdf(std::vector<double>{}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(quantize_cdf(std::vector<double>{0.5, -0.1}, 0.0), std::invalid_argument);
  }
}

TEST_CASE("single certain symbol costs at most 2 bytes") {
  const QuantizedCdf q = quantize_cdf(std::vector<double>{1.0}, 0.0, 0);
  const std::vector<std::int32_t> s{0};
  const std::vector<QuantizedCdf> c{q};
  const auto bytes = rc_encode(s, c);
  CHECK(bytes.size() <= 2);
  CHECK(rc_decode(bytes, c) == s);
}

TEST_CASE("long runs of zero output bytes decode") {
  // A near-certain first bin keeps low at zero, so the stream is all zero bytes.
  const QuantizedCdf q = quantize_cdf(std::vector<double>{1.0 - 1e-6, 1e-6}, 0.0, 0);
  std::vector<std::int32_t> s(20000, 0);
  s.push_back(1);
  std::vector<QuantizedCdf> c(s.size(), q);
  CHECK(rc_decode(rc_encode(s, c), c) == s);
  s.pop_back();
  c.pop_back();
  CHECK(rc_decode(rc_encode(s, c), c) == s);
}

TEST_CASE("1e5 i.i.d. symbols code within 1% of the Shannon entropy") {
  const std::vector<double> p{0.4, 0.2, 0.15, 0.1, 0.08, 0.04, 0.02, 0.01};
  double h = 0;
  for (double v : p) h -= v * std::log2(v);
  const QuantizedCdf q = quantize_cdf(p, 0.0, 0);
  Rng rng(3);
  const int n = 100000;
  std::vector<std::int32_t> s(n);
  for (auto& v : s) {
    double u = rng.uniform(), acc = 0;
    int k = 0;
    while (k < 7 && u >= (acc += p[static_cast<std::size_t>(k)])) ++k;
    v = k;
  }
  const std::vector<QuantizedCdf> c(n, q);
  const auto bytes = rc_encode(s, c);
  CHECK(rc_decode(bytes, c) == s);
  const double coded = 8.0 * static_cast<double>(bytes.size()), shannon = h * n;
  INFO("coded " << coded << " bits, entropy " << shannon);
  CHECK(std::fabs(coded - shannon) / shannon < 0.01);
}

TEST_CASE("fuzz corpus: 1e4 random round trips within the coder overhead bound") {
  Rng rng(4);
  int escapes = 0;
  for (int t = 0; t < 10000; ++t) {
    std::vector<QuantizedCdf> tables;
    const int nt = 1 + static_cast<int>(rng.below(4));
    for (int k = 0; k < nt; ++k) {
      const int n = 1 + static_cast<int>(rng.below(t % 50 == 0 ? 1500 : 64));
      const double tail = rng.uniform() < 0.3 ? std::pow(10.0, -rng.uniform(1, 9)) : 0.0;
      tables.push_back(quantize_cdf(random_pmf(rng, n), tail, static_cast<std::int32_t>(rng.below(200)) - 100));
    }
    const auto len = static_cast<std::size_t>(rng.below(t % 100 == 0 ? 5000 : 300));
    std::vector<std::int32_t> s(len);
    std::vector<QuantizedCdf> c(len);
    for (std::size_t i = 0; i < len; ++i) {
      c[i] = tables[rng.below(tables.size())];
      s[i] = sample_symbol(rng, c[i]);
      if (s[i] < c[i].offset || s[i] >= c[i].offset + c[i].value_bins()) ++escapes;
    }
    const auto bytes = rc_encode(s, c);
    REQUIRE(rc_decode(bytes, c) == s);
    const double ideal = ideal_bits(s, c), coded = 8.0 * static_cast<double>(bytes.size());
    REQUIRE(std::fabs(coded - ideal) <= 32.0 + 0.001 * ideal);
  }
  CHECK(escapes > 0);
}

TEST_CASE("escape path carries out-of-table values") {
  const QuantizedCdf q = quantize_cdf(std::vector<double>{0.2, 0.6, 0.2}, 1e-3, -1);
  const std::vector<std::int32_t> s{0, 5000, -32768, 32767, 1, -2};
  const std::vector<QuantizedCdf> c(s.size(), q);
  CHECK(rc_decode(rc_encode(s, c), c) == s);
  const std::vector<std::int32_t> big{40000};
  CHECK_THROWS_AS(rc_encode(big, std::vector<QuantizedCdf>{q}), std::out_of_range);
  const QuantizedCdf closed = quantize_cdf(std::vector<double>{0.5, 0.5}, 0.0, 0);
  CHECK_THROWS_AS(rc_encode(std::vector<std::int32_t>{2}, std::vector<QuantizedCdf>{closed}), std::out_of_range);
}

TEST_CASE("golden stream is byte-identical across runs and matches the documented vector") {
  const auto g = testing::golden_input();
  const auto first = rc_encode(g.symbols, g.cdfs);
  const auto second = rc_encode(g.symbols, g.cdfs);
  CHECK(first == second);
  CHECK(testing::to_hex(first) == kGoldenHex);
  CHECK(rc_decode(first, g.cdfs) == g.symbols);
}

TEST_CASE("decoder rejects reads far past the end") {
  const QuantizedCdf q = quantize_cdf(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 0.0, 0);
  const std::vector<QuantizedCdf> many(200, q);
  CHECK_THROWS_AS(rc_decode(std::vector<std::uint8_t>{0x12, 0x34}, many), DecodeError);
}

TEST_CASE("bitstream container") {
  BitStream bs;
  bs.config_hash = 0xDEADBEEF;
  bs.height = 250;
  bs.width = 200;
  bs.padded_height = 256;
  bs.padded_width = 256;
  bs.z_range = 7;
  bs.y_range = 31;
  bs.z_segment = {1, 2, 3};
  bs.y_segment = {9, 8, 7, 6, 5};
  const auto bytes = serialize(bs);
  CHECK(bytes.size() == kBitstreamOverheadBytes + 8);
  CHECK(kBitstreamOverheadBytes == 33);

  const BitStream back = parse_bitstream(bytes);
  CHECK(back.config_hash == bs.config_hash);
  CHECK(back.height == 250);
  CHECK(back.width == 200);
  CHECK(back.padded_height == 256);
  CHECK(back.z_range == 7);
  CHECK(back.y_range == 31);
  CHECK(back.z_segment == bs.z_segment);
  CHECK(back.y_segment == bs.y_segment);
  CHECK(serialize(back) == bytes);

  SUBCASE("every single-byte tamper is rejected") {
    for (std::size_t i = 0; i < bytes.size(); ++i)
      for (std::uint8_t flip : {0x01, 0x80, 0xFF}) {
        auto t = bytes;
        t[i] ^= flip;
        CHECK_THROWS_AS(parse_bitstream(t), FormatError);
      }
  }
  SUBCASE("truncation, trailing bytes, bad magic and unknown version") {
    for (std::size_t n = 0; n < bytes.size(); ++n) {
      const std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
      CHECK_THROWS_AS(parse_bitstream(t), FormatError);
    }
    auto extra = bytes;
    extra.push_back(0);
    CHECK_THROWS_AS(parse_bitstream(extra), FormatError);
    auto ver = bytes;
    ver[4] = 2;
    try {
      parse_bitstream(ver);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
}
