#include "tic/range_coder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace tic::rc {

namespace {
constexpr std::uint64_t kRenormBound = std::uint64_t{1} << 56;
}

QuantizedCdf quantize_cdf(std::span<const double> pmf, double tail_mass, std::int32_t offset) {
  std::vector<double> mass(pmf.begin(), pmf.end());
  const bool escape = tail_mass > 0.0;
  if (escape) mass.push_back(tail_mass);
  if (mass.empty()) throw std::invalid_argument("quantize_cdf: empty pmf");
  if (mass.size() > kTotal) throw std::invalid_argument("quantize_cdf: more bins than probability resolution");
  double total = 0.0;
  for (double m : mass) {
    if (!(m >= 0.0) || !std::isfinite(m)) throw std::invalid_argument("quantize_cdf: pmf entries must be finite and >= 0");
    total += m;
  }
  if (!(total > 0.0)) throw std::invalid_argument("quantize_cdf: pmf has no mass");

  const auto n = static_cast<std::int64_t>(mass.size());
  const std::int64_t budget = std::int64_t{kTotal} - n;  // one LSB reserved per bin
  std::vector<std::int64_t> freq(mass.size());
  std::vector<double> rem(mass.size());
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < mass.size(); ++i) {
    const double share = mass[i] / total * static_cast<double>(budget);
    freq[i] = static_cast<std::int64_t>(std::floor(share));
    rem[i] = share - static_cast<double>(freq[i]);
    assigned += freq[i];
  }
  std::vector<std::size_t> order(mass.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  std::int64_t extra = budget - assigned;
  for (std::size_t k = 0; extra > 0; k = (k + 1) % order.size(), --extra) ++freq[order[k]];
  while (extra < 0) {  // only reachable through floating-point slop
    auto it = std::max_element(freq.begin(), freq.end());
    --*it;
    ++extra;
  }

  QuantizedCdf q;
  q.offset = offset;
  q.has_escape = escape;
  q.cdf.resize(mass.size() + 1);
  q.cdf[0] = 0;
  for (std::size_t i = 0; i < mass.size(); ++i) q.cdf[i + 1] = q.cdf[i] + static_cast<std::uint32_t>(freq[i] + 1);
  return q;
}

// ---------------------------------------------------------------------------

void RangeEncoder::propagate_carry() {
  std::size_t i = out_.size();
  while (i > 0 && out_[i - 1] == 0xFF) out_[--i] = 0;
  if (i == 0) throw std::logic_error("range coder: carry out of an empty prefix");
  ++out_[i - 1];
}

void RangeEncoder::encode(std::uint32_t cum, std::uint32_t freq) {
  if (freq == 0 || std::uint64_t{cum} + freq > kTotal) throw std::invalid_argument("range coder: invalid interval");
  const std::uint64_t step = range_ >> kPrecisionBits;
  const std::uint64_t add = step * cum;
  low_ += add;
  if (low_ < add) propagate_carry();
  range_ = step * freq;
  while (range_ < kRenormBound) {
    out_.push_back(static_cast<std::uint8_t>(low_ >> 56));
    low_ <<= 8;
    range_ <<= 8;
  }
}

void RangeEncoder::encode_symbol(std::int32_t value, const QuantizedCdf& cdf) {
  const std::int64_t idx = std::int64_t{value} - cdf.offset;
  if (idx >= 0 && idx < cdf.value_bins()) {
    encode(cdf.cdf[static_cast<std::size_t>(idx)], cdf.freq(static_cast<int>(idx)));
    return;
  }
  if (!cdf.has_escape) {
    throw std::out_of_range("range coder: value " + std::to_string(value) + " outside CDF support without escape");
  }
  if (value < INT16_MIN || value > INT16_MAX) {
    throw std::out_of_range("range coder: escaped value " + std::to_string(value) + " exceeds 16 bits");
  }
  const int esc = cdf.bins() - 1;
  encode(cdf.cdf[static_cast<std::size_t>(esc)], cdf.freq(esc));
  encode_raw16(static_cast<std::uint16_t>(static_cast<std::int16_t>(value)));
}

std::vector<std::uint8_t> RangeEncoder::finish() {
  __extension__ using u128 = unsigned __int128;
  const u128 lo = low_;
  const u128 hi = lo + range_ - 1;
  u128 v = lo;
  for (int k = 64; k >= 0; --k) {
    const u128 mask = (u128{1} << k) - 1;
    const u128 cand = (lo + mask) & ~mask;
    if (cand <= hi) {
      v = cand;
      break;
    }
  }
  if (v >> 64) propagate_carry();
  low_ = static_cast<std::uint64_t>(v);
  const std::size_t body = out_.size();
  for (int i = 0; i < 8; ++i) {
    out_.push_back(static_cast<std::uint8_t>(low_ >> 56));
    low_ <<= 8;
  }
  // Only flush bytes may be dropped; the decoder pads at most 8 zeros.
  while (out_.size() > body && out_.back() == 0) out_.pop_back();
  std::vector<std::uint8_t> result = std::move(out_);
  out_.clear();
  low_ = 0;
  range_ = ~std::uint64_t{0};
  return result;
}

// ---------------------------------------------------------------------------

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes) : in_(bytes) {
  for (int i = 0; i < 8; ++i) code_ = (code_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
  const std::size_t p = pos_++;
  if (p < in_.size()) return in_[p];
  // The encoder drops at most the 8 flush bytes, all zero.
  if (p >= in_.size() + 8) throw DecodeError("range decoder: read past end of stream");
  return 0;
}

std::uint32_t RangeDecoder::peek(std::uint32_t limit) {
  step_ = range_ >> kPrecisionBits;
  const std::uint64_t c = code_ / step_;
  if (c >= limit) throw DecodeError("range decoder: code outside coding interval");
  return static_cast<std::uint32_t>(c);
}

void RangeDecoder::consume(std::uint32_t cum, std::uint32_t freq) {
  code_ -= step_ * cum;
  range_ = step_ * freq;
  while (range_ < kRenormBound) {
    code_ = (code_ << 8) | next_byte();
    range_ <<= 8;
  }
}

int RangeDecoder::decode_bin(const QuantizedCdf& cdf) {
  if (cdf.cdf.size() < 2 || cdf.cdf.back() != kTotal) throw std::invalid_argument("range decoder: malformed CDF");
  const std::uint32_t c = peek(kTotal);
  // Largest s with cdf[s] <= c.
  const auto it = std::upper_bound(cdf.cdf.begin(), cdf.cdf.end(), c);
  const int s = static_cast<int>(it - cdf.cdf.begin()) - 1;
  consume(cdf.cdf[static_cast<std::size_t>(s)], cdf.freq(s));
  return s;
}

std::int32_t RangeDecoder::decode_symbol(const QuantizedCdf& cdf) {
  const int s = decode_bin(cdf);
  if (cdf.has_escape && s == cdf.bins() - 1) return static_cast<std::int16_t>(decode_raw16());
  return cdf.offset + s;
}

std::uint16_t RangeDecoder::decode_raw16() {
  const std::uint32_t c = peek(kTotal);
  consume(c, 1);
  return static_cast<std::uint16_t>(c);
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> rc_encode(std::span<const std::int32_t> symbols, std::span<const QuantizedCdf> cdfs) {
  if (symbols.size() != cdfs.size()) throw std::invalid_argument("rc_encode: one CDF per symbol required");
  RangeEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i) enc.encode_symbol(symbols[i], cdfs[i]);
  return enc.finish();
}

std::vector<std::int32_t> rc_decode(std::span<const std::uint8_t> bytes, std::span<const QuantizedCdf> cdfs) {
  RangeDecoder dec(bytes);
  std::vector<std::int32_t> out;
  out.reserve(cdfs.size());
  for (const auto& c : cdfs) out.push_back(dec.decode_symbol(c));
  return out;
}

double ideal_bits(std::span<const std::int32_t> symbols, std::span<const QuantizedCdf> cdfs) {
  if (symbols.size() != cdfs.size()) throw std::invalid_argument("ideal_bits: one CDF per symbol required");
  double bits = 0.0;
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    const auto& c = cdfs[i];
    const std::int64_t idx = std::int64_t{symbols[i]} - c.offset;
    if (idx >= 0 && idx < c.value_bins()) {
      bits -= std::log2(static_cast<double>(c.freq(static_cast<int>(idx))) / kTotal);
    } else {
      bits -= std::log2(static_cast<double>(c.freq(c.bins() - 1)) / kTotal);
      bits += 16.0;
    }
  }
  return bits;
}

}  // namespace tic::rc
