#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace tic::rc {

inline constexpr int kPrecisionBits = 16;
inline constexpr std::uint32_t kTotal = 1u << kPrecisionBits;

/// Malformed or truncated coded data.
class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Integer CDF over [0, 2^16]. Index i covers value offset + i; when
/// has_escape is set the last bin is the escape symbol, and values outside
/// the table are sent as escape followed by a raw 16-bit word.
struct QuantizedCdf {
  std::vector<std::uint32_t> cdf;
  std::int32_t offset = 0;
  bool has_escape = false;

  int bins() const { return static_cast<int>(cdf.size()) - 1; }
  int value_bins() const { return bins() - (has_escape ? 1 : 0); }
  std::uint32_t freq(int i) const { return cdf[static_cast<std::size_t>(i) + 1] - cdf[static_cast<std::size_t>(i)]; }
};

/// Largest-remainder quantization of a pmf to 16-bit frequencies, every bin
/// at least one. An escape bin carrying `tail_mass` is appended when tail_mass > 0.
QuantizedCdf quantize_cdf(std::span<const double> pmf, double tail_mass, std::int32_t offset = 0);

/// Carry-propagating range coder: 64-bit low and range, byte-wise
/// renormalization, output kept in memory so carries are resolved in place.
class RangeEncoder {
 public:
  void encode(std::uint32_t cum, std::uint32_t freq);
  void encode_symbol(std::int32_t value, const QuantizedCdf& cdf);
  void encode_raw16(std::uint16_t v) { encode(v, 1); }
  /// Flushes the shortest tail that still pins the final interval; trailing
  /// zero bytes of the flush are dropped (the decoder reads zeros past the end).
  std::vector<std::uint8_t> finish();

 private:
  void propagate_carry();
  std::uint64_t low_ = 0;
  std::uint64_t range_ = ~std::uint64_t{0};
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes);
  /// Returns the bin index whose interval holds the current code.
  int decode_bin(const QuantizedCdf& cdf);
  std::int32_t decode_symbol(const QuantizedCdf& cdf);
  std::uint16_t decode_raw16();

 private:
  std::uint32_t peek(std::uint32_t limit);
  void consume(std::uint32_t cum, std::uint32_t freq);
  std::uint8_t next_byte();

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  std::uint64_t code_ = 0;
  std::uint64_t range_ = ~std::uint64_t{0};
  std::uint64_t step_ = 0;
};

/// One CDF per symbol.
std::vector<std::uint8_t> rc_encode(std::span<const std::int32_t> symbols, std::span<const QuantizedCdf> cdfs);
std::vector<std::int32_t> rc_decode(std::span<const std::uint8_t> bytes, std::span<const QuantizedCdf> cdfs);

/// Ideal code length in bits of `symbols` under the quantized CDFs
/// (escape words counted at 16 bits).
double ideal_bits(std::span<const std::int32_t> symbols, std::span<const QuantizedCdf> cdfs);

}  // namespace tic::rc
