#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace tic {

/// Container-level failure: bad magic, unsupported version, truncation, CRC mismatch.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint8_t kBitstreamMagic[4] = {'T', 'I', 'C', 'B'};
inline constexpr std::uint8_t kBitstreamVersion = 1;

/// Coded image. Layout (little-endian, byte aligned):
///
///   magic "TICB" | version u8 | config_hash u32
///   height u16 | width u16 | padded_height u16 | padded_width u16
///   z_range u16 | y_range u16
///   z_len u32 | z segment | y_len u32 | y segment
///   crc32 u32 over every preceding byte
struct BitStream {
  std::uint32_t config_hash = 0;
  std::uint16_t height = 0, width = 0;
  std::uint16_t padded_height = 0, padded_width = 0;
  std::uint16_t z_range = 0, y_range = 0;
  std::vector<std::uint8_t> z_segment;
  std::vector<std::uint8_t> y_segment;

  std::size_t payload_bytes() const { return z_segment.size() + y_segment.size(); }
};

inline constexpr std::size_t kBitstreamOverheadBytes = 4 + 1 + 4 + 8 + 4 + 4 + 4 + 4;

std::vector<std::uint8_t> serialize(const BitStream& bs);
BitStream parse_bitstream(std::span<const std::uint8_t> bytes);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace tic
