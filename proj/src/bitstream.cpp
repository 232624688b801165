#include "tic/bitstream.hpp"

#include <zlib.h>

#include <algorithm>
#include <string>

namespace tic {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    u16(static_cast<std::uint16_t>(v));
    u16(static_cast<std::uint16_t>(v >> 16));
  }
  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint16_t u16() {
    const std::uint16_t lo = u8();
    return static_cast<std::uint16_t>(lo | (std::uint16_t{u8()} << 8));
  }
  std::uint32_t u32() {
    const std::uint32_t lo = u16();
    return lo | (std::uint32_t{u16()} << 16);
  }
  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> v(in_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw FormatError("bitstream truncated");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(::crc32(c, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::vector<std::uint8_t> serialize(const BitStream& bs) {
  Writer w;
  w.bytes(kBitstreamMagic);
  w.u8(kBitstreamVersion);
  w.u32(bs.config_hash);
  w.u16(bs.height);
  w.u16(bs.width);
  w.u16(bs.padded_height);
  w.u16(bs.padded_width);
  w.u16(bs.z_range);
  w.u16(bs.y_range);
  w.u32(static_cast<std::uint32_t>(bs.z_segment.size()));
  w.bytes(bs.z_segment);
  w.u32(static_cast<std::uint32_t>(bs.y_segment.size()));
  w.bytes(bs.y_segment);
  w.u32(crc32(w.buffer()));
  return std::move(w.buffer());
}

BitStream parse_bitstream(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kBitstreamOverheadBytes) throw FormatError("bitstream truncated");
  if (!std::equal(std::begin(kBitstreamMagic), std::end(kBitstreamMagic), bytes.begin())) {
    throw FormatError("not a TIC bitstream (bad magic)");
  }
  Reader r(bytes);
  r.bytes(4);
  const std::uint8_t version = r.u8();
  if (version != kBitstreamVersion) throw FormatError("unsupported bitstream version " + std::to_string(version));
  BitStream bs;
  bs.config_hash = r.u32();
  bs.height = r.u16();
  bs.width = r.u16();
  bs.padded_height = r.u16();
  bs.padded_width = r.u16();
  bs.z_range = r.u16();
  bs.y_range = r.u16();
  bs.z_segment = r.bytes(r.u32());
  bs.y_segment = r.bytes(r.u32());
  const std::size_t body = r.pos();
  const std::uint32_t stored = r.u32();
  if (r.pos() != bytes.size()) throw FormatError("trailing bytes after bitstream");
  if (stored != crc32(bytes.first(body))) throw FormatError("bitstream CRC mismatch");
  if (bs.height == 0 || bs.width == 0 || bs.padded_height < bs.height || bs.padded_width < bs.width) {
    throw FormatError("bitstream has inconsistent image dimensions");
  }
  return bs;
}

}  // namespace tic
