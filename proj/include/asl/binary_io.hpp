#pragma once

// Little-endian encoding helpers shared by the scene and checkpoint formats.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "asl/error.hpp"

namespace asl::io {

class ByteWriter {
 public:
  void bytes(std::string_view raw) { out_.insert(out_.end(), raw.begin(), raw.end()); }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }

  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

/// Bounds-checked reader; every failure reports the byte offset it stopped at.
class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& data, std::string what) : data_(data), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  void expect_magic(std::string_view magic) {
    need(magic.size(), "magic");
    for (std::size_t i = 0; i < magic.size(); ++i) {
      if (data_[pos_ + i] != static_cast<std::uint8_t>(magic[i])) {
        throw FormatError(what_ + ": bad magic, expected \"" + std::string(magic) + "\"", pos_ + i);
      }
    }
    pos_ += magic.size();
  }
  std::uint8_t u8(const char* field) {
    need(1, field);
    return data_[pos_++];
  }
  std::uint16_t u16(const char* field) { return static_cast<std::uint16_t>(get(2, field)); }
  std::uint32_t u32(const char* field) { return static_cast<std::uint32_t>(get(4, field)); }
  double f64(const char* field) { return std::bit_cast<double>(get(8, field)); }

  /// Throws unless `count` items of `size` bytes remain.
  void need_items(std::uint64_t count, std::size_t size, const char* field) {
    if (size != 0 && count > remaining() / size) {
      throw FormatError(what_ + ": truncated " + field + " (need " + std::to_string(count) + " x " +
                            std::to_string(size) + " bytes, " + std::to_string(remaining()) + " remain)",
                        data_.size());
    }
  }

  void expect_end() {
    if (pos_ != data_.size()) throw FormatError(what_ + ": trailing bytes after payload", pos_);
  }

  [[noreturn]] void fail(const std::string& message, std::size_t at) const {
    throw FormatError(what_ + ": " + message, at);
  }

 private:
  void need(std::size_t n, const char* field) {
    if (remaining() < n) throw FormatError(what_ + ": truncated while reading " + field, data_.size());
  }
  std::uint64_t get(int n, const char* field) {
    need(static_cast<std::size_t>(n), field);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  const std::vector<std::uint8_t>& data_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace asl::io
