// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "umseg/common.hpp"

namespace umseg {

/// Little-endian serializer.
class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void text(const std::string& s) { bytes(s.data(), s.size()); }
  template <typename T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    uint(bits);
  }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Raised by ByteReader when the input ends early.
class TruncatedInput : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Little-endian deserializer over a borrowed buffer.
class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& buf, std::string context) : buf_(buf), context_(std::move(context)) {}

  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t position() const { return pos_; }

  void need(std::size_t n) const {
    if (remaining() < n)
      throw TruncatedInput("truncated " + context_ + ": need " + std::to_string(n) + " bytes at offset " +
                           std::to_string(pos_) + ", have " + std::to_string(remaining()));
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T uint() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(buf_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  float f32() {
    const auto bits = uint<std::uint32_t>();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
  std::string context_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace umseg
