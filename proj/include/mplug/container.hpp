#pragma once

// Shared binary container used by every persisted artifact:
//   magic (5 ASCII bytes) | u32 LE header length | JSON header | payload
// Payloads are little-endian f32 / u32 streams described by the header.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace mplug {

using json = nlohmann::json;

class PayloadWriter {
 public:
  void put_f32(double value);
  void put_f32s(std::span<const double> values);
  void put_u32(std::uint32_t value);
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class PayloadReader {
 public:
  explicit PayloadReader(std::string_view bytes) : bytes_(bytes) {}
  double get_f32();
  std::vector<double> get_f32s(std::size_t count);
  std::uint32_t get_u32();
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

struct Container {
  json header;
  std::string payload;
};

std::string encode_container(std::string_view magic, const json& header, const std::string& payload);
void write_container(const std::filesystem::path& path, std::string_view magic, const json& header,
                     const std::string& payload);
// Throws FormatError on wrong magic, truncated header or unparsable JSON.
Container decode_container(std::string_view bytes, std::string_view magic);
Container read_container(const std::filesystem::path& path, std::string_view magic);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::string& bytes);
// SHA-256 hex digest of a file's bytes.
std::string file_sha256(const std::filesystem::path& path);

// Rounds through f32, the precision used on disk.
inline double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace mplug
