#include "mplug/container.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mplug/errors.hpp"

namespace mplug {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

void PayloadWriter::put_f32(double value) {
  const float f = static_cast<float>(value);
  char raw[4];
  std::memcpy(raw, &f, 4);
  bytes_.append(raw, 4);
}

void PayloadWriter::put_f32s(std::span<const double> values) {
  for (double v : values) put_f32(v);
}

void PayloadWriter::put_u32(std::uint32_t value) {
  char raw[4];
  std::memcpy(raw, &value, 4);
  bytes_.append(raw, 4);
}

void PayloadReader::need(std::size_t n) const {
  if (pos_ + n > bytes_.size()) throw FormatError("payload truncated");
}

double PayloadReader::get_f32() {
  need(4);
  float f;
  std::memcpy(&f, bytes_.data() + pos_, 4);
  pos_ += 4;
  return static_cast<double>(f);
}

std::vector<double> PayloadReader::get_f32s(std::size_t count) {
  need(count * 4);
  std::vector<double> out(count);
  for (double& v : out) v = get_f32();
  return out;
}

std::uint32_t PayloadReader::get_u32() {
  need(4);
  std::uint32_t v;
  std::memcpy(&v, bytes_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

std::string encode_container(std::string_view magic, const json& header, const std::string& payload) {
  if (magic.size() != 5) throw ContractError("container magic must be 5 bytes");
  const std::string text = header.dump();
  std::string out(magic);
  const auto length = static_cast<std::uint32_t>(text.size());
  char raw[4];
  std::memcpy(raw, &length, 4);
  out.append(raw, 4);
  out += text;
  out += payload;
  return out;
}

void write_container(const std::filesystem::path& path, std::string_view magic, const json& header,
                     const std::string& payload) {
  write_file_bytes(path, encode_container(magic, header, payload));
}

void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Container decode_container(std::string_view bytes, std::string_view magic) {
  if (bytes.size() < magic.size() + 4 || bytes.substr(0, magic.size()) != magic) {
    throw FormatError("bad magic: expected " + std::string(magic));
  }
  std::uint32_t length;
  std::memcpy(&length, bytes.data() + magic.size(), 4);
  const std::size_t start = magic.size() + 4;
  if (start + length > bytes.size()) throw FormatError("header truncated");
  Container c;
  try {
    c.header = json::parse(bytes.substr(start, length));
  } catch (const json::exception& e) {
    throw FormatError(std::string("header is not valid JSON: ") + e.what());
  }
  if (!c.header.is_object()) throw FormatError("header is not a JSON object");
  c.payload = std::string(bytes.substr(start + length));
  return c;
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact(path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Container read_container(const std::filesystem::path& path, std::string_view magic) {
  return decode_container(read_file_bytes(path), magic);
}

std::string file_sha256(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

}  // namespace mplug
