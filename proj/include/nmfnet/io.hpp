#pragma once

#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nmfnet/errors.hpp"

namespace nmfnet {

struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> data;  // row-major, interleaved RGB

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w) : height(h), width(w), data(h * w * 3, 0) {}
  std::uint8_t* at(std::size_t y, std::size_t x) { return data.data() + (y * width + x) * 3; }
  const std::uint8_t* at(std::size_t y, std::size_t x) const {
    return data.data() + (y * width + x) * 3;
  }
  bool operator==(const RgbImage&) const = default;
};

struct GrayImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> data;

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w) : height(h), width(w), data(h * w, 0) {}
  bool operator==(const GrayImage&) const = default;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace detail {

inline void append_le_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_le_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void append_le_f32(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

inline float read_le_f32(const char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(u);
}

// Parses a binary netpbm header ("P5"/"P6"), returning the payload offset.
inline std::size_t parse_netpbm_header(const std::string& bytes, const char* magic,
                                       std::size_t& width, std::size_t& height,
                                       const std::string& name) {
  std::size_t pos = 0;
  const auto skip_ws = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  const auto token = [&]() {
    skip_ws();
    std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != magic) throw IoError(name + ": not a " + magic + " image");
  try {
    width = std::stoul(token());
    height = std::stoul(token());
    if (std::stoul(token()) != 255) throw IoError(name + ": only maxval 255 is supported");
  } catch (const std::invalid_argument&) {
    throw IoError(name + ": malformed header");
  }
  return pos + 1;  // single whitespace byte after maxval
}

}  // namespace detail

inline std::string encode_ppm(const RgbImage& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.data.data()), img.data.size());
  return out;
}

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.data.data()), img.data.size());
  return out;
}

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  write_file_atomic(path, encode_ppm(img));
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  write_file_atomic(path, encode_pgm(img));
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  RgbImage img;
  const auto off = detail::parse_netpbm_header(bytes, "P6", img.width, img.height, path.string());
  const std::size_t n = img.width * img.height * 3;
  if (bytes.size() < off + n) throw IoError(path.string() + ": truncated pixel data");
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                  bytes.begin() + static_cast<std::ptrdiff_t>(off + n));
  return img;
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  GrayImage img;
  const auto off = detail::parse_netpbm_header(bytes, "P5", img.width, img.height, path.string());
  const std::size_t n = img.width * img.height;
  if (bytes.size() < off + n) throw IoError(path.string() + ": truncated pixel data");
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                  bytes.begin() + static_cast<std::ptrdiff_t>(off + n));
  return img;
}

}  // namespace nmfnet
