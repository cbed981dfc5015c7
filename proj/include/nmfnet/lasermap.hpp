#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "nmfnet/io.hpp"
#include "nmfnet/tensor.hpp"

namespace nmfnet {

/// One planar sweep. Beam i points phi * i radians clockwise from the robot's
/// left, so beam 0 looks left, the middle beam straight ahead, the last right.
struct LaserScan {
  std::vector<double> ranges;  // meters; NaN or the max_range sentinel means no return
  double fov = std::numbers::pi;
  double phi = 0.0;
  double max_range = 10.0;

  static LaserScan with_ranges(std::vector<double> ranges, double max_range,
                               double fov = std::numbers::pi) {
    LaserScan s;
    s.fov = fov;
    s.max_range = max_range;
    s.phi = ranges.size() > 1 ? fov / static_cast<double>(ranges.size() - 1) : 0.0;
    s.ranges = std::move(ranges);
    return s;
  }

  std::size_t size() const { return ranges.size(); }

  bool valid_beam(std::size_t i) const {
    const double d = ranges[i];
    return std::isfinite(d) && d > 0.0 && d < max_range;
  }

  void validate() const {
    if (ranges.size() < 2) throw DimensionError("laser scan needs at least 2 beams");
    if (std::abs(phi * static_cast<double>(ranges.size() - 1) - fov) > 1e-9) {
      throw DimensionError("laser scan increment does not span its field of view");
    }
    if (!(max_range > 0.0)) throw DimensionError("laser scan max_range must be positive");
  }
};

struct DistanceMapConfig {
  std::size_t height = 40;
  std::size_t width = 80;
  double origin_x = 40.0;  // robot column
  double origin_y = 39.0;  // robot row
  double meters_per_pixel = 0.25;

  /// Robot at the bottom-center pixel, range scaled so max_range spans half the width.
  static DistanceMapConfig bottom_center(std::size_t height, std::size_t width, double max_range) {
    DistanceMapConfig c;
    c.height = height;
    c.width = width;
    c.origin_x = static_cast<double>(width / 2);
    c.origin_y = static_cast<double>(height - 1);
    c.meters_per_pixel = max_range / static_cast<double>(width / 2);
    return c;
  }

  void validate() const {
    if (height == 0 || width == 0) throw DimensionError("distance map must be non-empty");
    if (!(meters_per_pixel > 0.0)) throw DimensionError("meters_per_pixel must be positive");
    if (origin_x < 0 || origin_y < 0 || origin_x > static_cast<double>(width - 1) ||
        origin_y > static_cast<double>(height - 1)) {
      throw DimensionError("distance map origin lies outside the image");
    }
  }
};

struct DistanceMap {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // 1 = laser return

  std::uint8_t at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto p : pixels) n += p;
    return n;
  }
  bool operator==(const DistanceMap&) const = default;
};

struct DistanceMapStats {
  std::size_t placed = 0;          // beams landing inside the image
  std::size_t out_of_bounds = 0;   // valid beams landing outside
  std::size_t no_return = 0;       // invalid or out-of-range beams
};

struct DistanceMapResult {
  DistanceMap map;
  DistanceMapStats stats;
};

/// Image-plane point of beam i for a range already converted to pixels.
inline std::pair<double, double> beam_point(double range_px, double phi, std::size_t i,
                                            double origin_x, double origin_y) {
  const double angle = phi * static_cast<double>(i);
  return {origin_x + range_px * std::cos(std::numbers::pi - angle),
          origin_y - range_px * std::sin(angle)};
}

/// Rasterizes each valid beam to the single nearest pixel.
inline DistanceMapResult scan_to_distance_map(const LaserScan& scan, const DistanceMapConfig& cfg) {
  scan.validate();
  cfg.validate();
  DistanceMapResult out;
  out.map.height = cfg.height;
  out.map.width = cfg.width;
  out.map.pixels.assign(cfg.height * cfg.width, 0);
  for (std::size_t i = 0; i < scan.size(); ++i) {
    if (!scan.valid_beam(i)) {
      ++out.stats.no_return;
      continue;
    }
    const auto [x, y] =
        beam_point(scan.ranges[i] / cfg.meters_per_pixel, scan.phi, i, cfg.origin_x, cfg.origin_y);
    const double col = std::round(x), row = std::round(y);
    if (col < 0 || row < 0 || col >= static_cast<double>(cfg.width) ||
        row >= static_cast<double>(cfg.height)) {
      ++out.stats.out_of_bounds;
      continue;
    }
    out.map.pixels[static_cast<std::size_t>(row) * cfg.width + static_cast<std::size_t>(col)] = 1;
    ++out.stats.placed;
  }
  return out;
}

template <class T>
Tensor<T> distance_map_to_tensor(const DistanceMap& map) {
  std::vector<T> v(map.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = map.pixels[i] ? T(1) : T(0);
  return Tensor<T>({1, map.height, map.width}, std::move(v));
}

inline GrayImage distance_map_to_image(const DistanceMap& map) {
  GrayImage img(map.height, map.width);
  for (std::size_t i = 0; i < map.pixels.size(); ++i) img.data[i] = map.pixels[i] ? 255 : 0;
  return img;
}

inline void write_distance_map_pgm(const std::filesystem::path& path, const DistanceMap& map) {
  write_pgm(path, distance_map_to_image(map));
}

// Text scan file: "N phi max_range" then the N ranges on one line.

inline std::string encode_scan(const LaserScan& scan) {
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << scan.size() << ' ' << scan.phi << ' ' << scan.max_range << '\n';
  for (std::size_t i = 0; i < scan.size(); ++i) {
    if (i) os << ' ';
    os << scan.ranges[i];
  }
  os << '\n';
  return os.str();
}

inline void write_scan(const std::filesystem::path& path, const LaserScan& scan) {
  write_file_atomic(path, encode_scan(scan));
}

inline LaserScan read_scan(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::size_t n = 0;
  LaserScan scan;
  if (!(in >> n >> scan.phi >> scan.max_range)) throw IoError(path.string() + ": bad scan header");
  scan.ranges.resize(n);
  for (auto& r : scan.ranges) {
    std::string tok;
    if (!(in >> tok)) throw IoError(path.string() + ": expected " + std::to_string(n) + " ranges");
    r = std::strtod(tok.c_str(), nullptr);
  }
  scan.fov = scan.phi * static_cast<double>(n > 0 ? n - 1 : 0);
  return scan;
}

}  // namespace nmfnet
