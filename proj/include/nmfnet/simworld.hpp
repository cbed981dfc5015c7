#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <queue>
#include <random>
#include <string>
#include <vector>

#include "nmfnet/cloudnet.hpp"
#include "nmfnet/io.hpp"
#include "nmfnet/lasermap.hpp"
#include "nmfnet/seed.hpp"

namespace nmfnet {

enum class Archetype { house, city, cave };

inline constexpr std::array<Archetype, 3> kArchetypes{Archetype::house, Archetype::city,
                                                      Archetype::cave};

inline std::string archetype_name(Archetype a) {
  switch (a) {
    case Archetype::house: return "house";
    case Archetype::city: return "city";
    case Archetype::cave: return "cave";
  }
  return "?";
}

inline Archetype parse_archetype(const std::string& s) {
  for (auto a : kArchetypes) {
    if (archetype_name(a) == s) return a;
  }
  throw ConfigError("unknown environment '" + s + "' (expected house, city or cave)");
}

struct ArchetypeInfo {
  double size_m;  // square side
  double light;   // ambient factor applied to every rendered color
  std::size_t obstacles;  // placed shapes per world
};

inline ArchetypeInfo archetype_info(Archetype a) {
  switch (a) {
    case Archetype::house: return {20.0, 1.0, 26};
    case Archetype::city: return {55.0, 0.9, 55};
    case Archetype::cave: return {40.0, 0.3, 6};
  }
  throw ConfigError("bad archetype");
}

/// Obstacles per square meter, straight from the archetype table.
inline double obstacle_density(Archetype a) {
  auto info = archetype_info(a);
  return static_cast<double>(info.obstacles) / (info.size_m * info.size_m);
}

struct Rgb8 {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb8&) const = default;
};

struct Obstacle {
  enum class Shape { circle, rect };
  Shape shape = Shape::circle;
  double x = 0, y = 0;    // center, meters
  double hx = 0, hy = 0;  // radius (circle) or half extents (rect)
  double angle = 0;
  bool operator==(const Obstacle&) const = default;
};

struct Cell {
  int x = 0, y = 0;
  bool operator==(const Cell&) const = default;
};

// Marker colors; randomized textures never draw hues near these.
inline constexpr Rgb8 kLeftMarker{230, 30, 230};
inline constexpr Rgb8 kRightMarker{30, 230, 230};

/// Occupancy grid in a right-handed metric frame: cell (x, y) covers
/// [x*cell, (x+1)*cell) x [y*cell, (y+1)*cell). Heading 0 looks along +x,
/// positive headings turn left.
struct World {
  Archetype archetype = Archetype::house;
  int width = 0, height = 0;
  double cell = 0.1;
  std::vector<std::uint8_t> occupancy;
  std::vector<Rgb8> cell_color;
  std::vector<std::int32_t> surface;  // texture region, -1 on free cells
  std::vector<std::int8_t> marker;    // +1 left turn ahead, -1 right, 0 none
  std::vector<Obstacle> obstacles;
  std::vector<Cell> path;
  std::uint64_t seed = 0;
  std::uint64_t texture_seed = 0;
  double light = 1.0;
  Rgb8 floor_color{128, 128, 128}, sky_color{200, 200, 200};
  std::vector<float> clearance;  // meters to the nearest occupied cell center

  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x);
  }
  bool inside(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  bool occupied(int x, int y) const { return inside(x, y) && occupancy[index(x, y)] != 0; }
  Cell cell_of(double mx, double my) const {
    return {static_cast<int>(std::floor(mx / cell)), static_cast<int>(std::floor(my / cell))};
  }
  std::array<double, 2> center(Cell c) const { return {(c.x + 0.5) * cell, (c.y + 0.5) * cell}; }
  double clearance_at(double mx, double my) const {
    auto c = cell_of(mx, my);
    if (!inside(c.x, c.y)) return 0.0;
    return clearance[index(c.x, c.y)];
  }
  double path_length() const { return path.size() < 2 ? 0.0 : static_cast<double>(path.size() - 1) * cell; }
  bool operator==(const World&) const = default;
};

inline double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  a = std::fmod(a + pi, 2 * pi);
  if (a <= 0) a += 2 * pi;
  return a - pi;
}

namespace sim {

/// Squared 1-D distance transform (Felzenszwalb and Huttenlocher).
inline void edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0);
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == inf) continue;
    if (f[v[k]] == inf) {
      v[k] = q;
      continue;
    }
    double s;
    while (true) {
      s = ((f[q] + q * double(q)) - (f[v[k]] + v[k] * double(v[k]))) / (2.0 * q - 2.0 * v[k]);
      if (s > z[k] || k == 0) break;
      --k;
    }
    if (s <= z[k]) {
      v[k] = q;
      z[k + 1] = inf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (f[v[0]] == inf) {
    for (int q = 0; q < n; ++q) d[q] = inf;
    return;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = (q - v[k]) * double(q - v[k]) + f[v[k]];
  }
}

}  // namespace sim

/// Recomputes the clearance field. Call after editing occupancy by hand.
inline void update_clearance(World& w) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const int W = w.width, H = w.height;
  std::vector<double> g(static_cast<std::size_t>(W) * H);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = w.occupancy[i] ? 0.0 : inf;
  std::vector<int> v;
  std::vector<double> z;
  std::vector<double> f(std::max(W, H)), d(std::max(W, H));
  for (int x = 0; x < W; ++x) {
    for (int y = 0; y < H; ++y) f[y] = g[w.index(x, y)];
    sim::edt_1d(f.data(), d.data(), H, v, z);
    for (int y = 0; y < H; ++y) g[w.index(x, y)] = d[y];
  }
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) f[x] = g[w.index(x, y)];
    sim::edt_1d(f.data(), d.data(), W, v, z);
    for (int x = 0; x < W; ++x) g[w.index(x, y)] = d[x];
  }
  w.clearance.resize(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    w.clearance[i] = std::isinf(g[i]) ? 1e9f : static_cast<float>(std::sqrt(g[i]) * w.cell);
  }
}

/// Free grid with no path, for hand-built scenes.
inline World make_blank_world(int width, int height, double cell = 0.1, Archetype a = Archetype::house) {
  World w;
  w.archetype = a;
  w.width = width;
  w.height = height;
  w.cell = cell;
  const auto n = static_cast<std::size_t>(width) * height;
  w.occupancy.assign(n, 0);
  w.cell_color.assign(n, w.floor_color);
  w.surface.assign(n, -1);
  w.marker.assign(n, 0);
  w.light = archetype_info(a).light;
  update_clearance(w);
  return w;
}

inline void set_occupied(World& w, int x, int y, std::int32_t surface, Rgb8 color = {160, 160, 160}) {
  if (!w.inside(x, y)) return;
  auto i = w.index(x, y);
  w.occupancy[i] = 1;
  w.surface[i] = surface;
  w.cell_color[i] = color;
}

namespace sim {

inline bool inside_obstacle(const Obstacle& o, double x, double y) {
  double dx = x - o.x, dy = y - o.y;
  if (o.shape == Obstacle::Shape::circle) return dx * dx + dy * dy <= o.hx * o.hx;
  double c = std::cos(o.angle), s = std::sin(o.angle);
  double u = c * dx + s * dy, v = -s * dx + c * dy;
  return std::abs(u) <= o.hx && std::abs(v) <= o.hy;
}

inline void rasterize(World& w, const Obstacle& o, std::int32_t surface) {
  double r = std::hypot(o.hx, o.hy);
  int x0 = static_cast<int>(std::floor((o.x - r) / w.cell)), x1 = static_cast<int>(std::ceil((o.x + r) / w.cell));
  int y0 = static_cast<int>(std::floor((o.y - r) / w.cell)), y1 = static_cast<int>(std::ceil((o.y + r) / w.cell));
  for (int y = std::max(0, y0); y <= std::min(w.height - 1, y1); ++y) {
    for (int x = std::max(0, x0); x <= std::min(w.width - 1, x1); ++x) {
      if (w.occupancy[w.index(x, y)]) continue;
      auto c = w.center({x, y});
      if (inside_obstacle(o, c[0], c[1])) set_occupied(w, x, y, surface);
    }
  }
}

inline void add_obstacle(World& w, const Obstacle& o) {
  w.obstacles.push_back(o);
  rasterize(w, o, static_cast<std::int32_t>(w.obstacles.size()));
}

inline void draw_boundary(World& w, int thickness) {
  for (int y = 0; y < w.height; ++y) {
    for (int x = 0; x < w.width; ++x) {
      if (x < thickness || y < thickness || x >= w.width - thickness || y >= w.height - thickness) {
        set_occupied(w, x, y, 0);
      }
    }
  }
}

inline Obstacle rect(double x, double y, double hx, double hy, double angle = 0) {
  return {Obstacle::Shape::rect, x, y, hx, hy, angle};
}
inline Obstacle circle(double x, double y, double r) { return {Obstacle::Shape::circle, x, y, r, r, 0}; }

struct Layout {
  std::array<double, 2> start_lo, start_hi, goal_lo, goal_hi;  // sampling boxes, meters
};

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Random furniture-like shape at (x, y).
inline Obstacle clutter(std::mt19937_64& rng, double x, double y, double smin, double smax) {
  if (uniform(rng, 0, 1) < 0.35) return circle(x, y, uniform(rng, smin * 0.7, smax * 0.6));
  return rect(x, y, uniform(rng, smin, smax), uniform(rng, smin, smax), uniform(rng, 0, std::numbers::pi));
}

inline Layout build_house(World& w, std::mt19937_64& rng) {
  const double S = 20.0, t = 0.1;
  draw_boundary(w, 2);
  std::vector<std::array<double, 2>> doors;
  // wall along one axis at `pos`, from lo to hi, with the given door centers cut out
  auto wall = [&](bool vertical, double pos, double lo, double hi, std::vector<double> cuts) {
    std::sort(cuts.begin(), cuts.end());
    double from = lo;
    for (std::size_t i = 0; i <= cuts.size(); ++i) {
      double half_door = uniform(rng, 0.55, 0.7);
      double to = i < cuts.size() ? cuts[i] - half_door : hi;
      if (to - from > 0.2) {
        double mid = 0.5 * (from + to), half = 0.5 * (to - from);
        add_obstacle(w, vertical ? rect(pos, mid, t, half) : rect(mid, pos, half, t));
      }
      if (i < cuts.size()) {
        doors.push_back(vertical ? std::array<double, 2>{pos, cuts[i]} : std::array<double, 2>{cuts[i], pos});
        from = cuts[i] + half_door;
      }
    }
  };
  double xv = uniform(rng, 8.0, 12.0);
  double d1 = uniform(rng, 2.5, 8.0), d2 = uniform(rng, 12.0, 17.5);
  wall(true, xv, 0.0, S, {d1, d2});
  double yl = uniform(rng, 7.0, 13.0), yr = uniform(rng, 7.0, 13.0);
  wall(false, yl, 0.0, xv, {uniform(rng, 1.5, xv - 1.5)});
  wall(false, yr, xv, S, {uniform(rng, xv + 1.5, S - 1.5)});

  bool flip_x = uniform(rng, 0, 1) < 0.5, flip_y = uniform(rng, 0, 1) < 0.5;
  Layout L{{0.6, 0.6}, {3.0, 3.0}, {17.0, 17.0}, {19.4, 19.4}};
  if (flip_x) {
    std::swap(L.start_lo[0], L.goal_lo[0]);
    std::swap(L.start_hi[0], L.goal_hi[0]);
  }
  if (flip_y) {
    std::swap(L.start_lo[1], L.goal_lo[1]);
    std::swap(L.start_hi[1], L.goal_hi[1]);
  }
  const std::size_t target = archetype_info(Archetype::house).obstacles;
  std::size_t tries = 0;
  while (w.obstacles.size() < target && tries++ < 5000) {
    double x = uniform(rng, 0.8, S - 0.8), y = uniform(rng, 0.8, S - 0.8);
    bool ok = true;
    for (const auto& d : doors) ok = ok && std::hypot(x - d[0], y - d[1]) > 1.6;
    for (const auto* b : {&L.start_lo, &L.goal_lo}) {
      double cx = (*b)[0] + 1.2, cy = (*b)[1] + 1.2;
      ok = ok && std::hypot(x - cx, y - cy) > 2.2;
    }
    if (!ok) continue;
    add_obstacle(w, clutter(rng, x, y, 0.2, 0.75));
  }
  return L;
}

inline Layout build_city(World& w, std::mt19937_64& rng) {
  const double block = 7.5, street = 5.0, pitch = block + street;
  draw_boundary(w, 2);
  for (int by = 0; by < 4; ++by) {
    for (int bx = 0; bx < 4; ++bx) {
      double x0 = street + bx * pitch + uniform(rng, 0.0, 0.8), x1 = street + bx * pitch + block - uniform(rng, 0.0, 0.8);
      double y0 = street + by * pitch + uniform(rng, 0.0, 0.8), y1 = street + by * pitch + block - uniform(rng, 0.0, 0.8);
      add_obstacle(w, rect(0.5 * (x0 + x1), 0.5 * (y0 + y1), 0.5 * (x1 - x0), 0.5 * (y1 - y0)));
    }
  }
  // barricades close a street segment between two intersections
  for (int i = 0; i < 3; ++i) {
    bool vertical_street = uniform(rng, 0, 1) < 0.5;
    int lane = std::uniform_int_distribution<int>(1, 3)(rng);
    int seg = std::uniform_int_distribution<int>(0, 3)(rng);
    double across = lane * pitch + 0.5 * street;
    double along = street + seg * pitch + 0.5 * block;
    if (vertical_street) {
      add_obstacle(w, rect(across, along, 0.5 * street + 0.3, 0.4, uniform(rng, -0.2, 0.2)));
    } else {
      add_obstacle(w, rect(along, across, 0.4, 0.5 * street + 0.3, uniform(rng, -0.2, 0.2)));
    }
  }
  const std::size_t target = archetype_info(Archetype::city).obstacles;
  std::size_t tries = 0;
  while (w.obstacles.size() < target && tries++ < 5000) {
    double x = uniform(rng, 0.8, 54.2), y = uniform(rng, 0.8, 54.2);
    auto in_street = [&](double v) {
      double r = std::fmod(v, pitch);
      return r < street;
    };
    if (!in_street(x) && !in_street(y)) continue;
    if ((x < 7 && y < 7) || (x > 48 && y > 48)) continue;
    add_obstacle(w, clutter(rng, x, y, 0.3, 1.0));
  }
  bool flip = uniform(rng, 0, 1) < 0.5;
  Layout L{{0.8, 0.8}, {4.2, 4.2}, {50.8, 50.8}, {54.2, 54.2}};
  if (flip) std::swap(L.start_lo, L.goal_lo), std::swap(L.start_hi, L.goal_hi);
  return L;
}

/// Smooth random field in roughly [-1, 1] with ~1 m features.
struct ValueNoise {
  int n;
  double scale;
  std::vector<double> v;
  ValueNoise(std::mt19937_64& rng, double extent, double feature) : scale(1.0 / feature) {
    n = static_cast<int>(extent * scale) + 2;
    v.resize(static_cast<std::size_t>(n) * n);
    for (auto& x : v) x = uniform(rng, -1, 1);
  }
  double operator()(double x, double y) const {
    double fx = x * scale, fy = y * scale;
    int ix = std::clamp(static_cast<int>(fx), 0, n - 2), iy = std::clamp(static_cast<int>(fy), 0, n - 2);
    double ax = fx - ix, ay = fy - iy;
    auto at = [&](int a, int b) { return v[static_cast<std::size_t>(b) * n + a]; };
    return (1 - ay) * ((1 - ax) * at(ix, iy) + ax * at(ix + 1, iy)) + ay * ((1 - ax) * at(ix, iy + 1) + ax * at(ix + 1, iy + 1));
  }
};

inline Layout build_cave(World& w, std::mt19937_64& rng) {
  const double S = 40.0;
  std::fill(w.occupancy.begin(), w.occupancy.end(), 1);
  for (int y = 0; y < w.height; ++y) {
    for (int x = 0; x < w.width; ++x) w.surface[w.index(x, y)] = 1000 + (y / 40) * 16 + x / 40;
  }
  struct Node {
    double x, y, r;
  };
  auto walk = [&](double x, double y, double h, double len, bool steer_home) {
    std::vector<Node> pts;
    double r = uniform(rng, 1.1, 1.5);
    for (double s = 0; s <= len; s += 0.5) {
      pts.push_back({x, y, r});
      h += uniform(rng, -0.12, 0.12);
      if (steer_home) h = std::clamp(h, -1.1, 1.1);
      if (y < 6) h += 0.06;
      if (y > S - 6) h -= 0.06;
      if (x > S - 6 && !steer_home) h += (h > 0 ? 0.1 : -0.1);
      r = std::clamp(r + uniform(rng, -0.05, 0.05), 1.05, 1.6);
      x += 0.5 * std::cos(h);
      y += 0.5 * std::sin(h);
      if (x < 2.5 || x > S - 2.5 || y < 2.5 || y > S - 2.5) break;
    }
    return pts;
  };
  std::vector<Node> main;
  {
    double x = 3.0, y = uniform(rng, 8.0, 32.0), h = uniform(rng, -0.5, 0.5);
    for (double s = 0; x < S - 3.2 && s < 200; s += 0.5) {
      main.push_back({x, y, 0});
      h += uniform(rng, -0.16, 0.16) - 0.02 * h;
      h = std::clamp(h, -1.2, 1.2);
      if (y < 7) h += 0.05;
      if (y > S - 7) h -= 0.05;
      x += 0.5 * std::cos(h);
      y += 0.5 * std::sin(h);
    }
    double r = uniform(rng, 1.1, 1.5);
    for (auto& p : main) {
      r = std::clamp(r + uniform(rng, -0.05, 0.05), 1.1, 1.6);
      p.r = r;
    }
  }
  std::vector<std::vector<Node>> tunnels{main};
  const int n_branch = std::uniform_int_distribution<int>(4, 6)(rng);
  for (int b = 0; b < n_branch && main.size() > 40; ++b) {
    // one branch per stretch of the main tunnel
    const std::size_t span = (main.size() - 24) / static_cast<std::size_t>(n_branch);
    std::size_t at = 12 + b * span + std::uniform_int_distribution<std::size_t>(0, span - 1)(rng);
    auto dir = std::atan2(main[at + 1].y - main[at].y, main[at + 1].x - main[at].x);
    double side = uniform(rng, 0, 1) < 0.5 ? -1.0 : 1.0;
    tunnels.push_back(walk(main[at].x, main[at].y, dir + side * uniform(rng, 0.5, 1.2), uniform(rng, 7.0, 13.0), false));
  }
  ValueNoise noise(rng, S, 1.2);
  for (const auto& t : tunnels) {
    for (const auto& p : t) {
      int x0 = static_cast<int>((p.x - p.r - 0.5) / w.cell), x1 = static_cast<int>((p.x + p.r + 0.5) / w.cell);
      int y0 = static_cast<int>((p.y - p.r - 0.5) / w.cell), y1 = static_cast<int>((p.y + p.r + 0.5) / w.cell);
      for (int y = std::max(2, y0); y <= std::min(w.height - 3, y1); ++y) {
        for (int x = std::max(2, x0); x <= std::min(w.width - 3, x1); ++x) {
          auto c = w.center({x, y});
          double rr = p.r + 0.3 * noise(c[0], c[1]);
          if (std::hypot(c[0] - p.x, c[1] - p.y) <= rr) {
            auto i = w.index(x, y);
            w.occupancy[i] = 0;
            w.surface[i] = -1;
          }
        }
      }
    }
  }
  // rocks hug a tunnel wall so the passage stays open
  const std::size_t target = archetype_info(Archetype::cave).obstacles;
  std::size_t tries = 0;
  while (w.obstacles.size() < target && tries++ < 1000) {
    std::size_t at = std::uniform_int_distribution<std::size_t>(10, main.size() - 10)(rng);
    auto dir = std::atan2(main[at + 1].y - main[at].y, main[at + 1].x - main[at].x);
    double side = uniform(rng, 0, 1) < 0.5 ? -1.0 : 1.0;
    double off = main[at].r * uniform(rng, 0.75, 0.95);
    add_obstacle(w, circle(main[at].x - side * off * std::sin(dir), main[at].y + side * off * std::cos(dir),
                           uniform(rng, 0.2, 0.35)));
  }
  auto box = [](const Node& p) {
    return std::array<std::array<double, 2>, 2>{{{p.x - 0.4, p.y - 0.4}, {p.x + 0.4, p.y + 0.4}}};
  };
  auto a = box(main[1]), b = box(main[main.size() - 2]);
  Layout L{a[0], a[1], b[0], b[1]};
  if (uniform(rng, 0, 1) < 0.5) std::swap(L.start_lo, L.goal_lo), std::swap(L.start_hi, L.goal_hi);
  return L;
}

struct PlanConfig {
  double min_clearance = 0.35;  // cells closer to a wall are impassable
  double comfort = 2.0;         // clearance beyond which cells cost nothing extra
  double weight = 3.0;
};

/// 4-connected Dijkstra that prefers cells far from walls. Empty when no route.
inline std::vector<Cell> plan_path(const World& w, Cell start, Cell goal, const PlanConfig& pc = {}) {
  const auto n = static_cast<std::size_t>(w.width) * w.height;
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<std::int32_t> prev(n, -1);
  auto passable = [&](std::size_t i) { return !w.occupancy[i] && w.clearance[i] >= pc.min_clearance; };
  auto s = w.index(start.x, start.y), t = w.index(goal.x, goal.y);
  if (!passable(s) || !passable(t)) return {};
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> open;
  dist[s] = 0;
  open.push({0.0, s});
  constexpr int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
  while (!open.empty()) {
    auto [d, i] = open.top();
    open.pop();
    if (d > dist[i]) continue;
    if (i == t) break;
    int x = static_cast<int>(i % w.width), y = static_cast<int>(i / w.width);
    for (int k = 0; k < 4; ++k) {
      int nx = x + dx[k], ny = y + dy[k];
      if (!w.inside(nx, ny)) continue;
      auto j = w.index(nx, ny);
      if (!passable(j)) continue;
      double gap = std::max(0.0, pc.comfort - static_cast<double>(w.clearance[j]));
      double nd = d + 1.0 + pc.weight * gap * gap;
      if (nd < dist[j]) {
        dist[j] = nd;
        prev[j] = static_cast<std::int32_t>(i);
        open.push({nd, j});
      }
    }
  }
  if (prev[t] < 0 && s != t) return {};
  std::vector<Cell> path;
  for (auto i = static_cast<std::int64_t>(t); i >= 0; i = prev[static_cast<std::size_t>(i)]) {
    path.push_back({static_cast<int>(i % w.width), static_cast<int>(i / w.width)});
    if (static_cast<std::size_t>(i) == s) break;
  }
  std::reverse(path.begin(), path.end());
  return path;
}

inline Rgb8 scale_color(Rgb8 c, double f) {
  auto ch = [f](std::uint8_t v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v * f), 0L, 255L));
  };
  return {ch(c.r), ch(c.g), ch(c.b)};
}

inline Rgb8 mix_color(Rgb8 a, Rgb8 b, double t) {
  auto ch = [t](std::uint8_t x, std::uint8_t y) {
    return static_cast<std::uint8_t>(std::lround(x + (y - x) * t));
  };
  return {ch(a.r, b.r), ch(a.g, b.g), ch(a.b, b.b)};
}

inline Rgb8 hsv(double h_deg, double s, double v) {
  double c = v * s, hp = std::fmod(h_deg, 360.0) / 60.0, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  double m = v - c;
  auto q = [m](double u) { return static_cast<std::uint8_t>(std::lround(255.0 * (u + m))); };
  return {q(r), q(g), q(b)};
}

struct Palette {
  std::vector<Rgb8> walls;
  Rgb8 floor, sky;
};

inline Palette default_palette(Archetype a) {
  switch (a) {
    case Archetype::house:
      return {{{205, 190, 165}, {180, 160, 130}, {150, 150, 150}, {200, 200, 190}, {170, 120, 90}, {120, 85, 55}, {95, 110, 140}},
              {140, 110, 80},
              {230, 230, 225}};
    case Archetype::city:
      return {{{150, 150, 155}, {170, 160, 150}, {120, 120, 125}, {185, 175, 160}, {110, 100, 90}, {140, 125, 105}},
              {70, 70, 75},
              {180, 200, 230}};
    case Archetype::cave:
      return {{{120, 95, 70}, {100, 80, 60}, {140, 115, 85}, {110, 100, 90}}, {80, 65, 50}, {40, 35, 30}};
  }
  return {};
}

}  // namespace sim

/// Archetype colors for every surface, then turn markers. Deterministic in
/// texture_seed.
inline void apply_default_textures(World& w) {
  auto pal = sim::default_palette(w.archetype);
  w.floor_color = pal.floor;
  w.sky_color = pal.sky;
  for (int y = 0; y < w.height; ++y) {
    for (int x = 0; x < w.width; ++x) {
      auto i = w.index(x, y);
      if (!w.occupancy[i]) {
        w.cell_color[i] = w.floor_color;
        continue;
      }
      auto s = static_cast<std::uint64_t>(w.surface[i] + 1);
      auto base = pal.walls[mix_seed({w.texture_seed, s}) % pal.walls.size()];
      double jitter = 0.94 + 0.12 * unit_from_hash(mix_seed({w.texture_seed, s, i}));
      w.cell_color[i] = sim::scale_color(base, jitter);
    }
  }
  for (std::size_t i = 0; i < w.marker.size(); ++i) {
    if (w.marker[i] > 0) w.cell_color[i] = kLeftMarker;
    if (w.marker[i] < 0) w.cell_color[i] = kRightMarker;
  }
}

struct RayHit {
  bool hit = false;
  double dist = 0;
  Cell cell;
  bool y_face = false;  // crossed a horizontal cell edge
};

/// Grid traversal from (x, y) along `angle`. Leaving the grid or passing
/// max_range ends the ray without a hit.
inline RayHit cast_ray(const World& w, double x, double y, double angle, double max_range) {
  const double px = x / w.cell, py = y / w.cell;
  const double dx = std::cos(angle), dy = std::sin(angle);
  int ix = static_cast<int>(std::floor(px)), iy = static_cast<int>(std::floor(py));
  const int sx = dx > 0 ? 1 : -1, sy = dy > 0 ? 1 : -1;
  constexpr double inf = std::numeric_limits<double>::infinity();
  const double tdx = dx != 0 ? 1.0 / std::abs(dx) : inf, tdy = dy != 0 ? 1.0 / std::abs(dy) : inf;
  double tx = dx > 0 ? (ix + 1 - px) * tdx : dx < 0 ? (px - ix) * tdx : inf;
  double ty = dy > 0 ? (iy + 1 - py) * tdy : dy < 0 ? (py - iy) * tdy : inf;
  const double tmax = max_range / w.cell;
  RayHit h;
  if (w.occupied(ix, iy)) {
    h.hit = true;
    h.cell = {ix, iy};
    return h;
  }
  while (true) {
    double t;
    if (tx < ty) {
      t = tx;
      tx += tdx;
      ix += sx;
      h.y_face = false;
    } else {
      t = ty;
      ty += tdy;
      iy += sy;
      h.y_face = true;
    }
    if (t > tmax || !w.inside(ix, iy)) return RayHit{};
    if (w.occupancy[w.index(ix, iy)]) {
      h.hit = true;
      h.dist = t * w.cell;
      h.cell = {ix, iy};
      return h;
    }
  }
}

struct MarkerConfig {
  int baseline = 15;           // path cells on either side of a turn point
  double threshold_deg = 35.0;
  int approach = 20;           // path cells before the turn that look for a wall
  double reach = 6.0;          // meters along the incoming direction
  double patch = 0.5;          // wall cells this close to a hit are tinted
};

/// Tints the wall the robot faces while approaching each turn with the turn's
/// direction. Rays leave the path cells before the turn along the incoming
/// direction; around the first wall cell each ray hits, a patch is painted.
/// Where patches overlap, the hit nearest its ray origin wins.
inline void compute_markers(World& w, const MarkerConfig& mc = {}) {
  std::fill(w.marker.begin(), w.marker.end(), 0);
  const auto n = static_cast<int>(w.path.size());
  std::vector<float> best(w.marker.size(), std::numeric_limits<float>::infinity());
  const int rc = static_cast<int>(std::ceil(mc.patch / w.cell));
  const double thr = mc.threshold_deg * std::numbers::pi / 180.0;
  for (int j = mc.baseline; j + mc.baseline < n; ++j) {
    auto a = w.path[static_cast<std::size_t>(j - mc.baseline)], b = w.path[static_cast<std::size_t>(j)],
         c = w.path[static_cast<std::size_t>(j + mc.baseline)];
    double v1x = b.x - a.x, v1y = b.y - a.y, v2x = c.x - b.x, v2y = c.y - b.y;
    double turn = std::atan2(v1x * v2y - v1y * v2x, v1x * v2x + v1y * v2y);
    if (std::abs(turn) <= thr) continue;
    const std::int8_t side = turn > 0 ? 1 : -1;
    const double heading = std::atan2(v1y, v1x);
    for (int k = std::max(0, j - mc.approach); k <= j; ++k) {
      auto o = w.center(w.path[static_cast<std::size_t>(k)]);
      auto hit = cast_ray(w, o[0], o[1], heading, mc.reach);
      if (!hit.hit) continue;
      const int hx = hit.cell.x, hy = hit.cell.y;
      for (int y = std::max(0, hy - rc); y <= std::min(w.height - 1, hy + rc); ++y) {
        for (int x = std::max(0, hx - rc); x <= std::min(w.width - 1, hx + rc); ++x) {
          auto i = w.index(x, y);
          if (!w.occupancy[i] || std::hypot(x - hx, y - hy) * w.cell > mc.patch) continue;
          auto d = static_cast<float>(hit.dist);
          if (d < best[i]) {
            best[i] = d;
            w.marker[i] = side;
          }
        }
      }
    }
  }
}

/// Builds a world of the given archetype. Layouts without a start-to-goal
/// route are redrawn, up to 100 times.
inline World generate_world(Archetype archetype, std::uint64_t seed) {
  const auto info = archetype_info(archetype);
  const int cells = static_cast<int>(std::lround(info.size_m / 0.1));
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::mt19937_64 rng(mix_seed({seed, static_cast<std::uint64_t>(archetype), static_cast<std::uint64_t>(attempt)}));
    World w = make_blank_world(cells, cells, 0.1, archetype);
    w.seed = seed;
    w.texture_seed = mix_seed({seed, 0x7e57});
    sim::Layout L;
    switch (archetype) {
      case Archetype::house: L = sim::build_house(w, rng); break;
      case Archetype::city: L = sim::build_city(w, rng); break;
      case Archetype::cave: L = sim::build_cave(w, rng); break;
    }
    if (w.obstacles.size() != info.obstacles) continue;
    update_clearance(w);
    auto pick = [&](std::array<double, 2> lo, std::array<double, 2> hi, Cell& out) {
      for (int i = 0; i < 200; ++i) {
        auto c = w.cell_of(sim::uniform(rng, lo[0], hi[0]), sim::uniform(rng, lo[1], hi[1]));
        if (w.inside(c.x, c.y) && w.clearance[w.index(c.x, c.y)] >= 0.5) {
          out = c;
          return true;
        }
      }
      return false;
    };
    Cell start, goal;
    if (!pick(L.start_lo, L.start_hi, start) || !pick(L.goal_lo, L.goal_hi, goal)) continue;
    w.path = sim::plan_path(w, start, goal);
    if (w.path.size() < 2) continue;
    compute_markers(w);
    apply_default_textures(w);
    return w;
  }
  throw GenerationError(archetype_name(archetype) + " world with seed " + std::to_string(seed) +
                        " has no start-to-goal route after 100 resamples");
}

struct RandomizationConfig {
  double marker_hue_gap = 30.0;  // degrees kept clear around each marker hue
};

/// Redraws appearance: each surface gets a solid, stripes, checker or noise
/// pattern in random colors, plus new floor and sky. Occupancy is untouched and
/// turn markers are painted back on top.
inline World randomize_textures(const World& in, std::uint64_t dr_seed, const RandomizationConfig& rc = {}) {
  World w = in;
  w.texture_seed = dr_seed;
  std::mt19937_64 rng(mix_seed({dr_seed, 0xd0a1}));
  auto color = [&](std::mt19937_64& r) {
    double h;
    do {
      h = sim::uniform(r, 0, 360);
    } while (std::abs(h - 180.0) < rc.marker_hue_gap || std::abs(h - 300.0) < rc.marker_hue_gap);
    return sim::hsv(h, sim::uniform(r, 0.15, 0.9), sim::uniform(r, 0.3, 1.0));
  };
  w.floor_color = color(rng);
  w.sky_color = color(rng);
  struct Style {
    int pattern;  // 0 solid, 1 stripes, 2 checker, 3 noise
    int period, axis;
    Rgb8 a, b;
  };
  auto style_of = [&](std::int32_t s) {
    std::mt19937_64 r(mix_seed({dr_seed, static_cast<std::uint64_t>(s + 1)}));
    Style st;
    st.pattern = std::uniform_int_distribution<int>(0, 3)(r);
    st.period = std::uniform_int_distribution<int>(2, 6)(r);
    st.axis = std::uniform_int_distribution<int>(0, 2)(r);
    st.a = color(r);
    st.b = color(r);
    return st;
  };
  std::vector<std::pair<std::int32_t, Style>> cache;
  for (int y = 0; y < w.height; ++y) {
    for (int x = 0; x < w.width; ++x) {
      auto i = w.index(x, y);
      if (!w.occupancy[i]) {
        w.cell_color[i] = w.floor_color;
        continue;
      }
      auto s = w.surface[i];
      auto it = std::find_if(cache.begin(), cache.end(), [s](const auto& p) { return p.first == s; });
      if (it == cache.end()) {
        cache.emplace_back(s, style_of(s));
        it = std::prev(cache.end());
      }
      const auto& st = it->second;
      bool alt = false;
      switch (st.pattern) {
        case 1: alt = ((st.axis == 0 ? x : st.axis == 1 ? y : x + y) / st.period) % 2; break;
        case 2: alt = (x / st.period + y / st.period) % 2; break;
        default: break;
      }
      if (st.pattern == 3) {
        // per-cell pick between the two colors with brightness jitter; a plain
        // RGB blend could land on a marker hue
        auto h = mix_seed({dr_seed, i});
        w.cell_color[i] = sim::scale_color((h & 1) ? st.b : st.a, 0.6 + 0.4 * unit_from_hash(h));
      } else {
        w.cell_color[i] = alt ? st.b : st.a;
      }
    }
  }
  for (std::size_t i = 0; i < w.marker.size(); ++i) {
    if (w.marker[i] > 0) w.cell_color[i] = kLeftMarker;
    if (w.marker[i] < 0) w.cell_color[i] = kRightMarker;
  }
  return w;
}

struct SensorConfig {
  std::size_t image_height = 60, image_width = 80;
  double hfov = std::numbers::pi / 3;
  double camera_height = 0.5;
  double wall_height = 1.2;
  std::size_t laser_beams = 181;
  double laser_fov = std::numbers::pi;
  double max_range = 10.0;    // laser and depth camera
  double attenuation = 0.08;  // color falls off as 1 / (1 + a d)

  double focal() const { return 0.5 * static_cast<double>(image_width) / std::tan(0.5 * hfov); }
  double cx() const { return 0.5 * static_cast<double>(image_width); }
  double cy() const { return 0.5 * static_cast<double>(image_height); }
};

struct RobotState {
  double x = 0, y = 0, heading = 0;
  SensorConfig sensors;
};

struct SensorFrame {
  RgbImage rgb;
  LaserScan scan;
  PointCloud cloud;          // camera frame: x right, y down, z forward
  std::vector<float> depth;  // H x W, NaN where no wall is in range
};

inline void check_pose(const World& w, const RobotState& s) {
  auto c = w.cell_of(s.x, s.y);
  if (!std::isfinite(s.x) || !std::isfinite(s.y) || !w.inside(c.x, c.y) || w.occupied(c.x, c.y)) {
    throw InvalidPoseError("robot pose (" + std::to_string(s.x) + ", " + std::to_string(s.y) +
                           ") is outside free space");
  }
}

/// Laser, depth-derived cloud and RGB from one pose.
inline SensorFrame render_sensors(const World& w, const RobotState& s) {
  check_pose(w, s);
  const auto& sc = s.sensors;
  SensorFrame out;

  const double phi = sc.laser_fov / static_cast<double>(sc.laser_beams - 1);
  std::vector<double> ranges(sc.laser_beams);
  for (std::size_t i = 0; i < sc.laser_beams; ++i) {
    // the scan sweeps left to right
    auto h = cast_ray(w, s.x, s.y, s.heading + 0.5 * sc.laser_fov - phi * static_cast<double>(i), sc.max_range);
    ranges[i] = h.hit && h.dist < sc.max_range ? h.dist : sc.max_range;
  }
  out.scan = LaserScan::with_ranges(std::move(ranges), sc.max_range, sc.laser_fov);

  const std::size_t H = sc.image_height, W = sc.image_width;
  const double f = sc.focal(), cx = sc.cx(), cy = sc.cy();
  out.rgb = RgbImage(H, W);
  out.depth.assign(H * W, std::numeric_limits<float>::quiet_NaN());
  auto put = [&](std::size_t v, std::size_t u, Rgb8 c) {
    auto* p = out.rgb.at(v, u);
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  };
  const Rgb8 sky = sim::scale_color(w.sky_color, w.light);
  for (std::size_t u = 0; u < W; ++u) {
    const double off = std::atan2(cx - static_cast<double>(u), f);
    auto h = cast_ray(w, s.x, s.y, s.heading + off, sc.max_range);
    const bool wall = h.hit && h.dist < sc.max_range;
    const double z = wall ? h.dist * std::cos(off) : 0.0;
    Rgb8 wc{};
    if (wall) {
      double shade = w.light / (1.0 + sc.attenuation * h.dist) * (h.y_face ? 0.85 : 1.0);
      wc = sim::scale_color(w.cell_color[w.index(h.cell.x, h.cell.y)], shade);
    }
    for (std::size_t v = 0; v < H; ++v) {
      const double dv = static_cast<double>(v) - cy;
      if (wall) {
        double height = sc.camera_height - dv * z / f;
        if (height >= 0.0 && height <= sc.wall_height) {
          put(v, u, wc);
          out.depth[v * W + u] = static_cast<float>(z);
          continue;
        }
      }
      if (dv > 0) {
        double zf = sc.camera_height * f / dv;
        put(v, u, sim::scale_color(w.floor_color, w.light / (1.0 + sc.attenuation * zf)));
      } else {
        put(v, u, sky);
      }
    }
  }
  // lift the depth image, row-major
  for (std::size_t v = 0; v < H; ++v) {
    for (std::size_t u = 0; u < W; ++u) {
      const float z = out.depth[v * W + u];
      if (std::isnan(z)) continue;
      out.cloud.points.push_back({static_cast<float>((static_cast<double>(u) - cx) * z / f),
                                  static_cast<float>((static_cast<double>(v) - cy) * z / f), z});
    }
  }
  return out;
}

struct OracleConfig {
  double lookahead = 2.0;
  double saturation = std::numbers::pi / 4;  // heading error that maps to full lock
  double sight_clearance = 0.15;             // sight lines keep this far from walls
};

inline std::size_t nearest_path_index(const World& w, double x, double y) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < w.path.size(); ++i) {
    auto c = w.center(w.path[i]);
    double d = (c[0] - x) * (c[0] - x) + (c[1] - y) * (c[1] - y);
    if (d < bd) {
      bd = d;
      best = i;
    }
  }
  return best;
}

/// True when the straight segment keeps `clear` meters from walls, ignoring
/// the first `skip` meters (the robot may start closer than that).
inline bool line_of_sight(const World& w, double x0, double y0, double x1, double y1, double clear, double skip = 0.3) {
  double len = std::hypot(x1 - x0, y1 - y0);
  int n = static_cast<int>(std::ceil(len / (0.5 * w.cell)));
  for (int k = 0; k <= n; ++k) {
    double t = n ? static_cast<double>(k) / n : 0.0;
    if (t * len < skip) continue;
    double x = x0 + t * (x1 - x0), y = y0 + t * (y1 - y0);
    auto c = w.cell_of(x, y);
    if (!w.inside(c.x, c.y) || w.occupancy[w.index(c.x, c.y)] || w.clearance[w.index(c.x, c.y)] < clear) {
      return false;
    }
  }
  return true;
}

/// Pure pursuit: steer at the furthest path cell that is within the lookahead
/// and in sight. With none in sight, turn toward the nearest path cell.
/// +1 is full left.
inline double oracle_steering(const World& w, const RobotState& s, const OracleConfig& oc = {}) {
  if (w.path.empty()) throw GenerationError("oracle_steering: world has no path");
  const std::size_t k = nearest_path_index(w, s.x, s.y);
  auto pk = w.center(w.path[k]);
  const double dk = std::hypot(pk[0] - s.x, pk[1] - s.y);
  const std::size_t reach = static_cast<std::size_t>(std::ceil((oc.lookahead + dk) * std::numbers::sqrt2 / w.cell)) + 2;
  std::array<double, 2> target = pk;
  for (std::size_t j = k; j < w.path.size() && j <= k + reach; ++j) {
    auto p = w.center(w.path[j]);
    if (std::hypot(p[0] - s.x, p[1] - s.y) > oc.lookahead) continue;
    if (j > k && line_of_sight(w, s.x, s.y, p[0], p[1], oc.sight_clearance)) target = p;
  }
  double err = wrap_angle(std::atan2(target[1] - s.y, target[0] - s.x) - s.heading);
  return std::clamp(err / oc.saturation, -1.0, 1.0);
}

struct KinematicsConfig {
  double speed = 0.5;  // m/s
  double dt = 0.1;     // s
  double max_turn_rate = 1.2;  // rad/s at |steering| = 1
  double robot_radius = 0.12;
};

/// One unicycle step. Returns false (and leaves the position alone) when the
/// move would bring the robot closer to a wall than its radius.
inline bool step_unicycle(const World& w, RobotState& s, double steering, const KinematicsConfig& kc = {}) {
  steering = std::clamp(steering, -1.0, 1.0);
  double dth = steering * kc.max_turn_rate * kc.dt;
  double mid = s.heading + 0.5 * dth;
  double nx = s.x + kc.speed * kc.dt * std::cos(mid), ny = s.y + kc.speed * kc.dt * std::sin(mid);
  s.heading = wrap_angle(s.heading + dth);
  auto c = w.cell_of(nx, ny);
  if (!w.inside(c.x, c.y) || w.occupancy[w.index(c.x, c.y)] || w.clearance[w.index(c.x, c.y)] < kc.robot_radius) {
    return false;
  }
  s.x = nx;
  s.y = ny;
  return true;
}

struct RolloutResult {
  bool reached = false;
  std::size_t steps = 0;
  std::size_t budget = 0;
};

/// Noise-free closed loop from the path start, heading along the path.
inline RolloutResult rollout_to_goal(const World& w, double budget_factor = 4.0, const OracleConfig& oc = {},
                                     const KinematicsConfig& kc = {}, double goal_radius = 0.3) {
  RolloutResult r;
  const double shortest_steps = w.path_length() / (kc.speed * kc.dt);
  r.budget = static_cast<std::size_t>(std::ceil(budget_factor * shortest_steps));
  auto p0 = w.center(w.path.front());
  auto p1 = w.center(w.path[std::min<std::size_t>(10, w.path.size() - 1)]);
  RobotState s{p0[0], p0[1], std::atan2(p1[1] - p0[1], p1[0] - p0[0]), {}};
  auto goal = w.center(w.path.back());
  for (r.steps = 0; r.steps < r.budget; ++r.steps) {
    if (std::hypot(goal[0] - s.x, goal[1] - s.y) <= goal_radius) {
      r.reached = true;
      return r;
    }
    step_unicycle(w, s, oracle_steering(w, s, oc), kc);
  }
  return r;
}

struct EpisodeConfig {
  SensorConfig sensors;
  OracleConfig oracle;
  KinematicsConfig kinematics;
  double noise_std = 0.0;     // stationary std of the AR(1) steering disturbance; off by default
  double noise_corr = 0.9;    // per-step correlation
  double start_offset = 0.3;  // max lateral offset at spawn, meters
  double start_jitter = 0.35; // max heading jitter at spawn, radians
  double goal_radius = 0.5;
  std::size_t goal_margin = 40;  // spawns stay this many path cells short of the goal
};

struct SimFrame {
  std::size_t index = 0;
  double time = 0;
  RobotState state;
  double steering = 0;  // oracle label for this pose
  bool dr_flag = false;
  SensorFrame sensors;
};

/// Drives the robot with the oracle plus a correlated disturbance and records
/// every step. The label is always the clean oracle output at the recorded
/// pose. Collisions and arrivals respawn the robot somewhere on the path.
inline std::vector<SimFrame> collect_episode(const World& world, std::size_t n_frames, bool dr, std::uint64_t seed,
                                             const EpisodeConfig& ec = {}) {
  if (world.path.size() < 2) throw GenerationError("collect_episode: world has no path");
  const World w = dr ? randomize_textures(world, mix_seed({seed, 0xd8})) : world;
  std::mt19937_64 rng(mix_seed({seed, 0xe9}));
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto n = w.path.size();
  auto spawn = [&]() {
    std::size_t hi = n > ec.goal_margin + 2 ? n - ec.goal_margin - 1 : 1;
    std::size_t k = std::uniform_int_distribution<std::size_t>(0, hi - 1)(rng);
    auto p = w.center(w.path[k]);
    auto q = w.center(w.path[std::min(k + 10, n - 1)]);
    double dir = std::atan2(q[1] - p[1], q[0] - p[0]);
    double off = sim::uniform(rng, -ec.start_offset, ec.start_offset);
    RobotState s{p[0] - off * std::sin(dir), p[1] + off * std::cos(dir), 0.0, ec.sensors};
    if (w.clearance_at(s.x, s.y) < 0.25) s.x = p[0], s.y = p[1];
    s.heading = wrap_angle(dir + sim::uniform(rng, -ec.start_jitter, ec.start_jitter));
    return s;
  };
  RobotState s = spawn();
  const auto goal = w.center(w.path.back());
  const double innov = ec.noise_std * std::sqrt(1.0 - ec.noise_corr * ec.noise_corr);
  double noise = ec.noise_std * gauss(rng);
  std::vector<SimFrame> frames;
  frames.reserve(n_frames);
  for (std::size_t t = 0; t < n_frames; ++t) {
    SimFrame fr;
    fr.index = t;
    fr.time = static_cast<double>(t) * ec.kinematics.dt;
    fr.state = s;
    fr.steering = oracle_steering(w, s, ec.oracle);
    fr.dr_flag = dr;
    fr.sensors = render_sensors(w, s);
    const double applied = std::clamp(fr.steering + noise, -1.0, 1.0);
    frames.push_back(std::move(fr));
    noise = ec.noise_corr * noise + innov * gauss(rng);
    bool moved = step_unicycle(w, s, applied, ec.kinematics);
    if (!moved || std::hypot(goal[0] - s.x, goal[1] - s.y) <= ec.goal_radius) s = spawn();
  }
  return frames;
}

/// Episodes that get randomized textures: exactly round(fraction * n) of
/// them, chosen by seed.
inline std::vector<bool> dr_assignment(std::size_t n_episodes, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(n_episodes);
  for (std::size_t i = 0; i < n_episodes; ++i) order[i] = i;
  std::mt19937_64 rng(mix_seed({seed, 0xd7}));
  std::shuffle(order.begin(), order.end(), rng);
  auto k = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n_episodes)));
  std::vector<bool> flags(n_episodes, false);
  for (std::size_t i = 0; i < std::min(k, n_episodes); ++i) flags[order[i]] = true;
  return flags;
}

}  // namespace nmfnet
