#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "nmfnet/cloudnet.hpp"
#include "nmfnet/lasermap.hpp"
#include "nmfnet/model.hpp"
#include "nmfnet/simworld.hpp"

namespace nmfnet {

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kSteeringConvention = "normalized [-1,1], +1 = full left (counter-clockwise)";

struct FrameRecord {
  std::uint64_t frame_id = 0;
  Archetype env = Archetype::house;
  std::size_t episode = 0;
  std::size_t frame = 0;  // index inside the episode
  double time = 0;
  double steering = 0;
  bool dr_flag = false;
  std::string rgb_path, scan_path, cloud_path;  // relative to the dataset root

  bool operator==(const FrameRecord&) const = default;
};

struct Manifest {
  std::filesystem::path root;
  std::map<std::string, std::string> header;  // key/value lines, version and sensors among them
  std::vector<FrameRecord> records;

  std::filesystem::path path_of(const std::string& rel) const { return root / rel; }
};

namespace detail {

inline std::string sensor_summary(const SensorConfig& s) {
  std::ostringstream os;
  os << "rgb " << s.image_height << "x" << s.image_width << " hfov " << s.hfov << " rad; laser " << s.laser_beams
     << " beams over " << s.laser_fov << " rad, max_range " << s.max_range << " m; depth camera shares the rgb intrinsics";
  return os.str();
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

inline const char* kColumns = "frame_id\tenv\tepisode\tframe\ttime\tsteering\tdr_flag\trgb\tscan\tcloud";

}  // namespace detail

inline std::string encode_manifest(const Manifest& m) {
  std::ostringstream os;
  os << "# nmfnet-dataset " << kManifestVersion << '\n';
  for (const auto& [k, v] : m.header) {
    if (k == "version") continue;
    os << "# " << k << ": " << v << '\n';
  }
  os << detail::kColumns << '\n';
  for (const auto& r : m.records) {
    os << r.frame_id << '\t' << archetype_name(r.env) << '\t' << r.episode << '\t' << r.frame << '\t'
       << detail::format_double(r.time) << '\t' << detail::format_double(r.steering) << '\t' << (r.dr_flag ? 1 : 0)
       << '\t' << r.rgb_path << '\t' << r.scan_path << '\t' << r.cloud_path << '\n';
  }
  return os.str();
}

inline void write_manifest(const Manifest& m) { write_file_atomic(m.root / "manifest.tsv", encode_manifest(m)); }

/// Parses <root>/manifest.tsv. With `check_files` every referenced file must exist.
inline Manifest read_manifest(const std::filesystem::path& root, bool check_files = true) {
  const auto path = root / "manifest.tsv";
  std::istringstream in(read_file(path));
  Manifest m;
  m.root = root;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# nmfnet-dataset ", 0) != 0) {
    throw IoError(path.string() + ": missing '# nmfnet-dataset' header");
  }
  m.header["version"] = line.substr(17);
  if (m.header["version"] != std::to_string(kManifestVersion)) {
    throw IoError(path.string() + ": unsupported manifest version " + m.header["version"]);
  }
  bool columns = false;
  std::set<std::uint64_t> ids;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto colon = line.find(':');
      if (colon != std::string::npos && line.size() > 2) {
        m.header[line.substr(2, colon - 2)] = colon + 2 <= line.size() ? line.substr(colon + 2) : "";
      }
      continue;
    }
    if (!columns) {
      if (line != detail::kColumns) throw IoError(path.string() + ": unexpected column header");
      columns = true;
      continue;
    }
    auto f = detail::split_tabs(line);
    auto where = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 10) throw IoError(where + ": expected 10 fields, got " + std::to_string(f.size()));
    FrameRecord r;
    try {
      r.frame_id = std::stoull(f[0]);
      r.env = parse_archetype(f[1]);
      r.episode = std::stoull(f[2]);
      r.frame = std::stoull(f[3]);
      r.time = std::stod(f[4]);
      r.steering = std::stod(f[5]);
    } catch (const ConfigError& e) {
      throw IoError(where + ": " + e.what());
    } catch (const std::exception&) {
      throw IoError(where + ": malformed number");
    }
    if (f[6] != "0" && f[6] != "1") throw IoError(where + ": dr_flag must be 0 or 1");
    r.dr_flag = f[6] == "1";
    r.rgb_path = f[7];
    r.scan_path = f[8];
    r.cloud_path = f[9];
    if (!std::isfinite(r.steering) || std::abs(r.steering) > 1.0) {
      throw IoError(where + ": steering must be finite and within [-1, 1]");
    }
    if (!ids.insert(r.frame_id).second) throw IoError(where + ": duplicate frame_id " + f[0]);
    if (check_files) {
      for (const auto* p : {&r.rgb_path, &r.scan_path, &r.cloud_path}) {
        if (!std::filesystem::exists(root / *p)) {
          throw IoError("frame " + f[0] + ": missing file " + (root / *p).string());
        }
      }
    }
    m.records.push_back(std::move(r));
  }
  if (!columns) throw IoError(path.string() + ": no column header");
  return m;
}

struct GenConfig {
  std::vector<Archetype> envs{Archetype::house, Archetype::city, Archetype::cave};
  std::size_t episodes = 1;  // per environment
  std::size_t frames = 100;  // per episode
  double dr_fraction = 0.45;
  std::uint64_t seed = 0;
  EpisodeConfig episode;
  unsigned threads = 0;  // 0: hardware concurrency

  void validate() const {
    if (envs.empty()) throw ConfigError("gen: no environments");
    if (episodes == 0 || frames == 0) throw ConfigError("gen: episodes and frames must be positive");
    if (!(dr_fraction >= 0.0 && dr_fraction <= 1.0)) throw ConfigError("gen: dr fraction must lie in [0, 1]");
  }
};

/// Seeds used for one episode; derived only from (seed, env, episode), so any
/// schedule of workers produces the same files.
inline std::uint64_t world_seed(std::uint64_t seed, Archetype env, std::size_t episode) {
  return mix_seed({seed, static_cast<std::uint64_t>(env), episode, 0x3031});
}
inline std::uint64_t episode_seed(std::uint64_t seed, Archetype env, std::size_t episode) {
  return mix_seed({seed, static_cast<std::uint64_t>(env), episode, 0xe915});
}

inline std::string frame_stem(Archetype env, std::size_t episode, std::size_t k) {
  std::ostringstream os;
  os << archetype_name(env) << '/' << episode << "/frame_" << k;
  return os.str();
}

/// Simulates every (env, episode) pair and writes the on-disk layout plus
/// manifest.tsv. Frame ids count up in (env, episode, frame) order.
inline Manifest generate_dataset(const GenConfig& cfg, const std::filesystem::path& out) {
  cfg.validate();
  struct Job {
    Archetype env;
    std::size_t episode;
    bool dr;
  };
  std::vector<Job> jobs;
  for (auto env : cfg.envs) {
    auto flags = dr_assignment(cfg.episodes, cfg.dr_fraction, mix_seed({cfg.seed, static_cast<std::uint64_t>(env)}));
    for (std::size_t e = 0; e < cfg.episodes; ++e) jobs.push_back({env, e, flags[e]});
  }
  std::vector<std::vector<FrameRecord>> results(jobs.size());
  std::vector<std::string> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
      const auto& job = jobs[j];
      try {
        auto world = generate_world(job.env, world_seed(cfg.seed, job.env, job.episode));
        auto frames = collect_episode(world, cfg.frames, job.dr, episode_seed(cfg.seed, job.env, job.episode), cfg.episode);
        std::filesystem::create_directories(out / archetype_name(job.env) / std::to_string(job.episode));
        for (const auto& f : frames) {
          FrameRecord r;
          r.env = job.env;
          r.episode = job.episode;
          r.frame = f.index;
          r.time = f.time;
          r.steering = f.steering;
          r.dr_flag = f.dr_flag;
          auto stem = frame_stem(job.env, job.episode, f.index);
          r.rgb_path = stem + ".ppm";
          r.scan_path = stem + ".scan";
          r.cloud_path = stem + ".cloud";
          write_ppm(out / r.rgb_path, f.sensors.rgb);
          write_scan(out / r.scan_path, f.sensors.scan);
          write_cloud(out / r.cloud_path, f.sensors.cloud);
          results[j].push_back(std::move(r));
        }
      } catch (const std::exception& e) {
        errors[j] = archetype_name(job.env) + " episode " + std::to_string(job.episode) + ": " + e.what();
      }
    }
  };
  unsigned n = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
  n = static_cast<unsigned>(std::min<std::size_t>(n, jobs.size()));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (!e.empty()) throw GenerationError(e);
  }
  Manifest m;
  m.root = out;
  std::string envs;
  for (auto e : cfg.envs) envs += (envs.empty() ? "" : ",") + archetype_name(e);
  m.header["steering"] = kSteeringConvention;
  m.header["sensors"] = detail::sensor_summary(cfg.episode.sensors);
  m.header["generator"] = "envs " + envs + "; episodes " + std::to_string(cfg.episodes) + "; frames " +
                          std::to_string(cfg.frames) + "; dr_fraction " + detail::format_double(cfg.dr_fraction) +
                          "; seed " + std::to_string(cfg.seed);
  std::uint64_t id = 0;
  for (auto& rs : results) {
    for (auto& r : rs) {
      r.frame_id = id++;
      m.records.push_back(std::move(r));
    }
  }
  write_manifest(m);
  return m;
}

struct Split {
  std::vector<FrameRecord> train, test;
};

enum class SplitUnit { episode, record };

/// Stratified split. Strata are (env, dr_flag); whole episodes move together
/// by default so that near-identical consecutive frames never straddle the
/// split. Each environment gets round(fraction * units) training units, shared
/// among its strata by largest remainder.
inline Split split(const std::vector<FrameRecord>& records, double train_fraction = 0.7, std::uint64_t seed = 0,
                   SplitUnit unit = SplitUnit::episode) {
  if (records.size() < 10) {
    throw DatasetTooSmallError("split needs at least 10 records, got " + std::to_string(records.size()));
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
  // unit key -> record indices, grouped by stratum
  using Key = std::pair<std::size_t, std::uint64_t>;  // (episode or frame id, tiebreak)
  std::map<int, std::map<bool, std::map<Key, std::vector<std::size_t>>>> strata;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    Key k = unit == SplitUnit::episode ? Key{r.episode, 0} : Key{0, r.frame_id};
    strata[static_cast<int>(r.env)][r.dr_flag][k].push_back(i);
  }
  std::vector<bool> in_train(records.size(), false);
  for (auto& [env, by_flag] : strata) {
    std::size_t units = 0;
    for (auto& [flag, groups] : by_flag) units += groups.size();
    const auto target = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(units)));
    struct Share {
      bool flag;
      std::size_t take;
      double rem;
    };
    std::vector<Share> shares;
    std::size_t given = 0;
    for (auto& [flag, groups] : by_flag) {
      double exact = train_fraction * static_cast<double>(groups.size());
      auto take = static_cast<std::size_t>(std::floor(exact));
      shares.push_back({flag, take, exact - static_cast<double>(take)});
      given += take;
    }
    std::vector<std::size_t> order(shares.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return shares[a].rem > shares[b].rem; });
    for (std::size_t i = 0; given < target && i < order.size(); ++i, ++given) shares[order[i]].take++;
    for (const auto& sh : shares) {
      auto& groups = by_flag[sh.flag];
      std::vector<const std::vector<std::size_t>*> list;
      for (auto& [k, idx] : groups) list.push_back(&idx);
      std::mt19937_64 rng(mix_seed({seed, static_cast<std::uint64_t>(env), sh.flag ? 1u : 0u}));
      std::shuffle(list.begin(), list.end(), rng);
      for (std::size_t u = 0; u < sh.take && u < list.size(); ++u) {
        for (auto i : *list[u]) in_train[i] = true;
      }
    }
  }
  Split s;
  for (std::size_t i = 0; i < records.size(); ++i) (in_train[i] ? s.train : s.test).push_back(records[i]);
  return s;
}

inline Split split(const Manifest& m, double train_fraction = 0.7, std::uint64_t seed = 0,
                   SplitUnit unit = SplitUnit::episode) {
  return split(m.records, train_fraction, seed, unit);
}

/// Shuffled batches of record indices for one epoch. The last batch may be short.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t epoch_seed,
                                                           bool shuffle = true) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    std::mt19937_64 rng(mix_seed({epoch_seed, 0xba7c}));
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

struct LoaderConfig {
  Modalities modalities;
  std::size_t cloud_points = 512;
  std::uint64_t cloud_seed = 0;  // mixed with each frame id
  DistanceMapConfig map;
};

struct Batch {
  std::vector<std::uint64_t> frame_ids;
  ModelInputs<float> inputs;
  Tensor<float> target;  // B x 1
};

/// Network inputs for one frame, flattened in the layout of one batch row.
struct FrameTensors {
  std::vector<float> rgb, laser, cloud;
  std::size_t rgb_h = 0, rgb_w = 0;
};

inline FrameTensors load_frame(const Manifest& m, const FrameRecord& r, const LoaderConfig& cfg) {
  FrameTensors f;
  try {
    if (cfg.modalities.rgb) {
      auto img = read_ppm(m.path_of(r.rgb_path));
      f.rgb_h = img.height;
      f.rgb_w = img.width;
      const std::size_t hw = img.height * img.width;
      f.rgb.resize(3 * hw);
      for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t c = 0; c < 3; ++c) f.rgb[c * hw + p] = static_cast<float>(img.data[p * 3 + c]) / 255.0f;
      }
    }
    if (cfg.modalities.laser) {
      auto scan = read_scan(m.path_of(r.scan_path));
      auto res = scan_to_distance_map(scan, cfg.map);
      f.laser.assign(res.map.pixels.begin(), res.map.pixels.end());
    }
    if (cfg.modalities.cloud) {
      auto raw = read_cloud(m.path_of(r.cloud_path));
      if (raw.valid_count() == 0) {
        // nothing in range: the branch sees a cloud collapsed on the sensor
        f.cloud.assign(cfg.cloud_points * 3, 0.0f);
      } else {
        auto pc = sample_cloud(raw, cfg.cloud_points, mix_seed({cfg.cloud_seed, r.frame_id}));
        f.cloud.reserve(cfg.cloud_points * 3);
        for (const auto& p : pc.points) f.cloud.insert(f.cloud.end(), p.begin(), p.end());
      }
    }
  } catch (const Error& e) {
    throw IoError("frame " + std::to_string(r.frame_id) + ": " + e.what());
  }
  return f;
}

/// Stacks the given records into one batch, loading only the requested modalities.
inline Batch load_batch(const Manifest& m, const std::vector<FrameRecord>& records,
                        const std::vector<std::size_t>& indices, const LoaderConfig& cfg) {
  if (indices.empty()) throw ConfigError("load_batch: empty batch");
  const std::size_t B = indices.size();
  Batch b;
  std::vector<float> rgb, laser, cloud, target;
  std::size_t h = 0, w = 0;
  for (auto i : indices) {
    const auto& r = records.at(i);
    auto f = load_frame(m, r, cfg);
    if (cfg.modalities.rgb) {
      if (rgb.empty()) {
        h = f.rgb_h;
        w = f.rgb_w;
      } else if (f.rgb_h != h || f.rgb_w != w) {
        throw IoError("frame " + std::to_string(r.frame_id) + ": image size differs from the rest of the batch");
      }
    }
    rgb.insert(rgb.end(), f.rgb.begin(), f.rgb.end());
    laser.insert(laser.end(), f.laser.begin(), f.laser.end());
    cloud.insert(cloud.end(), f.cloud.begin(), f.cloud.end());
    target.push_back(static_cast<float>(r.steering));
    b.frame_ids.push_back(r.frame_id);
  }
  if (cfg.modalities.rgb) b.inputs.rgb = Tensor<float>({B, 3, h, w}, std::move(rgb));
  if (cfg.modalities.laser) b.inputs.laser = Tensor<float>({B, 1, cfg.map.height, cfg.map.width}, std::move(laser));
  if (cfg.modalities.cloud) b.inputs.cloud = Tensor<float>({B, cfg.cloud_points, 3}, std::move(cloud));
  b.target = Tensor<float>({B, 1}, std::move(target));
  return b;
}

/// Records of one environment.
inline std::vector<FrameRecord> records_of(const std::vector<FrameRecord>& rs, Archetype env) {
  std::vector<FrameRecord> out;
  for (const auto& r : rs) {
    if (r.env == env) out.push_back(r);
  }
  return out;
}

}  // namespace nmfnet
