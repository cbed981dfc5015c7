#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>

#include "nmfnet/dataset.hpp"
#include "test_util.hpp"

using namespace nmfnet;
namespace fs = std::filesystem;

namespace {

GenConfig small_gen(std::uint64_t seed = 7) {
  GenConfig g;
  g.envs = {Archetype::house};
  g.episodes = 2;
  g.frames = 50;
  g.seed = seed;
  g.threads = 1;
  return g;
}

// Synthetic records: `episodes` episodes of `frames` frames per env, the
// first `dr_episodes` of each env flagged.
std::vector<FrameRecord> fake_records(std::size_t episodes, std::size_t frames, std::size_t dr_episodes) {
  std::vector<FrameRecord> rs;
  std::uint64_t id = 0;
  for (auto env : kArchetypes) {
    for (std::size_t e = 0; e < episodes; ++e) {
      for (std::size_t k = 0; k < frames; ++k) {
        FrameRecord r;
        r.frame_id = id++;
        r.env = env;
        r.episode = e;
        r.frame = k;
        r.dr_flag = e < dr_episodes;
        rs.push_back(r);
      }
    }
  }
  return rs;
}

std::map<std::string, std::string> read_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  }
  return out;
}

double dr_share(const std::vector<FrameRecord>& rs, Archetype env) {
  std::size_t n = 0, d = 0;
  for (const auto& r : rs) {
    if (r.env != env) continue;
    ++n;
    d += r.dr_flag;
  }
  return n ? static_cast<double>(d) / n : 0.0;
}

}  // namespace

TEST(Dataset, GenerateWritesRecordsAndManifest) {
  auto dir = nmfnet::testing::scratch_dir("gen");
  auto m = generate_dataset(small_gen(), dir);
  ASSERT_EQ(m.records.size(), 100u);
  EXPECT_TRUE(fs::exists(dir / "manifest.tsv"));
  auto back = read_manifest(dir);
  EXPECT_EQ(back.records, m.records);
  EXPECT_EQ(back.header.at("steering"), kSteeringConvention);
  EXPECT_EQ(back.header.at("version"), "1");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) files += e.is_regular_file();
  EXPECT_EQ(files, 3 * m.records.size() + 1);
  EXPECT_EQ(m.records[57].rgb_path, "house/1/frame_7.ppm");
  for (std::size_t i = 0; i < m.records.size(); ++i) EXPECT_EQ(m.records[i].frame_id, i);
}

TEST(Dataset, FilesMatchTheSimulator) {
  auto dir = nmfnet::testing::scratch_dir("roundtrip");
  auto cfg = small_gen(3);
  auto m = generate_dataset(cfg, dir);
  auto flags = dr_assignment(cfg.episodes, cfg.dr_fraction, mix_seed({cfg.seed, static_cast<std::uint64_t>(Archetype::house)}));
  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    auto world = generate_world(Archetype::house, world_seed(cfg.seed, Archetype::house, e));
    auto frames = collect_episode(world, cfg.frames, flags[e], episode_seed(cfg.seed, Archetype::house, e));
    for (std::size_t k = 0; k < frames.size(); k += 7) {
      const auto& r = m.records[e * cfg.frames + k];
      EXPECT_EQ(r.dr_flag, flags[e]);
      EXPECT_EQ(r.steering, frames[k].steering);
      EXPECT_EQ(read_ppm(dir / r.rgb_path), frames[k].sensors.rgb);
      EXPECT_EQ(read_scan(dir / r.scan_path).ranges, frames[k].sensors.scan.ranges);
      EXPECT_EQ(read_cloud(dir / r.cloud_path).points, frames[k].sensors.cloud.points);

      LoaderConfig lc;
      lc.cloud_points = 64;
      lc.cloud_seed = 5;
      auto b = load_batch(m, m.records, {e * cfg.frames + k}, lc);
      const auto& img = frames[k].sensors.rgb;
      const std::size_t hw = img.height * img.width;
      for (std::size_t p = 0; p < hw; p += 13) {
        for (std::size_t c = 0; c < 3; ++c) {
          ASSERT_EQ(b.inputs.rgb[c * hw + p], img.data[p * 3 + c] / 255.0f);
        }
      }
      auto map = scan_to_distance_map(frames[k].sensors.scan, DistanceMapConfig{}).map;
      for (std::size_t p = 0; p < map.pixels.size(); ++p) ASSERT_EQ(b.inputs.laser[p], map.pixels[p]);
      if (frames[k].sensors.cloud.size() > 0) {
        auto pc = sample_cloud(frames[k].sensors.cloud, 64, mix_seed({5, r.frame_id}));
        for (std::size_t p = 0; p < 64; ++p) {
          for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(b.inputs.cloud[p * 3 + c], pc.points[p][c]);
        }
      }
      EXPECT_FLOAT_EQ(b.target[0], static_cast<float>(frames[k].steering));
    }
  }
}

TEST(Dataset, GenerationIsByteIdenticalAcrossRunsAndThreadCounts) {
  auto a = nmfnet::testing::scratch_dir("det_a"), b = nmfnet::testing::scratch_dir("det_b");
  auto cfg = small_gen(11);
  cfg.envs = {Archetype::house, Archetype::cave};
  cfg.frames = 10;
  cfg.episodes = 3;
  generate_dataset(cfg, a);
  cfg.threads = 3;
  generate_dataset(cfg, b);
  EXPECT_EQ(read_tree(a), read_tree(b));
}

TEST(Split, SeventyThirtyPerEnvironment) {
  auto rs = fake_records(100, 10, 45);
  for (auto unit : {SplitUnit::record, SplitUnit::episode}) {
    auto s = split(rs, 0.7, 1, unit);
    for (auto env : kArchetypes) {
      EXPECT_EQ(records_of(s.train, env).size(), 700u);
      EXPECT_EQ(records_of(s.test, env).size(), 300u);
      EXPECT_NEAR(dr_share(s.train, env), 0.45, 0.03);
      EXPECT_NEAR(dr_share(s.test, env), 0.45, 0.03);
    }
    std::set<std::uint64_t> train_ids;
    for (const auto& r : s.train) train_ids.insert(r.frame_id);
    for (const auto& r : s.test) EXPECT_EQ(train_ids.count(r.frame_id), 0u);
    EXPECT_EQ(s.train.size() + s.test.size(), rs.size());
    auto again = split(rs, 0.7, 1, unit);
    EXPECT_EQ(again.train, s.train);
    EXPECT_NE(split(rs, 0.7, 2, unit).train, s.train);
  }
}

TEST(Split, EpisodesStayWhole) {
  auto rs = fake_records(20, 10, 9);
  auto s = split(rs, 0.7, 4);
  std::set<std::pair<int, std::size_t>> train_eps;
  for (const auto& r : s.train) train_eps.insert({static_cast<int>(r.env), r.episode});
  for (const auto& r : s.test) EXPECT_EQ(train_eps.count({static_cast<int>(r.env), r.episode}), 0u);
}

TEST(Split, TooSmall) {
  auto rs = fake_records(1, 3, 0);
  rs.resize(9);
  EXPECT_THROW(split(rs, 0.7, 0), DatasetTooSmallError);
  rs.push_back(rs.back());
  rs.back().frame_id = 99;
  EXPECT_NO_THROW(split(rs, 0.7, 0, SplitUnit::record));
}

TEST(Batches, SizesAndShuffling) {
  auto b = batch_indices(20, 8, 1);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 8u);
  EXPECT_EQ(b[1].size(), 8u);
  EXPECT_EQ(b[2].size(), 4u);
  auto flat = [](const std::vector<std::vector<std::size_t>>& bs) {
    std::vector<std::size_t> v;
    for (const auto& x : bs) v.insert(v.end(), x.begin(), x.end());
    return v;
  };
  auto e1 = flat(batch_indices(100, 8, 1)), e2 = flat(batch_indices(100, 8, 2));
  EXPECT_NE(e1, e2);
  std::sort(e1.begin(), e1.end());
  std::sort(e2.begin(), e2.end());
  EXPECT_EQ(e1, e2);
  EXPECT_EQ(flat(batch_indices(5, 2, 0, false)), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_THROW(batch_indices(5, 0, 0), ConfigError);
}

TEST(Batches, LoadsOnlyRequestedModalities) {
  auto dir = nmfnet::testing::scratch_dir("modal");
  auto cfg = small_gen();
  cfg.episodes = 1;
  cfg.frames = 20;
  auto m = generate_dataset(cfg, dir);
  LoaderConfig lc;
  lc.modalities = Modalities::parse("laser");
  auto b = load_batch(m, m.records, {0, 1, 2}, lc);
  EXPECT_FALSE(b.inputs.rgb.defined());
  EXPECT_FALSE(b.inputs.cloud.defined());
  ASSERT_TRUE(b.inputs.laser.defined());
  EXPECT_EQ(b.inputs.laser.shape(), (Shape{3, 1, 40, 80}));
  EXPECT_EQ(b.target.shape(), (Shape{3, 1}));
  EXPECT_EQ(b.frame_ids, (std::vector<std::uint64_t>{0, 1, 2}));

  lc.modalities = Modalities::all();
  auto full = load_batch(m, m.records, {4, 5}, lc);
  EXPECT_EQ(full.inputs.rgb.shape(), (Shape{2, 3, 60, 80}));
  EXPECT_EQ(full.inputs.cloud.shape(), (Shape{2, 512, 3}));
  for (float v : full.inputs.rgb.values()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
  // rebuilt every time from the same per-frame seed
  EXPECT_EQ(load_batch(m, m.records, {4, 5}, lc).inputs.cloud.values(), full.inputs.cloud.values());
}

TEST(Batches, UnreadableFileNamesTheFrame) {
  auto dir = nmfnet::testing::scratch_dir("broken");
  auto cfg = small_gen();
  cfg.episodes = 1;
  cfg.frames = 12;
  auto m = generate_dataset(cfg, dir);
  fs::remove(dir / m.records[5].scan_path);
  LoaderConfig lc;
  try {
    load_batch(m, m.records, {4, 5}, lc);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("frame 5"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_manifest(dir), IoError);
  EXPECT_NO_THROW(read_manifest(dir, false));
}

TEST(Manifest, RejectsMalformedInput) {
  auto dir = nmfnet::testing::scratch_dir("manifest");
  Manifest m;
  m.root = dir;
  FrameRecord r;
  r.rgb_path = r.scan_path = r.cloud_path = "x";
  m.records = {r, r};
  write_manifest(m);
  EXPECT_THROW(read_manifest(dir, false), IoError);  // duplicate id
  m.records[1].frame_id = 1;
  m.records[1].steering = 1.5;
  write_manifest(m);
  EXPECT_THROW(read_manifest(dir, false), IoError);
  m.records[1].steering = -0.25;
  write_manifest(m);
  auto back = read_manifest(dir, false);
  EXPECT_EQ(back.records, m.records);
  write_file_atomic(dir / "manifest.tsv", "garbage\n");
  EXPECT_THROW(read_manifest(dir, false), IoError);
}
