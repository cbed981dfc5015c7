#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "nmfnet/cloudnet.hpp"
#include "test_util.hpp"

using namespace nmfnet;
using nmfnet::testing::gradcheck;
using nmfnet::testing::random_tensor;

namespace {

CloudBranchConfig tiny_config() {
  CloudBranchConfig c;
  c.tnet_mlp = {6, 8};
  c.tnet_fc = {5};
  c.lift_mlp = {4, 4};
  c.global_mlp = {6, 7};
  return c;
}

PointCloud random_cloud(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> d(-2.0f, 2.0f);
  PointCloud c;
  c.points.resize(n);
  for (auto& p : c.points) p = {d(rng), d(rng), d(rng)};
  return c;
}

// Gives every batchnorm non-trivial running statistics and every tensor a
// random value, including the T-net output layers.
template <class T>
void randomize(const CloudBranchParams<T>& p, std::mt19937_64& rng) {
  TensorList<T> list;
  p.collect("cloud", list);
  std::uniform_real_distribution<double> d(-0.5, 0.5), pos(0.5, 1.5);
  for (auto& nt : list) {
    const bool is_var = nt.name.ends_with("running_var") || nt.name.ends_with("gamma");
    for (auto& x : nt.tensor.mutable_data()) x = static_cast<T>(is_var ? pos(rng) : d(rng));
  }
}

Tensor<double> permute_points(const Tensor<double>& x, const std::vector<std::size_t>& perm) {
  const std::size_t B = x.dim(0), N = x.dim(1), K = x.dim(2);
  std::vector<double> v(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) v[(b * N + n) * K + k] = x[(b * N + perm[n]) * K + k];
  return Tensor<double>(x.shape(), std::move(v));
}

// --- scalar oracle for eval-mode cloud_forward, written from the layer
// definitions with plain loops over std::vector.

using Vec = std::vector<double>;

Vec vals(const Tensor<double>& t) { return Vec(t.data().begin(), t.data().end()); }

Vec dense_bn_relu(const Vec& x, const DenseBnRelu<double>& l) {
  const auto w = vals(l.lin.w);
  const std::size_t in = l.lin.in(), out = l.lin.out();
  Vec y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double s = 0;
    for (std::size_t i = 0; i < in; ++i) s += x[i] * w[i * out + o];
    const double xhat = (s - l.bn.stats.mean[o]) / std::sqrt(l.bn.stats.var[o] + 1e-5);
    y[o] = std::max(0.0, l.bn.gamma[o] * xhat + l.bn.beta[o]);
  }
  return y;
}

Vec linear(const Vec& x, const Linear<double>& l) {
  Vec y(l.out());
  for (std::size_t o = 0; o < l.out(); ++o) {
    double s = l.b.defined() ? l.b[o] : 0.0;
    for (std::size_t i = 0; i < l.in(); ++i) s += x[i] * l.w[i * l.out() + o];
    y[o] = s;
  }
  return y;
}

Vec setmax(const std::vector<Vec>& rows) {
  Vec m = rows[0];
  for (const auto& r : rows)
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::max(m[i], r[i]);
  return m;
}

Vec tnet_oracle(const std::vector<Vec>& pts, const TNet<double>& t) {
  std::vector<Vec> h = pts;
  for (auto& p : h)
    for (const auto& l : t.point_layers) p = dense_bn_relu(p, l);
  Vec f = setmax(h);
  for (const auto& l : t.fc_layers) f = dense_bn_relu(f, l);
  return linear(f, t.out);
}

std::vector<Vec> transform_rows(const std::vector<Vec>& pts, const Vec& m, std::size_t K) {
  std::vector<Vec> out;
  for (const auto& p : pts) {
    Vec y(K, 0.0);
    for (std::size_t c = 0; c < K; ++c)
      for (std::size_t r = 0; r < K; ++r) y[c] += p[r] * m[r * K + c];
    out.push_back(y);
  }
  return out;
}

Vec cloud_oracle(const std::vector<Vec>& pts, const CloudBranchParams<double>& p) {
  auto x = transform_rows(pts, tnet_oracle(pts, p.tnet3), 3);
  for (auto& r : x)
    for (const auto& l : p.lift_mlp) r = dense_bn_relu(r, l);
  const std::size_t K = x[0].size();
  x = transform_rows(x, tnet_oracle(x, p.tnet64), K);
  for (auto& r : x)
    for (const auto& l : p.global_mlp) r = dense_bn_relu(r, l);
  return setmax(x);
}

}  // namespace

TEST(SampleCloud, RemovesHolesAndHitsExactCount) {
  std::mt19937_64 rng(1);
  auto raw = random_cloud(640 * 480, rng);
  raw.valid.assign(raw.size(), 1);
  std::bernoulli_distribution hole(0.2);
  for (std::size_t i = 0; i < raw.size(); ++i)
    if (hole(rng)) raw.valid[i] = 0;
  raw.points[5] = {NAN, 0, 0};
  auto s = sample_cloud(raw, 20480, 3);
  ASSERT_EQ(s.size(), 20480u);
  EXPECT_EQ(s.valid_count(), 20480u);
  // without replacement: all distinct source points
  std::set<std::array<float, 3>> uniq(s.points.begin(), s.points.end());
  EXPECT_EQ(uniq.size(), 20480u);
}

TEST(SampleCloud, ExactSizeIsPermutation) {
  std::mt19937_64 rng(2);
  auto raw = random_cloud(512, rng);
  auto s = sample_cloud(raw, 512, 9);
  auto a = raw.points, b = s.points;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

TEST(SampleCloud, FewPointsDrawWithReplacement) {
  std::mt19937_64 rng(3);
  auto raw = random_cloud(10, rng);
  auto s = sample_cloud(raw, 512, 4);
  ASSERT_EQ(s.size(), 512u);
  std::set<std::array<float, 3>> src(raw.points.begin(), raw.points.end());
  for (const auto& p : s.points) EXPECT_TRUE(src.count(p));
}

TEST(SampleCloud, DeterministicPerSeedAndEmptyFails) {
  std::mt19937_64 rng(4);
  auto raw = random_cloud(2000, rng);
  EXPECT_EQ(sample_cloud(raw, 100, 5).points, sample_cloud(raw, 100, 5).points);
  EXPECT_NE(sample_cloud(raw, 100, 5).points, sample_cloud(raw, 100, 6).points);
  PointCloud empty;
  EXPECT_THROW(sample_cloud(empty, 8, 1), EmptyCloudError);
  raw.valid.assign(raw.size(), 0);
  EXPECT_THROW(sample_cloud(raw, 8, 1), EmptyCloudError);
}

TEST(CloudFile, RoundTripAndTruncation) {
  auto dir = nmfnet::testing::scratch_dir("cloudfile");
  std::mt19937_64 rng(5);
  auto c = random_cloud(37, rng);
  write_cloud(dir / "c.cloud", c);
  EXPECT_EQ(std::filesystem::file_size(dir / "c.cloud"), 8u + 37u * 12u);
  EXPECT_EQ(read_cloud(dir / "c.cloud").points, c.points);
  auto bytes = read_file(dir / "c.cloud");
  EXPECT_THROW(decode_cloud(bytes.substr(0, bytes.size() - 1)), IoError);
  EXPECT_THROW(decode_cloud("abc"), IoError);
}

TEST(ApplyTransform, IdentityAndScaling) {
  std::mt19937_64 rng(6);
  auto pts = random_tensor<double>({2, 5, 3}, rng);
  std::vector<double> eye(18, 0.0), two(18, 0.0);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 3; ++i) {
      eye[b * 9 + i * 4] = 1;
      two[b * 9 + i * 4] = 2;
    }
  Graph<double> g(false);
  auto same = apply_transform(g, pts, Tensor<double>({2, 3, 3}, eye));
  auto dbl = apply_transform(g, pts, Tensor<double>({2, 3, 3}, two));
  for (std::size_t i = 0; i < pts.numel(); ++i) {
    EXPECT_EQ(same[i], pts[i]);
    EXPECT_EQ(dbl[i], 2 * pts[i]);
  }
}

TEST(ApplyTransform, MatchesPerPointLoop) {
  std::mt19937_64 rng(7);
  for (std::size_t K : {3u, 64u}) {
    auto pts = random_tensor<double>({2, 6, K}, rng);
    auto tr = random_tensor<double>({2, K, K}, rng);
    Graph<double> g(false);
    auto y = apply_transform(g, pts, tr);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t n = 0; n < 6; ++n)
        for (std::size_t c = 0; c < K; ++c) {
          double s = 0;
          for (std::size_t r = 0; r < K; ++r) s += pts[(b * 6 + n) * K + r] * tr[(b * K + r) * K + c];
          EXPECT_NEAR(y[(b * 6 + n) * K + c], s, 1e-12);
        }
  }
  Graph<double> g(false);
  EXPECT_THROW(apply_transform(g, Tensor<double>::zeros({1, 4, 3}), Tensor<double>::zeros({1, 4, 4})),
               DimensionError);
}

TEST(CloudBranch, DefaultShapes) {
  std::mt19937_64 rng(8);
  auto p = CloudBranchParams<float>::make(CloudBranchConfig{}, rng);
  auto pts = random_tensor<float>({2, 64, 3}, rng);
  Graph<float> g(false);
  CloudTrace<float> tr;
  auto f = cloud_forward(g, pts, p, Mode::train, &tr);
  EXPECT_EQ(f.shape(), (Shape{2, 1024}));
  EXPECT_EQ(tr.input_transform.shape(), (Shape{2, 3, 3}));
  EXPECT_EQ(tr.feature_transform.shape(), (Shape{2, 64, 64}));
}

TEST(CloudBranch, TransformsAreIdentityAtInit) {
  std::mt19937_64 rng(9);
  auto p = CloudBranchParams<float>::make(CloudBranchConfig{}, rng);
  auto pts = random_tensor<float>({2, 32, 3}, rng);
  for (Mode mode : {Mode::train, Mode::eval}) {
    Graph<float> g(false);
    CloudTrace<float> tr;
    auto f = cloud_forward(g, pts, p, mode, &tr);
    for (const auto* t : {&tr.input_transform, &tr.feature_transform}) {
      const std::size_t K = t->dim(1);
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < K; ++i)
          for (std::size_t j = 0; j < K; ++j)
            ASSERT_EQ((*t)[(b * K + i) * K + j], i == j ? 1.0f : 0.0f);
    }
    // the same pipeline without either transform
    auto h = reshape(g, pts, {64, 3});
    for (const auto& l : p.lift_mlp) h = l(g, h, mode);
    for (const auto& l : p.global_mlp) h = l(g, h, mode);
    auto raw = reduce_max_axis(g, reshape(g, h, {2, 32, h.dim(1)}));
    for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_NEAR(f[i], raw[i], 1e-7);
  }
}

TEST(CloudBranch, PermutationInvariant) {
  std::mt19937_64 rng(10);
  auto p = CloudBranchParams<double>::make(tiny_config(), rng);
  randomize(p, rng);
  auto pts = random_tensor<double>({2, 16, 3}, rng);
  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  for (Mode mode : {Mode::eval, Mode::train}) {
    Graph<double> g(false);
    auto ref = cloud_forward(g, pts, p, mode);
    for (int t = 0; t < 25; ++t) {
      std::shuffle(perm.begin(), perm.end(), rng);
      auto out = cloud_forward(g, permute_points(pts, perm), p, mode);
      for (std::size_t i = 0; i < ref.numel(); ++i) ASSERT_NEAR(out[i], ref[i], 1e-9);
    }
  }
}

TEST(CloudBranch, MatchesScalarOracle) {
  std::mt19937_64 rng(11);
  auto cfg = tiny_config();
  auto p = CloudBranchParams<double>::make(cfg, rng);
  randomize(p, rng);
  auto pts = random_tensor<double>({1, 4, 3}, rng);
  Graph<double> g(false);
  auto out = cloud_forward(g, pts, p, Mode::eval);
  std::vector<Vec> rows;
  for (std::size_t n = 0; n < 4; ++n) rows.push_back({pts[n * 3], pts[n * 3 + 1], pts[n * 3 + 2]});
  auto ref = cloud_oracle(rows, p);
  ASSERT_EQ(out.numel(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
}

TEST(CloudBranch, GradientCheck) {
  std::mt19937_64 rng(12);
  auto p = CloudBranchParams<double>::make(tiny_config(), rng);
  randomize(p, rng);
  auto pts = random_tensor<double>({3, 8, 3}, rng, -1, 1, true);
  auto w = random_tensor<double>({3, 7}, rng);
  TensorList<double> list;
  p.collect("cloud", list);
  std::vector<std::pair<std::string, Tensor<double>>> params{{"points", pts}};
  for (auto& nt : list)
    if (nt.trainable) params.push_back({nt.name, nt.tensor});
  // Train-mode batch statistics would drift the running buffers between
  // evaluations; they do not feed the train-mode output, so that is harmless.
  auto report = gradcheck(
      [&](Graph<double>& g) {
        auto f = cloud_forward(g, pts, p, Mode::train);
        // weighted sum so every feature coordinate carries a distinct gradient
        auto flat = reshape(g, f, {1, 21});
        auto wt = reshape(g, w, {21, 1});
        return reshape(g, dense(g, flat, wt, Tensor<double>()), {1});
      },
      params, 1e-5, 12);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst;
  EXPECT_GT(report.checked, 100u);
}

TEST(CloudBranch, EmptyAndMalformedInputs) {
  std::mt19937_64 rng(13);
  auto p = CloudBranchParams<double>::make(tiny_config(), rng);
  Graph<double> g(false);
  EXPECT_THROW(cloud_forward(g, Tensor<double>::zeros({1, 0, 3}), p, Mode::eval), EmptySetError);
  EXPECT_THROW(cloud_forward(g, Tensor<double>::zeros({1, 4, 2}), p, Mode::eval), DimensionError);
}
