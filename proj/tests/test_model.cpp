#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "nmfnet/model.hpp"
#include "test_util.hpp"

using namespace nmfnet;
using nmfnet::testing::gradcheck;
using nmfnet::testing::random_tensor;

namespace {

template <class T>
ModelInputs<T> random_inputs(std::size_t B, std::size_t H, std::size_t W, std::size_t N,
                             std::mt19937_64& rng, std::size_t mh = 0, std::size_t mw = 0) {
  ModelInputs<T> in;
  in.rgb = random_tensor<T>({B, 3, H, W}, rng, 0, 1);
  in.laser = random_tensor<T>({B, 1, mh ? mh : H, mw ? mw : W}, rng, 0, 1);
  in.cloud = random_tensor<T>({B, N, 3}, rng, -2, 2);
  return in;
}

// Moves every batchnorm away from the identity so eval mode is non-trivial.
template <class T>
void perturb_buffers(const NMFNet<T>& m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-0.3, 0.3), pos(0.6, 1.4);
  for (auto& nt : m.tensors()) {
    if (nt.trainable && !nt.name.ends_with("gamma") && !nt.name.ends_with(".b") &&
        !nt.name.ends_with("beta"))
      continue;
    const bool positive = nt.name.ends_with("running_var") || nt.name.ends_with("gamma");
    for (auto& x : nt.tensor.mutable_data()) x = static_cast<T>(positive ? pos(rng) : d(rng));
  }
}

std::size_t block_params(std::size_t in, std::size_t out) {
  return 2 * in + (9 * in * out + out) + 2 * out + (9 * out * out + out) + (in * out + out);
}

}  // namespace

TEST(ResNet8, DeskShape) {
  std::mt19937_64 rng(1);
  auto p = ResNet8Params<float>::make(ResNet8Config{}, rng);
  Graph<float> g(false);
  auto out = resnet8_forward(g, random_tensor<float>({2, 3, 60, 80}, rng), p, Mode::train);
  EXPECT_EQ(out.shape(), (Shape{2, 128}));
}

TEST(ResNet8, ZeroImageIsFinite) {
  std::mt19937_64 rng(2);
  auto p = ResNet8Params<float>::make(ResNet8Config{}, rng);
  Graph<float> g(false);
  for (Mode mode : {Mode::train, Mode::eval}) {
    auto out = resnet8_forward(g, Tensor<float>::zeros({2, 3, 60, 80}), p, mode);
    for (auto v : out.data()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(ResNet8, RejectsSmallInputAndWrongChannels) {
  std::mt19937_64 rng(3);
  auto p = ResNet8Params<float>::make(ResNet8Config{}, rng);
  Graph<float> g(false);
  EXPECT_EQ(ResNet8Config{}.min_input(), 32u);
  EXPECT_THROW(resnet8_forward(g, Tensor<float>::zeros({1, 3, 31, 80}), p, Mode::eval), DimensionError);
  EXPECT_THROW(resnet8_forward(g, Tensor<float>::zeros({1, 1, 60, 80}), p, Mode::eval), DimensionError);
  EXPECT_NO_THROW(resnet8_forward(g, Tensor<float>::zeros({1, 3, 32, 32}), p, Mode::eval));
  ResNet8Config bad;
  bad.block_channels = {32, 64};
  EXPECT_THROW(ResNet8Params<float>::make(bad, rng), ConfigError);
}

TEST(ResNet8, ParameterCountMatchesHandTotal) {
  std::mt19937_64 rng(4);
  auto p = ResNet8Params<float>::make(ResNet8Config{}, rng);
  TensorList<float> list;
  p.collect("r", list);
  const std::size_t stem = 5 * 5 * 3 * 32 + 32;
  const std::size_t expected = stem + block_params(32, 32) + block_params(32, 64) + block_params(64, 128);
  EXPECT_EQ(expected, 309984u);
  EXPECT_EQ(count_parameters(list), expected);
}

TEST(ResNet8, GradientCheckToy) {
  std::mt19937_64 rng(5);
  ResNet8Config cfg{1, 3, 5, 2, true, {3, 4, 4}};
  auto p = ResNet8Params<double>::make(cfg, rng);
  auto img = random_tensor<double>({2, 1, 32, 32}, rng, -1, 1, true);
  auto w = random_tensor<double>({4, 1}, rng);
  TensorList<double> list;
  p.collect("r", list);
  std::vector<std::pair<std::string, Tensor<double>>> params{{"img", img}};
  for (auto& nt : list)
    if (nt.trainable) params.push_back({nt.name, nt.tensor});
  auto report = gradcheck(
      [&](Graph<double>& g) {
        auto f = resnet8_forward(g, img, p, Mode::train);
        return sum(g, dense(g, f, w, Tensor<double>()));
      },
      params, 1e-5, 10);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst;
}

TEST(Fusion, ChannelCountAndDenseEquivalence) {
  std::mt19937_64 rng(6);
  auto m = NMFNet<double>::make(ModelConfig{}, 6);
  ASSERT_EQ(m.fusion.size(), 2u);
  EXPECT_EQ(m.fusion[0].k.shape(), (Shape{512, 1152, 1, 1}));
  EXPECT_EQ(m.fusion[1].k.shape(), (Shape{256, 512, 1, 1}));
  for (auto& x : m.fusion[0].b.mutable_data()) x = std::uniform_real_distribution<double>(-1, 1)(rng);

  auto rgb = random_tensor<double>({3, 128}, rng);
  auto cloud = random_tensor<double>({3, 1024}, rng);
  Graph<double> g(false);
  auto out = fuse_2d3d(g, rgb, cloud, m.fusion);
  ASSERT_EQ(out.shape(), (Shape{3, 256}));

  // the same layers as plain dense products over the concatenated feature
  auto h = concat(g, {rgb, cloud}, 1);
  for (const auto& c : m.fusion) {
    const std::size_t o = c.k.dim(0), i = c.k.dim(1);
    std::vector<double> wt(i * o);
    for (std::size_t a = 0; a < o; ++a)
      for (std::size_t b = 0; b < i; ++b) wt[b * o + a] = c.k[a * i + b];
    h = relu(g, dense(g, h, Tensor<double>({i, o}, wt), c.b));
  }
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], h[i], 1e-12);
}

TEST(Fusion, ZeroFeaturesPropagateBiases) {
  std::mt19937_64 rng(7);
  auto m = NMFNet<double>::make(ModelConfig::tiny(), 7);
  for (auto& c : m.fusion)
    for (auto& x : c.b.mutable_data()) x = std::uniform_real_distribution<double>(-1, 1)(rng);
  Graph<double> g(false);
  auto out = fuse_2d3d(g, Tensor<double>::zeros({2, 6}), Tensor<double>::zeros({2, 7}), m.fusion);
  // layer 1 sees zeros -> relu(b1); layer 2 -> relu(W2 relu(b1) + b2)
  const auto& c1 = m.fusion[0];
  const auto& c2 = m.fusion[1];
  for (std::size_t o = 0; o < c2.k.dim(0); ++o) {
    double s = c2.b[o];
    for (std::size_t i = 0; i < c2.k.dim(1); ++i) s += c2.k[o * c2.k.dim(1) + i] * std::max(0.0, c1.b[i]);
    EXPECT_NEAR(out[o], std::max(0.0, s), 1e-12);
    EXPECT_NEAR(out[c2.k.dim(0) + o], std::max(0.0, s), 1e-12);
  }
  EXPECT_THROW(fuse_2d3d(g, Tensor<double>::zeros({2, 6}), Tensor<double>::zeros({3, 7}), m.fusion),
               DimensionError);
}

TEST(NMFNet, DeskBatchShape) {
  std::mt19937_64 rng(8);
  auto m = NMFNet<float>::make(ModelConfig{}, 8);
  auto in = random_inputs<float>(8, 60, 80, 512, rng, 40, 80);
  Graph<float> g(false);
  auto out = nmfnet_forward(g, in, m, Mode::train);
  EXPECT_EQ(out.shape(), (Shape{8, 1}));
}

TEST(NMFNet, ZeroHeadGivesBias) {
  std::mt19937_64 rng(9);
  auto m = NMFNet<double>::make(ModelConfig::tiny(), 9);
  for (auto& x : m.head.w.mutable_data()) x = 0;
  m.head.b.mutable_data()[0] = 0.375;
  for (int t = 0; t < 3; ++t) {
    auto in = random_inputs<double>(2, 8, 8, 8, rng);
    Graph<double> g(false);
    auto out = nmfnet_forward(g, in, m, Mode::eval);
    EXPECT_EQ(out[0], 0.375);
    EXPECT_EQ(out[1], 0.375);
  }
}

TEST(NMFNet, EndToEndGradientCheckTiny) {
  std::mt19937_64 rng(10);
  auto m = NMFNet<double>::make(ModelConfig::tiny(), 10);
  perturb_buffers(m, rng);
  auto in = random_inputs<double>(3, 8, 8, 8, rng);
  auto target = random_tensor<double>({3, 1}, rng);
  std::vector<std::pair<std::string, Tensor<double>>> params;
  for (auto& nt : m.tensors())
    if (nt.trainable) params.push_back({nt.name, nt.tensor});
  for (Mode mode : {Mode::train, Mode::eval}) {
    auto report = gradcheck(
        [&](Graph<double>& g) { return mse_loss(g, nmfnet_forward(g, in, m, mode), target); },
        params, 1e-5, 6);
    EXPECT_LT(report.max_rel_error, 1e-4) << report.worst;
    EXPECT_GT(report.checked, 300u);
  }
}

TEST(NMFNet, MissingModality) {
  std::mt19937_64 rng(11);
  auto m = NMFNet<double>::make(ModelConfig::tiny(), 11);
  auto in = random_inputs<double>(2, 8, 8, 8, rng);
  in.laser = Tensor<double>();
  Graph<double> g(false);
  EXPECT_THROW(nmfnet_forward(g, in, m, Mode::eval), MissingModalityError);
  auto cfg = ModelConfig::tiny();
  cfg.modalities = Modalities::parse("rgb,cloud");
  auto partial = NMFNet<double>::make(cfg, 1);
  EXPECT_THROW(nmfnet_forward(g, in, partial, Mode::eval), MissingModalityError);
}

TEST(Ablation, ParameterAudit) {
  auto cfg = ModelConfig{};
  cfg.modalities = Modalities::parse("rgb");
  auto rgb_only = NMFNet<float>::make(cfg, 1);
  const std::size_t rgb = 309984;
  EXPECT_EQ(rgb_only.parameter_count(), rgb + 128 + 1);
  EXPECT_TRUE(rgb_only.fusion.empty());

  cfg.modalities = Modalities::parse("laser");
  const std::size_t laser = rgb - 5 * 5 * 2 * 32;  // one input channel instead of three
  EXPECT_EQ(NMFNet<float>::make(cfg, 1).parameter_count(), laser + 129);

  // the full model adds the cloud branch, two fusion convs and a 384-input head
  auto full = NMFNet<float>::make(ModelConfig{}, 1);
  cfg.modalities = Modalities::parse("cloud");
  const std::size_t cloud = NMFNet<float>::make(cfg, 1).parameter_count() - (1024 + 1);
  const std::size_t fusion = (1152 * 512 + 512) + (512 * 256 + 256);
  EXPECT_EQ(full.parameter_count(), rgb + laser + cloud + fusion + 384 + 1);

  // cloud branch by hand: T-nets (k), lift, global; each DenseBnRelu is in*out + 2*out
  const auto dbr = [](std::size_t i, std::size_t o) { return i * o + 2 * o; };
  const auto tnet = [&](std::size_t k) {
    return dbr(k, 64) + dbr(64, 128) + dbr(128, 1024) + dbr(1024, 512) + dbr(512, 256) +
           (256 * k * k + k * k);
  };
  EXPECT_EQ(cloud, tnet(3) + dbr(3, 64) + dbr(64, 64) + tnet(64) + dbr(64, 128) + dbr(128, 1024));
}

TEST(Ablation, FullSetMatchesNmfnetForward) {
  std::mt19937_64 rng(12);
  auto m = NMFNet<double>::make(ModelConfig::tiny(), 12);
  auto in = random_inputs<double>(2, 8, 8, 8, rng);
  Graph<double> g(false);
  auto a = nmfnet_forward(g, in, m, Mode::eval);
  auto b = ablated_forward(g, in, m, Modalities::all(), Mode::eval);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_THROW(ablated_forward(g, in, m, Modalities{false, false, false}, Mode::eval), ConfigError);
  EXPECT_THROW(ablated_forward(g, in, m, Modalities::parse("rgb"), Mode::eval), ConfigError);
  EXPECT_THROW(Modalities::parse(""), ConfigError);
  EXPECT_THROW(Modalities::parse("rgb,sonar"), ConfigError);
}

TEST(Ablation, EverySubsetRuns) {
  std::mt19937_64 rng(13);
  for (const char* s : {"rgb", "laser", "cloud", "rgb,cloud", "rgb,laser", "laser,cloud"}) {
    auto cfg = ModelConfig::tiny();
    cfg.modalities = Modalities::parse(s);
    auto m = NMFNet<double>::make(cfg, 13);
    auto in = random_inputs<double>(2, 8, 8, 8, rng);
    Graph<double> g;
    auto out = ablated_forward(g, in, m, cfg.modalities, Mode::train);
    EXPECT_EQ(out.shape(), (Shape{2, 1})) << s;
    EXPECT_EQ(cfg.modalities.str(), s);
  }
}

TEST(NMFNet, EvalDeterministicAndPermutationInvariant) {
  std::mt19937_64 rng(14);
  auto m = NMFNet<double>::make(ModelConfig::tiny(), 14);
  perturb_buffers(m, rng);
  auto in = random_inputs<double>(2, 8, 8, 16, rng);
  Graph<double> g(false);
  auto a = nmfnet_forward(g, in, m, Mode::eval);
  auto b = nmfnet_forward(g, in, m, Mode::eval);
  EXPECT_EQ(a.values(), b.values());

  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> v(in.cloud.numel());
  for (std::size_t bb = 0; bb < 2; ++bb)
    for (std::size_t n = 0; n < 16; ++n)
      for (std::size_t k = 0; k < 3; ++k) v[(bb * 16 + n) * 3 + k] = in.cloud[(bb * 16 + perm[n]) * 3 + k];
  auto shuffled = in;
  shuffled.cloud = Tensor<double>(in.cloud.shape(), v);
  auto c = nmfnet_forward(g, shuffled, m, Mode::eval);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], c[i], 1e-6);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  std::mt19937_64 rng(15);
  auto m = NMFNet<float>::make(ModelConfig::tiny(), 15);
  perturb_buffers(m, rng);
  auto dir = nmfnet::testing::scratch_dir("ckpt");
  save_checkpoint(dir / "m.ckpt", m);
  auto back = load_checkpoint<float>(dir / "m.ckpt");
  EXPECT_EQ(back.config.modalities, m.config.modalities);
  auto a = m.tensors(), b = back.tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].tensor.values(), b[i].tensor.values());
  }
  auto in = random_inputs<float>(4, 8, 8, 8, rng);
  Graph<float> g(false);
  EXPECT_EQ(nmfnet_forward(g, in, m, Mode::eval).values(),
            nmfnet_forward(g, in, back, Mode::eval).values());
  EXPECT_EQ(encode_checkpoint(m), encode_checkpoint(back));
}

TEST(Checkpoint, HeaderFormatAndErrors) {
  auto cfg = ModelConfig::tiny();
  cfg.modalities = Modalities::parse("rgb,laser");
  auto m = NMFNet<float>::make(cfg, 16);
  const auto bytes = encode_checkpoint(m);
  EXPECT_EQ(bytes.substr(0, 8), "NMFNET1\n");
  EXPECT_NE(bytes.find("\nrgb.stem.k 4x3x3x3 f32\n"), std::string::npos);
  EXPECT_NE(bytes.find("\nrgb.block0.bn1.running_mean 4 f32\n"), std::string::npos);
  auto back = decode_checkpoint<float>(bytes);
  EXPECT_EQ(back.config.modalities.str(), "rgb,laser");
  EXPECT_FALSE(back.cloud_branch.has_value());

  EXPECT_THROW(decode_checkpoint<float>("NOTACKPT" + bytes.substr(8)), IoError);
  EXPECT_THROW(decode_checkpoint<float>(bytes.substr(0, bytes.size() - 4)), IoError);
  auto renamed = bytes;
  renamed.replace(renamed.find("head.w"), 6, "head.v");
  EXPECT_THROW(decode_checkpoint<float>(renamed), IoError);
  EXPECT_THROW(load_checkpoint<float>("/nonexistent/m.ckpt"), IoError);
}
