#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <random>

#include "egformer/checkpoint.hpp"
#include "egformer/model.hpp"
#include "egformer/oracle.hpp"

using namespace egf;

namespace {

ModelConfig small_config(const std::string& arch, std::size_t h, std::size_t w, std::size_t c0,
                         std::size_t heads) {
  ModelConfig cfg;
  cfg.height = h;
  cfg.width = w;
  cfg.base_channels = c0;
  cfg.heads = {heads};
  cfg.arch = parse_arch(arch);
  return cfg;
}

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(h * w * 3);
  for (double& x : v) x = u(rng);
  return Tensor::from({h, w, 3}, std::move(v));
}

std::size_t block_sub_params(std::size_t c) {
  const std::size_t ln = 2 * c;
  const std::size_t projections = 4 * (c * c + c);
  const std::size_t mlp = (c * 4 * c + 4 * c) + (4 * c * c + c);
  return 2 * ln + projections + mlp;
}

std::size_t block_params(BlockKind kind, std::size_t c) {
  return (kind == BlockKind::kE ? 2 : 1) * block_sub_params(c);
}

std::size_t analytic_parameter_count(const ModelConfig& cfg) {
  const std::size_t k = cfg.patch_kernel;
  const std::size_t c0 = cfg.base_channels;
  std::size_t n = k * k * 3 * c0 + c0;
  for (std::size_t i = 0; i < cfg.arch.encoder.size(); ++i) {
    const std::size_t c = c0 << i;
    n += block_params(cfg.arch.encoder[i], c);
    n += 4 * c * 2 * c + 2 * c;
  }
  const std::size_t cb = c0 << cfg.arch.encoder.size();
  for (BlockKind kind : cfg.arch.bottleneck) n += block_params(kind, cb);
  for (std::size_t j = 0; j < cfg.arch.decoder.size(); ++j) {
    const std::size_t c = c0 << (cfg.arch.decoder.size() - 1 - j);
    n += 3 * c * c + c;
    n += block_params(cfg.arch.decoder[j], c);
  }
  return n + c0 + 1;
}

}  // namespace

TEST(ParseArch, Examples) {
  const ArchSpec a = parse_arch("EE-E-EE");
  EXPECT_EQ(a.encoder.size(), 2u);
  EXPECT_EQ(a.bottleneck.size(), 1u);
  EXPECT_EQ(a.decoder.size(), 2u);
  EXPECT_EQ(a.str(), "EE-E-EE");

  const ArchSpec b = parse_arch("HV-EE-VH");
  EXPECT_EQ(b.encoder[0], BlockKind::kH);
  EXPECT_EQ(b.encoder[1], BlockKind::kV);
  EXPECT_EQ(b.bottleneck.size(), 2u);
  EXPECT_EQ(b.decoder[0], BlockKind::kV);
  EXPECT_EQ(parse_arch("EEEE-E-EEEE").str(), "EEEE-E-EEEE");
}

TEST(ParseArch, ErrorsCarryPosition) {
  auto position_of = [](const std::string& s) -> std::size_t {
    try {
      parse_arch(s);
    } catch (const ArchParseError& e) {
      return e.position();
    }
    ADD_FAILURE() << s << " accepted";
    return 0;
  };
  EXPECT_EQ(position_of("EX-E-EE"), 1u);
  EXPECT_EQ(position_of("E--E"), 2u);
  EXPECT_EQ(position_of("E-E-E-E"), 5u);
  EXPECT_THROW(parse_arch("EE-E"), ArchParseError);
  EXPECT_THROW(parse_arch("EE-E-E"), ArchParseError);
  EXPECT_THROW(parse_arch(""), ArchParseError);
}

TEST(ParseArch, PanoformerLettersRejectedAsOutOfScope) {
  for (const char* s : {"EM-E-EE", "EE-P-EE"}) {
    try {
      parse_arch(s);
      FAIL() << s;
    } catch (const ArchParseError& e) {
      const std::string msg = e.what();
      EXPECT_NE(msg.find("out of scope"), std::string::npos) << msg;
      EXPECT_NE(msg.find("Panoformer"), std::string::npos) << msg;
    }
  }
}

TEST(ModelConfig, Validation) {
  EXPECT_NO_THROW(ModelConfig{}.validate());
  ModelConfig even_kernel;
  even_kernel.patch_kernel = 4;
  EXPECT_THROW(even_kernel.validate(), ConfigError);
  ModelConfig odd_size;
  odd_size.height = 30;
  EXPECT_THROW(odd_size.validate(), ConfigError);
  ModelConfig bad_heads;
  bad_heads.heads = {3};
  EXPECT_THROW(bad_heads.validate(), ConfigError);
  ModelConfig per_level;
  per_level.heads = {1, 2, 4};
  EXPECT_NO_THROW(per_level.validate());
  EXPECT_EQ(per_level.attention_at(2).head_dim, 16u);
}

TEST(PatchEmbed, UnitKernelIsPerPixelLinear) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  const Tensor img = random_image(3, 5, 2);
  std::vector<double> w(3 * 4), b(4);
  for (double& x : w) x = n(rng);
  for (double& x : b) x = n(rng);
  const Tensor out = patch_embed(img, Tensor::from({3, 4}, w), Tensor::from({4}, b), 1);
  ASSERT_EQ(out.shape(), (Shape{3, 5, 4}));
  const auto expected = oracle::naive_linear(img.data(), w, b, 3, 4);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(out.data()[i], expected[i], 1e-14);
}

TEST(PatchEmbed, ConstantImageGivesConstantFeatures) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> w(27 * 2);
  for (double& x : w) x = n(rng);
  const Tensor out = patch_embed(Tensor::full({4, 6, 3}, 0.4), Tensor::from({27, 2}, w),
                                 Tensor::zeros({2}), 3);
  for (std::size_t i = 2; i < out.numel(); ++i) {
    EXPECT_NEAR(out.data()[i], out.data()[i % 2], 1e-14);
  }
}

TEST(PatchEmbed, ColumnsWrapRowsClamp) {
  // Single channel; the weight column picks one tap of the 3x3 neighborhood.
  std::vector<double> pixels(4 * 5 * 3);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<double>(i);
  const Tensor img = Tensor::from({4, 5, 3}, pixels);
  auto tap = [&](std::size_t dy, std::size_t dx) {
    std::vector<double> w(27, 0.0);
    w[(dy * 3 + dx) * 3] = 1.0;
    return patch_embed(img, Tensor::from({27, 1}, w), Tensor::zeros({1}), 3);
  };
  auto pixel = [&](std::size_t v, std::size_t u) { return pixels[(v * 5 + u) * 3]; };
  const Tensor left = tap(1, 0);
  const Tensor right = tap(1, 2);
  const Tensor up = tap(0, 1);
  const Tensor down = tap(2, 1);
  for (std::size_t v = 0; v < 4; ++v) {
    EXPECT_EQ(left.at({v, 0, 0}), pixel(v, 4));
    EXPECT_EQ(right.at({v, 4, 0}), pixel(v, 0));
    EXPECT_EQ(left.at({v, 2, 0}), pixel(v, 1));
  }
  for (std::size_t u = 0; u < 5; ++u) {
    EXPECT_EQ(up.at({0, u, 0}), pixel(0, u));
    EXPECT_EQ(down.at({3, u, 0}), pixel(3, u));
    EXPECT_EQ(up.at({2, u, 0}), pixel(1, u));
  }
}

TEST(Downsample, SpaceToDepthOrder) {
  std::vector<double> x(4 * 4);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
  // column 0: sum of the 2x2 block, column 1: its top-left entry.
  const Tensor w = Tensor::from({4, 2}, {1, 1, 1, 0, 1, 0, 1, 0});
  const Tensor out = downsample(Tensor::from({4, 4, 1}, x), w, Tensor::zeros({2}));
  ASSERT_EQ(out.shape(), (Shape{2, 2, 2}));
  EXPECT_EQ(out.at({0, 0, 0}), 0 + 1 + 4 + 5);
  EXPECT_EQ(out.at({0, 0, 1}), 0);
  EXPECT_EQ(out.at({1, 1, 0}), 10 + 11 + 14 + 15);
  EXPECT_EQ(out.at({1, 1, 1}), 10);
  EXPECT_THROW(downsample(Tensor::zeros({3, 4, 1}), w, Tensor::zeros({2})), ConfigError);
}

TEST(UpsampleFuse, NearestNeighborAndSkip) {
  const Tensor x = Tensor::from({1, 2, 2}, {1, 10, 2, 20});
  const Tensor skip = Tensor::full({2, 4, 1}, 100.0);
  // out = up[0] + up[1] + skip
  const Tensor w = Tensor::from({3, 1}, {1, 1, 1});
  const Tensor out = upsample_fuse(x, skip, w, Tensor::zeros({1}));
  ASSERT_EQ(out.shape(), (Shape{2, 4, 1}));
  for (std::size_t v = 0; v < 2; ++v) {
    EXPECT_EQ(out.at({v, 0, 0}), 111);
    EXPECT_EQ(out.at({v, 1, 0}), 111);
    EXPECT_EQ(out.at({v, 2, 0}), 122);
    EXPECT_EQ(out.at({v, 3, 0}), 122);
  }
  EXPECT_THROW(upsample_fuse(x, Tensor::zeros({3, 4, 1}), w, Tensor::zeros({1})), ConfigError);
}

TEST(DepthModel, ForwardShapeAndPositivity) {
  const DepthModel model(small_config("EE-E-EE", 16, 32, 4, 2));
  const Tensor depth = model.forward(random_image(16, 32, 4));
  ASSERT_EQ(depth.shape(), (Shape{16, 32, 1}));
  for (double d : depth.data()) EXPECT_GT(d, 0.0);
  EXPECT_THROW(model.forward(random_image(8, 32, 4)), ConfigError);
}

TEST(DepthModel, ForwardIsDeterministic) {
  const ModelConfig cfg = small_config("E-E-E", 8, 16, 4, 2);
  const Tensor img = random_image(8, 16, 5);
  const Tensor a = DepthModel(cfg).forward(img);
  const Tensor b = DepthModel(cfg).forward(img);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a.data()[i]), std::bit_cast<std::uint64_t>(b.data()[i]));
  }
}

TEST(DepthModel, ParameterCountMatchesClosedForm) {
  const ModelConfig toy;
  EXPECT_EQ(DepthModel(toy).parameter_count(), analytic_parameter_count(toy));
  EXPECT_EQ(DepthModel(toy).parameter_count(), 178593u);

  ModelConfig deep;
  deep.height = 64;
  deep.width = 128;
  deep.arch = parse_arch("EEEE-E-EEEE");
  EXPECT_EQ(DepthModel(deep).parameter_count(), analytic_parameter_count(deep));

  const ModelConfig mixed = small_config("HV-E-VH", 8, 16, 4, 2);
  EXPECT_EQ(DepthModel(mixed).parameter_count(), analytic_parameter_count(mixed));
}

TEST(DepthModel, AttentionMacsMatchFormula) {
  const ModelConfig cfg;
  ForwardStats stats;
  DepthModel(cfg).forward(random_image(cfg.height, cfg.width, 6), &stats);

  std::uint64_t expected = 0;
  auto add_block = [&](std::uint64_t h, std::uint64_t w, std::uint64_t c) {
    expected += 4 * h * w * c * c + 2 * h * w * h * c;  // vertical pass
    expected += 4 * h * w * c * c + 2 * h * w * w * c;  // horizontal pass
  };
  for (std::uint64_t level = 0; level < 2; ++level) {
    add_block(cfg.height >> level, cfg.width >> level, cfg.base_channels << level);
    add_block(cfg.height >> level, cfg.width >> level, cfg.base_channels << level);
  }
  add_block(cfg.height >> 2, cfg.width >> 2, cfg.base_channels << 2);

  EXPECT_EQ(stats.attention_macs, expected);
  EXPECT_EQ(stats.formula_macs, expected);
  EXPECT_EQ(expected, 37093376u);
  EXPECT_GT(stats.total_macs, stats.attention_macs);
}

TEST(DepthModel, EndToEndGradientMatchesFiniteDifferences) {
  const DepthModel model(small_config("E-E-E", 8, 16, 4, 2));
  const Tensor img = random_image(8, 16, 7);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> weights(8 * 16);
  for (double& x : weights) x = n(rng);
  const Tensor pixel_weights = Tensor::from({8, 16, 1}, weights);
  const auto audits = oracle::audit_gradients(
      [&] { return sum_all(mul(model.forward(img), pixel_weights)); }, model.named_parameters());
  ASSERT_FALSE(audits.empty());
  for (const auto& a : audits) {
    EXPECT_TRUE(a.passed(1e-3)) << a.name << " rel " << a.max_rel_error << " abs "
                                << a.max_abs_error;
  }
}

TEST(DepthL1Loss, MasksInvalidGroundTruth) {
  const Tensor pred = Tensor::from({1, 4, 1}, {1.0, 2.0, 3.0, 4.0});
  Raster gt(1, 4, 1);
  gt.data = {2.0, 0.0, 3.5, 150.0};
  EXPECT_DOUBLE_EQ(depth_l1_loss(pred, gt).item(), (1.0 + 0.5) / 2.0);
}

TEST(TrainStep, ZeroLearningRateKeepsParameters) {
  DepthModel model(small_config("E-E-E", 8, 16, 4, 2));
  const Sample s = make_sample("x", 3, "train", 8, 16);
  std::vector<std::vector<double>> before;
  for (const Tensor& p : model.parameters()) before.emplace_back(p.data().begin(), p.data().end());
  const Sample* batch[] = {&s};
  const StepResult r = train_step(model, batch, 0.0);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_GT(r.grad_norm, 0.0);
  const auto after = model.parameters();
  for (std::size_t i = 0; i < after.size(); ++i) {
    for (std::size_t k = 0; k < before[i].size(); ++k) {
      ASSERT_EQ(std::bit_cast<std::uint64_t>(after[i].data()[k]),
                std::bit_cast<std::uint64_t>(before[i][k]));
    }
  }
}

TEST(TrainStep, ConstantDepthSceneIsLearned) {
  SceneSpec scene;
  scene.room = SphereRoom{2.0, {0.6, 0.6, 0.6}};
  const Render r = render(scene, 16, 32);
  Sample s;
  s.id = "const";
  s.image = r.image;
  s.depth = r.depth;
  DepthModel model(small_config("E-E-E", 16, 32, 8, 2));
  const Sample* batch[] = {&s};
  const double initial = depth_l1_loss(model.forward(image_tensor(s.image)), s.depth).item();
  for (int i = 0; i < 200; ++i) train_step(model, batch, 1e-2);
  const double final_loss = depth_l1_loss(model.forward(image_tensor(s.image)), s.depth).item();
  EXPECT_LT(final_loss, 0.1 * initial) << initial << " -> " << final_loss;
}

TEST(DepthModel, CheckpointRoundTrip) {
  ModelConfig cfg = small_config("E-E-E", 8, 16, 4, 2);
  const DepthModel a(cfg);
  cfg.seed = 99;
  DepthModel b(cfg);
  const Tensor img = random_image(8, 16, 9);
  const auto path = std::filesystem::temp_directory_path() / "egf_model_test.egtn";
  save_checkpoint(path, a.named_parameters());
  b.load(load_checkpoint(path));
  std::filesystem::remove(path);
  const Tensor da = a.forward(img), db = b.forward(img);
  for (std::size_t i = 0; i < da.numel(); ++i) EXPECT_EQ(da.data()[i], db.data()[i]);

  auto partial = a.named_parameters();
  partial.pop_back();
  EXPECT_THROW(b.load(partial), ConfigError);
  auto renamed = a.named_parameters();
  renamed[0].name = "nope";
  EXPECT_THROW(b.load(renamed), ConfigError);
}
