#include <gtest/gtest.h>

#include "egformer/experiment.hpp"

using namespace egf;

namespace {

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.model.height = 8;
  cfg.model.width = 16;
  cfg.model.base_channels = 4;
  cfg.model.heads = {2};
  cfg.model.arch = parse_arch("E-E-E");
  return cfg;
}

std::vector<Sample> tiny_data() {
  DatasetSpec spec;
  spec.train = 4;
  spec.test = 2;
  spec.height = 8;
  spec.width = 16;
  return generate_dataset(spec);
}

}  // namespace

TEST(RunConfig, RoundTrip) {
  RunConfig cfg = tiny_config();
  cfg.model.heads = {1, 2};
  cfg.model.seed = 1234567890123ULL;
  cfg.model.attention.rho = 0.03;
  cfg.variant = oracle::Variant::kNoEaar;
  const RunConfig back = decode_run_config(encode_run_config(cfg));
  EXPECT_EQ(back.model.height, 8u);
  EXPECT_EQ(back.model.width, 16u);
  EXPECT_EQ(back.model.base_channels, 4u);
  EXPECT_EQ(back.model.heads, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(back.model.arch, cfg.model.arch);
  EXPECT_EQ(back.model.seed, cfg.model.seed);
  EXPECT_EQ(back.model.attention.rho, 0.03);
  EXPECT_EQ(back.variant, oracle::Variant::kNoEaar);
  EXPECT_EQ(encode_run_config(back), encode_run_config(cfg));
}

TEST(RunConfig, CommentsAndDefaults) {
  const RunConfig cfg = decode_run_config("# toy\n\nwidth = 64  # columns\narch=EE-E-EE\n");
  EXPECT_EQ(cfg.model.width, 64u);
  EXPECT_EQ(cfg.model.height, 32u);
}

TEST(RunConfig, ErrorsNameTheLine) {
  auto message = [](const std::string& text) -> std::string {
    try {
      decode_run_config(text);
    } catch (const ConfigError& e) {
      return e.what();
    }
    return "";
  };
  EXPECT_NE(message("height=32\nwidht=64\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("height=abc\n").find("line 1"), std::string::npos);
  EXPECT_NE(message("\nheight\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("variant=fast\n").find("line 1"), std::string::npos);
  EXPECT_THROW(decode_run_config("height=30\n"), ConfigError);
  EXPECT_THROW(decode_run_config("arch=EM-E-EE\n"), ArchParseError);
}

TEST(Train, DeterministicGivenSeed) {
  const auto data = tiny_data();
  const auto train_set = select_split(data, "train");
  TrainOptions opts;
  opts.steps = 6;
  DepthModel a = make_model(tiny_config());
  DepthModel b = make_model(tiny_config());
  const auto la = train(a, train_set, opts, 3);
  const auto lb = train(b, train_set, opts, 3);
  ASSERT_EQ(la.size(), 6u);
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i].step, i);
    EXPECT_EQ(la[i].loss, lb[i].loss);
  }
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t k = 0; k < pa[i].numel(); ++k) ASSERT_EQ(pa[i].data()[k], pb[i].data()[k]);
  }
  DepthModel c = make_model(tiny_config());
  const auto lc = train(c, train_set, opts, 4);
  bool differs = false;
  for (std::size_t i = 0; i < lc.size(); ++i) differs |= lc[i].loss != la[i].loss;
  EXPECT_TRUE(differs);
}

TEST(Train, RejectsEmptyInputs) {
  DepthModel m = make_model(tiny_config());
  TrainOptions opts;
  EXPECT_THROW(train(m, {}, opts, 0), std::invalid_argument);
  const auto data = tiny_data();
  opts.batch = 0;
  EXPECT_THROW(train(m, select_split(data, "train"), opts, 0), std::invalid_argument);
}

TEST(Train, LogCsv) {
  const TrainLogRow rows[] = {{0, 1.5, 2.0}, {1, 0.25, 4.5}};
  EXPECT_EQ(train_log_csv(rows), "step,loss,wall_ms\n0,1.5,2\n1,0.25,4.5\n");
}

TEST(Experiment, ShortToyRunReducesLoss) {
  const auto data = tiny_data();
  TrainOptions opts;
  opts.steps = 40;
  const ToyRun run = run_toy(tiny_config(), data, opts);
  EXPECT_EQ(run.log.size(), 40u);
  EXPECT_LT(run.final_train_loss, run.initial_train_loss);
  EXPECT_GT(run.trained.valid_pixels, 0u);
}

TEST(Experiment, VariantsBuildModels) {
  for (oracle::Variant v : {oracle::Variant::kFull, oracle::Variant::kNoDas,
                            oracle::Variant::kNoEaar, oracle::Variant::kNoErpe,
                            oracle::Variant::kSoftmax}) {
    RunConfig cfg = tiny_config();
    cfg.variant = v;
    const DepthModel m = make_model(cfg);
    const auto data = tiny_data();
    const Tensor d = m.forward(image_tensor(data[0].image));
    for (double x : d.data()) EXPECT_GT(x, 0.0);
  }
}
