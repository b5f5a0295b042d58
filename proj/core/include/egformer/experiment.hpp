#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "egformer/data.hpp"
#include "egformer/metrics.hpp"
#include "egformer/model.hpp"
#include "egformer/oracle.hpp"

namespace egf {

/// Everything needed to rebuild a model before loading its checkpoint.
struct RunConfig {
  ModelConfig model;
  oracle::Variant variant = oracle::Variant::kFull;
};

/// Plain-text key=value lines; '#' starts a comment.
std::string encode_run_config(const RunConfig& cfg);
/// Throws ConfigError naming the offending line.
RunConfig decode_run_config(const std::string& text);

DepthModel make_model(const RunConfig& cfg);

struct TrainOptions {
  std::size_t steps = 1000;
  double lr = 1e-2;
  double clip_norm = 1.0;
  std::size_t batch = 1;
};

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

/// SGD over `train` in seeded shuffled epochs; the order depends only on `seed`.
std::vector<TrainLogRow> train(DepthModel& model, std::span<const Sample* const> train,
                               const TrainOptions& opts, std::uint64_t seed,
                               const std::function<void(const TrainLogRow&)>& on_step = {});

std::string train_log_csv(std::span<const TrainLogRow> log);

/// Masked L1 over the whole set (total absolute error / total valid pixels).
double dataset_loss(const DepthModel& model, std::span<const Sample* const> samples);

/// Per-image alignment and metrics in sample order.
std::vector<ImageReport> evaluate(const DepthModel& model, std::span<const Sample* const> samples);

struct ToyRun {
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  DepthMetrics untrained;
  DepthMetrics trained;
  std::vector<TrainLogRow> log;
};

/// Fresh model from `cfg`, scored before and after training on the train split
/// and evaluated on the test split.
ToyRun run_toy(const RunConfig& cfg, const std::vector<Sample>& data, const TrainOptions& opts);

}  // namespace egf
