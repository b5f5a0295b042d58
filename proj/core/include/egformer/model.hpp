#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "egformer/attention.hpp"
#include "egformer/data.hpp"
#include "egformer/geometry.hpp"
#include "egformer/tensor.hpp"

namespace egf {

class ArchParseError : public std::invalid_argument {
 public:
  ArchParseError(const std::string& message, std::size_t position)
      : std::invalid_argument(message), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

/// Encoder / bottleneck / decoder block letters, e.g. "EEEE-E-EEEE".
struct ArchSpec {
  std::vector<BlockKind> encoder;
  std::vector<BlockKind> bottleneck;
  std::vector<BlockKind> decoder;

  std::string str() const;
  bool operator==(const ArchSpec&) const = default;
};

ArchSpec parse_arch(std::string_view s);

struct ModelConfig {
  std::size_t height = 32;
  std::size_t width = 64;
  std::size_t base_channels = 16;
  /// Heads per level (encoder levels, then bottleneck). A single entry applies to all.
  std::vector<std::size_t> heads = {4};
  std::size_t patch_kernel = 3;
  ArchSpec arch = parse_arch("EE-E-EE");
  std::uint64_t seed = 0;
  /// Shared hyperparameters; heads and head_dim are filled in per level.
  AttentionConfig attention;

  std::size_t levels() const { return arch.encoder.size(); }
  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
  std::size_t heads_at(std::size_t level) const;
  AttentionConfig attention_at(std::size_t level) const;
  /// Throws ConfigError.
  void validate() const;
};

/// k x k neighborhood lift to C0 channels with unit stride; columns wrap
/// around, rows clamp at the poles. image [H, W, 3] -> [H, W, C0].
Tensor patch_embed(const Tensor& image, const Tensor& weight, const Tensor& bias,
                   std::size_t kernel);
/// Space-to-depth 2x2 then linear 4C -> 2C. [H, W, C] -> [H/2, W/2, 2C].
Tensor downsample(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Nearest x2 upsample of x [h, w, C], concat with skip [2h, 2w, C/2], linear 3C/2 -> C/2.
Tensor upsample_fuse(const Tensor& x, const Tensor& skip, const Tensor& weight,
                     const Tensor& bias);

struct ForwardStats {
  std::uint64_t attention_macs = 0;  // projections + window products of every EH/EV-MSA
  std::uint64_t formula_macs = 0;    // the same quantity from flop_formula
  std::uint64_t total_macs = 0;
};

class DepthModel {
 public:
  explicit DepthModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  /// image [H, W, 3] -> strictly positive depth [H, W, 1].
  Tensor forward(const Tensor& image, ForwardStats* stats = nullptr) const;

  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  /// Copies values by name; every parameter must be present with a matching shape.
  void load(const std::vector<NamedTensor>& tensors);

 private:
  struct Level {
    AngularGrid grid;
    AttentionConfig attention;
    ErpeBias erpe_h;
    ErpeBias erpe_v;
  };

  Tensor run_block(const Tensor& x, const TransformerBlock& block, const Level& level,
                   MacCounter* attention_macs, std::uint64_t* formula_macs) const;

  ModelConfig config_;
  std::vector<Level> levels_;  // encoder levels then bottleneck
  Tensor embed_w_, embed_b_;
  std::vector<TransformerBlock> encoder_;
  std::vector<Tensor> down_w_, down_b_;
  std::vector<TransformerBlock> bottleneck_;
  std::vector<Tensor> up_w_, up_b_;
  std::vector<TransformerBlock> decoder_;
  Tensor head_w_, head_b_;
};

/// Mean absolute depth error over pixels with ground truth in (0, 100).
Tensor depth_l1_loss(const Tensor& predicted, const Raster& ground_truth);

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
};

/// One plain gradient-descent step over the batch. Gradients are clipped to
/// global norm `clip_norm` when it is positive. Throws std::runtime_error on a
/// non-finite loss, naming the offending op.
StepResult train_step(DepthModel& model, std::span<const Sample* const> batch, double lr,
                      double clip_norm = 1.0);

Tensor image_tensor(const Raster& image);

}  // namespace egf
