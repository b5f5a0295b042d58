#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "egformer/geometry.hpp"
#include "egformer/tensor.hpp"

namespace egf {

/// Horizontal windows are image rows (1 x W), vertical windows are columns (1 x H).
enum class Axis { kHorizontal, kVertical };

enum class BlockKind { kH, kV, kE };

const char* to_string(Axis axis);
char to_letter(BlockKind kind);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Replaces the distance-based score map. Receives the biased scores
/// [B, J, N, N] and the head dimension; must return attention weights of the
/// same shape.
using ScoreTransform = std::function<Tensor(const Tensor& scores, std::size_t head_dim)>;

struct AttentionConfig {
  double rho = 0.1;                          // ERPE bias level
  double rho_b = 1.0 / std::numbers::sqrt2;  // DAS baseline point
  double theta_b = 0.0;
  double phi_b = kPi / 2.0;
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  double clamp_min = 0.5;  // importance floor
  double eps_norm = 1e-8;  // L1 normalization guard

  // Ablation switches. A set score_transform replaces DAS.
  bool use_erpe = true;
  bool use_eaar = true;
  ScoreTransform score_transform;

  std::size_t channels() const { return heads * head_dim; }
  /// Throws ConfigError on invalid hyperparameters or a channel mismatch.
  void validate(std::size_t channels) const;
};

/// Non-learned relative position bias. Horizontal: one W x W matrix per image
/// row, stored as [H, W, W]. Vertical: one H x H matrix shared by all columns,
/// stored as [1, H, H].
struct ErpeBias {
  Axis axis = Axis::kHorizontal;
  Tensor matrices;

  std::size_t count() const { return matrices.dim(0); }
  std::size_t size() const { return matrices.dim(1); }
  double at(std::size_t window, std::size_t m, std::size_t n) const {
    return matrices.at({window, m, n});
  }
};

ErpeBias build_erpe(const AngularGrid& grid, Axis axis, const AttentionConfig& cfg);

/// Parameters of one H or V transformer block: pre-attention layer norm,
/// Q/K/V and output projections (C -> C), pre-MLP layer norm, MLP C -> 4C -> C.
struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor w1, b1, w2, b2;

  static BlockParams init(std::size_t channels, std::mt19937_64& rng);
  static BlockParams zeros(std::size_t channels);
  std::size_t channels() const { return wq.dim(0); }
  /// Stable order, used for checkpoints and gradient audits.
  std::vector<NamedTensor> named(const std::string& prefix) const;
  std::vector<Tensor*> tensors();
};

/// kH and kV hold one BlockParams; kE holds two (vertical first, then horizontal).
struct TransformerBlock {
  BlockKind kind = BlockKind::kE;
  std::vector<BlockParams> subs;

  static TransformerBlock init(BlockKind kind, std::size_t channels, std::mt19937_64& rng);
  std::vector<NamedTensor> named(const std::string& prefix) const;
  std::vector<Tensor*> tensors();
};

/// z [H, W, C] -> H windows [1, W, C] (horizontal) or W windows [1, H, C] (vertical).
std::vector<Tensor> partition_windows(const Tensor& z, Axis axis);
Tensor merge_windows(std::span<const Tensor> windows, Axis axis);

/// Batched window layout used by the attention pipeline: [H, W, C] <-> [B, N, C].
Tensor to_window_batch(const Tensor& z, Axis axis);
Tensor from_window_batch(const Tensor& windows, Axis axis);

/// QK^T + E. q, k: [.., N, d]; bias: [N, N] or anything broadcastable to the
/// score shape.
Tensor biased_score(const Tensor& q, const Tensor& k, const Tensor& bias);

/// Distance-based attention score: row-wise L1 normalization, then
/// 2 rho_b^2 (1 - cos(pi/2 * normalized)), times sin^2(phi_b) for horizontal windows.
Tensor das(const Tensor& score, Axis axis, const AttentionConfig& cfg);

/// Per-window importance from scores [B, ...]: mean |score| per window divided by
/// the largest window mean, floored at clamp_min. Returns [B].
Tensor window_importance(const Tensor& scores, const AttentionConfig& cfg);

/// M * attention + (1 - M) * z, with M a scalar tensor or [B] for a window batch.
Tensor eaar_blend(const Tensor& attention, const Tensor& z, const Tensor& importance);

/// Equirectangular-aware multi-head self attention over all windows of one axis.
/// Returns L [H, W, C].
Tensor eg_msa(const Tensor& z, Axis axis, const ErpeBias& erpe, const BlockParams& params,
              const AttentionConfig& cfg);
Tensor eg_msa(const Tensor& z, Axis axis, const AngularGrid& grid, const BlockParams& params,
              const AttentionConfig& cfg);

/// z + L followed by the residual MLP. `attention_macs`, when given, receives
/// the MACs of the attention path only.
Tensor block_forward_axis(const Tensor& z, Axis axis, const ErpeBias& erpe,
                          const BlockParams& params, const AttentionConfig& cfg,
                          MacCounter* attention_macs = nullptr);

Tensor block_forward(const Tensor& z, const TransformerBlock& block, const AngularGrid& grid,
                     const AttentionConfig& cfg, MacCounter* attention_macs = nullptr);

/// Attention-path MAC count: 4HWC^2 + 2HW^2C (horizontal), 4HWC^2 + 2H^2WC (vertical).
std::uint64_t flop_formula(std::uint64_t height, std::uint64_t width, std::uint64_t channels,
                           Axis axis);

namespace testing {
/// Mutation hook for self-checks: flips the sign of the lower triangle of
/// every ERPE matrix, breaking antisymmetry.
void set_erpe_sign_fault(bool enabled);
bool erpe_sign_fault();
}  // namespace testing

}  // namespace egf
