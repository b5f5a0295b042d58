#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "egformer/attention.hpp"
#include "egformer/geometry.hpp"
#include "egformer/tensor.hpp"

namespace egf::oracle {

/// Scalar-loop re-implementation of eg_msa. Builds its own ERPE from chord
/// distances and shares no attention code with the production path.
/// Honors use_erpe and use_eaar; a set score_transform is rejected.
Tensor naive_eg_msa(const Tensor& z, Axis axis, const AngularGrid& grid, const BlockParams& params,
                    const AttentionConfig& cfg);

/// Row-major [m, k] x [k, n] by triple loop.
std::vector<double> naive_matmul(std::span<const double> a, std::span<const double> b,
                                 std::size_t m, std::size_t k, std::size_t n);
/// rows x [d_in] -> rows x [d_out].
std::vector<double> naive_linear(std::span<const double> x, std::span<const double> weight,
                                 std::span<const double> bias, std::size_t d_in, std::size_t d_out);
std::vector<double> naive_layer_norm(std::span<const double> x, std::span<const double> gamma,
                                     std::span<const double> beta, std::size_t width, double eps);

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h. Throws
/// std::runtime_error when f is not finite at a probe point.
std::vector<double> fd_gradient(const ScalarFn& f, std::vector<double> x, double h);

struct GradAudit {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;    // over entries with |analytic| >= abs_floor
  double max_abs_error = 0.0;    // over entries below abs_floor
  bool passed(double rel_tol, double abs_tol = 1e-7) const {
    return max_rel_error < rel_tol && max_abs_error <= abs_tol;
  }
};

/// Compares tape gradients of `loss()` against central differences for every
/// entry of every listed tensor. The leaves are perturbed in place and restored.
std::vector<GradAudit> audit_gradients(const std::function<Tensor()>& loss,
                                       std::span<const NamedTensor> leaves, double h = 1e-5,
                                       double abs_floor = 1e-8);

/// exp(x - rowmax) / rowsum over the last axis, built from tensor ops.
Tensor softmax_rows(const Tensor& x);

/// softmax(scores / sqrt(head_dim)) as a drop-in for the distance score map.
ScoreTransform softmax_transform();

/// Plain softmax window attention: LN, Q/K/V, QK^T/sqrt(d), softmax, x V,
/// output projection. No position bias and no rearrangement.
Tensor softmax_baseline_msa(const Tensor& z, Axis axis, const BlockParams& params,
                            std::size_t heads);

/// Loop version of softmax_baseline_msa.
Tensor naive_softmax_msa(const Tensor& z, Axis axis, const BlockParams& params, std::size_t heads);

/// Mechanism variants for the ablation harness.
enum class Variant { kFull, kNoDas, kNoEaar, kNoErpe, kSoftmax };

const char* to_string(Variant v);
/// Throws std::invalid_argument for an unknown name.
Variant parse_variant(const std::string& name);
AttentionConfig with_variant(AttentionConfig cfg, Variant v);

}  // namespace egf::oracle
