#include "egformer/attention.hpp"

#include <atomic>
#include <cmath>
#include <optional>

namespace egf {

namespace {

std::atomic<bool> g_erpe_sign_fault{false};

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

Tensor init_weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  std::vector<double> w(fan_in * fan_out);
  for (double& v : w) v = normal(rng);
  return Tensor::parameter({fan_in, fan_out}, std::move(w));
}

Tensor param_full(std::size_t n, double value) {
  return Tensor::parameter({n}, std::vector<double>(n, value));
}

// [B, N, C] -> [B, J, N, d]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), n = x.dim(1), c = x.dim(2);
  return permute(reshape(x, {b, n, heads, c / heads}), {0, 2, 1, 3});
}

// [B, J, N, d] -> [B, N, C]
Tensor merge_heads(const Tensor& x) {
  const std::size_t b = x.dim(0), j = x.dim(1), n = x.dim(2), d = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, n, j * d});
}

}  // namespace

const char* to_string(Axis axis) {
  return axis == Axis::kHorizontal ? "horizontal" : "vertical";
}

char to_letter(BlockKind kind) {
  switch (kind) {
    case BlockKind::kH: return 'H';
    case BlockKind::kV: return 'V';
    case BlockKind::kE: return 'E';
  }
  return '?';
}

void AttentionConfig::validate(std::size_t channel_extent) const {
  if (!(rho > 0.0)) throw ConfigError("attention: rho must be > 0");
  if (!(rho_b > 0.0)) throw ConfigError("attention: rho_b must be > 0");
  if (!(phi_b > 0.0 && phi_b < kPi)) throw ConfigError("attention: phi_b must lie in (0, pi)");
  if (!(clamp_min >= 0.0 && clamp_min <= 1.0)) {
    throw ConfigError("attention: clamp_min must lie in [0, 1]");
  }
  if (!(eps_norm >= 0.0)) throw ConfigError("attention: eps_norm must be >= 0");
  if (heads == 0 || head_dim == 0) throw ConfigError("attention: heads and head_dim must be positive");
  if (channels() != channel_extent) {
    throw ConfigError("attention: heads (" + std::to_string(heads) + ") x head_dim (" +
                      std::to_string(head_dim) + ") != channel extent " +
                      std::to_string(channel_extent));
  }
}

ErpeBias build_erpe(const AngularGrid& grid, Axis axis, const AttentionConfig& cfg) {
  const bool fault = g_erpe_sign_fault.load();
  ErpeBias bias;
  bias.axis = axis;
  if (axis == Axis::kHorizontal) {
    const std::size_t h = grid.height(), w = grid.width();
    std::vector<double> values(h * w * w);
    for (std::size_t i = 0; i < h; ++i) {
      const double s = std::sin(grid.phi(i));
      for (std::size_t m = 0; m < w; ++m) {
        for (std::size_t n = 0; n < w; ++n) {
          const double d = grid.theta(m) - grid.theta(n);
          double e = sign_of(d) * cfg.rho * std::sqrt(2.0 * (1.0 - std::cos(d))) * s;
          if (fault && m > n) e = -e;
          values[(i * w + m) * w + n] = e;
        }
      }
    }
    bias.matrices = Tensor::from({h, w, w}, std::move(values));
  } else {
    const std::size_t h = grid.height();
    std::vector<double> values(h * h);
    for (std::size_t m = 0; m < h; ++m) {
      for (std::size_t n = 0; n < h; ++n) {
        const double d = grid.phi(m) - grid.phi(n);
        double e = sign_of(d) * cfg.rho * std::sqrt(2.0 * (1.0 - std::cos(d)));
        if (fault && m > n) e = -e;
        values[m * h + n] = e;
      }
    }
    bias.matrices = Tensor::from({1, h, h}, std::move(values));
  }
  return bias;
}

BlockParams BlockParams::init(std::size_t c, std::mt19937_64& rng) {
  BlockParams p;
  p.ln1_gamma = param_full(c, 1.0);
  p.ln1_beta = param_full(c, 0.0);
  p.wq = init_weight(c, c, rng);
  p.bq = param_full(c, 0.0);
  p.wk = init_weight(c, c, rng);
  p.bk = param_full(c, 0.0);
  p.wv = init_weight(c, c, rng);
  p.bv = param_full(c, 0.0);
  p.wo = init_weight(c, c, rng);
  p.bo = param_full(c, 0.0);
  p.ln2_gamma = param_full(c, 1.0);
  p.ln2_beta = param_full(c, 0.0);
  p.w1 = init_weight(c, 4 * c, rng);
  p.b1 = param_full(4 * c, 0.0);
  p.w2 = init_weight(4 * c, c, rng);
  p.b2 = param_full(c, 0.0);
  return p;
}

BlockParams BlockParams::zeros(std::size_t c) {
  BlockParams p;
  p.ln1_gamma = param_full(c, 0.0);
  p.ln1_beta = param_full(c, 0.0);
  p.wq = Tensor::parameter({c, c}, std::vector<double>(c * c, 0.0));
  p.wk = Tensor::parameter({c, c}, std::vector<double>(c * c, 0.0));
  p.wv = Tensor::parameter({c, c}, std::vector<double>(c * c, 0.0));
  p.wo = Tensor::parameter({c, c}, std::vector<double>(c * c, 0.0));
  p.bq = param_full(c, 0.0);
  p.bk = param_full(c, 0.0);
  p.bv = param_full(c, 0.0);
  p.bo = param_full(c, 0.0);
  p.ln2_gamma = param_full(c, 0.0);
  p.ln2_beta = param_full(c, 0.0);
  p.w1 = Tensor::parameter({c, 4 * c}, std::vector<double>(4 * c * c, 0.0));
  p.b1 = param_full(4 * c, 0.0);
  p.w2 = Tensor::parameter({4 * c, c}, std::vector<double>(4 * c * c, 0.0));
  p.b2 = param_full(c, 0.0);
  return p;
}

std::vector<NamedTensor> BlockParams::named(const std::string& prefix) const {
  return {
      {prefix + "ln1.gamma", ln1_gamma}, {prefix + "ln1.beta", ln1_beta},
      {prefix + "q.weight", wq},         {prefix + "q.bias", bq},
      {prefix + "k.weight", wk},         {prefix + "k.bias", bk},
      {prefix + "v.weight", wv},         {prefix + "v.bias", bv},
      {prefix + "out.weight", wo},       {prefix + "out.bias", bo},
      {prefix + "ln2.gamma", ln2_gamma}, {prefix + "ln2.beta", ln2_beta},
      {prefix + "mlp1.weight", w1},      {prefix + "mlp1.bias", b1},
      {prefix + "mlp2.weight", w2},      {prefix + "mlp2.bias", b2},
  };
}

std::vector<Tensor*> BlockParams::tensors() {
  return {&ln1_gamma, &ln1_beta, &wq, &bq, &wk, &bk, &wv, &bv,
          &wo, &bo, &ln2_gamma, &ln2_beta, &w1, &b1, &w2, &b2};
}

TransformerBlock TransformerBlock::init(BlockKind kind, std::size_t channels,
                                        std::mt19937_64& rng) {
  TransformerBlock block;
  block.kind = kind;
  const std::size_t n = kind == BlockKind::kE ? 2 : 1;
  for (std::size_t i = 0; i < n; ++i) block.subs.push_back(BlockParams::init(channels, rng));
  return block;
}

std::vector<NamedTensor> TransformerBlock::named(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < subs.size(); ++i) {
    const char tag = kind == BlockKind::kE ? (i == 0 ? 'V' : 'H') : to_letter(kind);
    auto part = subs[i].named(prefix + tag + ".");
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<Tensor*> TransformerBlock::tensors() {
  std::vector<Tensor*> out;
  for (auto& s : subs) {
    auto part = s.tensors();
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<Tensor> partition_windows(const Tensor& z, Axis axis) {
  if (z.rank() != 3) throw std::invalid_argument("partition_windows: expected [H, W, C]");
  const std::size_t h = z.dim(0), w = z.dim(1), c = z.dim(2);
  std::vector<Tensor> out;
  if (axis == Axis::kHorizontal) {
    for (std::size_t i = 0; i < h; ++i) {
      std::vector<std::size_t> idx(w * c);
      for (std::size_t k = 0; k < w * c; ++k) idx[k] = i * w * c + k;
      out.push_back(gather(z, std::move(idx), {1, w, c}));
    }
  } else {
    for (std::size_t u = 0; u < w; ++u) {
      std::vector<std::size_t> idx(h * c);
      for (std::size_t v = 0; v < h; ++v) {
        for (std::size_t k = 0; k < c; ++k) idx[v * c + k] = (v * w + u) * c + k;
      }
      out.push_back(gather(z, std::move(idx), {1, h, c}));
    }
  }
  return out;
}

Tensor merge_windows(std::span<const Tensor> windows, Axis axis) {
  if (windows.empty()) throw std::invalid_argument("merge_windows: no windows");
  const std::size_t n = windows[0].dim(1), c = windows[0].dim(2);
  std::vector<Tensor> flat;
  flat.reserve(windows.size());
  for (const Tensor& w : windows) flat.push_back(reshape(w, {1, n * c}));
  const Tensor batch = reshape(concat_last(flat), {windows.size(), n, c});
  return from_window_batch(batch, axis);
}

Tensor to_window_batch(const Tensor& z, Axis axis) {
  return axis == Axis::kHorizontal ? z : permute(z, {1, 0, 2});
}

Tensor from_window_batch(const Tensor& windows, Axis axis) {
  return axis == Axis::kHorizontal ? windows : permute(windows, {1, 0, 2});
}

Tensor biased_score(const Tensor& q, const Tensor& k, const Tensor& bias) {
  if (q.shape() != k.shape()) {
    throw std::invalid_argument("biased_score: Q " + shape_str(q.shape()) + " and K " +
                                shape_str(k.shape()) + " differ");
  }
  const std::size_t n = q.dim(q.rank() - 2);
  if (bias.rank() < 2 || bias.dim(bias.rank() - 1) != n || bias.dim(bias.rank() - 2) != n) {
    throw std::invalid_argument("biased_score: bias " + shape_str(bias.shape()) +
                                " is not N x N for N = " + std::to_string(n));
  }
  return add(matmul_nt(q, k), bias);
}

Tensor das(const Tensor& score, Axis axis, const AttentionConfig& cfg) {
  const Tensor normalized = l1_normalize_rows(score, cfg.eps_norm);
  const Tensor one_minus_cos = add_scalar(neg(cos(mul_scalar(normalized, kPi / 2.0))), 1.0);
  double factor = 2.0 * cfg.rho_b * cfg.rho_b;
  if (axis == Axis::kHorizontal) {
    const double s = std::sin(cfg.phi_b);
    factor *= s * s;
  }
  return mul_scalar(one_minus_cos, factor);
}

Tensor window_importance(const Tensor& scores, const AttentionConfig& cfg) {
  std::vector<std::size_t> axes;
  for (std::size_t d = 1; d < scores.rank(); ++d) axes.push_back(d);
  const std::size_t windows = scores.dim(0);
  const Tensor means = axes.empty() ? abs(scores) : mean(abs(scores), axes);
  const Tensor largest = max(means, {0});
  if (largest.item() == 0.0) return Tensor::ones({windows});
  return clamp_min(div(means, largest), cfg.clamp_min);
}

Tensor eaar_blend(const Tensor& attention, const Tensor& z, const Tensor& importance) {
  if (attention.shape() != z.shape()) {
    throw std::invalid_argument("eaar_blend: attention " + shape_str(attention.shape()) +
                                " and input " + shape_str(z.shape()) + " differ");
  }
  Shape m_shape(attention.rank(), 1);
  if (importance.numel() != 1) {
    if (importance.numel() != attention.dim(0)) {
      throw std::invalid_argument("eaar_blend: one importance value per window required");
    }
    m_shape[0] = importance.numel();
  }
  const Tensor m = reshape(importance, m_shape);
  const Tensor keep = add_scalar(neg(m), 1.0);
  return add(mul(m, attention), mul(keep, z));
}

Tensor eg_msa(const Tensor& z, Axis axis, const ErpeBias& erpe, const BlockParams& p,
              const AttentionConfig& cfg) {
  if (z.rank() != 3) throw ConfigError("eg_msa: expected input [H, W, C], got " + shape_str(z.shape()));
  cfg.validate(z.dim(2));
  const std::size_t h = z.dim(0), w = z.dim(1);
  const std::size_t n = axis == Axis::kHorizontal ? w : h;
  const std::size_t expected_count = axis == Axis::kHorizontal ? h : 1;
  if (erpe.axis != axis || erpe.size() != n || erpe.count() != expected_count) {
    throw ConfigError("eg_msa: ERPE bias " + shape_str(erpe.matrices.shape()) +
                      " does not fit a " + to_string(axis) + " pass over " + shape_str(z.shape()));
  }

  const Tensor x = to_window_batch(z, axis);  // [B, N, C]
  const std::size_t b = x.dim(0);
  const Tensor y = layer_norm(x, p.ln1_gamma, p.ln1_beta);
  const Tensor q = split_heads(linear(y, p.wq, p.bq), cfg.heads);
  const Tensor k = split_heads(linear(y, p.wk, p.bk), cfg.heads);
  const Tensor v = split_heads(linear(y, p.wv, p.bv), cfg.heads);

  Tensor score;
  if (cfg.use_erpe) {
    const Tensor bias = reshape(erpe.matrices, {expected_count == 1 ? 1 : b, 1, n, n});
    score = biased_score(q, k, bias);
  } else {
    score = matmul_nt(q, k);
  }
  const Tensor weights = cfg.score_transform ? cfg.score_transform(score, cfg.head_dim)
                                             : das(score, axis, cfg);
  const Tensor attention = linear(merge_heads(matmul(weights, v)), p.wo, p.bo);

  Tensor out = attention;
  if (cfg.use_eaar) out = eaar_blend(attention, x, window_importance(score, cfg));
  return from_window_batch(out, axis);
}

Tensor eg_msa(const Tensor& z, Axis axis, const AngularGrid& grid, const BlockParams& params,
              const AttentionConfig& cfg) {
  return eg_msa(z, axis, build_erpe(grid, axis, cfg), params, cfg);
}

Tensor block_forward_axis(const Tensor& z, Axis axis, const ErpeBias& erpe, const BlockParams& p,
                          const AttentionConfig& cfg, MacCounter* attention_macs) {
  Tensor l;
  if (attention_macs) {
    MacCounter::Scope scope(*attention_macs);
    l = eg_msa(z, axis, erpe, p, cfg);
  } else {
    l = eg_msa(z, axis, erpe, p, cfg);
  }
  const Tensor z_hat = add(l, z);
  const Tensor hidden = gelu(linear(layer_norm(z_hat, p.ln2_gamma, p.ln2_beta), p.w1, p.b1));
  return add(linear(hidden, p.w2, p.b2), z_hat);
}

Tensor block_forward(const Tensor& z, const TransformerBlock& block, const AngularGrid& grid,
                     const AttentionConfig& cfg, MacCounter* attention_macs) {
  if (z.rank() != 3 || z.dim(0) != grid.height() || z.dim(1) != grid.width()) {
    throw ConfigError("block_forward: input " + shape_str(z.shape()) + " does not match the " +
                      std::to_string(grid.height()) + "x" + std::to_string(grid.width()) + " grid");
  }
  const std::size_t expected = block.kind == BlockKind::kE ? 2 : 1;
  if (block.subs.size() != expected) {
    throw ConfigError(std::string("block_forward: block ") + to_letter(block.kind) + " needs " +
                      std::to_string(expected) + " parameter sets");
  }
  switch (block.kind) {
    case BlockKind::kH:
      return block_forward_axis(z, Axis::kHorizontal, build_erpe(grid, Axis::kHorizontal, cfg),
                                block.subs[0], cfg, attention_macs);
    case BlockKind::kV:
      return block_forward_axis(z, Axis::kVertical, build_erpe(grid, Axis::kVertical, cfg),
                                block.subs[0], cfg, attention_macs);
    case BlockKind::kE: {
      const Tensor mid =
          block_forward_axis(z, Axis::kVertical, build_erpe(grid, Axis::kVertical, cfg),
                             block.subs[0], cfg, attention_macs);
      return block_forward_axis(mid, Axis::kHorizontal, build_erpe(grid, Axis::kHorizontal, cfg),
                                block.subs[1], cfg, attention_macs);
    }
  }
  throw ConfigError("block_forward: unknown block kind");
}

std::uint64_t flop_formula(std::uint64_t height, std::uint64_t width, std::uint64_t channels,
                           Axis axis) {
  const std::uint64_t projections = 4 * height * width * channels * channels;
  const std::uint64_t window = axis == Axis::kHorizontal ? 2 * height * width * width * channels
                                                         : 2 * height * height * width * channels;
  return projections + window;
}

namespace testing {
void set_erpe_sign_fault(bool enabled) { g_erpe_sign_fault.store(enabled); }
bool erpe_sign_fault() { return g_erpe_sign_fault.load(); }
}  // namespace testing

}  // namespace egf
