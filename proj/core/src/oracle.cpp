#include "egformer/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace egf::oracle {

namespace {

using Matrix = std::vector<std::vector<double>>;

// Window b of z as an N x C matrix.
Matrix window_of(const Tensor& z, Axis axis, std::size_t b) {
  const std::size_t h = z.dim(0), w = z.dim(1), c = z.dim(2);
  const std::size_t n = axis == Axis::kHorizontal ? w : h;
  Matrix x(n, std::vector<double>(c));
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t v = axis == Axis::kHorizontal ? b : p;
    const std::size_t u = axis == Axis::kHorizontal ? p : b;
    for (std::size_t ch = 0; ch < c; ++ch) x[p][ch] = z.at({v, u, ch});
  }
  return x;
}

void store_window(std::vector<double>& out, const Matrix& x, Axis axis, std::size_t b,
                  std::size_t w) {
  const std::size_t c = x.empty() ? 0 : x[0].size();
  for (std::size_t p = 0; p < x.size(); ++p) {
    const std::size_t v = axis == Axis::kHorizontal ? b : p;
    const std::size_t u = axis == Axis::kHorizontal ? p : b;
    for (std::size_t ch = 0; ch < c; ++ch) out[(v * w + u) * c + ch] = x[p][ch];
  }
}

Matrix layer_norm_rows(const Matrix& x, const Tensor& gamma, const Tensor& beta) {
  Matrix y = x;
  for (auto& row : y) {
    const double n = static_cast<double>(row.size());
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= n;
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t c = 0; c < row.size(); ++c) {
      row[c] = (row[c] - mu) * inv * gamma.data()[c] + beta.data()[c];
    }
  }
  return y;
}

Matrix affine_rows(const Matrix& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t d_in = weight.dim(0), d_out = weight.dim(1);
  Matrix y(x.size(), std::vector<double>(d_out));
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (std::size_t o = 0; o < d_out; ++o) {
      double acc = bias.data()[o];
      for (std::size_t i = 0; i < d_in; ++i) acc += x[r][i] * weight.data()[i * d_out + o];
      y[r][o] = acc;
    }
  }
  return y;
}

double signum(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Signed chord distance between window elements m and n of window b.
double erpe_entry(const AngularGrid& grid, Axis axis, std::size_t b, std::size_t m,
                  std::size_t n, double rho) {
  if (axis == Axis::kHorizontal) {
    const SphericalPoint pm{1.0, grid.theta(m), kPi / 2.0};
    const SphericalPoint pn{1.0, grid.theta(n), kPi / 2.0};
    return signum(grid.theta(m) - grid.theta(n)) * rho * chord_distance(pm, pn) *
           std::sin(grid.phi(b));
  }
  const SphericalPoint pm{1.0, 0.0, grid.phi(m)};
  const SphericalPoint pn{1.0, 0.0, grid.phi(n)};
  return signum(grid.phi(m) - grid.phi(n)) * rho * chord_distance(pm, pn);
}

std::size_t window_count(const Tensor& z, Axis axis) {
  return axis == Axis::kHorizontal ? z.dim(0) : z.dim(1);
}

void check_input(const Tensor& z, std::size_t heads) {
  if (z.rank() != 3) throw ConfigError("oracle: expected input [H, W, C], got " + shape_str(z.shape()));
  if (heads == 0 || z.dim(2) % heads != 0) {
    throw ConfigError("oracle: " + std::to_string(z.dim(2)) + " channels do not split into " +
                      std::to_string(heads) + " heads");
  }
}

}  // namespace

Tensor naive_eg_msa(const Tensor& z, Axis axis, const AngularGrid& grid, const BlockParams& p,
                    const AttentionConfig& cfg) {
  if (cfg.score_transform) throw std::invalid_argument("naive_eg_msa: score_transform not supported");
  check_input(z, cfg.heads);
  cfg.validate(z.dim(2));
  if (z.dim(0) != grid.height() || z.dim(1) != grid.width()) {
    throw ConfigError("naive_eg_msa: input does not match the grid");
  }
  const std::size_t c = z.dim(2), heads = cfg.heads, d = cfg.head_dim;
  const std::size_t windows = window_count(z, axis);
  const double das_factor =
      2.0 * cfg.rho_b * cfg.rho_b *
      (axis == Axis::kHorizontal ? std::sin(cfg.phi_b) * std::sin(cfg.phi_b) : 1.0);

  std::vector<Matrix> inputs, attended;
  std::vector<double> mean_abs(windows, 0.0);
  for (std::size_t b = 0; b < windows; ++b) {
    const Matrix x = window_of(z, axis, b);
    const std::size_t n = x.size();
    const Matrix y = layer_norm_rows(x, p.ln1_gamma, p.ln1_beta);
    const Matrix q = affine_rows(y, p.wq, p.bq);
    const Matrix k = affine_rows(y, p.wk, p.bk);
    const Matrix v = affine_rows(y, p.wv, p.bv);

    Matrix concat(n, std::vector<double>(c, 0.0));
    double abs_total = 0.0;
    for (std::size_t j = 0; j < heads; ++j) {
      for (std::size_t m = 0; m < n; ++m) {
        std::vector<double> row(n);
        double l1 = 0.0;
        for (std::size_t nn = 0; nn < n; ++nn) {
          double s = 0.0;
          for (std::size_t t = 0; t < d; ++t) s += q[m][j * d + t] * k[nn][j * d + t];
          if (cfg.use_erpe) s += erpe_entry(grid, axis, b, m, nn, cfg.rho);
          row[nn] = s;
          l1 += std::abs(s);
          abs_total += std::abs(s);
        }
        for (std::size_t nn = 0; nn < n; ++nn) {
          const double normalized = row[nn] / (l1 + cfg.eps_norm);
          const double weight = das_factor * (1.0 - std::cos(normalized * kPi / 2.0));
          for (std::size_t t = 0; t < d; ++t) concat[m][j * d + t] += weight * v[nn][j * d + t];
        }
      }
    }
    mean_abs[b] = abs_total / static_cast<double>(heads * n * n);
    inputs.push_back(x);
    attended.push_back(affine_rows(concat, p.wo, p.bo));
  }

  const double largest = *std::max_element(mean_abs.begin(), mean_abs.end());
  std::vector<double> out(z.numel());
  for (std::size_t b = 0; b < windows; ++b) {
    Matrix l = attended[b];
    if (cfg.use_eaar) {
      const double m = largest == 0.0 ? 1.0 : std::max(mean_abs[b] / largest, cfg.clamp_min);
      for (std::size_t r = 0; r < l.size(); ++r) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          l[r][ch] = m * attended[b][r][ch] + (1.0 - m) * inputs[b][r][ch];
        }
      }
    }
    store_window(out, l, axis, b, z.dim(1));
  }
  return Tensor::from(z.shape(), std::move(out));
}

std::vector<double> naive_matmul(std::span<const double> a, std::span<const double> b,
                                 std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
      out[i * n + j] = acc;
    }
  }
  return out;
}

std::vector<double> naive_linear(std::span<const double> x, std::span<const double> weight,
                                 std::span<const double> bias, std::size_t d_in,
                                 std::size_t d_out) {
  const std::size_t rows = x.size() / d_in;
  std::vector<double> out = naive_matmul(x, weight, rows, d_in, d_out);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < d_out; ++o) out[r * d_out + o] += bias[o];
  }
  return out;
}

std::vector<double> naive_layer_norm(std::span<const double> x, std::span<const double> gamma,
                                     std::span<const double> beta, std::size_t width, double eps) {
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < x.size() / width; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < width; ++c) mu += x[r * width + c];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t c = 0; c < width; ++c) var += (x[r * width + c] - mu) * (x[r * width + c] - mu);
    var /= static_cast<double>(width);
    for (std::size_t c = 0; c < width; ++c) {
      out[r * width + c] = (x[r * width + c] - mu) / std::sqrt(var + eps) * gamma[c] + beta[c];
    }
  }
  return out;
}

std::vector<double> fd_gradient(const ScalarFn& f, std::vector<double> x, double h) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::runtime_error("fd_gradient: non-finite function value probing coordinate " +
                               std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

std::vector<GradAudit> audit_gradients(const std::function<Tensor()>& loss,
                                       std::span<const NamedTensor> leaves, double h,
                                       double abs_floor) {
  std::vector<Tensor> handles;
  for (const NamedTensor& nt : leaves) handles.push_back(nt.tensor);
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor l = loss();
    tape.backward(l, handles);
  }

  std::vector<GradAudit> out;
  for (const NamedTensor& nt : leaves) {
    Tensor t = nt.tensor;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::span<double> values = t.mutable_data();
    GradAudit audit{nt.name, values.size(), 0.0, 0.0};
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw std::runtime_error("audit_gradients: non-finite loss probing " + nt.name + "[" +
                                 std::to_string(i) + "]");
      }
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric);
      if (std::abs(analytic[i]) < abs_floor) {
        audit.max_abs_error = std::max(audit.max_abs_error, err);
      } else {
        audit.max_rel_error =
            std::max(audit.max_rel_error, err / std::max(std::abs(analytic[i]), std::abs(numeric)));
      }
    }
    out.push_back(audit);
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t last = x.rank() - 1;
  const Tensor e = exp(sub(x, max(x, {last}, true)));
  return div(e, sum(e, {last}, true));
}

ScoreTransform softmax_transform() {
  return [](const Tensor& scores, std::size_t head_dim) {
    return softmax_rows(mul_scalar(scores, 1.0 / std::sqrt(static_cast<double>(head_dim))));
  };
}

Tensor softmax_baseline_msa(const Tensor& z, Axis axis, const BlockParams& p, std::size_t heads) {
  check_input(z, heads);
  const std::size_t c = z.dim(2), d = c / heads;
  const Tensor x = axis == Axis::kHorizontal ? z : permute(z, {1, 0, 2});
  const std::size_t b = x.dim(0), n = x.dim(1);
  auto heads_first = [&](const Tensor& t) {
    return permute(reshape(t, {b, n, heads, d}), {0, 2, 1, 3});
  };
  const Tensor y = layer_norm(x, p.ln1_gamma, p.ln1_beta);
  const Tensor q = heads_first(linear(y, p.wq, p.bq));
  const Tensor k = heads_first(linear(y, p.wk, p.bk));
  const Tensor v = heads_first(linear(y, p.wv, p.bv));
  const Tensor weights = softmax_transform()(matmul_nt(q, k), d);
  const Tensor merged = reshape(permute(matmul(weights, v), {0, 2, 1, 3}), {b, n, c});
  const Tensor out = linear(merged, p.wo, p.bo);
  return axis == Axis::kHorizontal ? out : permute(out, {1, 0, 2});
}

Tensor naive_softmax_msa(const Tensor& z, Axis axis, const BlockParams& p, std::size_t heads) {
  check_input(z, heads);
  const std::size_t c = z.dim(2), d = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> out(z.numel());
  for (std::size_t b = 0; b < window_count(z, axis); ++b) {
    const Matrix x = window_of(z, axis, b);
    const std::size_t n = x.size();
    const Matrix y = layer_norm_rows(x, p.ln1_gamma, p.ln1_beta);
    const Matrix q = affine_rows(y, p.wq, p.bq);
    const Matrix k = affine_rows(y, p.wk, p.bk);
    const Matrix v = affine_rows(y, p.wv, p.bv);
    Matrix concat(n, std::vector<double>(c, 0.0));
    for (std::size_t j = 0; j < heads; ++j) {
      for (std::size_t m = 0; m < n; ++m) {
        std::vector<double> row(n);
        for (std::size_t nn = 0; nn < n; ++nn) {
          double s = 0.0;
          for (std::size_t t = 0; t < d; ++t) s += q[m][j * d + t] * k[nn][j * d + t];
          row[nn] = s * scale;
        }
        const double top = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (double& s : row) total += (s = std::exp(s - top));
        for (std::size_t nn = 0; nn < n; ++nn) {
          for (std::size_t t = 0; t < d; ++t) {
            concat[m][j * d + t] += row[nn] / total * v[nn][j * d + t];
          }
        }
      }
    }
    store_window(out, affine_rows(concat, p.wo, p.bo), axis, b, z.dim(1));
  }
  return Tensor::from(z.shape(), std::move(out));
}

const char* to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoDas: return "no-das";
    case Variant::kNoEaar: return "no-eaar";
    case Variant::kNoErpe: return "no-erpe";
    case Variant::kSoftmax: return "softmax";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::kFull, Variant::kNoDas, Variant::kNoEaar, Variant::kNoErpe,
                    Variant::kSoftmax}) {
    if (name == to_string(v)) return v;
  }
  throw std::invalid_argument("unknown variant '" + name +
                              "' (expected full, no-das, no-eaar, no-erpe or softmax)");
}

AttentionConfig with_variant(AttentionConfig cfg, Variant v) {
  switch (v) {
    case Variant::kFull:
      break;
    case Variant::kNoDas:
      cfg.score_transform = softmax_transform();
      break;
    case Variant::kNoEaar:
      cfg.use_eaar = false;
      break;
    case Variant::kNoErpe:
      cfg.use_erpe = false;
      break;
    case Variant::kSoftmax:
      cfg.use_erpe = false;
      cfg.use_eaar = false;
      cfg.score_transform = softmax_transform();
      break;
  }
  return cfg;
}

}  // namespace egf::oracle
