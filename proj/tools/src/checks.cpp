#include "egf_tools/checks.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "egformer/attention.hpp"
#include "egformer/data.hpp"
#include "egformer/geometry.hpp"
#include "egformer/metrics.hpp"
#include "egformer/model.hpp"

namespace egf::tools {

namespace {

template <typename... Args>
std::string str(const Args&... args) {
  std::ostringstream os;
  os.precision(17);
  (os << ... << args);
  return os.str();
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Default init plus non-trivial layer-norm affines and biases.
BlockParams random_params(std::size_t c, std::mt19937_64& rng) {
  BlockParams p = BlockParams::init(c, rng);
  auto perturbed = [&](const Tensor& base, double scale) {
    std::normal_distribution<double> n(0.0, scale);
    std::vector<double> v(base.data().begin(), base.data().end());
    for (double& x : v) x += n(rng);
    return Tensor::parameter(base.shape(), std::move(v));
  };
  p.ln1_gamma = perturbed(p.ln1_gamma, 0.3);
  p.ln1_beta = perturbed(p.ln1_beta, 0.3);
  p.ln2_gamma = perturbed(p.ln2_gamma, 0.3);
  p.ln2_beta = perturbed(p.ln2_beta, 0.3);
  for (Tensor* b : {&p.bq, &p.bk, &p.bv, &p.bo, &p.b1, &p.b2}) *b = perturbed(*b, 0.2);
  return p;
}

AttentionConfig heads_config(std::size_t heads, std::size_t head_dim) {
  AttentionConfig cfg;
  cfg.heads = heads;
  cfg.head_dim = head_dim;
  return cfg;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

CheckResult Checker::result() const {
  CheckResult r{name_, failures_ == 0, ""};
  if (failures_ > 0) {
    r.detail = first_ + " (" + std::to_string(failures_) + " of " + std::to_string(checks_) +
               " checks failed)";
  } else {
    r.detail = summary_.empty() ? std::to_string(checks_) + " checks" : summary_;
  }
  return r;
}

CheckResult check_geometry() {
  Checker c("geometry");
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> rho(0.01, 10.0), theta(0.0, kTwoPi), phi(0.01, kPi - 0.01);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const SphericalPoint p{rho(rng), theta(rng), phi(rng)};
    const SphericalPoint q = cart_to_sph(sph_to_cart(p));
    const double err = std::max({std::fabs(q.rho - p.rho), std::fabs(q.theta - p.theta),
                                 std::fabs(q.phi - p.phi)});
    worst = std::max(worst, err);
    c.expect(err < 1e-10, [&] {
      return str("round trip of (", p.rho, ", ", p.theta, ", ", p.phi, ") off by ", err);
    });
    const SphericalPoint r{rho(rng), theta(rng), phi(rng)};
    const double chord = chord_distance(p, r);
    const double law = p.rho * p.rho + r.rho * r.rho -
                       2 * p.rho * r.rho *
                           (std::sin(p.phi) * std::sin(r.phi) * std::cos(p.theta - r.theta) +
                            std::cos(p.phi) * std::cos(r.phi));
    c.expect(std::fabs(chord * chord - law) < 1e-10,
             [&] { return str("chord^2 ", chord * chord, " vs law of cosines ", law); });
  }
  const AngularGrid g(6, 12);
  for (std::size_t u = 0; u < g.width(); ++u) {
    const double expected = (u + 0.5) * kTwoPi / 12.0;
    c.expect(std::fabs(g.theta(u) - expected) < 1e-15,
             [&] { return str("theta[", u, "] = ", g.theta(u), ", expected ", expected); });
  }
  c.note(str("2012 checks, worst round trip ", worst));
  return c.result();
}

CheckResult check_oracle_equivalence(std::size_t configs, std::uint64_t seed) {
  Checker c("oracle");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> extent(1, 8), dim(1, 3);
  const std::size_t head_choices[] = {1, 2, 4};
  double worst = 0.0;
  for (std::size_t trial = 0; trial < configs; ++trial) {
    const std::size_t h = extent(rng), w = extent(rng);
    const std::size_t heads = head_choices[trial % 3];
    const std::size_t head_dim = dim(rng);
    const std::size_t ch = heads * head_dim;
    AttentionConfig cfg = heads_config(heads, head_dim);
    cfg.rho = 0.05 + 0.3 * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const AngularGrid g(h, w);
    const Tensor z = random_tensor({h, w, ch}, rng);
    const BlockParams p = random_params(ch, rng);
    for (Axis axis : {Axis::kHorizontal, Axis::kVertical}) {
      const double d = max_abs_diff(eg_msa(z, axis, g, p, cfg), oracle::naive_eg_msa(z, axis, g, p, cfg));
      worst = std::max(worst, d);
      c.expect(d <= 1e-10, [&] {
        return str(to_string(axis), " H=", h, " W=", w, " J=", heads, ": max |diff| ", d);
      });
    }
  }
  c.note(str(configs, " configs x 2 axes, max |diff| ", worst));
  return c.result();
}

CheckResult check_softmax_baseline() {
  Checker c("softmax-baseline");
  std::mt19937_64 rng(31);
  for (Axis axis : {Axis::kHorizontal, Axis::kVertical}) {
    for (std::size_t heads : {1u, 2u, 4u}) {
      const Tensor z = random_tensor({3, 5, 8}, rng);
      const BlockParams p = random_params(8, rng);
      const double d = max_abs_diff(oracle::softmax_baseline_msa(z, axis, p, heads),
                                    oracle::naive_softmax_msa(z, axis, p, heads));
      c.expect(d <= 1e-10, [&] { return str(to_string(axis), " J=", heads, ": max |diff| ", d); });
    }
  }
  return c.result();
}

CheckResult check_erpe_antisymmetry() {
  Checker c("erpe-antisymmetry");
  const std::pair<std::size_t, std::size_t> grids[] = {{4, 8}, {7, 5}, {16, 32}, {1, 3}, {9, 1}};
  for (auto [h, w] : grids) {
    const AngularGrid g(h, w);
    for (Axis axis : {Axis::kHorizontal, Axis::kVertical}) {
      const ErpeBias e = build_erpe(g, axis, AttentionConfig{});
      for (std::size_t k = 0; k < e.count(); ++k) {
        for (std::size_t m = 0; m < e.size(); ++m) {
          c.expect(e.at(k, m, m) == 0.0,
                   [&] { return str(to_string(axis), " E[", k, "][", m, "][", m, "] = ", e.at(k, m, m)); });
          for (std::size_t n = m + 1; n < e.size(); ++n) {
            c.expect(e.at(k, m, n) == -e.at(k, n, m), [&] {
              return str(to_string(axis), " ", h, "x", w, " E[", k, "][", m, "][", n, "] = ",
                         e.at(k, m, n), " but E[", k, "][", n, "][", m, "] = ", e.at(k, n, m));
            });
          }
        }
      }
    }
  }
  return c.result();
}

CheckResult check_erpe_structure() {
  Checker c("erpe-structure");
  {
    const AngularGrid g(6, 10);
    const ErpeBias e = build_erpe(g, Axis::kHorizontal, AttentionConfig{});
    const double s0 = std::sin(g.phi(0));
    for (std::size_t i = 0; i < g.height(); ++i) {
      const double si = std::sin(g.phi(i));
      for (std::size_t m = 0; m < 10; ++m) {
        for (std::size_t n = 0; n < 10; ++n) {
          const double lhs = e.at(i, m, n) * s0, rhs = e.at(0, m, n) * si;
          c.expect(std::fabs(lhs - rhs) <= 1e-12, [&] {
            return str("separability row ", i, " (", m, ",", n, "): ", lhs, " vs ", rhs);
          });
          for (std::size_t k = 1; k < 10; ++k) {
            const double shifted = std::fabs(e.at(i, (m + k) % 10, (n + k) % 10));
            c.expect(std::fabs(std::fabs(e.at(i, m, n)) - shifted) <= 1e-12, [&] {
              return str("circulant |E| row ", i, " (", m, ",", n, ") shift ", k, ": ",
                         std::fabs(e.at(i, m, n)), " vs ", shifted);
            });
          }
        }
      }
    }
  }
  {
    const std::size_t w = 360;
    const AngularGrid g(4, w);
    const ErpeBias e = build_erpe(g, Axis::kHorizontal, AttentionConfig{});
    for (std::size_t i = 0; i < g.height(); ++i) {
      const double seam = std::fabs(e.at(i, 0, w - 1));
      for (std::size_t u = 0; u + 1 < w; ++u) {
        const double adjacent = std::fabs(e.at(i, u, u + 1));
        c.expect(std::fabs(seam - adjacent) <= 1e-12, [&] {
          return str("seam row ", i, ": |E[0][359]| = ", seam, " vs |E[", u, "][", u + 1,
                     "]| = ", adjacent);
        });
      }
    }
  }
  return c.result();
}

CheckResult check_das(std::size_t rows) {
  Checker c("das");
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> length(1, 16);
  std::uniform_real_distribution<double> unit(-1.0, 1.0), exponent(-8.0, 8.0);
  std::size_t done = 0;
  double lo = INFINITY, hi = -INFINITY, worst_sym = 0.0;
  while (done < rows) {
    const std::size_t n = length(rng);
    const std::size_t batch = std::min<std::size_t>(1000, rows - done);
    std::vector<double> s(batch * n);
    for (std::size_t r = 0; r < batch; ++r) {
      // each row gets its own magnitude, some rows include exact zeros
      const double scale = std::pow(10.0, exponent(rng));
      for (std::size_t i = 0; i < n; ++i) {
        s[r * n + i] = (r % 17 == 3 && i % 2 == 0) ? 0.0 : scale * unit(rng);
      }
    }
    std::vector<double> neg_s(s.size());
    std::transform(s.begin(), s.end(), neg_s.begin(), [](double v) { return -v; });
    const Tensor scores = Tensor::from({batch, n}, s);
    const Tensor negated = Tensor::from({batch, n}, neg_s);
    for (Axis axis : {Axis::kHorizontal, Axis::kVertical}) {
      const Tensor a = das(scores, axis, AttentionConfig{});
      const Tensor b = das(negated, axis, AttentionConfig{});
      for (std::size_t i = 0; i < a.numel(); ++i) {
        const double v = a.data()[i];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        c.expect(v >= 0.0 && v <= 1.0, [&] { return str("Das value ", v, " outside [0, 1]"); });
        const double d = std::fabs(v - b.data()[i]);
        worst_sym = std::max(worst_sym, d);
        c.expect(d <= 1e-12, [&] {
          return str("Das(s) = ", v, " but Das(-s) = ", b.data()[i], " for s = ", s[i]);
        });
      }
    }
    done += batch;
  }
  c.note(str(rows, " rows, range [", lo, ", ", hi, "], max |Das(s) - Das(-s)| ", worst_sym));
  return c.result();
}

CheckResult check_eaar() {
  Checker c("eaar");
  std::mt19937_64 rng(55);
  const AttentionConfig cfg;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 1 + trial % 9, j = 1 + trial % 3, n = 2 + trial % 5;
    const Tensor scores = random_tensor({b, j, n, n}, rng, 0.1 + trial);
    const Tensor m = window_importance(scores, cfg);
    double top = 0.0;
    for (double v : m.data()) {
      top = std::max(top, v);
      c.expect(v >= 0.5 && v <= 1.0, [&] { return str("M = ", v, " outside [0.5, 1]"); });
    }
    c.expect(top == 1.0, [&] { return str("max M = ", top); });
    if (b == 1) c.expect(m.data()[0] == 1.0, [&] { return str("single window M = ", m.data()[0]); });

    for (double scale : {1e-3, 3.7, 1e4}) {
      const Tensor scaled = window_importance(mul_scalar(scores, scale), cfg);
      for (std::size_t i = 0; i < b; ++i) {
        c.expect(std::fabs(scaled.data()[i] - m.data()[i]) <= 1e-12, [&] {
          return str("M changes under scale ", scale, ": ", m.data()[i], " -> ", scaled.data()[i]);
        });
      }
    }

    const Tensor attention = random_tensor({b, n, 4}, rng);
    const Tensor z = random_tensor({b, n, 4}, rng);
    const Tensor blended = eaar_blend(attention, z, m);
    for (std::size_t w = 0; w < b; ++w) {
      const double mw = m.data()[w];
      for (std::size_t i = 0; i < n * 4; ++i) {
        const std::size_t k = w * n * 4 + i;
        const double expected = mw * attention.data()[k] + (1.0 - mw) * z.data()[k];
        c.expect(std::fabs(blended.data()[k] - expected) <= 1e-15, [&] {
          return str("blend ", blended.data()[k], " vs ", expected);
        });
      }
    }
  }
  const Tensor zeros = window_importance(Tensor::zeros({3, 2, 2}), cfg);
  for (double v : zeros.data()) c.expect(v == 1.0, [&] { return str("all-zero scores give M = ", v); });
  return c.result();
}

CheckResult check_flop_audit() {
  Checker c("flops");
  struct Shape3 {
    std::uint64_t h, w, ch, heads;
  };
  const Shape3 shapes[] = {{8, 8, 16, 4}, {4, 12, 8, 2}, {6, 3, 4, 1}, {16, 32, 16, 4}, {5, 7, 12, 3}};
  std::mt19937_64 rng(9);
  for (const Shape3& s : shapes) {
    const AngularGrid g(s.h, s.w);
    const AttentionConfig cfg = heads_config(s.heads, s.ch / s.heads);
    const BlockParams p = BlockParams::init(s.ch, rng);
    const Tensor z = random_tensor({s.h, s.w, s.ch}, rng);
    for (Axis axis : {Axis::kHorizontal, Axis::kVertical}) {
      MacCounter counter;
      block_forward_axis(z, axis, build_erpe(g, axis, cfg), p, cfg, &counter);
      const std::uint64_t n = axis == Axis::kHorizontal ? s.w : s.h;
      const std::uint64_t expected = 4 * s.h * s.w * s.ch * s.ch + 2 * s.h * s.w * n * s.ch;
      c.expect(counter.macs() == expected && flop_formula(s.h, s.w, s.ch, axis) == expected, [&] {
        return str(to_string(axis), " ", s.h, "x", s.w, "x", s.ch, ": counted ", counter.macs(),
                   ", formula ", expected);
      });
    }
  }
  return c.result();
}

CheckResult check_block_gradients(double rel_tol) {
  Checker c("block-gradients");
  std::mt19937_64 rng(13);
  const AngularGrid g(3, 5);
  const AttentionConfig cfg = heads_config(2, 2);
  double worst = 0.0;
  for (BlockKind kind : {BlockKind::kH, BlockKind::kV, BlockKind::kE}) {
    TransformerBlock block = TransformerBlock::init(kind, 4, rng);
    for (auto& sub : block.subs) sub = random_params(4, rng);
    const Tensor z0 = random_tensor({3, 5, 4}, rng);
    const Tensor z = Tensor::parameter(z0.shape(), {z0.data().begin(), z0.data().end()});
    const Tensor weights = random_tensor({3, 5, 4}, rng);
    std::vector<NamedTensor> leaves = block.named(std::string(1, to_letter(kind)) + ".");
    leaves.push_back({"input", z});
    const auto audits = oracle::audit_gradients(
        [&] { return sum_all(mul(block_forward(z, block, g, cfg), weights)); }, leaves);
    for (const auto& a : audits) {
      worst = std::max(worst, a.max_rel_error);
      c.expect(a.passed(rel_tol), [&] {
        return str(a.name, ": max rel err ", a.max_rel_error, ", max abs err ", a.max_abs_error);
      });
    }
  }
  c.note(str("H, V, E blocks, max rel err ", worst));
  return c.result();
}

ModelGradcheck check_model_gradients(const std::string& arch, std::size_t height, std::size_t width,
                                     std::size_t base_channels, std::size_t heads, double rel_tol) {
  Checker c("model-gradients");
  ModelConfig cfg;
  cfg.height = height;
  cfg.width = width;
  cfg.base_channels = base_channels;
  cfg.heads = {heads};
  cfg.arch = parse_arch(arch);
  const DepthModel model(cfg);
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> img(height * width * 3);
  for (double& v : img) v = u(rng);
  const Tensor image = Tensor::from({height, width, 3}, img);
  const Tensor weights = random_tensor({height, width, 1}, rng);
  ModelGradcheck out;
  out.audits = oracle::audit_gradients(
      [&] { return sum_all(mul(model.forward(image), weights)); }, model.named_parameters());
  double worst = 0.0;
  for (const auto& a : out.audits) {
    worst = std::max(worst, a.max_rel_error);
    c.expect(a.passed(rel_tol), [&] {
      return str(a.name, ": max rel err ", a.max_rel_error, ", max abs err ", a.max_abs_error);
    });
  }
  c.note(str(arch, " ", height, "x", width, ", ", model.parameter_count(), " parameters, max rel err ",
             worst));
  out.result = c.result();
  return out;
}

CheckResult check_metrics() {
  Checker c("metrics");
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> g(0.5, 20.0);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> gt(400), pred(400);
    for (double& v : gt) v = g(rng);
    const double s = 0.1 + trial * 0.7, t = trial % 2 ? -3.0 : 2.5;
    for (std::size_t i = 0; i < gt.size(); ++i) pred[i] = s * gt[i] + t;
    const ImageReport r = evaluate_image("x", pred, gt);
    c.expect(r.metrics.abs_rel < 1e-9,
             [&] { return str("affine (", s, ", ", t, ") leaves abs_rel ", r.metrics.abs_rel); });
  }
  const std::vector<double> gt = {1.0, 2.0, 4.0, 8.0};
  std::vector<double> d(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) d[i] = 1.3 * gt[i];
  const DepthMetrics m = compute_metrics(d, gt, valid_mask(gt));
  c.expect(m.delta1 == 0.0, [&] { return str("d = 1.3g: delta1 = ", m.delta1); });
  c.expect(m.delta2 == 1.0, [&] { return str("d = 1.3g: delta2 = ", m.delta2); });
  return c.result();
}

CheckResult check_pfm_round_trip() {
  Checker c("pfm");
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> e(-3.0, 3.0);
  Raster map(13, 29, 1);
  for (double& v : map.data) v = std::pow(10.0, e(rng));
  const Raster back = decode_pfm(encode_pfm(map));
  double worst = 0.0;
  c.expect(back.height == map.height && back.width == map.width,
           [&] { return str("decoded ", back.height, "x", back.width); });
  for (std::size_t i = 0; i < map.data.size() && i < back.data.size(); ++i) {
    const double rel = std::fabs(back.data[i] - map.data[i]) / std::fabs(map.data[i]);
    worst = std::max(worst, rel);
    c.expect(rel <= 1e-6, [&] { return str(map.data[i], " came back as ", back.data[i]); });
  }
  c.note(str("max rel err ", worst));
  return c.result();
}

const std::vector<Suite>& suites() {
  static const std::vector<Suite> all = {
      {"geometry", [] { return std::vector{check_geometry()}; }},
      {"erpe", [] { return std::vector{check_erpe_antisymmetry(), check_erpe_structure()}; }},
      {"das", [] { return std::vector{check_das()}; }},
      {"eaar", [] { return std::vector{check_eaar()}; }},
      {"oracle", [] { return std::vector{check_oracle_equivalence(), check_softmax_baseline()}; }},
      {"flops", [] { return std::vector{check_flop_audit()}; }},
      {"grad", [] { return std::vector{check_block_gradients()}; }},
      {"metrics", [] { return std::vector{check_metrics()}; }},
      {"io", [] { return std::vector{check_pfm_round_trip()}; }},
  };
  return all;
}

}  // namespace egf::tools
