#include "egformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <stdexcept>

namespace egf {

std::vector<bool> valid_mask(std::span<const double> ground_truth) {
  std::vector<bool> mask(ground_truth.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = ground_truth[i] > 0.0 && ground_truth[i] < 100.0;
  }
  return mask;
}

Alignment align(std::span<const double> depth, std::span<const double> gt,
                const std::vector<bool>& mask) {
  if (depth.size() != gt.size() || mask.size() != gt.size()) {
    throw std::invalid_argument("align: depth, ground truth and mask sizes differ");
  }
  std::size_t n = 0;
  double mean_d = 0.0, mean_g = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!mask[i]) continue;
    ++n;
    mean_d += depth[i];
    mean_g += gt[i];
  }
  if (n < 2) throw std::invalid_argument("align: need at least two valid pixels");
  mean_d /= static_cast<double>(n);
  mean_g /= static_cast<double>(n);
  double cov = 0.0, var = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!mask[i]) continue;
    const double dd = depth[i] - mean_d;
    cov += dd * (gt[i] - mean_g);
    var += dd * dd;
  }
  cov /= static_cast<double>(n);
  var /= static_cast<double>(n);

  Alignment a;
  if (var < 1e-12) {
    a.degenerate = true;
    a.scale = 1.0;
    a.shift = mean_g - mean_d;
  } else {
    a.scale = cov / var;
    a.shift = mean_g - a.scale * mean_d;
  }
  a.aligned.resize(depth.size());
  for (std::size_t i = 0; i < depth.size(); ++i) a.aligned[i] = a.scale * depth[i] + a.shift;
  return a;
}

DepthMetrics compute_metrics(std::span<const double> aligned, std::span<const double> gt,
                             const std::vector<bool>& mask) {
  if (aligned.size() != gt.size() || mask.size() != gt.size()) {
    throw std::invalid_argument("metrics: prediction, ground truth and mask sizes differ");
  }
  DepthMetrics m;
  double sq = 0.0, sq_log = 0.0;
  std::size_t d1 = 0, d2 = 0, d3 = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!mask[i]) continue;
    const double g = gt[i];
    const double d = std::max(aligned[i], 1e-6);
    const double diff = d - g;
    ++m.valid_pixels;
    m.abs_rel += std::abs(diff) / g;
    m.sq_rel += diff * diff / g;
    sq += diff * diff;
    const double l = std::log(d) - std::log(g);
    sq_log += l * l;
    const double ratio = std::max(d / g, g / d);
    d1 += ratio < 1.25;
    d2 += ratio < 1.25 * 1.25;
    d3 += ratio < 1.25 * 1.25 * 1.25;
  }
  if (m.valid_pixels == 0) throw std::invalid_argument("metrics: empty mask");
  const double n = static_cast<double>(m.valid_pixels);
  m.abs_rel /= n;
  m.sq_rel /= n;
  m.rms_lin = std::sqrt(sq / n);
  m.rms_log = std::sqrt(sq_log / n);
  m.delta1 = static_cast<double>(d1) / n;
  m.delta2 = static_cast<double>(d2) / n;
  m.delta3 = static_cast<double>(d3) / n;
  return m;
}

ImageReport evaluate_image(const std::string& id, std::span<const double> depth,
                           std::span<const double> gt) {
  const std::vector<bool> mask = valid_mask(gt);
  Alignment a = align(depth, gt, mask);
  return {id, a.scale, a.shift, compute_metrics(a.aligned, gt, mask)};
}

DepthMetrics average(std::span<const ImageReport> reports) {
  DepthMetrics avg;
  if (reports.empty()) return avg;
  for (const ImageReport& r : reports) {
    avg.abs_rel += r.metrics.abs_rel;
    avg.sq_rel += r.metrics.sq_rel;
    avg.rms_lin += r.metrics.rms_lin;
    avg.rms_log += r.metrics.rms_log;
    avg.delta1 += r.metrics.delta1;
    avg.delta2 += r.metrics.delta2;
    avg.delta3 += r.metrics.delta3;
    avg.valid_pixels += r.metrics.valid_pixels;
  }
  const double n = static_cast<double>(reports.size());
  avg.abs_rel /= n;
  avg.sq_rel /= n;
  avg.rms_lin /= n;
  avg.rms_log /= n;
  avg.delta1 /= n;
  avg.delta2 /= n;
  avg.delta3 /= n;
  return avg;
}

void write_report_csv(std::ostream& os, std::span<const ImageReport> reports) {
  const auto precision = os.precision();
  os << std::setprecision(10);
  auto metrics_row = [&os](const DepthMetrics& m) {
    os << ',' << m.abs_rel << ',' << m.sq_rel << ',' << m.rms_lin << ',' << m.rms_log << ','
       << m.delta1 << ',' << m.delta2 << ',' << m.delta3 << '\n';
  };
  os << "id,s,t,abs_rel,sq_rel,rms_lin,rms_log,delta1,delta2,delta3\n";
  for (const ImageReport& r : reports) {
    os << r.id << ',' << r.scale << ',' << r.shift;
    metrics_row(r.metrics);
  }
  os << "mean,,";
  metrics_row(average(reports));
  os.precision(precision);
}

}  // namespace egf
