#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace egf {

/// Ground truth counts as valid inside (0, 100) scene units.
std::vector<bool> valid_mask(std::span<const double> ground_truth);

struct Alignment {
  double scale = 1.0;
  double shift = 0.0;
  bool degenerate = false;  // prediction variance below 1e-12; scale fixed at 1
  std::vector<double> aligned;
};

/// Least-squares scale and shift of `depth` onto `gt` over the masked pixels.
/// Throws std::invalid_argument with fewer than two valid pixels.
Alignment align(std::span<const double> depth, std::span<const double> gt,
                const std::vector<bool>& mask);

struct DepthMetrics {
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double rms_lin = 0.0;
  double rms_log = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  std::size_t valid_pixels = 0;
};

/// Standard depth error/accuracy metrics over masked pixels. Predictions are
/// floored at 1e-6 before the log term. Throws on an empty mask.
DepthMetrics compute_metrics(std::span<const double> aligned, std::span<const double> gt,
                             const std::vector<bool>& mask);

struct ImageReport {
  std::string id;
  double scale = 1.0;
  double shift = 0.0;
  DepthMetrics metrics;
};

/// Aligns then scores one image.
ImageReport evaluate_image(const std::string& id, std::span<const double> depth,
                           std::span<const double> gt);

/// Per-image average of every metric.
DepthMetrics average(std::span<const ImageReport> reports);

/// id,s,t,abs_rel,sq_rel,rms_lin,rms_log,delta1,delta2,delta3 rows plus a final
/// "mean" row (s and t left empty).
void write_report_csv(std::ostream& os, std::span<const ImageReport> reports);

}  // namespace egf
