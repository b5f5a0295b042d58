#include "egformer/geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace egf {

Vec3 sph_to_cart(const SphericalPoint& p) {
  const double s = std::sin(p.phi);
  return {p.rho * s * std::cos(p.theta), p.rho * s * std::sin(p.theta),
          p.rho * std::cos(p.phi)};
}

SphericalPoint cart_to_sph(const Vec3& c) {
  const double rho = std::sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]);
  if (rho == 0.0) return {0.0, 0.0, 0.0};
  double theta = std::atan2(c[1], c[0]);
  if (theta < 0.0) theta += kTwoPi;
  if (theta >= kTwoPi) theta -= kTwoPi;
  // atan2 of the planar radius is better conditioned than acos near the poles.
  const double planar = std::hypot(c[0], c[1]);
  const double phi = std::atan2(planar, c[2]);
  return {rho, theta, phi};
}

double chord_distance(const SphericalPoint& a, const SphericalPoint& b) {
  const Vec3 pa = sph_to_cart(a);
  const Vec3 pb = sph_to_cart(b);
  const double dx = pa[0] - pb[0];
  const double dy = pa[1] - pb[1];
  const double dz = pa[2] - pb[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

AngularGrid::AngularGrid(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) {
    throw std::invalid_argument("AngularGrid: extents must be positive, got " +
                                std::to_string(height) + "x" +
                                std::to_string(width));
  }
  theta_.resize(width);
  phi_.resize(height);
  for (std::size_t u = 0; u < width; ++u)
    theta_[u] = (static_cast<double>(u) + 0.5) * kTwoPi / static_cast<double>(width);
  for (std::size_t v = 0; v < height; ++v)
    phi_[v] = (static_cast<double>(v) + 0.5) * kPi / static_cast<double>(height);
}

AngularGrid build_grid(std::size_t height, std::size_t width) {
  return AngularGrid(height, width);
}

}  // namespace egf
