#pragma once

#include <array>
#include <cstddef>
#include <numbers>
#include <vector>

namespace egf {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// A point in spherical coordinates. theta is the azimuth in [0, 2pi),
/// phi the polar angle in [0, pi] measured from the +Z (north) pole.
struct SphericalPoint {
  double rho = 1.0;
  double theta = 0.0;
  double phi = 0.0;
};

using Vec3 = std::array<double, 3>;

/// (rho sin(phi) cos(theta), rho sin(phi) sin(theta), rho cos(phi))
Vec3 sph_to_cart(const SphericalPoint& p);

/// Inverse of sph_to_cart. theta is wrapped into [0, 2pi); the origin maps to
/// (0, 0, 0) and points on the Z axis get theta = 0.
SphericalPoint cart_to_sph(const Vec3& c);

/// Straight-line (not great-circle) distance between two spherical points.
double chord_distance(const SphericalPoint& a, const SphericalPoint& b);

/// Pixel-center angle assignment for an H x W equirectangular image.
/// Row 0 sits next to the north pole (phi near 0), column 0 next to theta = 0.
class AngularGrid {
 public:
  AngularGrid(std::size_t height, std::size_t width);

  std::size_t height() const { return phi_.size(); }
  std::size_t width() const { return theta_.size(); }

  double theta(std::size_t u) const { return theta_.at(u); }
  double phi(std::size_t v) const { return phi_.at(v); }

  const std::vector<double>& thetas() const { return theta_; }
  const std::vector<double>& phis() const { return phi_; }

 private:
  std::vector<double> theta_;
  std::vector<double> phi_;
};

/// Throws std::invalid_argument for a zero extent.
AngularGrid build_grid(std::size_t height, std::size_t width);

}  // namespace egf
