#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <stdexcept>
#include <thread>

#include "egformer/data.hpp"

namespace egf {

namespace {

constexpr double kAmbient = 0.1;
constexpr double kInf = std::numeric_limits<double>::infinity();

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 normalized(const Vec3& v) {
  const double n = std::sqrt(dot(v, v));
  return {v[0] / n, v[1] / n, v[2] / n};
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

struct Hit {
  double t = kInf;
  Vec3 normal{};
  Vec3 albedo{};
};

// Ray from the origin leaving an axis-aligned box that contains it.
Hit exit_box(const Vec3& d, const BoxRoom& room) {
  Hit hit;
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) continue;
    const double bound = d[a] > 0.0 ? room.center[a] + room.half_extent[a]
                                    : room.center[a] - room.half_extent[a];
    const double t = bound / d[a];
    if (t < hit.t) {
      hit.t = t;
      hit.normal = {0.0, 0.0, 0.0};
      hit.normal[a] = d[a] > 0.0 ? -1.0 : 1.0;
      hit.albedo = room.wall_albedo[2 * a + (d[a] > 0.0 ? 1 : 0)];
    }
  }
  return hit;
}

void hit_sphere(const Vec3& d, const SphereObject& s, Hit& best) {
  const double b = dot(d, s.center);
  const double c = dot(s.center, s.center) - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0.0) return;
  const double t = b - std::sqrt(disc);
  if (t <= 0.0 || t >= best.t) return;
  best.t = t;
  best.normal = normalized({t * d[0] - s.center[0], t * d[1] - s.center[1], t * d[2] - s.center[2]});
  best.albedo = s.albedo;
}

void hit_box(const Vec3& d, const BoxObject& box, Hit& best) {
  double t_near = -kInf, t_far = kInf;
  int axis = -1;
  for (int a = 0; a < 3; ++a) {
    const double lo = box.center[a] - box.half_extent[a];
    const double hi = box.center[a] + box.half_extent[a];
    if (d[a] == 0.0) {
      if (lo > 0.0 || hi < 0.0) return;
      continue;
    }
    double t0 = lo / d[a], t1 = hi / d[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_near) {
      t_near = t0;
      axis = a;
    }
    t_far = std::min(t_far, t1);
  }
  if (axis < 0 || t_near > t_far || t_near <= 0.0 || t_near >= best.t) return;
  best.t = t_near;
  best.normal = {0.0, 0.0, 0.0};
  best.normal[axis] = d[axis] > 0.0 ? -1.0 : 1.0;
  best.albedo = box.albedo;
}

double box_distance_from_origin(const Vec3& center, const Vec3& half) {
  double sq = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double excess = std::max(std::abs(center[a]) - half[a], 0.0);
    sq += excess * excess;
  }
  return std::sqrt(sq);
}

}  // namespace

void SceneSpec::validate() const {
  if (const auto* box = std::get_if<BoxRoom>(&room)) {
    for (int a = 0; a < 3; ++a) {
      if (!(box->half_extent[a] > 0.0) || !(std::abs(box->center[a]) < box->half_extent[a])) {
        throw std::invalid_argument("scene: camera not strictly inside the room");
      }
    }
  } else if (!(std::get<SphereRoom>(room).radius > 0.0)) {
    throw std::invalid_argument("scene: enclosing sphere radius must be positive");
  }
  for (const SphereObject& s : spheres) {
    if (std::sqrt(dot(s.center, s.center)) - s.radius < 0.1) {
      throw std::invalid_argument("scene: sphere surface closer than 0.1 to the camera");
    }
  }
  for (const BoxObject& b : boxes) {
    if (box_distance_from_origin(b.center, b.half_extent) < 0.1) {
      throw std::invalid_argument("scene: box surface closer than 0.1 to the camera");
    }
  }
}

double SceneSpec::max_depth() const {
  if (const auto* box = std::get_if<BoxRoom>(&room)) {
    double sq = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double far = std::abs(box->center[a]) + box->half_extent[a];
      sq += far * far;
    }
    return std::sqrt(sq);
  }
  return std::get<SphereRoom>(room).radius;
}

SceneSpec random_scene(std::uint64_t seed) {
  std::mt19937_64 rng(splitmix64(seed));
  auto uniform = [&rng](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  auto gray = [&](double lo, double hi) {
    const double g = uniform(lo, hi);
    return Vec3{g * uniform(0.85, 1.0), g * uniform(0.85, 1.0), g * uniform(0.85, 1.0)};
  };

  SceneSpec spec;
  spec.seed = seed;
  BoxRoom room;
  room.half_extent = {uniform(1.8, 4.0), uniform(1.8, 4.0), uniform(1.3, 1.8)};
  for (int w = 0; w < 4; ++w) room.wall_albedo[w] = gray(0.45, 0.85);
  room.wall_albedo[4] = gray(0.25, 0.5);  // floor
  room.wall_albedo[5] = gray(0.8, 0.95);  // ceiling
  spec.room = room;

  const double theta = uniform(0.0, kTwoPi);
  const double elevation = uniform(0.35, 1.2);
  spec.light = {std::cos(elevation) * std::cos(theta), std::cos(elevation) * std::sin(theta),
                std::sin(elevation)};

  const int objects = std::uniform_int_distribution<int>(1, 4)(rng);
  for (int i = 0; i < objects; ++i) {
    for (int attempt = 0; attempt < 32; ++attempt) {
      const bool sphere = uniform(0.0, 1.0) < 0.5;
      const double size = uniform(0.2, 0.6);
      Vec3 c{};
      for (int a = 0; a < 3; ++a) {
        const double lo = room.center[a] - room.half_extent[a] + size;
        const double hi = room.center[a] + room.half_extent[a] - size;
        c[a] = uniform(lo, hi);
      }
      const Vec3 albedo = {uniform(0.2, 0.95), uniform(0.2, 0.95), uniform(0.2, 0.95)};
      if (sphere) {
        if (std::sqrt(dot(c, c)) - size < 0.5) continue;
        spec.spheres.push_back({c, size, albedo});
      } else {
        const Vec3 half{size, size * uniform(0.6, 1.4), size * uniform(0.6, 1.4)};
        if (box_distance_from_origin(c, half) < 0.5) continue;
        spec.boxes.push_back({c, half, albedo});
      }
      break;
    }
  }
  spec.validate();
  return spec;
}

Vec3 ray_for_pixel(const AngularGrid& grid, std::size_t u, std::size_t v) {
  if (u >= grid.width() || v >= grid.height()) {
    throw std::out_of_range("ray_for_pixel: pixel (" + std::to_string(u) + ", " +
                            std::to_string(v) + ") outside " + std::to_string(grid.width()) + "x" +
                            std::to_string(grid.height()));
  }
  return sph_to_cart({1.0, grid.theta(u), grid.phi(v)});
}

Render render(const SceneSpec& spec, std::size_t height, std::size_t width, std::size_t threads) {
  spec.validate();
  const AngularGrid grid(height, width);
  Render out{Raster(height, width, 3), Raster(height, width, 1)};
  const Vec3 light = normalized(spec.light);

  auto shade_rows = [&](std::size_t v_begin, std::size_t v_end) {
    for (std::size_t v = v_begin; v < v_end; ++v) {
      for (std::size_t u = 0; u < width; ++u) {
        const Vec3 d = ray_for_pixel(grid, u, v);
        Hit hit;
        if (const auto* box = std::get_if<BoxRoom>(&spec.room)) {
          hit = exit_box(d, *box);
        } else {
          const auto& sr = std::get<SphereRoom>(spec.room);
          hit = {sr.radius, {-d[0], -d[1], -d[2]}, sr.albedo};
        }
        for (const SphereObject& s : spec.spheres) hit_sphere(d, s, hit);
        for (const BoxObject& b : spec.boxes) hit_box(d, b, hit);
        out.depth.at(v, u) = hit.t;
        const double lambert = std::max(0.0, dot(hit.normal, light));
        for (std::size_t c = 0; c < 3; ++c) {
          out.image.at(v, u, c) = std::clamp(hit.albedo[c] * lambert + kAmbient, 0.0, 1.0);
        }
      }
    }
  };

  threads = std::clamp<std::size_t>(threads, 1, height);
  if (threads == 1) {
    shade_rows(0, height);
  } else {
    std::vector<std::thread> workers;
    const std::size_t chunk = (height + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t begin = t * chunk, end = std::min(height, begin + chunk);
      if (begin < end) workers.emplace_back(shade_rows, begin, end);
    }
    for (auto& w : workers) w.join();
  }
  return out;
}

Sample make_sample(const std::string& id, std::uint64_t seed, const std::string& split,
                   std::size_t height, std::size_t width, std::size_t threads) {
  Render r = render(random_scene(seed), height, width, threads);
  for (double& v : r.image.data) v = static_cast<double>(to_byte(v)) / 255.0;
  for (double& v : r.depth.data) v = static_cast<double>(static_cast<float>(v));
  return {id, seed, split, std::move(r.image), std::move(r.depth)};
}

std::vector<Sample> generate_dataset(const DatasetSpec& spec, std::size_t threads) {
  std::vector<Sample> out;
  const std::size_t total = spec.train + spec.test;
  for (std::size_t i = 0; i < total; ++i) {
    char id[24];
    std::snprintf(id, sizeof(id), "%04zu", i);
    const std::uint64_t seed = splitmix64(spec.seed * 0x100000001B3ULL + i);
    out.push_back(make_sample(id, seed, i < spec.train ? "train" : "test", spec.height, spec.width,
                              threads));
  }
  return out;
}

std::vector<const Sample*> select_split(const std::vector<Sample>& samples, const std::string& split) {
  std::vector<const Sample*> out;
  for (const Sample& s : samples) {
    if (s.split == split) out.push_back(&s);
  }
  return out;
}

}  // namespace egf
