#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "egformer/geometry.hpp"

namespace egf {

/// Interleaved H x W x C image of doubles.
struct Raster {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> data;

  Raster() = default;
  Raster(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  double& at(std::size_t v, std::size_t u, std::size_t c = 0) {
    return data[(v * width + u) * channels + c];
  }
  double at(std::size_t v, std::size_t u, std::size_t c = 0) const {
    return data[(v * width + u) * channels + c];
  }
};

struct SphereObject {
  Vec3 center{};
  double radius = 0.5;
  Vec3 albedo{0.8, 0.8, 0.8};
};

struct BoxObject {
  Vec3 center{};
  Vec3 half_extent{0.25, 0.25, 0.25};
  Vec3 albedo{0.8, 0.8, 0.8};
};

/// Axis-aligned room. `center` is the room center relative to the camera.
/// `wall_albedo` order: -X, +X, -Y, +Y, floor (-Z), ceiling (+Z).
struct BoxRoom {
  Vec3 center{};
  Vec3 half_extent{2.0, 2.0, 1.5};
  std::array<Vec3, 6> wall_albedo{};
};

/// Spherical enclosure of the given radius centered on the camera.
struct SphereRoom {
  double radius = 1.0;
  Vec3 albedo{0.7, 0.7, 0.7};
};

/// The camera sits at the origin.
struct SceneSpec {
  std::uint64_t seed = 0;
  std::variant<BoxRoom, SphereRoom> room = BoxRoom{};
  std::vector<SphereObject> spheres;
  std::vector<BoxObject> boxes;
  Vec3 light{0.3, 0.2, 0.93};  // unit direction towards the light

  /// Throws std::invalid_argument when the camera is not strictly inside the
  /// room or an object surface comes within 0.1 of the origin.
  void validate() const;
  /// Largest possible ray length (room diagonal or sphere radius).
  double max_depth() const;
};

/// Random room with 1-4 objects, fully determined by the seed.
SceneSpec random_scene(std::uint64_t seed);

/// Unit ray direction through the center of pixel (u, v).
Vec3 ray_for_pixel(const AngularGrid& grid, std::size_t u, std::size_t v);

struct Render {
  Raster image;  // [H, W, 3] in [0, 1]
  Raster depth;  // [H, W, 1] ray length
};

/// `threads` > 1 splits rows across workers; the output does not depend on it.
Render render(const SceneSpec& spec, std::size_t height, std::size_t width,
              std::size_t threads = 1);

/// A training/evaluation pair as stored on disk: 8-bit image, f32 depth.
struct Sample {
  std::string id;
  std::uint64_t seed = 0;
  std::string split;
  Raster image;
  Raster depth;
};

/// Renders scene `seed` and quantizes exactly as the dataset files would.
Sample make_sample(const std::string& id, std::uint64_t seed, const std::string& split,
                   std::size_t height, std::size_t width, std::size_t threads = 1);

struct DatasetSpec {
  std::size_t train = 64;
  std::size_t test = 16;
  std::size_t height = 32;
  std::size_t width = 64;
  std::uint64_t seed = 0;
};

/// Scene seeds are derived from the dataset seed; train ids come first.
std::vector<Sample> generate_dataset(const DatasetSpec& spec, std::size_t threads = 1);

/// Writes scenes/NNNN.ppm, scenes/NNNN.pfm and manifest.csv (id,seed,split).
void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);
std::vector<Sample> read_dataset(const std::filesystem::path& dir);

std::vector<const Sample*> select_split(const std::vector<Sample>& samples, const std::string& split);

// ---- image files ----------------------------------------------------------

/// Single-channel PFM ("Pf"), little endian (scale -1.0), rows bottom to top.
void write_pfm(const std::filesystem::path& path, const Raster& map);
std::string encode_pfm(const Raster& map);
/// Accepts either endianness. Throws IoError with the failing byte offset.
Raster read_pfm(const std::filesystem::path& path);
Raster decode_pfm(const std::string& bytes);

/// 8-bit binary PPM (P6) from values in [0, 1].
void write_ppm(const std::filesystem::path& path, const Raster& rgb);
Raster read_ppm(const std::filesystem::path& path);
/// 8-bit binary PGM (P5) from values in [0, 1].
void write_pgm(const std::filesystem::path& path, const Raster& gray);
Raster read_pgm(const std::filesystem::path& path);

std::uint8_t to_byte(double v);

}  // namespace egf
