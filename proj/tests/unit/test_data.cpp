#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "egformer/checkpoint.hpp"
#include "egformer/data.hpp"

using namespace egf;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("egf_data_test_" + name);
}

std::string be_float(float f) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  std::string out(4, '\0');
  for (int i = 0; i < 4; ++i) out[i] = static_cast<char>((bits >> (24 - 8 * i)) & 0xFF);
  return out;
}

std::string le_float(float f) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  std::string out(4, '\0');
  for (int i = 0; i < 4; ++i) out[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  return out;
}

SceneSpec empty_room(Vec3 half, Vec3 center = {0, 0, 0}) {
  SceneSpec s;
  BoxRoom room;
  room.half_extent = half;
  room.center = center;
  room.wall_albedo.fill({0.5, 0.5, 0.5});
  s.room = room;
  return s;
}

}  // namespace

TEST(Rays, UnitNormAndDistinct) {
  const AngularGrid g(8, 16);
  std::vector<Vec3> rays;
  for (std::size_t v = 0; v < 8; ++v) {
    for (std::size_t u = 0; u < 16; ++u) {
      const Vec3 d = ray_for_pixel(g, u, v);
      EXPECT_NEAR(d[0] * d[0] + d[1] * d[1] + d[2] * d[2], 1.0, 1e-15);
      rays.push_back(d);
    }
  }
  for (std::size_t i = 0; i < rays.size(); ++i) {
    for (std::size_t j = i + 1; j < rays.size(); ++j) {
      const double dist = std::hypot(rays[i][0] - rays[j][0], rays[i][1] - rays[j][1],
                                     rays[i][2] - rays[j][2]);
      EXPECT_GT(dist, 1e-3);
    }
  }
  EXPECT_THROW(ray_for_pixel(g, 16, 0), std::out_of_range);
}

TEST(Render, SphereRoomDepthIsRadius) {
  SceneSpec s;
  s.room = SphereRoom{3.25, {0.5, 0.5, 0.5}};
  const Render r = render(s, 16, 32);
  for (double d : r.depth.data) EXPECT_NEAR(d, 3.25, 1e-12);
}

TEST(Render, UnitCubeDepth) {
  const SceneSpec s = empty_room({1.0, 1.0, 1.0});
  const AngularGrid g(12, 24);
  const Render r = render(s, 12, 24);
  for (std::size_t v = 0; v < 12; ++v) {
    for (std::size_t u = 0; u < 24; ++u) {
      const Vec3 d = ray_for_pixel(g, u, v);
      const double m = std::max({std::fabs(d[0]), std::fabs(d[1]), std::fabs(d[2])});
      EXPECT_NEAR(r.depth.at(v, u), 1.0 / m, 1e-12);
    }
  }
}

TEST(Render, OffCenterRoomMatchesSlabDistances) {
  const Vec3 c{0.4, -0.3, 0.2};
  const Vec3 half{2.0, 1.5, 1.2};
  const SceneSpec s = empty_room(half, c);
  const AngularGrid g(10, 20);
  const Render r = render(s, 10, 20);
  for (std::size_t v = 0; v < 10; ++v) {
    for (std::size_t u = 0; u < 20; ++u) {
      const Vec3 d = ray_for_pixel(g, u, v);
      double t = 1e300;
      for (int a = 0; a < 3; ++a) {
        if (d[a] > 0) t = std::min(t, (c[a] + half[a]) / d[a]);
        if (d[a] < 0) t = std::min(t, (c[a] - half[a]) / d[a]);
      }
      EXPECT_NEAR(r.depth.at(v, u), t, 1e-12);
    }
  }
}

TEST(Render, SphereObjectNearestPointOnEquator) {
  SceneSpec s = empty_room({4.0, 4.0, 4.0});
  s.spheres.push_back({{2.0, 0.0, 0.0}, 0.5, {0.9, 0.2, 0.2}});
  const std::size_t h = 64, w = 128;
  const AngularGrid g(h, w);
  const Render r = render(s, h, w);
  double best = 1e300;
  std::size_t best_v = 0;
  for (std::size_t v = 0; v < h; ++v) {
    for (std::size_t u = 0; u < w; ++u) {
      const Vec3 d = ray_for_pixel(g, u, v);
      // |t d - c|^2 = r^2 with |d| = 1
      const double b = 2.0 * d[0];
      const double disc = b * b - (4.0 - 0.25);
      if (b > 0 && disc >= 0) EXPECT_NEAR(r.depth.at(v, u), b - std::sqrt(disc), 1e-12);
      if (r.depth.at(v, u) < best) {
        best = r.depth.at(v, u);
        best_v = v;
      }
    }
  }
  EXPECT_GE(best, 1.5);
  // nearest pixel center is half a pixel off the axis in both angles
  EXPECT_NEAR(best, 1.5, 5e-3);
  EXPECT_TRUE(best_v == h / 2 - 1 || best_v == h / 2);
}

TEST(RandomScene, DeterministicAndValid) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const SceneSpec a = random_scene(seed);
    EXPECT_NO_THROW(a.validate());
    const std::size_t objects = a.spheres.size() + a.boxes.size();
    EXPECT_GE(objects, 1u);
    EXPECT_LE(objects, 4u);
    const Render ra = render(a, 8, 16);
    const Render rb = render(random_scene(seed), 8, 16, 3);
    EXPECT_EQ(ra.depth.data, rb.depth.data);
    EXPECT_EQ(ra.image.data, rb.image.data);
  }
  EXPECT_NE(render(random_scene(1), 8, 16).depth.data, render(random_scene(2), 8, 16).depth.data);
}

TEST(RandomScene, DepthAndColorBounds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SceneSpec s = random_scene(seed);
    const Render r = render(s, 16, 32);
    for (double d : r.depth.data) {
      EXPECT_GE(d, 0.1);
      EXPECT_LE(d, s.max_depth() + 1e-12);
    }
    for (double c : r.image.data) {
      EXPECT_GE(c, 0.0);
      EXPECT_LE(c, 1.0);
    }
  }
}

TEST(Render, SeamIsContinuous) {
  const SceneSpec s = empty_room({2.5, 1.9, 1.4}, {0.3, 0.2, -0.1});
  const std::size_t h = 16, w = 64;
  const Render r = render(s, h, w);
  for (std::size_t v = 0; v < h; ++v) {
    double largest_step = 0.0;
    for (std::size_t u = 1; u < w; ++u) {
      largest_step = std::max(largest_step, std::fabs(r.depth.at(v, u) - r.depth.at(v, u - 1)));
    }
    EXPECT_LE(std::fabs(r.depth.at(v, 0) - r.depth.at(v, w - 1)), largest_step + 1e-12);
  }
}

TEST(SceneSpec, RejectsCameraOutsideOrTooClose) {
  EXPECT_THROW(empty_room({1, 1, 1}, {2.0, 0, 0}).validate(), std::invalid_argument);
  SceneSpec s = empty_room({3, 3, 3});
  s.spheres.push_back({{0.5, 0, 0}, 0.45, {}});
  EXPECT_THROW(s.validate(), std::invalid_argument);
  SceneSpec sr;
  sr.room = SphereRoom{0.0, {}};
  EXPECT_THROW(sr.validate(), std::invalid_argument);
}

TEST(Pfm, RoundTripWithinFloatPrecision) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.1, 50.0);
  Raster m(7, 5, 1);
  for (double& x : m.data) x = u(rng);
  const Raster back = decode_pfm(encode_pfm(m));
  ASSERT_EQ(back.height, 7u);
  ASSERT_EQ(back.width, 5u);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    EXPECT_LE(std::fabs(back.data[i] - m.data[i]) / m.data[i], 1e-6);
  }
  const auto path = temp_path("rt.pfm");
  write_pfm(path, m);
  EXPECT_EQ(read_pfm(path).data, back.data);
  std::filesystem::remove(path);
}

TEST(Pfm, LayoutAndRowOrder) {
  Raster m(2, 3, 1);
  m.data = {1, 2, 3, 4, 5, 6};
  const std::string bytes = encode_pfm(m);
  const std::string header = "Pf\n3 2\n-1.0\n";
  ASSERT_EQ(bytes.size(), header.size() + 6 * 4);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  // bottom row first
  EXPECT_EQ(bytes.substr(header.size(), 4), le_float(4.0f));
  EXPECT_EQ(bytes.substr(header.size() + 12, 4), le_float(1.0f));
}

TEST(Pfm, BigEndianFixture) {
  const std::string bytes = "Pf\n2 2\n1.0\n" + be_float(3.0f) + be_float(4.0f) + be_float(1.0f) +
                            be_float(2.5f);
  const Raster m = decode_pfm(bytes);
  EXPECT_EQ(m.data, (std::vector<double>{1.0, 2.5, 3.0, 4.0}));
}

TEST(Pfm, MalformedInputsReportOffsets) {
  auto message = [](const std::string& bytes) -> std::string {
    try {
      decode_pfm(bytes);
    } catch (const IoError& e) {
      return e.what();
    }
    return "";
  };
  const std::string good = "Pf\n2 1\n-1.0\n" + le_float(1.0f) + le_float(2.0f);
  EXPECT_NO_THROW(decode_pfm(good));
  EXPECT_NE(message("PF\n2 1\n-1.0\n").find("byte offset"), std::string::npos);
  EXPECT_NE(message(good.substr(0, good.size() - 1)).find("byte offset"), std::string::npos);
  EXPECT_NE(message(good + "x").find("byte offset"), std::string::npos);
  EXPECT_NE(message("Pf\n2 x\n-1.0\n").find("byte offset"), std::string::npos);
  EXPECT_NE(message("Pf\n2 1\nabc\n").find("byte offset"), std::string::npos);
  EXPECT_THROW(read_pfm(temp_path("missing.pfm")), IoError);
}

TEST(Netpbm, RoundTripAndComments) {
  Raster rgb(2, 3, 3);
  for (std::size_t i = 0; i < rgb.data.size(); ++i) rgb.data[i] = static_cast<double>(i) / 17.0;
  const auto path = temp_path("img.ppm");
  write_ppm(path, rgb);
  const Raster back = read_ppm(path);
  ASSERT_EQ(back.channels, 3u);
  for (std::size_t i = 0; i < rgb.data.size(); ++i) {
    EXPECT_EQ(back.data[i], to_byte(rgb.data[i]) / 255.0);
  }
  std::filesystem::remove(path);
  EXPECT_EQ(to_byte(-1.0), 0);
  EXPECT_EQ(to_byte(2.0), 255);
  EXPECT_EQ(to_byte(0.5), 128);

  const auto gray_path = temp_path("gray.pgm");
  write_file_atomic(gray_path, std::string("P5\n# comment\n2 1\n255\n") + '\x00' + '\xff');
  const Raster gray = read_pgm(gray_path);
  EXPECT_EQ(gray.data, (std::vector<double>{0.0, 1.0}));
  write_file_atomic(gray_path, std::string("P5\n2 1\n255\n") + '\x00');
  EXPECT_THROW(read_pgm(gray_path), IoError);
  std::filesystem::remove(gray_path);
}

TEST(Dataset, GenerateWriteRead) {
  DatasetSpec spec;
  spec.train = 3;
  spec.test = 2;
  spec.height = 8;
  spec.width = 16;
  spec.seed = 4;
  const auto samples = generate_dataset(spec);
  ASSERT_EQ(samples.size(), 5u);
  EXPECT_EQ(samples[0].id, "0000");
  EXPECT_EQ(samples[0].split, "train");
  EXPECT_EQ(samples[4].split, "test");
  EXPECT_EQ(select_split(samples, "train").size(), 3u);
  EXPECT_EQ(select_split(samples, "test").size(), 2u);

  const auto again = generate_dataset(spec, 2);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(samples[i].seed, again[i].seed);
    EXPECT_EQ(samples[i].depth.data, again[i].depth.data);
  }

  const auto dir = temp_path("dataset");
  std::filesystem::remove_all(dir);
  write_dataset(dir, samples);
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "scenes" / "0003.ppm"));
  EXPECT_TRUE(std::filesystem::exists(dir / "scenes" / "0003.pfm"));
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.size(), samples.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].id, samples[i].id);
    EXPECT_EQ(back[i].seed, samples[i].seed);
    EXPECT_EQ(back[i].split, samples[i].split);
    EXPECT_EQ(back[i].image.data, samples[i].image.data);
    EXPECT_EQ(back[i].depth.data, samples[i].depth.data);
  }
  write_file_atomic(dir / "manifest.csv", "id,seed\n");
  EXPECT_THROW(read_dataset(dir), IoError);
  std::filesystem::remove_all(dir);
}
