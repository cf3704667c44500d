#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "fmm/datasets.hpp"
#include "fmm/direct.hpp"

using namespace fmm;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

bool same_points(const std::vector<Source>& a, const std::vector<Source>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].position.x != b[i].position.x || a[i].position.y != b[i].position.y ||
        a[i].position.z != b[i].position.z || a[i].mass != b[i].mass ||
        a[i].global_id != b[i].global_id)
      return false;
  }
  return true;
}

double planar_radius(Vec3 p) { return std::sqrt(p.x * p.x + p.y * p.y); }

} // namespace

TEST_SUITE_BEGIN("datasets");

TEST_CASE("the stream reproduces the splitmix64 reference outputs") {
  SplitMix a(0);
  CHECK(a.next_u64() == 0xe220a8397b1dcdafull);
  CHECK(a.next_u64() == 0x6e789e6aa1b965f4ull);
  CHECK(a.next_u64() == 0x06c45d188009454full);
  SplitMix b(1234567);
  CHECK(b.next_u64() == 0x599ed017fb08fc85ull);
  CHECK(b.next_u64() == 0x2c73f08458540fa5ull);
  CHECK(b.next_u64() == 0x883ebce5a3f27c77ull);
  SplitMix c = SplitMix::at(42, 2);
  CHECK(c.next_u64() == 0x0018a66858653d4bull);
  SplitMix d(0);
  CHECK(d.unit() == 0.8833108082136426);
}

TEST_CASE("unit draws stay in the half open interval") {
  SplitMix rng(99);
  for (int i = 0; i < 10000; ++i) {
    double u = rng.unit();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("the same spec generates the same points twice") {
  GeneratorSpec spec;
  spec.kind = PointKind::Gaussian;
  spec.n = 500;
  spec.seed = 42;
  auto a = generate(spec);
  auto b = generate(spec);
  CHECK(same_points(a, b));
  spec.seed = 43;
  auto c = generate(spec);
  CHECK_FALSE(same_points(a, c));
}

TEST_CASE("each point depends only on its index") {
  GeneratorSpec small;
  small.kind = PointKind::UniformCube;
  small.n = 100;
  small.seed = 7;
  GeneratorSpec big = small;
  big.n = 1000;
  auto a = generate(small);
  auto b = generate(big);
  b.resize(100);
  CHECK(same_points(a, b));
}

TEST_CASE("uniform cube points fill the unit cube") {
  GeneratorSpec spec;
  spec.kind = PointKind::UniformCube;
  spec.n = 20000;
  spec.seed = 1;
  auto pts = generate(spec);
  REQUIRE(pts.size() == spec.n);
  double lo[3] = {1, 1, 1}, hi[3] = {0, 0, 0};
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto& p = pts[i].position;
    double c[3] = {p.x, p.y, p.z};
    for (int k = 0; k < 3; ++k) {
      CHECK(c[k] >= 0.0);
      CHECK(c[k] <= 1.0);
      lo[k] = std::min(lo[k], c[k]);
      hi[k] = std::max(hi[k], c[k]);
    }
    CHECK(pts[i].mass == 1.0);
    CHECK(pts[i].global_id == std::int64_t(i));
  }
  for (int k = 0; k < 3; ++k) {
    CHECK(lo[k] < 0.01);
    CHECK(hi[k] > 0.99);
  }
}

TEST_CASE("gaussian cloud is isotropic about the origin") {
  GeneratorSpec spec;
  spec.kind = PointKind::Gaussian;
  spec.n = 50000;
  spec.seed = 3;
  auto pts = generate(spec);
  double mean[3] = {0, 0, 0}, var[3] = {0, 0, 0};
  for (const auto& s : pts) {
    mean[0] += s.position.x;
    mean[1] += s.position.y;
    mean[2] += s.position.z;
  }
  for (int k = 0; k < 3; ++k) mean[k] /= double(spec.n);
  for (const auto& s : pts) {
    double c[3] = {s.position.x, s.position.y, s.position.z};
    for (int k = 0; k < 3; ++k) var[k] += (c[k] - mean[k]) * (c[k] - mean[k]);
  }
  for (int k = 0; k < 3; ++k) {
    CHECK(std::abs(mean[k]) < 0.01);
    CHECK(std::abs(std::sqrt(var[k] / double(spec.n)) - 0.25) < 0.01);
  }

  spec.gauss_sigma = 0.5;
  spec.n = 20000;
  auto wide = generate(spec);
  double v = 0.0;
  for (const auto& s : wide) v += s.position.x * s.position.x;
  CHECK(std::abs(std::sqrt(v / double(spec.n)) - 0.5) < 0.02);
}

TEST_CASE("shell points stay within the jitter band") {
  GeneratorSpec spec;
  spec.kind = PointKind::Shell;
  spec.n = 2000;
  spec.seed = 5;
  auto pts = generate(spec);
  bool octant[8] = {};
  for (const auto& s : pts) {
    double r = norm(s.position);
    CHECK(std::abs(r - spec.shell_radius) <= spec.shell_jitter + 1e-12);
    int o = (s.position.x > 0 ? 4 : 0) + (s.position.y > 0 ? 2 : 0) + (s.position.z > 0 ? 1 : 0);
    octant[o] = true;
  }
  for (int o = 0; o < 8; ++o) CHECK(octant[o]);
}

TEST_CASE("helix points hug the curve") {
  GeneratorSpec spec;
  spec.kind = PointKind::Helix;
  spec.n = 2000;
  spec.seed = 11;
  auto pts = generate(spec);
  double zlo = 1e30, zhi = -1e30;
  for (const auto& s : pts) {
    double rp = planar_radius(s.position);
    CHECK(rp >= spec.helix_radius - spec.helix_jitter - 1e-12);
    CHECK(rp <= spec.helix_radius + spec.helix_jitter + 1e-12);
    CHECK(std::abs(s.position.z) <= spec.helix_height / 2 + spec.helix_jitter + 1e-12);
    zlo = std::min(zlo, s.position.z);
    zhi = std::max(zhi, s.position.z);
  }
  CHECK(zlo < -1.8);
  CHECK(zhi > 1.8);
}

TEST_CASE("galaxy stages keep children near their seed") {
  GeneratorSpec spec;
  spec.kind = PointKind::Galaxy;
  spec.galaxy_seeds = 200;
  spec.galaxy_stages = 2;
  spec.n = 20000;
  spec.seed = 17;
  auto pts = generate(spec);
  REQUIRE(pts.size() == spec.n);

  GeneratorSpec seeds_only = spec;
  seeds_only.galaxy_stages = 0;
  seeds_only.n = spec.galaxy_seeds;
  auto seeds = generate(seeds_only);
  REQUIRE(seeds.size() == spec.galaxy_seeds);

  double r0 = spec.galaxy_outer / 20.0;
  double reach = r0 + spec.galaxy_shrink * r0;
  double mass = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(pts[i].global_id == std::int64_t(i));
    mass += pts[i].mass;
    const auto& seed = seeds[i / 100].position;
    CHECK(norm(pts[i].position - seed) <= reach + 1e-9);
  }
  CHECK(mass == double(spec.n));

  for (const auto& s : seeds) {
    double rp = planar_radius(s.position);
    CHECK(rp >= spec.galaxy_inner);
    CHECK(rp <= spec.galaxy_outer);
    CHECK(std::abs(s.position.z) <= spec.galaxy_axis_ratio * r0 + 1e-12);
  }
}

TEST_CASE("galaxy rejects a count that is not seeds times a power of ten") {
  GeneratorSpec spec;
  spec.kind = PointKind::Galaxy;
  spec.galaxy_seeds = 100;
  spec.galaxy_stages = 1;
  spec.n = 999;
  CHECK_THROWS_AS(generate(spec), std::invalid_argument);
  spec.n = 0;
  CHECK_THROWS_AS(generate(spec), std::invalid_argument);
  GeneratorSpec empty;
  empty.n = 0;
  CHECK_THROWS_AS(generate(empty), std::invalid_argument);
}

TEST_CASE("desk scale galaxy holds a million points in the torus envelope") {
  GeneratorSpec spec;
  spec.kind = PointKind::Galaxy;
  spec.galaxy_seeds = 1000;
  spec.galaxy_stages = 3;
  spec.n = 1000000;
  spec.seed = 23;
  auto pts = generate(spec);
  REQUIRE(pts.size() == spec.n);
  double r0 = spec.galaxy_outer / 20.0;
  double reach = r0 * (1.0 + 2.0 / 3.0 + 4.0 / 9.0);
  double zmax = spec.galaxy_axis_ratio * (r0 + reach);
  double mean_rp = 0.0;
  for (const auto& s : pts) {
    double rp = planar_radius(s.position);
    CHECK(rp >= spec.galaxy_inner - reach - 1e-9);
    CHECK(rp <= spec.galaxy_outer + reach + 1e-9);
    CHECK(std::abs(s.position.z) <= zmax + 1e-9);
    mean_rp += rp;
  }
  mean_rp /= double(spec.n);
  CHECK(mean_rp > 10000.0);
  CHECK(mean_rp < 14000.0);
}

TEST_CASE("kind names parse both ways") {
  CHECK(parse_point_kind("uniform-cube") == PointKind::UniformCube);
  CHECK(parse_point_kind("uniform") == PointKind::UniformCube);
  CHECK(parse_point_kind("gaussian") == PointKind::Gaussian);
  CHECK(parse_point_kind("shell") == PointKind::Shell);
  CHECK(parse_point_kind("helix") == PointKind::Helix);
  CHECK(parse_point_kind("galaxy") == PointKind::Galaxy);
  CHECK_THROWS_AS(parse_point_kind("blob"), std::invalid_argument);
  for (auto k : {PointKind::UniformCube, PointKind::Gaussian, PointKind::Shell,
                 PointKind::Helix, PointKind::Galaxy})
    CHECK(parse_point_kind(point_kind_name(k)) == k);
}

TEST_CASE("point files round trip bitwise") {
  GeneratorSpec spec;
  spec.kind = PointKind::Gaussian;
  spec.n = 100;
  spec.seed = 8;
  auto pts = generate(spec);
  auto bin = temp_path("fmm_pts_roundtrip.bin");
  write_points(bin, pts);
  CHECK(same_points(pts, read_points(bin)));

  auto csv = temp_path("fmm_pts_roundtrip.csv");
  write_points_csv(csv, pts);
  CHECK(same_points(pts, read_points_csv(csv)));

  std::FILE* f = std::fopen(bin.c_str(), "r+b");
  REQUIRE(f);
  std::fputc('X', f);
  std::fclose(f);
  CHECK_THROWS_AS(read_points(bin), std::runtime_error);
  CHECK_THROWS_AS(read_points(temp_path("fmm_no_such_file.bin")), std::runtime_error);
  std::filesystem::remove(bin);
  std::filesystem::remove(csv);
}

TEST_CASE("potential files round trip bitwise") {
  std::vector<double> phi{0.0, -1.5, 3.25e-8, 1e30, -0.0};
  auto path = temp_path("fmm_phi_roundtrip.bin");
  write_potentials(path, phi);
  auto back = read_potentials(path);
  REQUIRE(back.size() == phi.size());
  for (std::size_t i = 0; i < phi.size(); ++i) {
    std::uint64_t a, b;
    std::memcpy(&a, &phi[i], 8);
    std::memcpy(&b, &back[i], 8);
    CHECK(a == b);
  }
  std::FILE* f = std::fopen(path.c_str(), "r+b");
  REQUIRE(f);
  std::fputc('Q', f);
  std::fclose(f);
  CHECK_THROWS_AS(read_potentials(path), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_SUITE_END();
