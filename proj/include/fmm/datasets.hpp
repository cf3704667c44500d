#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fmm/geometry.hpp"

namespace fmm {

/// splitmix64 output function.
std::uint64_t mix64(std::uint64_t z);

/// Counter-based splitmix64 stream. The n-th draw depends only on (seed, n),
/// so any point's sub-stream can be reached directly via at(), and split()
/// seeds an independent child stream from the next output. No libc or
/// libstdc++ distribution machinery is involved; the draw sequence is fixed
/// by this file alone.
class SplitMix {
 public:
  explicit SplitMix(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  /// Uniform in [0, 1), 53 significant bits.
  double unit();

  /// Uniform in [lo, hi).
  double range(double lo, double hi);

  /// Standard normal via Box-Muller; two draws per call, no cached spare.
  double normal();

  /// Independent child stream seeded from the next output.
  SplitMix split();

  /// Stream for element `index` of the run keyed by `seed`, reachable
  /// without generating elements 0..index-1.
  static SplitMix at(std::uint64_t seed, std::uint64_t index);

 private:
  std::uint64_t state_;
};

enum class PointKind { UniformCube, Gaussian, Shell, Helix, Galaxy };

/// Parses the CLI spelling (uniform-cube, gaussian, shell, helix, galaxy).
/// Unknown names throw.
PointKind parse_point_kind(const std::string& name);
const char* point_kind_name(PointKind kind);

/// Everything a generator run depends on. Identical spec, identical points.
/// Unit masses and global ids 0..n-1 in generation order for every kind.
struct GeneratorSpec {
  PointKind kind = PointKind::UniformCube;
  std::size_t n = 0;
  std::uint64_t seed = 0;

  double gauss_sigma = 0.25;

  double shell_radius = 1.0;
  double shell_jitter = 0.01;

  double helix_turns = 3.0;
  double helix_radius = 1.0;
  double helix_height = 4.0;
  double helix_jitter = 0.02;

  /// Galaxy: galaxy_seeds torus samples, then galaxy_stages rounds where
  /// every point is replaced by ten points uniform in an oblate spheroid
  /// around it. Stage i spheroids have in-plane major axis
  /// galaxy_shrink^i * galaxy_outer / 20 and vertical minor axis
  /// galaxy_axis_ratio times that. n must equal galaxy_seeds * 10^stages.
  std::size_t galaxy_seeds = 1000;
  int galaxy_stages = 3;
  double galaxy_inner = 6000.0;
  double galaxy_outer = 18000.0;
  double galaxy_shrink = 2.0 / 3.0;
  double galaxy_axis_ratio = 0.1;
};

std::vector<Source> generate(const GeneratorSpec& spec);

/// Point file: "FMM3", u64 count, then per point 3xf64 position and f64
/// mass, all little-endian.
void write_points(const std::string& path, std::span<const Source> points);
std::vector<Source> read_points(const std::string& path);

/// CSV with header x,y,z,mass; 17 significant digits, so doubles survive a
/// round trip exactly.
void write_points_csv(const std::string& path, std::span<const Source> points);
std::vector<Source> read_points_csv(const std::string& path);

} // namespace fmm
