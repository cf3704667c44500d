#include "fmm/datasets.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "fmm/wire.hpp"

namespace fmm {
namespace {

constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ull;
constexpr double kTwoPi = 6.283185307179586476925286766559;

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("datasets: cannot open " + path);
  in.seekg(0, std::ios::end);
  auto size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> data(static_cast<std::size_t>(size));
  in.read(reinterpret_cast<char*>(data.data()), size);
  if (!in) throw std::runtime_error("datasets: read failed: " + path);
  return data;
}

void spill(const std::string& path, const std::vector<std::uint8_t>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("datasets: cannot open " + path);
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("datasets: write failed: " + path);
}

Vec3 sample_cube(SplitMix& rng) {
  double x = rng.unit();
  double y = rng.unit();
  double z = rng.unit();
  return {x, y, z};
}

Vec3 sample_gaussian(SplitMix& rng, double sigma) {
  double x = sigma * rng.normal();
  double y = sigma * rng.normal();
  double z = sigma * rng.normal();
  return {x, y, z};
}

Vec3 sample_shell(SplitMix& rng, double radius, double jitter) {
  double z = rng.range(-1.0, 1.0);
  double phi = rng.range(0.0, kTwoPi);
  double r = radius + jitter * rng.range(-1.0, 1.0);
  double s = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * s * std::cos(phi), r * s * std::sin(phi), r * z};
}

Vec3 sample_helix(SplitMix& rng, const GeneratorSpec& spec) {
  double t = rng.unit();
  double ang = kTwoPi * spec.helix_turns * t;
  double c = std::cos(ang);
  double s = std::sin(ang);
  Vec3 base{spec.helix_radius * c, spec.helix_radius * s,
            spec.helix_height * (t - 0.5)};
  // Orthonormal frame normal to the curve tangent: n1 points radially
  // outward, b completes it; jitter is a uniform disk in that plane.
  double a = kTwoPi * spec.helix_turns * spec.helix_radius;
  double h = spec.helix_height;
  double inv = 1.0 / std::sqrt(a * a + h * h);
  Vec3 n1{c, s, 0.0};
  Vec3 b{-h * s * inv, h * c * inv, -a * inv};
  double rho = spec.helix_jitter * std::sqrt(rng.unit());
  double alpha = rng.range(0.0, kTwoPi);
  return base + rho * std::cos(alpha) * n1 + rho * std::sin(alpha) * b;
}

Vec3 sample_torus(SplitMix& rng, const GeneratorSpec& spec) {
  double ang = rng.range(0.0, kTwoPi);
  double rho = rng.range(spec.galaxy_inner, spec.galaxy_outer);
  double r0 = spec.galaxy_axis_ratio * spec.galaxy_outer / 20.0;
  return {rho * std::cos(ang), rho * std::sin(ang), r0 * rng.range(-1.0, 1.0)};
}

/// Uniform in the spheroid x^2/major^2 + y^2/major^2 + z^2/minor^2 <= 1.
Vec3 sample_spheroid(SplitMix& rng, double major, double minor) {
  double z = rng.range(-1.0, 1.0);
  double phi = rng.range(0.0, kTwoPi);
  double r = std::cbrt(rng.unit());
  double s = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {major * r * s * std::cos(phi), major * r * s * std::sin(phi),
          minor * r * z};
}

void expand_galaxy(SplitMix rng, Vec3 center, int stage, const GeneratorSpec& spec,
                   std::vector<Source>& out) {
  if (stage == spec.galaxy_stages) {
    out.push_back({center, 1.0, static_cast<std::int64_t>(out.size())});
    return;
  }
  double major = std::pow(spec.galaxy_shrink, stage) * spec.galaxy_outer / 20.0;
  double minor = spec.galaxy_axis_ratio * major;
  for (int d = 0; d < 10; ++d) {
    SplitMix child = rng.split();
    Vec3 off = sample_spheroid(child, major, minor);
    expand_galaxy(child, center + off, stage + 1, spec, out);
  }
}

std::vector<Source> generate_galaxy(const GeneratorSpec& spec) {
  if (spec.galaxy_seeds == 0 || spec.galaxy_stages < 0 || spec.galaxy_stages > 18)
    throw std::invalid_argument("datasets: bad galaxy parameters");
  std::uint64_t pow10 = 1;
  for (int i = 0; i < spec.galaxy_stages; ++i) pow10 *= 10;
  if (spec.galaxy_seeds > spec.n / pow10 || spec.galaxy_seeds * pow10 != spec.n)
    throw std::invalid_argument("datasets: galaxy needs n = seeds * 10^stages");
  std::vector<Source> out;
  out.reserve(spec.n);
  for (std::size_t i = 0; i < spec.galaxy_seeds; ++i) {
    SplitMix rng = SplitMix::at(spec.seed, i);
    Vec3 center = sample_torus(rng, spec);
    expand_galaxy(rng, center, 0, spec, out);
  }
  return out;
}

} // namespace

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::uint64_t SplitMix::next_u64() {
  state_ += kGamma;
  return mix64(state_);
}

double SplitMix::unit() { return double(next_u64() >> 11) * 0x1.0p-53; }

double SplitMix::range(double lo, double hi) { return lo + (hi - lo) * unit(); }

double SplitMix::normal() {
  double u = 1.0 - unit();
  double v = unit();
  return std::sqrt(-2.0 * std::log(u)) * std::cos(kTwoPi * v);
}

SplitMix SplitMix::split() { return SplitMix(next_u64()); }

SplitMix SplitMix::at(std::uint64_t seed, std::uint64_t index) {
  return SplitMix(mix64(seed + (index + 1) * kGamma));
}

PointKind parse_point_kind(const std::string& name) {
  if (name == "uniform-cube" || name == "uniform") return PointKind::UniformCube;
  if (name == "gaussian") return PointKind::Gaussian;
  if (name == "shell") return PointKind::Shell;
  if (name == "helix") return PointKind::Helix;
  if (name == "galaxy") return PointKind::Galaxy;
  throw std::invalid_argument("datasets: unknown kind: " + name);
}

const char* point_kind_name(PointKind kind) {
  switch (kind) {
    case PointKind::UniformCube: return "uniform-cube";
    case PointKind::Gaussian: return "gaussian";
    case PointKind::Shell: return "shell";
    case PointKind::Helix: return "helix";
    case PointKind::Galaxy: return "galaxy";
  }
  return "?";
}

std::vector<Source> generate(const GeneratorSpec& spec) {
  if (spec.n == 0) throw std::invalid_argument("datasets: n must be positive");
  if (spec.kind == PointKind::Galaxy) return generate_galaxy(spec);
  std::vector<Source> out;
  out.reserve(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    SplitMix rng = SplitMix::at(spec.seed, i);
    Vec3 p;
    switch (spec.kind) {
      case PointKind::UniformCube: p = sample_cube(rng); break;
      case PointKind::Gaussian: p = sample_gaussian(rng, spec.gauss_sigma); break;
      case PointKind::Shell: p = sample_shell(rng, spec.shell_radius, spec.shell_jitter); break;
      case PointKind::Helix: p = sample_helix(rng, spec); break;
      default: throw std::invalid_argument("datasets: unknown kind");
    }
    out.push_back({p, 1.0, static_cast<std::int64_t>(i)});
  }
  return out;
}

void write_points(const std::string& path, std::span<const Source> points) {
  std::vector<std::uint8_t> buf;
  buf.reserve(12 + 32 * points.size());
  buf.insert(buf.end(), {'F', 'M', 'M', '3'});
  wire::put_u64(buf, points.size());
  for (const auto& s : points) {
    wire::put_f64(buf, s.position.x);
    wire::put_f64(buf, s.position.y);
    wire::put_f64(buf, s.position.z);
    wire::put_f64(buf, s.mass);
  }
  spill(path, buf);
}

std::vector<Source> read_points(const std::string& path) {
  auto data = slurp(path);
  if (data.size() < 12 || data[0] != 'F' || data[1] != 'M' || data[2] != 'M' ||
      data[3] != '3')
    throw std::runtime_error("datasets: not a point file: " + path);
  wire::Reader r(data.data() + 4, data.size() - 4);
  std::uint64_t n = r.u64();
  if (r.remaining() != 32 * n)
    throw std::runtime_error("datasets: corrupt point file: " + path);
  std::vector<Source> out;
  out.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    double x = r.f64();
    double y = r.f64();
    double z = r.f64();
    double m = r.f64();
    out.push_back({{x, y, z}, m, static_cast<std::int64_t>(i)});
  }
  return out;
}

void write_points_csv(const std::string& path, std::span<const Source> points) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("datasets: cannot open " + path);
  out << "x,y,z,mass\n";
  char line[160];
  for (const auto& s : points) {
    std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g,%.17g\n", s.position.x,
                  s.position.y, s.position.z, s.mass);
    out << line;
  }
  if (!out) throw std::runtime_error("datasets: write failed: " + path);
}

std::vector<Source> read_points_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("datasets: cannot open " + path);
  std::vector<Source> out;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    double x, y, z, m;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &x, &y, &z, &m) != 4) {
      if (first) {
        first = false;
        continue;
      }
      throw std::runtime_error("datasets: bad csv row: " + line);
    }
    first = false;
    out.push_back({{x, y, z}, m, static_cast<std::int64_t>(out.size())});
  }
  return out;
}

} // namespace fmm
