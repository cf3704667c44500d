#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace fmm {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

inline Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(double s, Vec3 v) { return {s * v.x, s * v.y, s * v.z}; }
inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
double norm(Vec3 v);

/// Point mass. global_id identifies the source across rank boundaries and
/// fixes accumulation order wherever determinism requires one.
struct Source {
  Vec3 position;
  double mass = 0.0;
  std::int64_t global_id = 0;
};

/// Massless evaluation point.
struct TargetPoint {
  Vec3 position;
  std::int64_t global_id = 0;
};

/// Axis-aligned box. radius is the half-diagonal, kept consistent with
/// half_widths by make_box.
struct Box {
  Vec3 center;
  Vec3 half_widths;
  double radius = 0.0;
};

Box make_box(Vec3 center, Vec3 half_widths);

enum class Connection : std::uint8_t { Unconnected = 0, Strong = 1, Weak = 2 };

/// Separation test between two boxes: returns true when the pair is weak,
/// i.e. max(r1,r2) + theta*min(r1,r2) <= theta*d with d the center distance.
/// Coincident centers are never weak. theta must lie in (0,1).
bool theta_criterion(const Box& a, const Box& b, double theta);

/// Minimal axis-aligned bounding box of the sources, expanded on every side
/// by margin_rel times the largest extent. Degenerate axes get a floor of
/// 1e-12 times the box radius so half_widths stay positive.
Box bounding_box(std::span<const Source> sources, double margin_rel = 1e-6);

/// Center/half-width form of a 1D interval. Every box coordinate in the
/// library is produced through this one function so that identical interval
/// endpoints give bitwise identical boxes everywhere.
struct Interval {
  double center;
  double half;
};
Interval interval_box(double lo, double hi);

/// Split position for [lo,hi]: (1-eta)*midpoint + eta*median(coords),
/// clamped to the open interval. Empty coords fall back to the midpoint.
/// coords is scratch and gets reordered.
double split_plane(double lo, double hi, double eta, std::vector<double>& coords);

/// Nested x,y,z split of one box. Plane order is
/// [xp, yp0, yp1, zp00, zp01, zp10, zp11], where the suffix bits name the
/// branch (x bit first). Octant index = 4*(x>=xp) + 2*(y>=yp_x) + (z>=zp_xy).
struct BoxSplit {
  std::array<double, 7> planes;
};

BoxSplit compute_split(const Box& box, std::span<const Source> pts, double eta);
int split_octant(const BoxSplit& split, Vec3 p);
Box octant_box(const Box& parent, const BoxSplit& split, int octant);

enum class PartitionScheme { CubicGrid, RecursiveBisection };

/// Rank decomposition of a domain box. Keeps the split planes so that any
/// later point (external targets, other processes loading the same file) can
/// be routed to the identical rank.
struct Partition {
  PartitionScheme scheme = PartitionScheme::CubicGrid;
  int ranks = 1;
  Box domain;
  std::vector<Box> rank_boxes;                   // per-rank subdomain
  std::vector<double> bisection_planes;          // heap order, node 1 = root
  std::array<std::vector<double>, 3> grid_planes; // interior lattice planes per axis

  int route(Vec3 p) const;
};

/// Cuts `domain` into `ranks` subdomains. CubicGrid requires a perfect cube
/// and ignores the sources; a power-of-two side is cut by repeated midpoint
/// bisection, any other side by an even lattice. RecursiveBisection requires
/// a power of two and bisects with eta-weighted planes cycling x,y,z, the
/// median taken over the sources falling in each branch. Assignment is by
/// half-open containment: a point exactly on a plane goes to the upper side.
Partition make_partition(std::span<const Source> sources, const Box& domain, int ranks,
                         PartitionScheme scheme, double eta = 0.0);

/// Buckets sources by Partition::route. Input order is preserved per rank.
std::vector<std::vector<Source>> partition_sources(std::span<const Source> sources,
                                                   const Partition& part);

std::vector<std::vector<TargetPoint>> partition_targets(std::span<const TargetPoint> targets,
                                                        const Partition& part);

} // namespace fmm
