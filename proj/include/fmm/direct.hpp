#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fmm/geometry.hpp"

namespace fmm {

/// O(N^2) reference: potential at every source position, the point's own
/// contribution excluded.
std::vector<double> brute_force_self(std::span<const Source> sources);

/// O(N*M) reference: potential of the sources at external points.
std::vector<double> brute_force_at(std::span<const Source> sources,
                                   std::span<const TargetPoint> targets);

/// Structure-of-arrays point block for the near-field kernel. Foreign points
/// arrive over the wire without ids and get id -1.
struct PackedPoints {
  std::vector<double> x, y, z, m;
  std::vector<std::int64_t> id;

  std::size_t size() const { return x.size(); }
  void append(const Source& s);
  void append_anonymous(Vec3 p, double mass);
  void clear();
};

/// Target id meaning "exclude nothing": distinct from every real id and from
/// the anonymous marker.
inline constexpr std::int64_t kNoExclusion = std::numeric_limits<std::int64_t>::min();

/// Potential at t from src[b,e). Pass one fills w (caller scratch, at least
/// e-b entries) with the elementwise kernel, pass two folds in index order,
/// so the addition sequence is fixed. A zero-distance pair is skipped when
/// the ids match and reported otherwise.
double p2p_range(Vec3 t, std::int64_t tid, const PackedPoints& src, std::uint32_t b,
                 std::uint32_t e, double* w);

/// p2p_range for evaluation points that are never in src (foreign blocks):
/// no exclusion, a four-lane fold instead of the plain one, and any zero
/// distance is an error. tid only labels that error.
double p2p_range_nx(Vec3 t, std::int64_t tid, const PackedPoints& src, std::uint32_t b,
                    std::uint32_t e, double* w);

/// Mutual sweep over one block of points: every unordered pair between
/// [ab,ae) and [bb,be) contributes to phi on both sides, the shared distance
/// computed once. Pass the same range twice for the within-box triangle.
/// phi is indexed like pts, w needs be-bb entries. Zero distance between
/// distinct points is an error.
void p2p_mutual(const PackedPoints& pts, std::uint32_t ab, std::uint32_t ae, std::uint32_t bb,
                std::uint32_t be, double* phi, double* w);

/// Potential file: "FMMP", u64 count, then one f64 per point in global id
/// order, little-endian.
void write_potentials(const std::string& path, std::span<const double> phi);
std::vector<double> read_potentials(const std::string& path);

} // namespace fmm
