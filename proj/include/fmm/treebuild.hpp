#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "fmm/geometry.hpp"
#include "fmm/transport.hpp"

namespace fmm {

struct TreeParams {
  double theta = 0.5;
  double eta = 0.5;
  int levels = 3;
};

/// One tree level: 8^(l-1) boxes, each owning a contiguous range of the
/// leaf-ordered point array. splits is empty on the last level.
struct TreeLevel {
  std::vector<Box> boxes;
  std::vector<BoxSplit> splits;
  std::vector<std::uint32_t> begin;
  std::vector<std::uint32_t> end;
};

/// Per-level connectivity in compressed-column form, symmetric, holding
/// Strong and Weak entries only. An absent pair is unconnected, which means
/// some ancestor pair was already weak.
struct LevelConnectivity {
  std::vector<std::uint32_t> col_ptr;
  std::vector<std::uint32_t> row;
  std::vector<Connection> val;

  std::size_t nnz() const { return row.size(); }
  Connection at(std::uint32_t i, std::uint32_t j) const;
};

/// Balanced octree over one rank's points. Every level keeps all 8^(l-1)
/// boxes; empty ones still get geometry and connectivity entries so that
/// box indices mean the same thing on every rank.
struct LocalTree {
  TreeParams params;
  std::vector<TreeLevel> levels; // levels[0] = root level
  std::vector<Source> points;    // leaf order; ties keep input order
  std::vector<LevelConnectivity> conn;

  const TreeLevel& leaf_level() const { return levels.back(); }
  int leaf_count() const { return static_cast<int>(levels.back().boxes.size()); }

  /// Leaf index found by walking the stored split planes. Works for any
  /// position, inside the root box or not.
  std::uint32_t leaf_of(Vec3 p) const;
};

LocalTree build_tree(std::vector<Source> sources, const Box& root, const TreeParams& params);

/// Unordered strong leaf pairs, self pairs excluded.
std::uint64_t near_pair_count(const LocalTree& tree);
/// Unordered weak pairs summed over all levels.
std::uint64_t far_pair_count(const LocalTree& tree);

inline constexpr std::uint32_t kHaloStage = 1;

enum class HaloWait { RankOrder, CompletionOrder };

/// Cross-rank connectivity toward one peer at one level. Candidate pairs are
/// the 8x8 children of each strong pair one level up; strong pairs sit in
/// [0, strong_count), weak pairs fill the tail back to front.
struct HaloLevel {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs; // (local box, peer box)
  std::size_t strong_count = 0;
  /// Peer candidate boxes in payload order (index ascending). Only the
  /// center and radius travel; half_widths stay zero.
  std::vector<std::pair<std::uint32_t, Box>> foreign;
};

struct HaloSet {
  /// by_rank[q][l-1] is the halo toward rank q at level l; by_rank[self] is empty.
  std::vector<std::vector<HaloLevel>> by_rank;

  const HaloLevel& at(int q, int level) const {
    return by_rank[static_cast<std::size_t>(q)][static_cast<std::size_t>(level - 1)];
  }
};

/// Collective root/children geometry exchange with every other rank.
/// Identical theta, eta and levels on every rank is a precondition; the
/// engine verifies it with a checksum handshake before building trees.
HaloSet build_halos(const LocalTree& tree, Endpoint& ep,
                    HaloWait mode = HaloWait::RankOrder);

} // namespace fmm
