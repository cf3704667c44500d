#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fmm/geometry.hpp"
#include "fmm/transport.hpp"
#include "fmm/treebuild.hpp"

namespace fmm {

// Engine message stages; kHaloStage = 1 lives in treebuild.
inline constexpr std::uint32_t kChecksumStage = 2;
inline constexpr std::uint32_t kExpansionStage = 3;
inline constexpr std::uint32_t kPointStage = 4;
inline constexpr std::uint32_t kStatsStage = 5;

enum class M2lForm { Rotation, Direct };

struct FmmConfig {
  double theta = 0.5;
  double eta = 0.5;
  int levels = 3;
  double tol = 1e-6;
  int order = -1; // < 0 derives the order from tol
  double bound_constant = 1.0;
  int ranks = 1;
  PartitionScheme partition = PartitionScheme::CubicGrid;
  HaloWait halo_wait = HaloWait::RankOrder;
  M2lForm m2l = M2lForm::Rotation;
  double watchdog_seconds = 60.0;
};

enum class Stage { Alloc = 0, Tree, P2M, M2M, M2Lh, M2L, L2L, L2P, P2P };

inline constexpr std::array<const char*, 9> kStageNames = {
    "Alloc", "Tree", "P2M", "M2M", "M2Lh", "M2L", "L2L", "L2P", "P2P"};

struct StageIo {
  std::uint64_t messages_sent = 0;
  std::uint64_t bytes_sent = 0;
  std::uint64_t messages_received = 0;
  std::uint64_t bytes_received = 0;
};

struct StageTimes {
  double wall_seconds = 0.0;
  double cpu_seconds = 0.0; // thread CPU clock
  StageIo io;
};

struct LeafOccupancy {
  std::uint32_t min_points = 0;
  std::uint32_t max_points = 0;
  double mean_points = 0.0;
  std::uint64_t empty_leaves = 0;
  // log2_histogram[k] counts leaves holding [2^k, 2^(k+1)) points.
  std::vector<std::uint64_t> log2_histogram;
};

/// One rank's view of a run. near/far "local" pairs live inside the rank's
/// tree; "halo" pairs cross to a higher rank so that summing any field over
/// all ranks counts every pair exactly once. The "global" fields hold that
/// sum, agreed on by every rank before the run returns.
struct StageReport {
  int rank = 0;
  int ranks = 1;
  int order = 0;
  bool order_capped = false;
  double error_bound = 0.0;
  std::uint64_t local_sources = 0;
  std::uint64_t local_targets = 0;
  std::array<StageTimes, 9> stages;
  double total_wall_seconds = 0.0;
  StageIo total_io;
  std::uint64_t near_local = 0;
  std::uint64_t far_local = 0;
  std::uint64_t near_halo = 0;
  std::uint64_t far_halo = 0;
  std::uint64_t near_global = 0;
  std::uint64_t far_global = 0;
  std::uint64_t m2l_applied = 0; // directional box-pair translations
  std::uint64_t p2p_applied = 0; // directional leaf-pair interactions
  LeafOccupancy leaves;

  StageTimes& at(Stage s) { return stages[static_cast<std::size_t>(s)]; }
  const StageTimes& at(Stage s) const { return stages[static_cast<std::size_t>(s)]; }
};

using PotentialVector = std::vector<double>;

struct RunResult {
  std::vector<std::int64_t> source_ids; // leaf order
  PotentialVector source_phi;
  std::vector<std::int64_t> target_ids; // input order
  PotentialVector target_phi;
  StageReport report;
};

/// One collective FMM run; call once per rank. Each rank passes the sources
/// and targets routed to it plus its own subdomain box. The configuration
/// must agree across ranks; a checksum handshake verifies that before any
/// tree work starts.
RunResult run_distributed(std::vector<Source> sources, std::vector<TargetPoint> targets,
                          const Box& root_box, const FmmConfig& cfg, Endpoint& ep);

/// Single-rank run over a private in-memory endpoint. The root box is the
/// bounding box of the sources.
RunResult run_serial(std::vector<Source> sources, std::vector<TargetPoint> targets,
                     const FmmConfig& cfg);

/// Per-rank reports merged into one JSON document with fixed key names.
std::string reports_json(const std::vector<StageReport>& reports);

} // namespace fmm
