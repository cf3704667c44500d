#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fmm/direct.hpp"
#include "fmm/engine.hpp"

using namespace fmm;

namespace {

template <typename F>
void run_ranks(int ranks, F fn) {
  auto eps = make_memory_fabric(ranks, 20.0);
  std::vector<std::exception_ptr> errs(static_cast<size_t>(ranks));
  std::vector<std::thread> ts;
  for (int r = 0; r < ranks; ++r)
    ts.emplace_back([&, r] {
      try {
        fn(r, *eps[static_cast<size_t>(r)]);
      } catch (...) {
        errs[static_cast<size_t>(r)] = std::current_exception();
      }
    });
  for (auto& t : ts) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

std::vector<Source> random_sources(std::uint64_t seed, int n) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<double> um(0.5, 1.5);
  std::vector<Source> out;
  for (int i = 0; i < n; ++i) out.push_back({{u(rng), u(rng), u(rng)}, um(rng), i});
  return out;
}

std::vector<TargetPoint> random_targets(std::uint64_t seed, int n) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<TargetPoint> out;
  for (int i = 0; i < n; ++i) out.push_back({{u(rng), u(rng), u(rng)}, i});
  return out;
}

std::map<std::int64_t, double> by_id(const RunResult& r) {
  std::map<std::int64_t, double> out;
  for (size_t i = 0; i < r.source_ids.size(); ++i) out[r.source_ids[i]] = r.source_phi[i];
  return out;
}

/// Relative infinity-norm distance between a result keyed by id and a
/// reference vector indexed by id.
double rel_inf(const std::map<std::int64_t, double>& got, const std::vector<double>& ref) {
  REQUIRE(got.size() == ref.size());
  double num = 0.0, den = 0.0;
  for (const auto& [id, phi] : got) {
    num = std::max(num, std::abs(phi - ref[static_cast<size_t>(id)]));
    den = std::max(den, std::abs(ref[static_cast<size_t>(id)]));
  }
  return num / den;
}

} // namespace

TEST_SUITE_BEGIN("engine");

TEST_CASE("a single leaf run reproduces the direct sum bit for bit") {
  auto src = random_sources(101, 100);
  const auto ref = brute_force_self(src);
  FmmConfig cfg;
  cfg.levels = 1;
  RunResult r = run_serial(src, {}, cfg);
  REQUIRE(r.source_phi.size() == src.size());
  for (size_t i = 0; i < src.size(); ++i) {
    CHECK(r.source_ids[i] == src[i].global_id); // one box keeps input order
    CHECK(r.source_phi[i] == ref[i]);
  }
}

TEST_CASE("tiny exact cases") {
  FmmConfig cfg;
  cfg.levels = 1;
  SUBCASE("two unit masses at distance one") {
    std::vector<Source> src{{{0.25, 0.5, 0.5}, 1.0, 0}, {{0.75, 0.5, 0.5}, 1.0, 1}};
    RunResult r = run_serial(src, {}, cfg);
    CHECK(r.source_phi[0] == 2.0); // 1 / 0.5
    CHECK(r.source_phi[1] == 2.0);
  }
  SUBCASE("a lone source sums nothing") {
    std::vector<Source> src{{{0.5, 0.5, 0.5}, 3.0, 0}};
    RunResult r = run_serial(src, {}, cfg);
    CHECK(r.source_phi[0] == 0.0);
  }
}

TEST_CASE("defaults meet the precision bound on a thousand points") {
  auto src = random_sources(42, 1000);
  const auto ref = brute_force_self(src);
  RunResult r = run_serial(src, {}, FmmConfig{});
  CHECK(rel_inf(by_id(r), ref) <= 1e-5);
  CHECK(r.report.order == 21);
  CHECK(r.report.near_global > 0);
  CHECK(r.report.far_global > 0);
}

TEST_CASE("external targets ride along as massless points") {
  auto src = random_sources(7, 400);
  auto tgt = random_targets(8, 50);
  const auto ref = brute_force_at(src, tgt);
  RunResult r = run_serial(src, tgt, FmmConfig{});
  REQUIRE(r.target_phi.size() == tgt.size());
  double num = 0.0, den = 0.0;
  for (size_t t = 0; t < tgt.size(); ++t) {
    CHECK(r.target_ids[t] == tgt[t].global_id);
    num = std::max(num, std::abs(r.target_phi[t] - ref[t]));
    den = std::max(den, std::abs(ref[t]));
  }
  CHECK(num / den <= 1e-5);
}

TEST_CASE("a one-rank endpoint matches run_serial bitwise") {
  auto src = random_sources(11, 300);
  auto tgt = random_targets(12, 30);
  FmmConfig cfg;
  cfg.tol = 1e-4;
  RunResult serial = run_serial(src, tgt, cfg);
  RunResult dist;
  run_ranks(1, [&](int, Endpoint& ep) {
    dist = run_distributed(src, tgt, bounding_box(src), cfg, ep);
  });
  REQUIRE(dist.source_phi.size() == serial.source_phi.size());
  for (size_t i = 0; i < serial.source_phi.size(); ++i)
    CHECK(dist.source_phi[i] == serial.source_phi[i]);
  for (size_t t = 0; t < serial.target_phi.size(); ++t)
    CHECK(dist.target_phi[t] == serial.target_phi[t]);
}

TEST_CASE("eight ranks match the serial run to reassociation error") {
  auto src = random_sources(23, 2000);
  FmmConfig serial_cfg;
  serial_cfg.eta = 0.0;
  serial_cfg.levels = 3;
  RunResult serial = run_serial(src, {}, serial_cfg);
  const auto serial_phi = by_id(serial);

  const Box domain = bounding_box(src);
  const Partition part = make_partition(src, domain, 8, PartitionScheme::CubicGrid);
  auto rank_src = partition_sources(src, part);

  FmmConfig cfg;
  cfg.eta = 0.0;
  cfg.levels = 2;
  cfg.ranks = 8;
  std::vector<RunResult> res(8);
  run_ranks(8, [&](int r, Endpoint& ep) {
    res[static_cast<size_t>(r)] = run_distributed(rank_src[static_cast<size_t>(r)], {},
                                                  part.rank_boxes[static_cast<size_t>(r)], cfg, ep);
  });

  std::map<std::int64_t, double> merged;
  for (const RunResult& r : res)
    for (size_t i = 0; i < r.source_ids.size(); ++i) merged[r.source_ids[i]] = r.source_phi[i];
  REQUIRE(merged.size() == src.size());

  double num = 0.0, den = 0.0;
  for (const auto& [id, phi] : merged) {
    num = std::max(num, std::abs(phi - serial_phi.at(id)));
    den = std::max(den, std::abs(serial_phi.at(id)));
  }
  CHECK(num / den <= 1e-12);

  // every rank agreed on the global pair counts
  for (const RunResult& r : res) {
    CHECK(r.report.near_global == res[0].report.near_global);
    CHECK(r.report.far_global == res[0].report.far_global);
  }
}

TEST_CASE("memory and socket fabrics produce identical potentials") {
  auto src = random_sources(31, 1200);
  const Box domain = bounding_box(src);
  const Partition part = make_partition(src, domain, 8, PartitionScheme::CubicGrid);
  auto rank_src = partition_sources(src, part);

  FmmConfig cfg;
  cfg.tol = 1e-3;
  cfg.levels = 2;
  cfg.ranks = 8;

  std::vector<RunResult> mem(8), tcp(8);
  run_ranks(8, [&](int r, Endpoint& ep) {
    mem[static_cast<size_t>(r)] = run_distributed(rank_src[static_cast<size_t>(r)], {},
                                                  part.rank_boxes[static_cast<size_t>(r)], cfg, ep);
  });
  {
    auto eps = make_tcp_local_fabric(8, 20.0);
    std::vector<std::exception_ptr> errs(8);
    std::vector<std::thread> ts;
    for (int r = 0; r < 8; ++r)
      ts.emplace_back([&, r] {
        try {
          tcp[static_cast<size_t>(r)] =
              run_distributed(rank_src[static_cast<size_t>(r)], {},
                              part.rank_boxes[static_cast<size_t>(r)], cfg, *eps[static_cast<size_t>(r)]);
        } catch (...) {
          errs[static_cast<size_t>(r)] = std::current_exception();
        }
      });
    for (auto& t : ts) t.join();
    for (auto& e : errs)
      if (e) std::rethrow_exception(e);
  }
  for (int r = 0; r < 8; ++r) {
    const RunResult& a = mem[static_cast<size_t>(r)];
    const RunResult& b = tcp[static_cast<size_t>(r)];
    REQUIRE(a.source_ids == b.source_ids);
    CHECK(a.source_phi == b.source_phi);
  }
}

TEST_CASE("halo wait modes and repeated runs do not change a bit") {
  auto src = random_sources(57, 900);
  const Box domain = bounding_box(src);
  const Partition part = make_partition(src, domain, 8, PartitionScheme::CubicGrid);
  auto rank_src = partition_sources(src, part);

  std::vector<std::vector<double>> runs;
  for (int pass = 0; pass < 3; ++pass) {
    FmmConfig cfg;
    cfg.tol = 1e-3;
    cfg.levels = 2;
    cfg.ranks = 8;
    cfg.halo_wait = pass == 1 ? HaloWait::CompletionOrder : HaloWait::RankOrder;
    std::vector<RunResult> res(8);
    run_ranks(8, [&](int r, Endpoint& ep) {
      res[static_cast<size_t>(r)] = run_distributed(
          rank_src[static_cast<size_t>(r)], {}, part.rank_boxes[static_cast<size_t>(r)], cfg, ep);
    });
    std::vector<double> flat;
    for (const RunResult& r : res)
      flat.insert(flat.end(), r.source_phi.begin(), r.source_phi.end());
    runs.push_back(std::move(flat));
  }
  CHECK(runs[0] == runs[1]);
  CHECK(runs[0] == runs[2]);
}

TEST_CASE("the stage report accounts for every pair and every leaf") {
  const int n = 1600;
  auto src = random_sources(77, n);
  const Box domain = bounding_box(src);
  const Partition part = make_partition(src, domain, 8, PartitionScheme::CubicGrid);
  auto rank_src = partition_sources(src, part);

  FmmConfig cfg;
  cfg.tol = 1e-3;
  cfg.levels = 2;
  cfg.ranks = 8;
  std::vector<RunResult> res(8);
  run_ranks(8, [&](int r, Endpoint& ep) {
    res[static_cast<size_t>(r)] = run_distributed(rank_src[static_cast<size_t>(r)], {},
                                                  part.rank_boxes[static_cast<size_t>(r)], cfg, ep);
  });

  std::uint64_t near_sum = 0, far_sum = 0, m2l_sum = 0, p2p_sum = 0;
  std::uint64_t nonempty_leaves = 0, sources_sum = 0;
  for (const RunResult& r : res) {
    const StageReport& rep = r.report;
    near_sum += rep.near_local + rep.near_halo;
    far_sum += rep.far_local + rep.far_halo;
    m2l_sum += rep.m2l_applied;
    p2p_sum += rep.p2p_applied;
    sources_sum += rep.local_sources;

    std::uint64_t hist = 0;
    for (std::uint64_t c : rep.leaves.log2_histogram) hist += c;
    CHECK(hist + rep.leaves.empty_leaves == 8); // 8^(levels-1) leaves
    nonempty_leaves += hist;
    CHECK(rep.leaves.mean_points == doctest::Approx(double(rep.local_sources) / 8.0));

    if (rep.ranks > 1) CHECK(rep.total_io.messages_sent > 0);
    CHECK(rep.at(Stage::Tree).io.messages_sent > 0); // halo exchange
  }
  CHECK(sources_sum == static_cast<std::uint64_t>(n));
  CHECK(near_sum == res[0].report.near_global);
  CHECK(far_sum == res[0].report.far_global);

  // Newton bookkeeping: with every box occupied, each unordered far pair is
  // shifted twice (once per direction) and each unordered near pair hit
  // twice, plus one self interaction per nonempty leaf.
  CHECK(m2l_sum == 2 * far_sum);
  CHECK(p2p_sum == 2 * near_sum + nonempty_leaves);

  // the JSON view keeps the fixed stage keys and one entry per rank
  std::vector<StageReport> reports;
  for (const RunResult& r : res) reports.push_back(r.report);
  const nlohmann::json j = nlohmann::json::parse(reports_json(reports));
  CHECK(j["stages"].size() == 9);
  for (const char* name : kStageNames) {
    REQUIRE(j["stages"].contains(name));
    CHECK(j["stages"][name]["wall_seconds"].size() == 8);
  }
  CHECK(j["N_near"].get<std::uint64_t>() == near_sum);
  CHECK(j["N_far"].get<std::uint64_t>() == far_sum);
  CHECK(j["per_rank"].size() == 8);
}

TEST_CASE("mismatched configurations abort the run") {
  auto src = random_sources(91, 64);
  const Box domain = bounding_box(src);
  const Partition part = make_partition(src, domain, 2, PartitionScheme::RecursiveBisection);
  auto rank_src = partition_sources(src, part);
  std::vector<char> refused(2, 0);
  run_ranks(2, [&](int r, Endpoint& ep) {
    FmmConfig cfg;
    cfg.ranks = 2;
    cfg.theta = r == 0 ? 0.5 : 0.6;
    try {
      run_distributed(rank_src[static_cast<size_t>(r)], {}, part.rank_boxes[static_cast<size_t>(r)],
                      cfg, ep);
    } catch (const std::runtime_error& e) {
      refused[static_cast<size_t>(r)] = std::string(e.what()) == "rank config mismatch";
    }
  });
  CHECK(refused[0]);
  CHECK(refused[1]);
}

TEST_CASE("bad configurations are rejected up front") {
  auto src = random_sources(5, 10);
  FmmConfig cfg;
  SUBCASE("rank count must match the endpoint") {
    cfg.ranks = 2;
    CHECK_THROWS_AS(run_serial(src, {}, cfg), std::invalid_argument);
  }
  SUBCASE("theta outside (0,1)") {
    cfg.theta = 1.0;
    CHECK_THROWS_AS(run_serial(src, {}, cfg), std::invalid_argument);
  }
  SUBCASE("eta outside [0,1]") {
    cfg.eta = -0.1;
    CHECK_THROWS_AS(run_serial(src, {}, cfg), std::invalid_argument);
  }
  SUBCASE("levels out of range") {
    cfg.levels = 0;
    CHECK_THROWS_AS(run_serial(src, {}, cfg), std::invalid_argument);
  }
  SUBCASE("order beyond the supported maximum") {
    cfg.order = 200;
    CHECK_THROWS_AS(run_serial(src, {}, cfg), std::invalid_argument);
  }
  SUBCASE("an explicit order is honored") {
    cfg.order = 8;
    RunResult r = run_serial(src, {}, cfg);
    CHECK(r.report.order == 8);
    CHECK_FALSE(r.report.order_capped);
    CHECK(r.report.error_bound > 0.0);
  }
}

TEST_CASE("direct translation form agrees with rotation to roundoff") {
  auto src = random_sources(13, 500);
  FmmConfig rot;
  rot.tol = 1e-4;
  FmmConfig dir = rot;
  dir.m2l = M2lForm::Direct;
  RunResult a = run_serial(src, {}, rot);
  RunResult b = run_serial(src, {}, dir);
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.source_phi.size(); ++i) {
    num = std::max(num, std::abs(a.source_phi[i] - b.source_phi[i]));
    den = std::max(den, std::abs(a.source_phi[i]));
  }
  CHECK(num / den <= 1e-12);
}

TEST_SUITE_END();
