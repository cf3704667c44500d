#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "fmm/datasets.hpp"
#include "fmm/direct.hpp"
#include "fmm/engine.hpp"
#include "fmm/geometry.hpp"
#include "fmm/transport.hpp"
#include "fmm/treebuild.hpp"
#include "fmm/wire.hpp"

using namespace fmm;
using nlohmann::json;

namespace {

// Stage tag reserved for the CLI-side gather of potentials and reports after
// a multi-process run; the engine stops at kStatsStage.
constexpr std::uint32_t kGatherStage = 6;
constexpr double kWatchdog = 600.0;

struct Opts {
  std::string dist = "uniform-cube";
  std::uint64_t n = 100000;
  std::uint64_t seed = 1;
  double theta = 0.5;
  double eta = 0.5;
  int levels = 3;
  double tol = 1e-6;
  int order = -1;
  int p = 1;
  std::string backend; // empty = FMM_BACKEND env, then "memory"
  std::string partition = "cubic";
  std::string m2l = "rotation";
  std::string halo_wait = "rank";
  int repeats = 4;
  bool check_oracle = false;
  std::string points_file;
  std::string targets_file;
  std::string out;
  std::string report;
  int rank = -1; // >= 0 joins a roster as one process of a tcp run
  std::string roster;
  std::uint64_t galaxy_seeds = 1000;
  int galaxy_stages = 3;
  int kmax = 12;
  std::string param = "all";
  std::vector<double> etas{0.0, 0.25, 0.5, 0.75, 1.0};
  bool csv = false;
};

std::string backend_of(const Opts& o) {
  std::string b = o.backend;
  if (b.empty()) {
    const char* env = std::getenv("FMM_BACKEND");
    b = env ? env : "memory";
  }
  if (b != "memory" && b != "tcp")
    throw std::invalid_argument("cli: unknown backend: " + b);
  return b;
}

FmmConfig config_of(const Opts& o) {
  FmmConfig cfg;
  cfg.theta = o.theta;
  cfg.eta = o.eta;
  cfg.levels = o.levels;
  cfg.tol = o.tol;
  cfg.order = o.order;
  cfg.ranks = o.p;
  if (o.partition == "cubic")
    cfg.partition = PartitionScheme::CubicGrid;
  else if (o.partition == "orb")
    cfg.partition = PartitionScheme::RecursiveBisection;
  else
    throw std::invalid_argument("cli: unknown partition: " + o.partition);
  if (o.halo_wait == "rank")
    cfg.halo_wait = HaloWait::RankOrder;
  else if (o.halo_wait == "any")
    cfg.halo_wait = HaloWait::CompletionOrder;
  else
    throw std::invalid_argument("cli: unknown halo-wait: " + o.halo_wait);
  if (o.m2l == "rotation")
    cfg.m2l = M2lForm::Rotation;
  else if (o.m2l == "direct")
    cfg.m2l = M2lForm::Direct;
  else
    throw std::invalid_argument("cli: unknown m2l form: " + o.m2l);
  cfg.watchdog_seconds = kWatchdog;
  return cfg;
}

bool ends_with(const std::string& s, const std::string& tail) {
  return s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
}

std::vector<Source> load_sources(const Opts& o) {
  if (!o.points_file.empty())
    return ends_with(o.points_file, ".csv") ? read_points_csv(o.points_file)
                                            : read_points(o.points_file);
  GeneratorSpec spec;
  spec.kind = parse_point_kind(o.dist);
  spec.n = o.n;
  spec.seed = o.seed;
  spec.galaxy_seeds = o.galaxy_seeds;
  spec.galaxy_stages = o.galaxy_stages;
  return generate(spec);
}

std::vector<TargetPoint> load_targets(const Opts& o) {
  std::vector<TargetPoint> targets;
  if (o.targets_file.empty()) return targets;
  auto pts = ends_with(o.targets_file, ".csv") ? read_points_csv(o.targets_file)
                                               : read_points(o.targets_file);
  targets.reserve(pts.size());
  for (const auto& s : pts) targets.push_back({s.position, s.global_id});
  return targets;
}

double rel_inf(std::span<const double> got, std::span<const double> ref) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    num = std::max(num, std::abs(got[i] - ref[i]));
    den = std::max(den, std::abs(ref[i]));
  }
  return den > 0.0 ? num / den : num;
}

/// In-process multi-rank run: one thread per rank over an in-memory or
/// loopback-socket fabric. p = 1 short-circuits to the serial path.
std::vector<RunResult> run_local(std::vector<Source> sources, std::vector<TargetPoint> targets,
                                 const FmmConfig& cfg, const std::string& backend) {
  const int P = cfg.ranks;
  if (P == 1) return {run_serial(std::move(sources), std::move(targets), cfg)};
  auto eps = backend == "tcp" ? make_tcp_local_fabric(P, cfg.watchdog_seconds)
                              : make_memory_fabric(P, cfg.watchdog_seconds);
  Box domain = bounding_box(sources);
  Partition part = make_partition(sources, domain, P, cfg.partition, cfg.eta);
  auto src = partition_sources(sources, part);
  auto tgt = partition_targets(targets, part);
  std::vector<RunResult> out(static_cast<std::size_t>(P));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(P));
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(P));
  for (int r = 0; r < P; ++r)
    threads.emplace_back([&, r] {
      try {
        out[r] = run_distributed(std::move(src[r]), std::move(tgt[r]), part.rank_boxes[r],
                                 cfg, *eps[r]);
      } catch (...) {
        errors[r] = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::vector<double> merge_ids(const std::vector<RunResult>& results, bool use_targets,
                              std::size_t total) {
  std::vector<double> phi(total, 0.0);
  std::vector<char> seen(total, 0);
  for (const auto& r : results) {
    const auto& ids = use_targets ? r.target_ids : r.source_ids;
    const auto& val = use_targets ? r.target_phi : r.source_phi;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto id = ids[i];
      if (id < 0 || std::size_t(id) >= total || seen[std::size_t(id)])
        throw std::runtime_error("cli: potential merge mismatch");
      seen[std::size_t(id)] = 1;
      phi[std::size_t(id)] = val[i];
    }
  }
  for (char s : seen)
    if (!s) throw std::runtime_error("cli: potential merge left holes");
  return phi;
}

double max_total_wall(const std::vector<StageReport>& reps) {
  double w = 0.0;
  for (const auto& r : reps) w = std::max(w, r.total_wall_seconds);
  return w;
}

void print_stage_table(const std::vector<StageReport>& reps) {
  std::printf("%-6s %10s %10s %10s %12s %10s %12s\n", "stage", "wall_s", "cpu_s",
              "sent_msgs", "sent_bytes", "recv_msgs", "recv_bytes");
  for (std::size_t s = 0; s < kStageNames.size(); ++s) {
    double wall = 0.0, cpu = 0.0;
    std::uint64_t sm = 0, sb = 0, rm = 0, rb = 0;
    for (const auto& r : reps) {
      wall = std::max(wall, r.stages[s].wall_seconds);
      cpu += r.stages[s].cpu_seconds;
      sm += r.stages[s].io.messages_sent;
      sb += r.stages[s].io.bytes_sent;
      rm += r.stages[s].io.messages_received;
      rb += r.stages[s].io.bytes_received;
    }
    std::printf("%-6s %10.4f %10.4f %10llu %12llu %10llu %12llu\n", kStageNames[s], wall,
                cpu, (unsigned long long)sm, (unsigned long long)sb, (unsigned long long)rm,
                (unsigned long long)rb);
  }
}

void write_report_file(const std::string& path, const std::vector<StageReport>& reps) {
  if (path.empty()) return;
  std::string doc = reports_json(reps);
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cli: cannot open " + path);
  std::fwrite(doc.data(), 1, doc.size(), f);
  std::fclose(f);
}

void write_json_file(const std::string& path, const json& j) {
  if (path.empty()) return;
  std::string doc = j.dump(2);
  doc.push_back('\n');
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cli: cannot open " + path);
  std::fwrite(doc.data(), 1, doc.size(), f);
  std::fclose(f);
}

json run_summary(const Opts& o, const std::string& backend, std::size_t n,
                 const std::vector<StageReport>& reps) {
  const StageReport& r0 = reps.front();
  json j;
  j["dist"] = o.points_file.empty() ? o.dist : o.points_file;
  j["n"] = n;
  j["seed"] = o.seed;
  j["theta"] = o.theta;
  j["eta"] = o.eta;
  j["levels"] = o.levels;
  j["tol"] = o.tol;
  j["p"] = o.p;
  j["backend"] = backend;
  j["partition"] = o.partition;
  j["m2l"] = o.m2l;
  j["halo_wait"] = o.halo_wait;
  j["order"] = r0.order;
  j["order_capped"] = r0.order_capped;
  j["error_bound"] = r0.error_bound;
  j["near"] = r0.near_global;
  j["far"] = r0.far_global;
  j["total_wall_seconds"] = max_total_wall(reps);
  return j;
}

// ---- connection counting without expansions ------------------------------

struct PairCounts {
  std::uint64_t near = 0;
  std::uint64_t far = 0;
};

/// Global near/far pair totals for the given rank count: per-rank tree pairs
/// plus cross-rank halo pairs, each cross pair counted on its lower rank.
PairCounts count_connections(const std::vector<Source>& sources, int ranks, double theta,
                             double eta, int levels, PartitionScheme scheme) {
  Box domain = bounding_box(sources);
  Partition part = make_partition(sources, domain, ranks, scheme, eta);
  auto src = partition_sources(sources, part);
  auto eps = make_memory_fabric(ranks, kWatchdog);
  std::vector<PairCounts> per(static_cast<std::size_t>(ranks));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(ranks));
  std::vector<std::thread> threads;
  TreeParams params{theta, eta, levels};
  for (int r = 0; r < ranks; ++r)
    threads.emplace_back([&, r] {
      try {
        LocalTree tree = build_tree(std::move(src[r]), part.rank_boxes[r], params);
        PairCounts c{near_pair_count(tree), far_pair_count(tree)};
        if (ranks > 1) {
          HaloSet halos = build_halos(tree, *eps[r]);
          for (int q = r + 1; q < ranks; ++q)
            for (int l = 1; l <= levels; ++l) {
              const HaloLevel& h = halos.at(q, l);
              if (l == levels) c.near += h.strong_count;
              c.far += h.pairs.size() - h.strong_count;
            }
        }
        per[r] = c;
      } catch (...) {
        errors[r] = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  PairCounts total;
  for (const auto& c : per) {
    total.near += c.near;
    total.far += c.far;
  }
  return total;
}

// ---- multi-process tcp gather --------------------------------------------

Payload pack_potentials(const std::vector<std::int64_t>& ids, const std::vector<double>& phi) {
  Payload pl;
  wire::put_u64(pl, ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    wire::put_i64(pl, ids[i]);
    wire::put_f64(pl, phi[i]);
  }
  return pl;
}

void unpack_potentials(wire::Reader& r, std::vector<double>& phi, std::vector<char>& seen) {
  std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::int64_t id = r.i64();
    double v = r.f64();
    if (id < 0 || std::size_t(id) >= phi.size() || seen[std::size_t(id)])
      throw std::runtime_error("cli: potential merge mismatch");
    seen[std::size_t(id)] = 1;
    phi[std::size_t(id)] = v;
  }
}

Payload pack_report(const StageReport& r) {
  Payload pl;
  wire::put_u32(pl, static_cast<std::uint32_t>(r.rank));
  wire::put_u32(pl, static_cast<std::uint32_t>(r.ranks));
  wire::put_u32(pl, static_cast<std::uint32_t>(r.order));
  wire::put_u32(pl, r.order_capped ? 1 : 0);
  wire::put_f64(pl, r.error_bound);
  wire::put_u64(pl, r.local_sources);
  wire::put_u64(pl, r.local_targets);
  for (const auto& s : r.stages) {
    wire::put_f64(pl, s.wall_seconds);
    wire::put_f64(pl, s.cpu_seconds);
    wire::put_u64(pl, s.io.messages_sent);
    wire::put_u64(pl, s.io.bytes_sent);
    wire::put_u64(pl, s.io.messages_received);
    wire::put_u64(pl, s.io.bytes_received);
  }
  wire::put_f64(pl, r.total_wall_seconds);
  wire::put_u64(pl, r.total_io.messages_sent);
  wire::put_u64(pl, r.total_io.bytes_sent);
  wire::put_u64(pl, r.total_io.messages_received);
  wire::put_u64(pl, r.total_io.bytes_received);
  wire::put_u64(pl, r.near_local);
  wire::put_u64(pl, r.far_local);
  wire::put_u64(pl, r.near_halo);
  wire::put_u64(pl, r.far_halo);
  wire::put_u64(pl, r.near_global);
  wire::put_u64(pl, r.far_global);
  wire::put_u64(pl, r.m2l_applied);
  wire::put_u64(pl, r.p2p_applied);
  wire::put_u32(pl, r.leaves.min_points);
  wire::put_u32(pl, r.leaves.max_points);
  wire::put_f64(pl, r.leaves.mean_points);
  wire::put_u64(pl, r.leaves.empty_leaves);
  wire::put_u64(pl, r.leaves.log2_histogram.size());
  for (auto h : r.leaves.log2_histogram) wire::put_u64(pl, h);
  return pl;
}

StageReport unpack_report(wire::Reader& r) {
  StageReport out;
  out.rank = static_cast<int>(r.u32());
  out.ranks = static_cast<int>(r.u32());
  out.order = static_cast<int>(r.u32());
  out.order_capped = r.u32() != 0;
  out.error_bound = r.f64();
  out.local_sources = r.u64();
  out.local_targets = r.u64();
  for (auto& s : out.stages) {
    s.wall_seconds = r.f64();
    s.cpu_seconds = r.f64();
    s.io.messages_sent = r.u64();
    s.io.bytes_sent = r.u64();
    s.io.messages_received = r.u64();
    s.io.bytes_received = r.u64();
  }
  out.total_wall_seconds = r.f64();
  out.total_io.messages_sent = r.u64();
  out.total_io.bytes_sent = r.u64();
  out.total_io.messages_received = r.u64();
  out.total_io.bytes_received = r.u64();
  out.near_local = r.u64();
  out.far_local = r.u64();
  out.near_halo = r.u64();
  out.far_halo = r.u64();
  out.near_global = r.u64();
  out.far_global = r.u64();
  out.m2l_applied = r.u64();
  out.p2p_applied = r.u64();
  out.leaves.min_points = r.u32();
  out.leaves.max_points = r.u32();
  out.leaves.mean_points = r.f64();
  out.leaves.empty_leaves = r.u64();
  std::uint64_t hn = r.u64();
  out.leaves.log2_histogram.resize(hn);
  for (auto& h : out.leaves.log2_histogram) h = r.u64();
  return out;
}

// ---- subcommands ----------------------------------------------------------

int finish_eval(const Opts& o, const std::string& backend,
                const std::vector<StageReport>& reps, const std::vector<double>& phi,
                const std::vector<double>& tphi, const std::vector<Source>& sources,
                const std::vector<TargetPoint>& targets) {
  print_stage_table(reps);
  const StageReport& r0 = reps.front();
  std::printf("order=%d%s bound=%.3e near=%llu far=%llu total_wall=%.4f s\n", r0.order,
              r0.order_capped ? " (capped)" : "", r0.error_bound,
              (unsigned long long)r0.near_global, (unsigned long long)r0.far_global,
              max_total_wall(reps));

  if (!o.out.empty()) {
    write_potentials(o.out, phi);
    std::printf("wrote %zu potentials: %s\n", phi.size(), o.out.c_str());
    if (!tphi.empty()) {
      write_potentials(o.out + ".targets", tphi);
      std::printf("wrote %zu target potentials: %s.targets\n", tphi.size(), o.out.c_str());
    }
  }
  write_report_file(o.report, reps);

  json j = run_summary(o, backend, sources.size(), reps);
  int exit_code = 0;
  if (o.check_oracle) {
    if (sources.size() > 50000)
      throw std::invalid_argument("cli: --check-oracle is limited to 50000 points");
    auto ref = brute_force_self(sources);
    double err = rel_inf(phi, ref);
    double gate = 10.0 * o.tol;
    j["oracle_rel_err"] = err;
    std::printf("oracle_rel_err=%.3e gate=%.3e %s\n", err, gate, err <= gate ? "ok" : "FAIL");
    if (err > gate) exit_code = 2;
    if (!targets.empty()) {
      auto tref = brute_force_at(sources, targets);
      double terr = rel_inf(tphi, tref);
      j["oracle_target_rel_err"] = terr;
      std::printf("oracle_target_rel_err=%.3e %s\n", terr, terr <= gate ? "ok" : "FAIL");
      if (terr > gate) exit_code = 2;
    }
  }
  std::printf("report: %s\n", j.dump().c_str());
  return exit_code;
}

int cmd_eval_tcp_rank(const Opts& o) {
  auto roster = load_roster(o.roster);
  const int P = static_cast<int>(roster.size());
  if (P < 1) throw std::invalid_argument("cli: empty roster");
  if (o.rank < 0 || o.rank >= P) throw std::invalid_argument("cli: --rank outside roster");
  if (o.p != 1 && o.p != P)
    throw std::invalid_argument("cli: --p disagrees with the roster size");

  Opts eff = o;
  eff.p = P;
  FmmConfig cfg = config_of(eff);
  auto sources = load_sources(o);
  auto targets = load_targets(o);

  auto ep = make_tcp_endpoint(roster, o.rank, kWatchdog);
  Box domain = bounding_box(sources);
  Partition part = make_partition(sources, domain, P, cfg.partition, cfg.eta);
  auto src = partition_sources(sources, part);
  auto tgt = partition_targets(targets, part);
  RunResult res = run_distributed(std::move(src[o.rank]), std::move(tgt[o.rank]),
                                  part.rank_boxes[o.rank], cfg, *ep);

  const Tag tag_src{kGatherStage, 0, 0};
  const Tag tag_tgt{kGatherStage, 0, 1};
  const Tag tag_rep{kGatherStage, 0, 2};
  int exit_code = 0;
  if (o.rank != 0) {
    ep->send_nb(0, tag_src, pack_potentials(res.source_ids, res.source_phi));
    ep->send_nb(0, tag_tgt, pack_potentials(res.target_ids, res.target_phi));
    ep->send_nb(0, tag_rep, pack_report(res.report));
    std::printf("rank %d done: %llu sources, wall %.4f s\n", o.rank,
                (unsigned long long)res.report.local_sources, res.report.total_wall_seconds);
  } else {
    std::vector<double> phi(sources.size(), 0.0), tphi(targets.size(), 0.0);
    std::vector<char> seen(sources.size(), 0), tseen(targets.size(), 0);
    {
      Payload own = pack_potentials(res.source_ids, res.source_phi);
      wire::Reader r(own);
      unpack_potentials(r, phi, seen);
      Payload town = pack_potentials(res.target_ids, res.target_phi);
      wire::Reader tr(town);
      unpack_potentials(tr, tphi, tseen);
    }
    std::vector<StageReport> reps{res.report};
    for (int q = 1; q < P; ++q) {
      RecvHandle hs = ep->recv_nb(q, tag_src);
      wire::Reader rs(ep->wait(hs));
      unpack_potentials(rs, phi, seen);
      RecvHandle ht = ep->recv_nb(q, tag_tgt);
      wire::Reader rt(ep->wait(ht));
      unpack_potentials(rt, tphi, tseen);
      RecvHandle hr = ep->recv_nb(q, tag_rep);
      wire::Reader rr(ep->wait(hr));
      reps.push_back(unpack_report(rr));
    }
    for (char s : seen)
      if (!s) throw std::runtime_error("cli: potential merge left holes");
    exit_code = finish_eval(eff, "tcp", reps, phi, tphi, sources, targets);
  }
  ep->barrier();
  return exit_code;
}

int cmd_eval(const Opts& o) {
  if (o.rank >= 0 || !o.roster.empty()) {
    if (o.rank < 0 || o.roster.empty())
      throw std::invalid_argument("cli: --rank and --roster go together");
    return cmd_eval_tcp_rank(o);
  }
  std::string backend = backend_of(o);
  FmmConfig cfg = config_of(o);
  auto sources = load_sources(o);
  auto targets = load_targets(o);
  auto results = run_local(sources, targets, cfg, backend);
  std::vector<StageReport> reps;
  reps.reserve(results.size());
  for (const auto& r : results) reps.push_back(r.report);
  auto phi = merge_ids(results, false, sources.size());
  auto tphi = merge_ids(results, true, targets.size());
  return finish_eval(o, backend, reps, phi, tphi, sources, targets);
}

int cmd_converge(const Opts& o) {
  std::string backend = backend_of(o);
  auto sources = load_sources(o);
  if (sources.size() > 50000)
    throw std::invalid_argument("cli: converge needs the oracle; use n <= 50000");
  auto ref = brute_force_self(sources);

  std::printf("%4s %10s %6s %4s %12s %12s\n", "k", "tol", "order", "cap", "bound", "rel_err");
  json rows = json::array();
  for (int k = 1; k <= o.kmax; ++k) {
    Opts ok = o;
    ok.tol = std::pow(10.0, -k);
    FmmConfig cfg = config_of(ok);
    auto results = run_local(sources, {}, cfg, backend);
    auto phi = merge_ids(results, false, sources.size());
    double err = rel_inf(phi, ref);
    const StageReport& r0 = results.front().report;
    std::printf("%4d %10.0e %6d %4s %12.3e %12.3e\n", k, ok.tol, r0.order,
                r0.order_capped ? "cap" : "", r0.error_bound, err);
    rows.push_back({{"k", k},
                    {"tol", ok.tol},
                    {"order", r0.order},
                    {"capped", r0.order_capped},
                    {"bound", r0.error_bound},
                    {"rel_err", err}});
  }
  json j{{"cmd", "converge"}, {"dist", o.dist}, {"n", o.n}, {"seed", o.seed},
         {"theta", o.theta}, {"rows", rows}};
  write_json_file(o.report, j);
  std::printf("report: %s\n", j.dump().c_str());
  return 0;
}

struct SweepPoint {
  double value = 0.0;
  double mean = 0.0, lo = 0.0, hi = 0.0, normalized = 0.0;
  std::uint64_t near = 0, far = 0;
  double c_near = 1.0, c_far = 1.0;
  double rel_err = -1.0;
};

json sweep_one(const Opts& o, const std::string& backend, const std::string& param,
               const std::vector<double>& grid, const std::vector<Source>& sources,
               const std::vector<double>* oracle) {
  std::vector<SweepPoint> points;
  for (double v : grid) {
    Opts ov = o;
    if (param == "theta")
      ov.theta = v;
    else if (param == "eta")
      ov.eta = v;
    else
      ov.levels = static_cast<int>(v);
    FmmConfig cfg = config_of(ov);

    SweepPoint pt;
    pt.value = v;
    pt.lo = 1e300;
    for (int rep = 0; rep < std::max(1, o.repeats); ++rep) {
      auto results = run_local(sources, {}, cfg, backend);
      std::vector<StageReport> reps;
      for (const auto& r : results) reps.push_back(r.report);
      double wall = max_total_wall(reps);
      pt.mean += wall;
      pt.lo = std::min(pt.lo, wall);
      pt.hi = std::max(pt.hi, wall);
      if (rep == 0) {
        pt.near = reps.front().near_global;
        pt.far = reps.front().far_global;
        if (oracle) {
          auto phi = merge_ids(results, false, sources.size());
          pt.rel_err = rel_inf(phi, *oracle);
        }
        if (o.p > 1) {
          PairCounts base = count_connections(sources, 1, ov.theta, ov.eta, ov.levels,
                                              cfg.partition);
          pt.c_near = double(pt.near) / (double(o.p) * double(std::max<std::uint64_t>(1, base.near)));
          pt.c_far = double(pt.far) / (double(o.p) * double(std::max<std::uint64_t>(1, base.far)));
        }
      }
    }
    pt.mean /= double(std::max(1, o.repeats));
    points.push_back(pt);
  }

  double best = 1e300;
  std::size_t best_at = 0;
  for (std::size_t i = 0; i < points.size(); ++i)
    if (points[i].mean < best) {
      best = points[i].mean;
      best_at = i;
    }
  for (auto& pt : points) pt.normalized = pt.mean / best;

  std::printf("sweep %s (repeats=%d)\n", param.c_str(), o.repeats);
  std::printf("%10s %10s %10s %10s %10s %12s %12s\n", param.c_str(), "mean_s", "min_s",
              "max_s", "norm", "near", "far");
  json rows = json::array();
  for (const auto& pt : points) {
    std::printf("%10.3g %10.4f %10.4f %10.4f %10.3f %12llu %12llu\n", pt.value, pt.mean,
                pt.lo, pt.hi, pt.normalized, (unsigned long long)pt.near,
                (unsigned long long)pt.far);
    json row{{"value", pt.value},   {"mean_s", pt.mean}, {"min_s", pt.lo},
             {"max_s", pt.hi},      {"normalized", pt.normalized}, {"near", pt.near},
             {"far", pt.far},       {"c_near", pt.c_near}, {"c_far", pt.c_far}};
    if (pt.rel_err >= 0.0) row["rel_err"] = pt.rel_err;
    rows.push_back(row);
  }
  std::printf("optimum %s=%.3g mean=%.4f s\n", param.c_str(), points[best_at].value, best);
  return json{{"param", param}, {"rows", rows}, {"optimum", points[best_at].value}};
}

int cmd_sweep(const Opts& o) {
  std::string backend = backend_of(o);
  auto sources = load_sources(o);
  std::vector<double> oracle;
  if (sources.size() <= 20000) oracle = brute_force_self(sources);
  const std::vector<double>* oracle_ptr = oracle.empty() ? nullptr : &oracle;

  const std::vector<double> theta_grid{0.2, 0.3, 0.4, 0.45, 0.5, 0.6, 0.7, 0.8};
  const std::vector<double> level_grid{1, 2, 3, 4};
  const std::vector<double> eta_grid{0.0, 0.25, 0.5, 0.75, 1.0};

  json sweeps = json::array();
  if (o.param == "all" || o.param == "theta")
    sweeps.push_back(sweep_one(o, backend, "theta", theta_grid, sources, oracle_ptr));
  if (o.param == "all" || o.param == "levels")
    sweeps.push_back(sweep_one(o, backend, "levels", level_grid, sources, oracle_ptr));
  if (o.param == "all" || o.param == "eta")
    sweeps.push_back(sweep_one(o, backend, "eta", eta_grid, sources, oracle_ptr));
  if (sweeps.empty()) throw std::invalid_argument("cli: unknown sweep param: " + o.param);

  json j{{"cmd", "sweep"}, {"dist", o.dist}, {"n", o.n},       {"seed", o.seed},
         {"p", o.p},       {"repeats", o.repeats}, {"sweeps", sweeps}};
  write_json_file(o.report, j);
  std::printf("report: %s\n", j.dump().c_str());
  return 0;
}

int cmd_connectivity(const Opts& o) {
  auto sources = load_sources(o);
  const std::vector<int> ranks{1, 8, 27, 64};
  std::vector<PairCounts> counts;
  for (int P : ranks)
    counts.push_back(count_connections(sources, P, o.theta, 0.0, o.levels,
                                       PartitionScheme::CubicGrid));

  std::printf("connectivity n=%llu theta=%.2f levels=%d eta=0\n", (unsigned long long)o.n,
              o.theta, o.levels);
  std::printf("%6s %14s %14s %8s %8s\n", "P", "near", "far", "c_near", "c_far");
  json rows = json::array();
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    double cn = double(counts[i].near) / (double(ranks[i]) * double(counts[0].near));
    double cf = double(counts[i].far) / (double(ranks[i]) * double(counts[0].far));
    std::printf("%6d %14llu %14llu %8.3f %8.3f\n", ranks[i],
                (unsigned long long)counts[i].near, (unsigned long long)counts[i].far, cn, cf);
    rows.push_back({{"p", ranks[i]},
                    {"near", counts[i].near},
                    {"far", counts[i].far},
                    {"c_near", cn},
                    {"c_far", cf}});
  }
  json j{{"cmd", "connectivity"}, {"dist", o.dist}, {"n", o.n},
         {"seed", o.seed},        {"theta", o.theta}, {"levels", o.levels},
         {"rows", rows}};
  write_json_file(o.report, j);
  std::printf("report: %s\n", j.dump().c_str());
  return 0;
}

int cmd_galaxy_eta(const Opts& o) {
  std::string backend = backend_of(o);
  auto sources = load_sources(o);

  std::printf("galaxy-eta n=%llu p=%d levels=%d tol=%g repeats=%d\n",
              (unsigned long long)o.n, o.p, o.levels, o.tol, o.repeats);
  // On a single machine the rank threads share cores, so wall time measures
  // total work. The bottleneck rank's CPU time (makespan) is what a truly
  // parallel run would wait for; the optimum is chosen by it.
  std::printf("%6s %12s %12s %12s %s\n", "eta", "total_s", "makespan_s", "p2p_var",
              "p2p_cpu_per_rank");
  json rows = json::array();
  double best_make = 1e300, best_eta = 0.0, var_at_best = 0.0, var_at_zero = 0.0;
  bool have_zero = false;
  for (double eta : o.etas) {
    Opts ov = o;
    ov.eta = eta;
    FmmConfig cfg = config_of(ov);
    double total = 0.0, make = 0.0, var = 0.0;
    std::vector<double> p2p;
    for (int rep = 0; rep < std::max(1, o.repeats); ++rep) {
      auto results = run_local(sources, {}, cfg, backend);
      std::vector<StageReport> reps;
      for (const auto& r : results) reps.push_back(r.report);
      total += max_total_wall(reps);
      double mk = 0.0;
      for (const auto& r : reps) {
        double cpu = 0.0;
        for (const auto& s : r.stages) cpu += s.cpu_seconds;
        mk = std::max(mk, cpu);
      }
      make += mk;
      p2p.clear();
      for (const auto& r : reps) p2p.push_back(r.at(Stage::P2P).cpu_seconds);
      double lo = *std::min_element(p2p.begin(), p2p.end());
      double hi = *std::max_element(p2p.begin(), p2p.end());
      double mean = 0.0;
      for (double t : p2p) mean += t;
      mean /= double(p2p.size());
      var += mean > 0.0 ? (hi - lo) / mean : 0.0;
    }
    total /= double(std::max(1, o.repeats));
    make /= double(std::max(1, o.repeats));
    var /= double(std::max(1, o.repeats));

    std::string per;
    char buf[32];
    for (double t : p2p) {
      std::snprintf(buf, sizeof buf, "%.3f ", t);
      per += buf;
    }
    std::printf("%6.2f %12.4f %12.4f %12.4f %s\n", eta, total, make, var, per.c_str());
    rows.push_back({{"eta", eta},
                    {"total_s", total},
                    {"makespan_s", make},
                    {"p2p_var", var},
                    {"p2p_cpu_s", p2p}});
    if (eta == 0.0) {
      var_at_zero = var;
      have_zero = true;
    }
    if (make < best_make) {
      best_make = make;
      best_eta = eta;
      var_at_best = var;
    }
  }
  if (have_zero)
    std::printf("optimum eta=%.2f makespan=%.4f s p2p_var=%.4f (eta=0 var %.4f)\n", best_eta,
                best_make, var_at_best, var_at_zero);
  else
    std::printf("optimum eta=%.2f makespan=%.4f s p2p_var=%.4f\n", best_eta, best_make,
                var_at_best);
  json j{{"cmd", "galaxy-eta"},  {"n", o.n},
         {"seed", o.seed},       {"p", o.p},
         {"levels", o.levels},   {"tol", o.tol},
         {"rows", rows},         {"optimum_eta", best_eta},
         {"var_at_optimum", var_at_best},
         {"var_at_zero", have_zero ? json(var_at_zero) : json(nullptr)}};
  write_json_file(o.report, j);
  std::printf("report: %s\n", j.dump().c_str());
  return 0;
}

int cmd_gen(const Opts& o) {
  if (o.out.empty()) throw std::invalid_argument("cli: gen needs --out");
  auto sources = load_sources(o);
  if (o.csv || ends_with(o.out, ".csv"))
    write_points_csv(o.out, sources);
  else
    write_points(o.out, sources);
  json j{{"cmd", "gen"}, {"dist", o.dist}, {"n", sources.size()},
         {"seed", o.seed}, {"out", o.out}};
  std::printf("wrote %zu points: %s\n", sources.size(), o.out.c_str());
  std::printf("report: %s\n", j.dump().c_str());
  return 0;
}

void add_run_flags(CLI::App* cmd, Opts& o, bool with_dist = true) {
  if (with_dist) {
    cmd->add_option("--dist", o.dist, "point distribution")
        ->check(CLI::IsMember({"uniform-cube", "uniform", "gaussian", "shell", "helix",
                               "galaxy"}))
        ->capture_default_str();
    cmd->add_option("--n", o.n, "point count")->capture_default_str();
    cmd->add_option("--seed", o.seed, "generator seed")->capture_default_str();
    cmd->add_option("--galaxy-seeds", o.galaxy_seeds, "galaxy torus seed count")
        ->capture_default_str();
    cmd->add_option("--galaxy-stages", o.galaxy_stages, "galaxy recursion depth")
        ->capture_default_str();
    cmd->add_option("--points-file", o.points_file, "read points instead of generating");
  }
  cmd->add_option("--theta", o.theta, "separation parameter, in (0,1)")->capture_default_str();
  cmd->add_option("--eta", o.eta, "median blend, in [0,1]")->capture_default_str();
  cmd->add_option("--levels", o.levels, "tree levels per rank")->capture_default_str();
  cmd->add_option("--tol", o.tol, "target relative error")->capture_default_str();
  cmd->add_option("--order", o.order, "expansion order override (-1 = from tol)")
      ->capture_default_str();
  cmd->add_option("--p", o.p, "rank count")->capture_default_str();
  cmd->add_option("--backend", o.backend, "memory|tcp (default: FMM_BACKEND or memory)");
  cmd->add_option("--partition", o.partition, "cubic|orb")
      ->check(CLI::IsMember({"cubic", "orb"}))
      ->capture_default_str();
  cmd->add_option("--m2l", o.m2l, "rotation|direct")
      ->check(CLI::IsMember({"rotation", "direct"}))
      ->capture_default_str();
  cmd->add_option("--halo-wait", o.halo_wait, "rank|any")
      ->check(CLI::IsMember({"rank", "any"}))
      ->capture_default_str();
  cmd->add_option("--report", o.report, "write a JSON report here");
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"balanced-tree fast multipole benchmark harness"};
  app.require_subcommand(1);

  Opts eval_o;
  auto* eval = app.add_subcommand("eval", "one potential evaluation");
  add_run_flags(eval, eval_o);
  eval->add_option("--targets-file", eval_o.targets_file, "extra evaluation points");
  eval->add_option("--out", eval_o.out, "write potentials here");
  eval->add_flag("--check-oracle", eval_o.check_oracle, "compare against the direct sum");
  eval->add_option("--repeats", eval_o.repeats, "unused in eval")->group("");
  eval->add_option("--rank", eval_o.rank, "this process's rank in a tcp roster run");
  eval->add_option("--roster", eval_o.roster, "host:port per line, rank = line index");

  Opts conv_o;
  conv_o.n = 1000;
  auto* conv = app.add_subcommand("converge", "error vs tolerance ladder");
  add_run_flags(conv, conv_o);
  conv->add_option("--kmax", conv_o.kmax, "run tolerances 10^-1..10^-kmax")
      ->capture_default_str();

  Opts sweep_o;
  auto* sweep = app.add_subcommand("sweep", "one-at-a-time parameter sweeps");
  add_run_flags(sweep, sweep_o);
  sweep->add_option("--repeats", sweep_o.repeats, "timing repeats per grid point")
      ->capture_default_str();
  sweep->add_option("--param", sweep_o.param, "theta|levels|eta|all")
      ->check(CLI::IsMember({"theta", "levels", "eta", "all"}))
      ->capture_default_str();

  Opts conn_o;
  conn_o.n = 1000000;
  conn_o.levels = 4;
  auto* conn = app.add_subcommand("connectivity", "near/far growth factors over P");
  add_run_flags(conn, conn_o);

  Opts gal_o;
  gal_o.dist = "galaxy";
  gal_o.n = 1000000;
  gal_o.p = 8;
  gal_o.levels = 4;
  gal_o.tol = 1e-3;
  gal_o.repeats = 1;
  auto* gal = app.add_subcommand("galaxy-eta", "total time and P2P balance vs eta");
  add_run_flags(gal, gal_o);
  gal->add_option("--repeats", gal_o.repeats, "repeats per eta")->capture_default_str();
  gal->add_option("--etas", gal_o.etas, "eta grid")->delimiter(',')->capture_default_str();

  Opts gen_o;
  auto* gen = app.add_subcommand("gen", "write a point file");
  add_run_flags(gen, gen_o);
  gen->add_option("--out", gen_o.out, "output path (.csv switches format)");
  gen->add_flag("--csv", gen_o.csv, "write CSV regardless of extension");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (eval->parsed()) return cmd_eval(eval_o);
    if (conv->parsed()) return cmd_converge(conv_o);
    if (sweep->parsed()) return cmd_sweep(sweep_o);
    if (conn->parsed()) return cmd_connectivity(conn_o);
    if (gal->parsed()) return cmd_galaxy_eta(gal_o);
    if (gen->parsed()) return cmd_gen(gen_o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
