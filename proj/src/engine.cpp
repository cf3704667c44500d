#include "fmm/engine.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdint>
#include <ctime>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fmm/direct.hpp"
#include "fmm/harmonics.hpp"
#include "fmm/wire.hpp"

namespace fmm {
namespace {

double wall_now() {
  using clk = std::chrono::steady_clock;
  return std::chrono::duration<double>(clk::now().time_since_epoch()).count();
}

double cpu_now() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

/// Accumulates wall time, thread CPU time and transport traffic into one
/// stage at a time. A stage may be entered repeatedly.
class StageClock {
 public:
  StageClock(Endpoint& ep, StageReport& rep) : ep_(ep), rep_(rep) {}

  void start(Stage s) {
    cur_ = s;
    t0_ = ep_.stats();
    w0_ = wall_now();
    c0_ = cpu_now();
  }

  void stop() {
    StageTimes& t = rep_.at(cur_);
    t.wall_seconds += wall_now() - w0_;
    t.cpu_seconds += cpu_now() - c0_;
    const TransportStats t1 = ep_.stats();
    t.io.messages_sent += t1.messages_sent - t0_.messages_sent;
    t.io.bytes_sent += t1.bytes_sent - t0_.bytes_sent;
    t.io.messages_received += t1.messages_received - t0_.messages_received;
    t.io.bytes_received += t1.bytes_received - t0_.bytes_received;
  }

 private:
  Endpoint& ep_;
  StageReport& rep_;
  Stage cur_ = Stage::Alloc;
  TransportStats t0_;
  double w0_ = 0.0, c0_ = 0.0;
};

void ensure(Coeffs& c, int order) {
  if (c.empty()) c.assign(static_cast<std::size_t>(coeff_count(order)), {});
}

struct Ctx {
  const FmmConfig& cfg;
  Endpoint& ep;
  RunResult& out;
  StageReport& rep;
  const int P, p, L, Q;
  HarmonicTables tab;
  std::vector<Source> sources; // consumed by build()
  std::vector<TargetPoint> targets;
  LocalTree tree;
  HaloSet halos;
  std::vector<std::vector<Coeffs>> M, Lo; // [level-1][box]; empty = never touched
  std::vector<std::vector<char>> eval_any;
  std::vector<std::vector<std::uint32_t>> leaf_targets;
  PackedPoints pk; // leaf-ordered local points
  std::vector<double> w;

  Ctx(const FmmConfig& c, Endpoint& e, RunResult& o, int order, std::vector<Source> src,
      std::vector<TargetPoint> tgt)
      : cfg(c), ep(e), out(o), rep(o.report), P(e.ranks()), p(e.rank()), L(c.levels), Q(order),
        tab(order), sources(std::move(src)), targets(std::move(tgt)) {}

  static std::size_t boxes_at(int l) { return std::size_t{1} << (3 * (l - 1)); }
  const TreeLevel& lvl(int l) const { return tree.levels[static_cast<std::size_t>(l - 1)]; }
  bool has_src(int l, std::size_t b) const {
    const TreeLevel& t = lvl(l);
    return t.begin[b] < t.end[b];
  }

  void handshake() {
    if (P == 1) return;
    std::vector<std::uint8_t> canon;
    wire::put_f64(canon, cfg.theta);
    wire::put_f64(canon, cfg.eta);
    wire::put_u32(canon, static_cast<std::uint32_t>(cfg.levels));
    wire::put_u32(canon, static_cast<std::uint32_t>(Q));
    wire::put_u32(canon, static_cast<std::uint32_t>(cfg.partition));
    wire::put_u32(canon, static_cast<std::uint32_t>(cfg.halo_wait));
    wire::put_u32(canon, static_cast<std::uint32_t>(cfg.m2l));
    wire::put_u32(canon, static_cast<std::uint32_t>(P));
    const std::uint64_t sum = fnv1a(canon);
    const Tag ask{kChecksumStage, 0, 0};
    const Tag verdict{kChecksumStage, 1, 0};
    if (p == 0) {
      bool ok = true;
      for (int q = 1; q < P; ++q) {
        RecvHandle h = ep.recv_nb(q, ask);
        wire::Reader r(ep.wait(h));
        ok = r.u64() == sum && ok;
      }
      for (int q = 1; q < P; ++q) {
        Payload v;
        wire::put_u32(v, ok ? 1u : 0u);
        ep.send_nb(q, verdict, std::move(v));
      }
      if (!ok) throw std::runtime_error("rank config mismatch");
    } else {
      Payload pl;
      wire::put_u64(pl, sum);
      ep.send_nb(0, ask, std::move(pl));
      RecvHandle h = ep.recv_nb(0, verdict);
      wire::Reader r(ep.wait(h));
      if (r.u32() == 0) throw std::runtime_error("rank config mismatch");
    }
  }

  void alloc() {
    M.resize(static_cast<std::size_t>(L));
    Lo.resize(static_cast<std::size_t>(L));
    for (int l = 1; l <= L; ++l) {
      M[static_cast<std::size_t>(l - 1)].resize(boxes_at(l));
      Lo[static_cast<std::size_t>(l - 1)].resize(boxes_at(l));
    }
    out.source_phi.assign(sources.size(), 0.0);
    out.target_phi.assign(targets.size(), 0.0);
  }

  void build(const Box& root) {
    tree = build_tree(std::move(sources), root, TreeParams{cfg.theta, cfg.eta, cfg.levels});
    halos = build_halos(tree, ep, cfg.halo_wait);

    leaf_targets.assign(boxes_at(L), {});
    for (std::uint32_t t = 0; t < targets.size(); ++t)
      leaf_targets[tree.leaf_of(targets[t].position)].push_back(t);

    // A box needs local expansions only if its subtree evaluates anything.
    eval_any.assign(static_cast<std::size_t>(L), {});
    for (int l = L; l >= 1; --l) {
      std::vector<char>& e = eval_any[static_cast<std::size_t>(l - 1)];
      e.assign(boxes_at(l), 0);
      for (std::size_t b = 0; b < e.size(); ++b) {
        if (l == L) {
          e[b] = has_src(L, b) || !leaf_targets[b].empty();
        } else {
          const std::vector<char>& kids = eval_any[static_cast<std::size_t>(l)];
          bool any = false;
          for (std::size_t c = 0; c < 8; ++c) any = any || kids[8 * b + c];
          e[b] = any;
        }
      }
    }

    tree_stats();
  }

  void tree_stats() {
    const TreeLevel& tl = lvl(L);
    LeafOccupancy& lf = rep.leaves;
    lf.min_points = std::numeric_limits<std::uint32_t>::max();
    lf.log2_histogram.assign(33, 0);
    for (std::size_t b = 0; b < tl.boxes.size(); ++b) {
      const std::uint32_t n = tl.end[b] - tl.begin[b];
      lf.min_points = std::min(lf.min_points, n);
      lf.max_points = std::max(lf.max_points, n);
      if (n == 0)
        ++lf.empty_leaves;
      else
        ++lf.log2_histogram[static_cast<std::size_t>(std::bit_width(n)) - 1];
    }
    lf.mean_points = static_cast<double>(tree.points.size()) / static_cast<double>(tl.boxes.size());
    while (!lf.log2_histogram.empty() && lf.log2_histogram.back() == 0)
      lf.log2_histogram.pop_back();

    rep.near_local = near_pair_count(tree);
    rep.far_local = far_pair_count(tree);
    for (int q = p + 1; q < P; ++q) // cross pairs belong to the lower rank
      for (int l = 1; l <= L; ++l) {
        const HaloLevel& h = halos.at(q, l);
        if (l == L) rep.near_halo += h.strong_count;
        rep.far_halo += h.pairs.size() - h.strong_count;
      }
  }

  void p2m_all() {
    const TreeLevel& tl = lvl(L);
    const std::span<const Source> pts(tree.points);
    for (std::size_t b = 0; b < tl.boxes.size(); ++b) {
      if (tl.begin[b] == tl.end[b]) continue;
      Coeffs& m = M[static_cast<std::size_t>(L - 1)][b];
      ensure(m, Q);
      p2m(pts.subspan(tl.begin[b], tl.end[b] - tl.begin[b]), tl.boxes[b].center, tl.boxes[b].radius,
          Q, m);
    }
  }

  void m2m_all() {
    for (int l = L; l >= 2; --l) {
      const TreeLevel& tc = lvl(l);
      const TreeLevel& tp = lvl(l - 1);
      for (std::size_t j = 0; j < tp.boxes.size(); ++j) {
        if (tp.begin[j] == tp.end[j]) continue;
        Coeffs& mp = M[static_cast<std::size_t>(l - 2)][j];
        ensure(mp, Q);
        for (std::size_t c = 0; c < 8; ++c) {
          const std::size_t jc = 8 * j + c;
          if (tc.begin[jc] == tc.end[jc]) continue;
          m2m(tab, M[static_cast<std::size_t>(l - 1)][jc], tc.boxes[jc].center,
              tc.boxes[jc].radius, mp, tp.boxes[j].center, tp.boxes[j].radius);
        }
      }
    }
  }

  void m2l_one(const Coeffs& m, Vec3 cs, double as, Coeffs& lo, Vec3 ct, double at) {
    if (cfg.m2l == M2lForm::Rotation)
      m2l_rotated(tab, m, cs, as, lo, ct, at);
    else
      m2l_direct(tab, m, cs, as, lo, ct, at);
    ++rep.m2l_applied;
  }

  Payload expansion_payload(int q, int l) {
    const HaloLevel& h = halos.at(q, l);
    std::vector<std::uint32_t> boxes;
    boxes.reserve(h.pairs.size() - h.strong_count);
    for (std::size_t k = h.strong_count; k < h.pairs.size(); ++k)
      boxes.push_back(h.pairs[k].first);
    std::sort(boxes.begin(), boxes.end());
    boxes.erase(std::unique(boxes.begin(), boxes.end()), boxes.end());
    const TreeLevel& tl = lvl(l);
    Payload pl;
    for (std::uint32_t b : boxes) {
      if (tl.begin[b] == tl.end[b]) continue; // empty box, no expansion to send
      wire::put_u32(pl, static_cast<std::uint32_t>(l));
      wire::put_u32(pl, b);
      wire::put_f64(pl, tl.boxes[b].center.x);
      wire::put_f64(pl, tl.boxes[b].center.y);
      wire::put_f64(pl, tl.boxes[b].center.z);
      wire::put_f64(pl, tl.boxes[b].radius);
      for (const std::complex<double>& z : M[static_cast<std::size_t>(l - 1)][b]) {
        wire::put_f64(pl, z.real());
        wire::put_f64(pl, z.imag());
      }
    }
    return pl;
  }

  void apply_foreign_m2l(int q, int l, const Payload& pl) {
    const HaloLevel& h = halos.at(q, l);
    std::map<std::uint32_t, const Box*> geom;
    for (const auto& [idx, box] : h.foreign) geom.emplace(idx, &box);

    struct Rec {
      Vec3 c;
      double a = 0.0;
      Coeffs m;
    };
    std::map<std::uint32_t, Rec> recs;
    const std::size_t nc = static_cast<std::size_t>(coeff_count(Q));
    wire::Reader r(pl);
    while (!r.done()) {
      if (r.u32() != static_cast<std::uint32_t>(l))
        throw std::runtime_error("m2l: rank " + std::to_string(q) +
                                 " sent a record for the wrong level");
      const std::uint32_t b = r.u32();
      Rec rec;
      rec.c = Vec3{r.f64(), r.f64(), r.f64()};
      rec.a = r.f64();
      rec.m.resize(nc);
      for (std::size_t k = 0; k < nc; ++k) {
        const double re = r.f64();
        const double im = r.f64();
        rec.m[k] = {re, im};
      }
      const auto g = geom.find(b);
      if (g == geom.end())
        throw std::runtime_error("m2l: rank " + std::to_string(q) + " sent unknown box " +
                                 std::to_string(b));
      const Box& fb = *g->second;
      if (fb.center.x != rec.c.x || fb.center.y != rec.c.y || fb.center.z != rec.c.z ||
          fb.radius != rec.a)
        throw std::runtime_error("m2l: rank " + std::to_string(q) +
                                 " sent mismatched geometry for box " + std::to_string(b));
      if (!recs.emplace(b, std::move(rec)).second)
        throw std::runtime_error("m2l: rank " + std::to_string(q) + " sent box " +
                                 std::to_string(b) + " twice");
    }

    std::vector<std::pair<std::uint32_t, std::uint32_t>> weak(
        h.pairs.begin() + static_cast<std::ptrdiff_t>(h.strong_count), h.pairs.end());
    std::sort(weak.begin(), weak.end());
    const TreeLevel& tl = lvl(l);
    for (const auto& [i, j] : weak) {
      const auto it = recs.find(j);
      if (it == recs.end()) continue; // peer box holds no sources
      if (!eval_any[static_cast<std::size_t>(l - 1)][i]) continue;
      Coeffs& lo = Lo[static_cast<std::size_t>(l - 1)][i];
      ensure(lo, Q);
      m2l_one(it->second.m, it->second.c, it->second.a, lo, tl.boxes[i].center,
              tl.boxes[i].radius);
    }
  }

  void local_m2l(int l) {
    const LevelConnectivity& cn = tree.conn[static_cast<std::size_t>(l - 1)];
    const TreeLevel& tl = lvl(l);
    std::vector<Coeffs>& ms = M[static_cast<std::size_t>(l - 1)];
    std::vector<Coeffs>& ls = Lo[static_cast<std::size_t>(l - 1)];
    const std::vector<char>& ev = eval_any[static_cast<std::size_t>(l - 1)];
    const std::uint32_t n = static_cast<std::uint32_t>(tl.boxes.size());
    for (std::uint32_t j = 0; j < n; ++j) {
      for (std::uint32_t k = cn.col_ptr[j]; k < cn.col_ptr[j + 1]; ++k) {
        const std::uint32_t i = cn.row[k];
        if (i >= j) break; // symmetric matrix, take each pair once
        if (cn.val[k] != Connection::Weak) continue;
        const bool fwd = has_src(l, i) && ev[j]; // i into j
        const bool bwd = has_src(l, j) && ev[i]; // j into i
        if (!fwd && !bwd) continue;
        if (fwd && bwd && cfg.m2l == M2lForm::Rotation) {
          ensure(ls[i], Q);
          ensure(ls[j], Q);
          m2l_pair(tab, ms[i], tl.boxes[i].center, tl.boxes[i].radius, ls[i], ms[j],
                   tl.boxes[j].center, tl.boxes[j].radius, ls[j]);
          rep.m2l_applied += 2;
          continue;
        }
        if (fwd) {
          ensure(ls[j], Q);
          m2l_one(ms[i], tl.boxes[i].center, tl.boxes[i].radius, ls[j], tl.boxes[j].center,
                  tl.boxes[j].radius);
        }
        if (bwd) {
          ensure(ls[i], Q);
          m2l_one(ms[j], tl.boxes[j].center, tl.boxes[j].radius, ls[i], tl.boxes[i].center,
                  tl.boxes[i].radius);
        }
      }
    }
  }

  void downward(StageClock& clock) {
    clock.start(Stage::M2Lh);
    std::vector<SendHandle> sends;
    std::vector<RecvHandle> recvs;
    std::vector<std::pair<int, int>> meta; // (rank, level)
    for (int l = 1; l <= L; ++l)
      for (int q = 0; q < P; ++q) {
        if (q == p) continue;
        const HaloLevel& h = halos.at(q, l);
        if (h.pairs.size() == h.strong_count) continue; // no weak pairs this level
        const Tag tag{kExpansionStage, static_cast<std::uint32_t>(l), 0};
        sends.push_back(ep.send_nb(q, tag, expansion_payload(q, l)));
        recvs.push_back(ep.recv_nb(q, tag));
        meta.emplace_back(q, l);
      }
    clock.stop();

    clock.start(Stage::M2L);
    for (int l = 2; l <= L; ++l) local_m2l(l);
    clock.stop();

    // Drain in completion order, stash, then apply in ascending rank order
    // per level so the result never depends on arrival timing.
    clock.start(Stage::M2Lh);
    std::vector<std::vector<Payload>> stash(static_cast<std::size_t>(P));
    std::vector<std::vector<char>> have(static_cast<std::size_t>(P));
    for (auto& v : stash) v.resize(static_cast<std::size_t>(L));
    for (auto& v : have) v.assign(static_cast<std::size_t>(L), 0);
    for (std::size_t n = 0; n < recvs.size(); ++n) {
      const std::size_t i = ep.wait_any(recvs);
      const auto [q, l] = meta[i];
      stash[static_cast<std::size_t>(q)][static_cast<std::size_t>(l - 1)] =
          std::move(recvs[i].payload);
      have[static_cast<std::size_t>(q)][static_cast<std::size_t>(l - 1)] = 1;
    }
    for (int l = 1; l <= L; ++l)
      for (int q = 0; q < P; ++q)
        if (q != p && have[static_cast<std::size_t>(q)][static_cast<std::size_t>(l - 1)])
          apply_foreign_m2l(q, l, stash[static_cast<std::size_t>(q)][static_cast<std::size_t>(l - 1)]);
    for (SendHandle& s : sends) ep.wait(s);
    clock.stop();
  }

  void l2l_all() {
    for (int l = 1; l < L; ++l) {
      const TreeLevel& tp = lvl(l);
      const TreeLevel& tc = lvl(l + 1);
      for (std::size_t j = 0; j < tp.boxes.size(); ++j) {
        const Coeffs& up = Lo[static_cast<std::size_t>(l - 1)][j];
        if (up.empty()) continue; // nothing ever shifted in
        for (std::size_t c = 0; c < 8; ++c) {
          const std::size_t jc = 8 * j + c;
          if (!eval_any[static_cast<std::size_t>(l)][jc]) continue;
          Coeffs& lo = Lo[static_cast<std::size_t>(l)][jc];
          ensure(lo, Q);
          l2l(tab, up, tp.boxes[j].center, tp.boxes[j].radius, lo, tc.boxes[jc].center,
              tc.boxes[jc].radius);
        }
      }
    }
  }

  void l2p_all() {
    const TreeLevel& tl = lvl(L);
    for (std::size_t b = 0; b < tl.boxes.size(); ++b) {
      const Coeffs& lo = Lo[static_cast<std::size_t>(L - 1)][b];
      if (lo.empty()) continue;
      const Box& bx = tl.boxes[b];
      for (std::uint32_t k = tl.begin[b]; k < tl.end[b]; ++k)
        out.source_phi[k] += local_eval(lo, bx.center, bx.radius, Q, tree.points[k].position);
      for (std::uint32_t t : leaf_targets[b])
        out.target_phi[t] += local_eval(lo, bx.center, bx.radius, Q, targets[t].position);
    }
  }

  void grow_w(std::size_t n) {
    if (w.size() < n) w.resize(n);
  }

  /// One directional strong contribution: sources [sb, se) of `src` into the
  /// evaluation points of leaf tb.
  void box_from_range(std::uint32_t tb, const PackedPoints& src, std::uint32_t sb,
                      std::uint32_t se) {
    if (sb == se) return;
    const TreeLevel& tl = lvl(L);
    if (tl.begin[tb] == tl.end[tb] && leaf_targets[tb].empty()) return;
    grow_w(se - sb);
    for (std::uint32_t k = tl.begin[tb]; k < tl.end[tb]; ++k)
      out.source_phi[k] +=
          p2p_range(tree.points[k].position, tree.points[k].global_id, src, sb, se, w.data());
    for (std::uint32_t t : leaf_targets[tb])
      out.target_phi[t] += p2p_range(targets[t].position, kNoExclusion, src, sb, se, w.data());
    ++rep.p2p_applied;
  }

  /// box_from_range for a foreign block, whose points are never evaluation
  /// points here, so the no-exclusion kernel applies.
  void box_from_foreign(std::uint32_t tb, const PackedPoints& src, std::uint32_t sb,
                        std::uint32_t se) {
    if (sb == se) return;
    const TreeLevel& tl = lvl(L);
    if (tl.begin[tb] == tl.end[tb] && leaf_targets[tb].empty()) return;
    grow_w(se - sb);
    for (std::uint32_t k = tl.begin[tb]; k < tl.end[tb]; ++k)
      out.source_phi[k] +=
          p2p_range_nx(tree.points[k].position, tree.points[k].global_id, src, sb, se, w.data());
    for (std::uint32_t t : leaf_targets[tb])
      out.target_phi[t] += p2p_range_nx(targets[t].position, kNoExclusion, src, sb, se, w.data());
    ++rep.p2p_applied;
  }

  /// Both directions of one local strong pair between distinct leaves.
  /// Point-against-point work runs as a single mutual sweep so each distance
  /// is computed once; targets are not sources and keep the one-way kernel.
  /// The within-box pair stays on the one-way kernel, which sums in plain
  /// index order: a one-box run then matches the direct sum bit for bit.
  void local_pair(std::uint32_t j, std::uint32_t i) {
    if (i == j) {
      const TreeLevel& tl = lvl(L);
      box_from_range(j, pk, tl.begin[j], tl.end[j]);
      return;
    }
    const TreeLevel& tl = lvl(L);
    const std::uint32_t jb = tl.begin[j], je = tl.end[j];
    const std::uint32_t ib = tl.begin[i], ie = tl.end[i];
    if (ib != ie) {
      grow_w(ie - ib);
      if (jb != je) p2p_mutual(pk, jb, je, ib, ie, out.source_phi.data(), w.data());
      for (std::uint32_t t : leaf_targets[j])
        out.target_phi[t] += p2p_range(targets[t].position, kNoExclusion, pk, ib, ie, w.data());
      if (jb != je || !leaf_targets[j].empty()) ++rep.p2p_applied;
    }
    if (jb == je) return;
    grow_w(je - jb);
    for (std::uint32_t t : leaf_targets[i])
      out.target_phi[t] += p2p_range(targets[t].position, kNoExclusion, pk, jb, je, w.data());
    if (ib != ie || !leaf_targets[i].empty()) ++rep.p2p_applied;
  }

  void local_p2p() {
    const LevelConnectivity& cn = tree.conn[static_cast<std::size_t>(L - 1)];
    const std::uint32_t n = static_cast<std::uint32_t>(lvl(L).boxes.size());
    for (std::uint32_t j = 0; j < n; ++j) {
      for (std::uint32_t k = cn.col_ptr[j]; k < cn.col_ptr[j + 1]; ++k) {
        const std::uint32_t i = cn.row[k];
        if (i > j) break;
        if (cn.val[k] != Connection::Strong) continue;
        local_pair(j, i);
      }
    }
  }

  Payload point_payload(int q) {
    const HaloLevel& h = halos.at(q, L);
    std::vector<std::uint32_t> boxes;
    boxes.reserve(h.strong_count);
    for (std::size_t k = 0; k < h.strong_count; ++k) boxes.push_back(h.pairs[k].first);
    std::sort(boxes.begin(), boxes.end());
    boxes.erase(std::unique(boxes.begin(), boxes.end()), boxes.end());
    const TreeLevel& tl = lvl(L);
    std::uint32_t nonempty = 0;
    for (std::uint32_t b : boxes)
      if (tl.begin[b] < tl.end[b]) ++nonempty;
    Payload pl;
    wire::put_u32(pl, nonempty);
    for (std::uint32_t b : boxes) {
      if (tl.begin[b] == tl.end[b]) continue;
      wire::put_u32(pl, b);
      wire::put_u32(pl, tl.end[b] - tl.begin[b]);
      for (std::uint32_t k = tl.begin[b]; k < tl.end[b]; ++k) {
        const Source& s = tree.points[k];
        wire::put_f64(pl, s.position.x);
        wire::put_f64(pl, s.position.y);
        wire::put_f64(pl, s.position.z);
        wire::put_f64(pl, s.mass);
      }
    }
    return pl;
  }

  void apply_foreign_p2p(int q, const Payload& pl) {
    const HaloLevel& h = halos.at(q, L);
    std::map<std::uint32_t, const Box*> geom;
    for (const auto& [idx, box] : h.foreign) geom.emplace(idx, &box);

    PackedPoints fp;
    std::map<std::uint32_t, std::pair<std::uint32_t, std::uint32_t>> range;
    wire::Reader r(pl);
    const std::uint32_t nbox = r.u32();
    for (std::uint32_t bi = 0; bi < nbox; ++bi) {
      const std::uint32_t b = r.u32();
      const std::uint32_t npts = r.u32();
      if (geom.find(b) == geom.end())
        throw std::runtime_error("p2p: rank " + std::to_string(q) + " sent unknown box " +
                                 std::to_string(b));
      if (npts == 0)
        throw std::runtime_error("p2p: rank " + std::to_string(q) + " sent an empty box record");
      const std::uint32_t beg = static_cast<std::uint32_t>(fp.size());
      for (std::uint32_t k = 0; k < npts; ++k) {
        const double x = r.f64();
        const double y = r.f64();
        const double z = r.f64();
        const double m = r.f64();
        fp.append_anonymous(Vec3{x, y, z}, m);
      }
      if (!range.emplace(b, std::make_pair(beg, beg + npts)).second)
        throw std::runtime_error("p2p: rank " + std::to_string(q) + " sent box " +
                                 std::to_string(b) + " twice");
    }
    if (!r.done())
      throw std::runtime_error("p2p: rank " + std::to_string(q) + " sent trailing bytes");

    std::vector<std::pair<std::uint32_t, std::uint32_t>> strong(
        h.pairs.begin(), h.pairs.begin() + static_cast<std::ptrdiff_t>(h.strong_count));
    std::sort(strong.begin(), strong.end());
    for (const auto& [i, j] : strong) {
      const auto it = range.find(j);
      if (it == range.end()) continue; // peer box holds no points
      box_from_foreign(i, fp, it->second.first, it->second.second);
    }
  }

  void evaluate(StageClock& clock) {
    clock.start(Stage::P2P);
    pk.clear();
    for (const Source& s : tree.points) pk.append(s);
    std::vector<SendHandle> sends;
    std::vector<RecvHandle> recvs;
    std::vector<int> from;
    for (int q = 0; q < P; ++q) {
      if (q == p) continue;
      const HaloLevel& h = halos.at(q, L);
      if (h.strong_count == 0) continue;
      const Tag tag{kPointStage, static_cast<std::uint32_t>(L), 0};
      sends.push_back(ep.send_nb(q, tag, point_payload(q)));
      recvs.push_back(ep.recv_nb(q, tag));
      from.push_back(q);
    }
    clock.stop();

    clock.start(Stage::L2P);
    l2p_all();
    clock.stop();

    clock.start(Stage::P2P);
    local_p2p();
    // Same scheme as the downward pass: completion-order drain, rank-order
    // application, with the local block already in place.
    std::vector<Payload> stash(static_cast<std::size_t>(P));
    std::vector<char> have(static_cast<std::size_t>(P), 0);
    for (std::size_t n = 0; n < recvs.size(); ++n) {
      const std::size_t i = ep.wait_any(recvs);
      stash[static_cast<std::size_t>(from[i])] = std::move(recvs[i].payload);
      have[static_cast<std::size_t>(from[i])] = 1;
    }
    for (int q = 0; q < P; ++q)
      if (q != p && have[static_cast<std::size_t>(q)])
        apply_foreign_p2p(q, stash[static_cast<std::size_t>(q)]);
    for (SendHandle& s : sends) ep.wait(s);
    clock.stop();
  }

  void reduce_counts() {
    if (P == 1) {
      rep.near_global = rep.near_local;
      rep.far_global = rep.far_local;
      return;
    }
    const Tag up{kStatsStage, 0, 0};
    const Tag down{kStatsStage, 1, 0};
    if (p == 0) {
      std::uint64_t near = rep.near_local + rep.near_halo;
      std::uint64_t far = rep.far_local + rep.far_halo;
      for (int q = 1; q < P; ++q) {
        RecvHandle h = ep.recv_nb(q, up);
        wire::Reader r(ep.wait(h));
        near += r.u64();
        far += r.u64();
      }
      for (int q = 1; q < P; ++q) {
        Payload pl;
        wire::put_u64(pl, near);
        wire::put_u64(pl, far);
        ep.send_nb(q, down, std::move(pl));
      }
      rep.near_global = near;
      rep.far_global = far;
    } else {
      Payload pl;
      wire::put_u64(pl, rep.near_local + rep.near_halo);
      wire::put_u64(pl, rep.far_local + rep.far_halo);
      ep.send_nb(0, up, std::move(pl));
      RecvHandle h = ep.recv_nb(0, down);
      wire::Reader r(ep.wait(h));
      rep.near_global = r.u64();
      rep.far_global = r.u64();
    }
  }

  void export_points() {
    out.source_ids.resize(tree.points.size());
    for (std::size_t i = 0; i < tree.points.size(); ++i)
      out.source_ids[i] = tree.points[i].global_id;
    out.target_ids.resize(targets.size());
    for (std::size_t t = 0; t < targets.size(); ++t) out.target_ids[t] = targets[t].global_id;
    rep.local_sources = tree.points.size();
    rep.local_targets = targets.size();
  }
};

} // namespace

RunResult run_distributed(std::vector<Source> sources, std::vector<TargetPoint> targets,
                          const Box& root_box, const FmmConfig& cfg, Endpoint& ep) {
  if (cfg.ranks != ep.ranks())
    throw std::invalid_argument("run: config ranks disagrees with the endpoint");
  if (cfg.levels < 1 || cfg.levels > 10)
    throw std::invalid_argument("run: levels must lie in [1, 10]");
  if (!(cfg.theta > 0.0 && cfg.theta < 1.0))
    throw std::invalid_argument("run: theta must lie in (0, 1)");
  if (!(cfg.eta >= 0.0 && cfg.eta <= 1.0))
    throw std::invalid_argument("run: eta must lie in [0, 1]");
  if (cfg.order > kMaxOrder)
    throw std::invalid_argument("run: order exceeds the supported maximum");

  RunResult out;
  out.report.rank = ep.rank();
  out.report.ranks = ep.ranks();
  const TransportStats t0 = ep.stats();
  const double w0 = wall_now();

  PrecisionPolicy pol{};
  if (cfg.order >= 0) {
    pol.order = cfg.order;
    pol.capped = false;
    pol.achieved_bound = cfg.bound_constant * std::pow(cfg.theta, cfg.order + 1) /
                         ((1.0 - cfg.theta) * (1.0 - cfg.theta));
  } else {
    pol = choose_order(cfg.tol, cfg.theta, cfg.bound_constant);
  }
  out.report.order = pol.order;
  out.report.order_capped = pol.capped;
  out.report.error_bound = pol.achieved_bound;

  Ctx ctx(cfg, ep, out, pol.order, std::move(sources), std::move(targets));
  StageClock clock(ep, out.report);

  clock.start(Stage::Alloc);
  ctx.handshake();
  ctx.alloc();
  clock.stop();

  clock.start(Stage::Tree);
  ctx.build(root_box);
  clock.stop();

  clock.start(Stage::P2M);
  ctx.p2m_all();
  clock.stop();

  clock.start(Stage::M2M);
  ctx.m2m_all();
  clock.stop();

  ctx.downward(clock);

  clock.start(Stage::L2L);
  ctx.l2l_all();
  clock.stop();

  ctx.evaluate(clock);

  ctx.reduce_counts();
  ep.barrier();
  ctx.export_points();

  out.report.total_wall_seconds = wall_now() - w0;
  const TransportStats t1 = ep.stats();
  out.report.total_io.messages_sent = t1.messages_sent - t0.messages_sent;
  out.report.total_io.bytes_sent = t1.bytes_sent - t0.bytes_sent;
  out.report.total_io.messages_received = t1.messages_received - t0.messages_received;
  out.report.total_io.bytes_received = t1.bytes_received - t0.bytes_received;
  return out;
}

RunResult run_serial(std::vector<Source> sources, std::vector<TargetPoint> targets,
                     const FmmConfig& cfg) {
  if (cfg.ranks != 1) throw std::invalid_argument("run_serial: config must have ranks == 1");
  const Box root = bounding_box(sources);
  auto fabric = make_memory_fabric(1, cfg.watchdog_seconds);
  return run_distributed(std::move(sources), std::move(targets), root, cfg, *fabric[0]);
}

std::string reports_json(const std::vector<StageReport>& reports) {
  using json = nlohmann::ordered_json;
  json j;
  const bool any = !reports.empty();
  j["ranks"] = any ? reports.front().ranks : 0;
  j["order"] = any ? reports.front().order : 0;
  j["order_capped"] = any ? reports.front().order_capped : false;
  j["error_bound"] = any ? reports.front().error_bound : 0.0;
  j["N_near"] = any ? reports.front().near_global : 0;
  j["N_far"] = any ? reports.front().far_global : 0;

  json stages;
  for (std::size_t s = 0; s < kStageNames.size(); ++s) {
    json e;
    const auto col = [&](auto get) {
      json a = json::array();
      for (const StageReport& r : reports) a.push_back(get(r.stages[s]));
      return a;
    };
    e["wall_seconds"] = col([](const StageTimes& t) { return t.wall_seconds; });
    e["cpu_seconds"] = col([](const StageTimes& t) { return t.cpu_seconds; });
    e["messages_sent"] = col([](const StageTimes& t) { return t.io.messages_sent; });
    e["bytes_sent"] = col([](const StageTimes& t) { return t.io.bytes_sent; });
    e["messages_received"] = col([](const StageTimes& t) { return t.io.messages_received; });
    e["bytes_received"] = col([](const StageTimes& t) { return t.io.bytes_received; });
    stages[kStageNames[s]] = std::move(e);
  }
  j["stages"] = std::move(stages);

  json per = json::array();
  for (const StageReport& r : reports) {
    json e;
    e["rank"] = r.rank;
    e["sources"] = r.local_sources;
    e["targets"] = r.local_targets;
    e["total_wall_seconds"] = r.total_wall_seconds;
    e["near_local"] = r.near_local;
    e["far_local"] = r.far_local;
    e["near_halo"] = r.near_halo;
    e["far_halo"] = r.far_halo;
    e["m2l_applied"] = r.m2l_applied;
    e["p2p_applied"] = r.p2p_applied;
    e["messages_sent"] = r.total_io.messages_sent;
    e["bytes_sent"] = r.total_io.bytes_sent;
    e["messages_received"] = r.total_io.messages_received;
    e["bytes_received"] = r.total_io.bytes_received;
    json lf;
    lf["min"] = r.leaves.min_points;
    lf["max"] = r.leaves.max_points;
    lf["mean"] = r.leaves.mean_points;
    lf["empty"] = r.leaves.empty_leaves;
    lf["log2_histogram"] = r.leaves.log2_histogram;
    e["leaf_points"] = std::move(lf);
    per.push_back(std::move(e));
  }
  j["per_rank"] = std::move(per);
  return j.dump(2);
}

} // namespace fmm
