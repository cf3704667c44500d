#include "fmm/treebuild.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "fmm/wire.hpp"

namespace fmm {

Connection LevelConnectivity::at(std::uint32_t i, std::uint32_t j) const {
  for (std::uint32_t k = col_ptr[j]; k < col_ptr[j + 1]; ++k)
    if (row[k] == i) return val[k];
  return Connection::Unconnected;
}

namespace {

// Stable 8-way bucket of points[b,e) by octant; returns child offsets
// (9 entries, child o owns [off[o], off[o+1])).
std::array<std::uint32_t, 9> bucket_by_octant(std::vector<Source>& points,
                                              std::vector<Source>& scratch, std::uint32_t b,
                                              std::uint32_t e, const BoxSplit& split) {
  std::array<std::uint32_t, 9> off{};
  std::array<std::uint32_t, 8> count{};
  for (std::uint32_t i = b; i < e; ++i)
    ++count[static_cast<size_t>(split_octant(split, points[i].position))];
  off[0] = b;
  for (int o = 0; o < 8; ++o) off[static_cast<size_t>(o) + 1] = off[static_cast<size_t>(o)] + count[static_cast<size_t>(o)];
  std::array<std::uint32_t, 8> cursor;
  for (int o = 0; o < 8; ++o) cursor[static_cast<size_t>(o)] = off[static_cast<size_t>(o)];
  scratch.resize(e - b);
  for (std::uint32_t i = b; i < e; ++i) {
    int o = split_octant(split, points[i].position);
    scratch[cursor[static_cast<size_t>(o)]++ - b] = points[i];
  }
  std::copy(scratch.begin(), scratch.begin() + (e - b), points.begin() + b);
  return off;
}

LevelConnectivity root_connectivity() {
  LevelConnectivity c;
  c.col_ptr = {0, 1};
  c.row = {0};
  c.val = {Connection::Strong};
  return c;
}

// Children of strong pairs at the parent level are the candidates; classify
// all 64 per pair, empty boxes included.
LevelConnectivity refine_connectivity(const LevelConnectivity& parent,
                                      const std::vector<Box>& boxes, double theta) {
  struct Entry {
    std::uint64_t key;
    Connection val;
  };
  std::vector<Entry> entries;
  std::size_t strong_parents = 0;
  for (Connection v : parent.val)
    if (v == Connection::Strong) ++strong_parents;
  entries.reserve(strong_parents * 64);
  std::uint64_t n = boxes.size();
  std::uint32_t ncols = static_cast<std::uint32_t>(parent.col_ptr.size()) - 1;
  for (std::uint32_t pj = 0; pj < ncols; ++pj) {
    for (std::uint32_t k = parent.col_ptr[pj]; k < parent.col_ptr[pj + 1]; ++k) {
      if (parent.val[k] != Connection::Strong) continue;
      std::uint32_t pi = parent.row[k];
      for (int a = 0; a < 8; ++a) {
        std::uint32_t ci = 8 * pi + static_cast<std::uint32_t>(a);
        for (int b = 0; b < 8; ++b) {
          std::uint32_t cj = 8 * pj + static_cast<std::uint32_t>(b);
          bool weak = ci == cj ? false
                               : theta_criterion(boxes[ci], boxes[cj], theta);
          entries.push_back({cj * n + ci, weak ? Connection::Weak : Connection::Strong});
        }
      }
    }
  }
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.key < b.key; });
  LevelConnectivity out;
  out.col_ptr.assign(n + 1, 0);
  out.row.reserve(entries.size());
  out.val.reserve(entries.size());
  for (const Entry& e : entries) {
    out.col_ptr[e.key / n + 1]++;
    out.row.push_back(static_cast<std::uint32_t>(e.key % n));
    out.val.push_back(e.val);
  }
  for (std::size_t j = 0; j < n; ++j) out.col_ptr[j + 1] += out.col_ptr[j];
  return out;
}

} // namespace

LocalTree build_tree(std::vector<Source> sources, const Box& root, const TreeParams& params) {
  if (params.levels < 1 || params.levels > 10)
    throw std::invalid_argument("build_tree: levels must lie in [1,10]");
  if (params.eta < 0.0 || params.eta > 1.0)
    throw std::invalid_argument("build_tree: eta must lie in [0,1]");
  if (!(params.theta > 0.0) || !(params.theta < 1.0))
    throw std::invalid_argument("build_tree: theta must lie in (0,1)");
  if (sources.size() >= (std::uint64_t{1} << 32))
    throw std::invalid_argument("build_tree: too many points");

  LocalTree tree;
  tree.params = params;
  tree.points = std::move(sources);
  std::uint32_t n = static_cast<std::uint32_t>(tree.points.size());

  TreeLevel top;
  top.boxes = {root};
  top.begin = {0};
  top.end = {n};
  tree.levels.push_back(std::move(top));

  std::vector<Source> scratch;
  for (int l = 1; l < params.levels; ++l) {
    TreeLevel& cur = tree.levels.back();
    std::size_t nb = cur.boxes.size();
    cur.splits.resize(nb);
    TreeLevel next;
    next.boxes.resize(nb * 8);
    next.begin.resize(nb * 8);
    next.end.resize(nb * 8);
    for (std::size_t j = 0; j < nb; ++j) {
      std::span<const Source> pts(tree.points.data() + cur.begin[j], cur.end[j] - cur.begin[j]);
      cur.splits[j] = compute_split(cur.boxes[j], pts, params.eta);
      auto off = bucket_by_octant(tree.points, scratch, cur.begin[j], cur.end[j], cur.splits[j]);
      for (int o = 0; o < 8; ++o) {
        std::size_t c = 8 * j + static_cast<std::size_t>(o);
        next.boxes[c] = octant_box(cur.boxes[j], cur.splits[j], o);
        next.begin[c] = off[static_cast<size_t>(o)];
        next.end[c] = off[static_cast<size_t>(o) + 1];
      }
    }
    tree.levels.push_back(std::move(next));
  }

  tree.conn.push_back(root_connectivity());
  for (int l = 1; l < params.levels; ++l)
    tree.conn.push_back(
        refine_connectivity(tree.conn.back(), tree.levels[static_cast<size_t>(l)].boxes,
                            params.theta));
  return tree;
}

std::uint32_t LocalTree::leaf_of(Vec3 p) const {
  std::uint32_t idx = 0;
  for (std::size_t l = 0; l + 1 < levels.size(); ++l)
    idx = 8 * idx + static_cast<std::uint32_t>(split_octant(levels[l].splits[idx], p));
  return idx;
}

std::uint64_t near_pair_count(const LocalTree& tree) {
  const LevelConnectivity& c = tree.conn.back();
  std::uint64_t count = 0;
  std::uint32_t ncols = static_cast<std::uint32_t>(c.col_ptr.size()) - 1;
  for (std::uint32_t j = 0; j < ncols; ++j)
    for (std::uint32_t k = c.col_ptr[j]; k < c.col_ptr[j + 1]; ++k)
      if (c.val[k] == Connection::Strong && c.row[k] < j) ++count;
  return count;
}

std::uint64_t far_pair_count(const LocalTree& tree) {
  std::uint64_t count = 0;
  for (const LevelConnectivity& c : tree.conn) {
    std::uint32_t ncols = static_cast<std::uint32_t>(c.col_ptr.size()) - 1;
    for (std::uint32_t j = 0; j < ncols; ++j)
      for (std::uint32_t k = c.col_ptr[j]; k < c.col_ptr[j + 1]; ++k)
        if (c.val[k] == Connection::Weak && c.row[k] < j) ++count;
  }
  return count;
}

namespace {

void put_geom(Payload& out, const Box& b) {
  wire::put_f64(out, b.center.x);
  wire::put_f64(out, b.center.y);
  wire::put_f64(out, b.center.z);
  wire::put_f64(out, b.radius);
}

Box read_geom(wire::Reader& rd) {
  Box b{};
  b.center = {rd.f64(), rd.f64(), rd.f64()};
  b.radius = rd.f64();
  return b;
}

std::vector<std::uint32_t> distinct_sorted(const HaloLevel& lvl, bool mine) {
  std::vector<std::uint32_t> ids;
  ids.reserve(lvl.strong_count);
  for (std::size_t k = 0; k < lvl.strong_count; ++k)
    ids.push_back(mine ? lvl.pairs[k].first : lvl.pairs[k].second);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

} // namespace

HaloSet build_halos(const LocalTree& tree, Endpoint& ep, HaloWait mode) {
  const int ranks = ep.ranks();
  const int self = ep.rank();
  const int depth = tree.params.levels;
  const double theta = tree.params.theta;

  HaloSet hs;
  hs.by_rank.resize(static_cast<std::size_t>(ranks));
  if (ranks == 1) return hs;
  for (int q = 0; q < ranks; ++q)
    if (q != self) hs.by_rank[static_cast<std::size_t>(q)].resize(static_cast<std::size_t>(depth));

  const Box& root = tree.levels[0].boxes[0];
  {
    Payload msg;
    put_geom(msg, root);
    for (int q = 0; q < ranks; ++q)
      if (q != self) ep.send_nb(q, {kHaloStage, 1, 0}, msg);
  }
  for (int q = 0; q < ranks; ++q) {
    if (q == self) continue;
    RecvHandle h = ep.recv_nb(q, {kHaloStage, 1, 0});
    wire::Reader rd(ep.wait(h));
    Box fb = read_geom(rd);
    if (!rd.done())
      throw std::runtime_error("halo: oversized root record from rank " + std::to_string(q));
    HaloLevel& lvl = hs.by_rank[static_cast<std::size_t>(q)][0];
    lvl.foreign.push_back({0, fb});
    lvl.pairs.push_back({0, 0});
    lvl.strong_count = theta_criterion(root, fb, theta) ? 0 : 1;
  }

  for (int l = 2; l <= depth; ++l) {
    const std::vector<Box>& myboxes = tree.levels[static_cast<std::size_t>(l) - 1].boxes;
    std::vector<RecvHandle> pending;
    std::vector<int> from;
    for (int q = 0; q < ranks; ++q) {
      if (q == self) continue;
      const HaloLevel& prev =
          hs.by_rank[static_cast<std::size_t>(q)][static_cast<std::size_t>(l) - 2];
      if (prev.strong_count == 0) continue;
      Payload msg;
      for (std::uint32_t a : distinct_sorted(prev, true)) {
        wire::put_u32(msg, a);
        for (std::uint32_t c = 0; c < 8; ++c) put_geom(msg, myboxes[8 * a + c]);
      }
      Tag tag{kHaloStage, static_cast<std::uint32_t>(l), 0};
      ep.send_nb(q, tag, std::move(msg));
      pending.push_back(ep.recv_nb(q, tag));
      from.push_back(q);
    }

    auto classify = [&](int q, const Payload& body) {
      const HaloLevel& prev =
          hs.by_rank[static_cast<std::size_t>(q)][static_cast<std::size_t>(l) - 2];
      HaloLevel& out = hs.by_rank[static_cast<std::size_t>(q)][static_cast<std::size_t>(l) - 1];
      wire::Reader rd(body);
      std::map<std::uint32_t, std::size_t> first_child;
      while (!rd.done()) {
        std::uint32_t parent = rd.u32();
        if (!first_child.emplace(parent, out.foreign.size()).second)
          throw std::runtime_error("halo: rank " + std::to_string(q) +
                                   " sent parent " + std::to_string(parent) + " twice");
        for (std::uint32_t c = 0; c < 8; ++c)
          out.foreign.push_back({8 * parent + c, read_geom(rd)});
      }
      std::vector<std::uint32_t> expected = distinct_sorted(prev, false);
      if (expected.size() != first_child.size())
        throw std::runtime_error("halo: rank " + std::to_string(q) + " sent " +
                                 std::to_string(first_child.size()) + " parents, expected " +
                                 std::to_string(expected.size()));
      for (std::uint32_t b : expected)
        if (!first_child.count(b))
          throw std::runtime_error("halo: rank " + std::to_string(q) + " omitted parent " +
                                   std::to_string(b));

      std::size_t ncon = 64 * prev.strong_count;
      out.pairs.resize(ncon);
      std::size_t fwd = 0;
      std::size_t bwd = ncon;
      for (std::size_t k = 0; k < prev.strong_count; ++k) {
        std::uint32_t a = prev.pairs[k].first;
        std::size_t fj0 = first_child.find(prev.pairs[k].second)->second;
        for (std::uint32_t ci = 0; ci < 8; ++ci) {
          const Box& bi = myboxes[8 * a + ci];
          for (std::uint32_t cj = 0; cj < 8; ++cj) {
            const auto& fj = out.foreign[fj0 + cj];
            if (theta_criterion(bi, fj.second, theta))
              out.pairs[--bwd] = {8 * a + ci, fj.first};
            else
              out.pairs[fwd++] = {8 * a + ci, fj.first};
          }
        }
      }
      out.strong_count = fwd;
    };

    if (mode == HaloWait::RankOrder) {
      for (std::size_t i = 0; i < pending.size(); ++i)
        classify(from[i], ep.wait(pending[i]));
    } else {
      for (std::size_t n = 0; n < pending.size(); ++n) {
        std::size_t i = ep.wait_any(pending);
        classify(from[i], pending[i].payload);
      }
    }
  }
  return hs;
}

} // namespace fmm
