#include "fmm/geometry.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fmm {

namespace {

double component(Vec3 v, int axis) { return axis == 0 ? v.x : axis == 1 ? v.y : v.z; }

int floor_log2(unsigned v) { return static_cast<int>(std::bit_width(v)) - 1; }

} // namespace

double norm(Vec3 v) { return std::sqrt(dot(v, v)); }

Box make_box(Vec3 center, Vec3 half_widths) {
  return Box{center, half_widths, norm(half_widths)};
}

Interval interval_box(double lo, double hi) { return Interval{0.5 * (lo + hi), 0.5 * (hi - lo)}; }

bool theta_criterion(const Box& a, const Box& b, double theta) {
  if (!(theta > 0.0) || !(theta < 1.0))
    throw std::invalid_argument("theta_criterion: theta must lie in (0,1)");
  double big = std::max(a.radius, b.radius);
  double small = std::min(a.radius, b.radius);
  double d = norm(a.center - b.center);
  if (d == 0.0) return false;
  return big + theta * small <= theta * d;
}

Box bounding_box(std::span<const Source> sources, double margin_rel) {
  if (sources.empty()) throw std::invalid_argument("bounding_box: no sources");
  constexpr double inf = std::numeric_limits<double>::infinity();
  Vec3 lo{inf, inf, inf}, hi{-inf, -inf, -inf};
  double scale = 0.0;
  for (const Source& s : sources) {
    lo.x = std::min(lo.x, s.position.x);
    lo.y = std::min(lo.y, s.position.y);
    lo.z = std::min(lo.z, s.position.z);
    hi.x = std::max(hi.x, s.position.x);
    hi.y = std::max(hi.y, s.position.y);
    hi.z = std::max(hi.z, s.position.z);
    scale = std::max({scale, std::abs(s.position.x), std::abs(s.position.y),
                      std::abs(s.position.z)});
  }
  double extent = std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z});
  double pad = std::max(margin_rel * extent, 1e-12 * std::max(scale, 1.0));
  Interval ix = interval_box(lo.x - pad, hi.x + pad);
  Interval iy = interval_box(lo.y - pad, hi.y + pad);
  Interval iz = interval_box(lo.z - pad, hi.z + pad);
  return make_box({ix.center, iy.center, iz.center}, {ix.half, iy.half, iz.half});
}

double split_plane(double lo, double hi, double eta, std::vector<double>& coords) {
  double plane = interval_box(lo, hi).center;
  if (eta != 0.0 && !coords.empty()) {
    auto mid = coords.begin() + coords.size() / 2;
    std::nth_element(coords.begin(), mid, coords.end());
    double median = *mid;
    if (coords.size() % 2 == 0) median = 0.5 * (*std::max_element(coords.begin(), mid) + median);
    plane = (1.0 - eta) * plane + eta * median;
  }
  double lo_open = std::nextafter(lo, std::numeric_limits<double>::infinity());
  double hi_open = std::nextafter(hi, -std::numeric_limits<double>::infinity());
  return std::min(std::max(plane, lo_open), hi_open);
}

BoxSplit compute_split(const Box& box, std::span<const Source> pts, double eta) {
  Vec3 lo = box.center - box.half_widths;
  Vec3 hi = box.center + box.half_widths;
  std::vector<double> coords;
  auto plane_over = [&](int axis, auto&& keep) {
    coords.clear();
    for (const Source& s : pts)
      if (keep(s.position)) coords.push_back(component(s.position, axis));
    return split_plane(component(lo, axis), component(hi, axis), eta, coords);
  };
  double xp = plane_over(0, [](Vec3) { return true; });
  double yp0 = plane_over(1, [&](Vec3 p) { return p.x < xp; });
  double yp1 = plane_over(1, [&](Vec3 p) { return p.x >= xp; });
  double zp00 = plane_over(2, [&](Vec3 p) { return p.x < xp && p.y < yp0; });
  double zp01 = plane_over(2, [&](Vec3 p) { return p.x < xp && p.y >= yp0; });
  double zp10 = plane_over(2, [&](Vec3 p) { return p.x >= xp && p.y < yp1; });
  double zp11 = plane_over(2, [&](Vec3 p) { return p.x >= xp && p.y >= yp1; });
  return BoxSplit{{xp, yp0, yp1, zp00, zp01, zp10, zp11}};
}

int split_octant(const BoxSplit& split, Vec3 p) {
  int bx = p.x >= split.planes[0];
  int by = p.y >= split.planes[1 + bx];
  int bz = p.z >= split.planes[3 + 2 * bx + by];
  return 4 * bx + 2 * by + bz;
}

Box octant_box(const Box& parent, const BoxSplit& split, int octant) {
  Vec3 lo = parent.center - parent.half_widths;
  Vec3 hi = parent.center + parent.half_widths;
  int bx = (octant >> 2) & 1, by = (octant >> 1) & 1, bz = octant & 1;
  double xp = split.planes[0];
  double yp = split.planes[1 + bx];
  double zp = split.planes[3 + 2 * bx + by];
  Interval ix = bx ? interval_box(xp, hi.x) : interval_box(lo.x, xp);
  Interval iy = by ? interval_box(yp, hi.y) : interval_box(lo.y, yp);
  Interval iz = bz ? interval_box(zp, hi.z) : interval_box(lo.z, zp);
  return make_box({ix.center, iy.center, iz.center}, {ix.half, iy.half, iz.half});
}

namespace {

// Repeated bisection with axis cycling x,y,z. Heap-ordered planes; leaf
// node P+r is rank r, so the rank id reads as the path bits from the root.
void build_bisection(Partition& part, std::span<const Source> sources, double eta, int leaves) {
  int P = leaves;
  part.bisection_planes.assign(static_cast<size_t>(P), 0.0);
  std::vector<Box> node_box(2 * static_cast<size_t>(P));
  node_box[1] = part.domain;
  std::vector<std::vector<Vec3>> node_pts(eta != 0.0 ? 2 * static_cast<size_t>(P) : 0);
  if (eta != 0.0) {
    node_pts[1].reserve(sources.size());
    for (const Source& s : sources) node_pts[1].push_back(s.position);
  }
  std::vector<double> coords;
  for (int node = 1; node < P; ++node) {
    int axis = floor_log2(static_cast<unsigned>(node)) % 3;
    const Box& b = node_box[node];
    double lo = component(b.center - b.half_widths, axis);
    double hi = component(b.center + b.half_widths, axis);
    coords.clear();
    if (eta != 0.0)
      for (Vec3 p : node_pts[node]) coords.push_back(component(p, axis));
    double plane = split_plane(lo, hi, eta, coords);
    part.bisection_planes[static_cast<size_t>(node)] = plane;
    Interval down = interval_box(lo, plane);
    Interval up = interval_box(plane, hi);
    Box lower = b, upper = b;
    if (axis == 0) {
      lower.center.x = down.center; lower.half_widths.x = down.half;
      upper.center.x = up.center; upper.half_widths.x = up.half;
    } else if (axis == 1) {
      lower.center.y = down.center; lower.half_widths.y = down.half;
      upper.center.y = up.center; upper.half_widths.y = up.half;
    } else {
      lower.center.z = down.center; lower.half_widths.z = down.half;
      upper.center.z = up.center; upper.half_widths.z = up.half;
    }
    node_box[2 * node] = make_box(lower.center, lower.half_widths);
    node_box[2 * node + 1] = make_box(upper.center, upper.half_widths);
    if (eta != 0.0) {
      for (Vec3 p : node_pts[node])
        node_pts[2 * static_cast<size_t>(node) + (component(p, axis) >= plane)].push_back(p);
      node_pts[node].clear();
      node_pts[node].shrink_to_fit();
    }
  }
  part.rank_boxes.resize(static_cast<size_t>(P));
  for (int r = 0; r < P; ++r) part.rank_boxes[static_cast<size_t>(r)] = node_box[P + r];
}

void build_lattice(Partition& part, int side) {
  Vec3 lo = part.domain.center - part.domain.half_widths;
  Vec3 hi = part.domain.center + part.domain.half_widths;
  for (int axis = 0; axis < 3; ++axis) {
    double a = component(lo, axis), b = component(hi, axis);
    for (int i = 1; i < side; ++i)
      part.grid_planes[axis].push_back(a + (b - a) * static_cast<double>(i) /
                                               static_cast<double>(side));
  }
  auto edges = [&](int axis, int i) {
    double a = component(lo, axis), b = component(hi, axis);
    const auto& pl = part.grid_planes[axis];
    double e0 = i == 0 ? a : pl[static_cast<size_t>(i - 1)];
    double e1 = i == side - 1 ? b : pl[static_cast<size_t>(i)];
    return interval_box(e0, e1);
  };
  part.rank_boxes.reserve(static_cast<size_t>(side) * side * side);
  for (int ix = 0; ix < side; ++ix)
    for (int iy = 0; iy < side; ++iy)
      for (int iz = 0; iz < side; ++iz) {
        Interval a = edges(0, ix), b = edges(1, iy), c = edges(2, iz);
        part.rank_boxes.push_back(
            make_box({a.center, b.center, c.center}, {a.half, b.half, c.half}));
      }
}

} // namespace

int Partition::route(Vec3 p) const {
  if (ranks == 1) return 0;
  if (!bisection_planes.empty()) {
    int node = 1, depth = 0;
    while (node < ranks) {
      double plane = bisection_planes[static_cast<size_t>(node)];
      node = 2 * node + (component(p, depth % 3) >= plane);
      ++depth;
    }
    return node - ranks;
  }
  int side = static_cast<int>(grid_planes[0].size()) + 1;
  int idx[3];
  for (int axis = 0; axis < 3; ++axis) {
    const auto& pl = grid_planes[axis];
    idx[axis] = static_cast<int>(std::upper_bound(pl.begin(), pl.end(), component(p, axis)) -
                                 pl.begin());
  }
  return (idx[0] * side + idx[1]) * side + idx[2];
}

Partition make_partition(std::span<const Source> sources, const Box& domain, int ranks,
                         PartitionScheme scheme, double eta) {
  if (ranks < 1) throw std::invalid_argument("make_partition: ranks must be positive");
  Partition part;
  part.scheme = scheme;
  part.ranks = ranks;
  part.domain = domain;
  if (scheme == PartitionScheme::CubicGrid) {
    int side = static_cast<int>(std::lround(std::cbrt(static_cast<double>(ranks))));
    if (side * side * side != ranks)
      throw std::invalid_argument("make_partition: cubic grid needs a perfect cube rank count");
    if (std::has_single_bit(static_cast<unsigned>(side)))
      build_bisection(part, {}, 0.0, ranks);
    else
      build_lattice(part, side);
  } else {
    if (!std::has_single_bit(static_cast<unsigned>(ranks)))
      throw std::invalid_argument(
          "make_partition: recursive bisection needs a power-of-two rank count");
    if (eta < 0.0 || eta > 1.0)
      throw std::invalid_argument("make_partition: eta must lie in [0,1]");
    build_bisection(part, sources, eta, ranks);
  }
  return part;
}

std::vector<std::vector<Source>> partition_sources(std::span<const Source> sources,
                                                   const Partition& part) {
  std::vector<std::vector<Source>> out(static_cast<size_t>(part.ranks));
  for (const Source& s : sources) out[static_cast<size_t>(part.route(s.position))].push_back(s);
  return out;
}

std::vector<std::vector<TargetPoint>> partition_targets(std::span<const TargetPoint> targets,
                                                        const Partition& part) {
  std::vector<std::vector<TargetPoint>> out(static_cast<size_t>(part.ranks));
  for (const TargetPoint& t : targets)
    out[static_cast<size_t>(part.route(t.position))].push_back(t);
  return out;
}

} // namespace fmm
