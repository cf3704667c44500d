#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "fmm/geometry.hpp"

using namespace fmm;

namespace {

std::vector<Source> random_sources(std::uint64_t seed, int n, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Source> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back({{u(rng), u(rng), u(rng)}, 1.0, i});
  return out;
}

Box box_at(double cx, double cy, double cz, double hw) {
  return make_box({cx, cy, cz}, {hw, 0.0, 0.0});
}

bool same_box(const Box& a, const Box& b) {
  return a.center.x == b.center.x && a.center.y == b.center.y && a.center.z == b.center.z &&
         a.half_widths.x == b.half_widths.x && a.half_widths.y == b.half_widths.y &&
         a.half_widths.z == b.half_widths.z && a.radius == b.radius;
}

// Containment with a few ULP of slack: box edges are stored in
// center/half form, so re-deriving an edge can be off by one rounding step.
bool inside(const Box& b, Vec3 p) {
  auto in1 = [](double c, double h, double x) {
    double slack = 1e-13 * (std::abs(c) + h);
    return x >= c - h - slack && x <= c + h + slack;
  };
  return in1(b.center.x, b.half_widths.x, p.x) && in1(b.center.y, b.half_widths.y, p.y) &&
         in1(b.center.z, b.half_widths.z, p.z);
}

} // namespace

TEST_SUITE_BEGIN("geometry");

TEST_CASE("separation test hits its threshold exactly") {
  // radii 1 and 1 at theta=0.5: weak needs 1 + 0.5 <= 0.5*d, so d >= 3
  Box a = box_at(0, 0, 0, 1.0);
  CHECK(theta_criterion(a, box_at(3.0, 0, 0, 1.0), 0.5));
  CHECK_FALSE(theta_criterion(a, box_at(2.9, 0, 0, 1.0), 0.5));
  // unequal radii: max goes unscaled, min gets the theta weight
  Box big = box_at(0, 0, 0, 1.0);
  Box small = box_at(4.0, 0, 0, 0.5);
  // 1 + 0.5*0.5 = 1.25 <= 0.5*4 = 2
  CHECK(theta_criterion(big, small, 0.5));
  CHECK(theta_criterion(small, big, 0.5));
}

TEST_CASE("coincident centers are never weak") {
  CHECK_FALSE(theta_criterion(box_at(1, 2, 3, 0.1), box_at(1, 2, 3, 0.001), 0.9));
  CHECK_FALSE(theta_criterion(box_at(0, 0, 0, 0.0), box_at(0, 0, 0, 0.0), 0.5));
}

TEST_CASE("theta outside (0,1) is rejected") {
  Box a = box_at(0, 0, 0, 1.0), b = box_at(9, 0, 0, 1.0);
  CHECK_THROWS_AS(theta_criterion(a, b, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(theta_criterion(a, b, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(theta_criterion(a, b, -0.3), std::invalid_argument);
  CHECK_THROWS_AS(theta_criterion(a, b, 1.7), std::invalid_argument);
  CHECK_THROWS_AS(theta_criterion(a, b, std::nan("")), std::invalid_argument);
}

TEST_CASE("separation is symmetric and monotone in theta") {
  std::mt19937_64 rng(71);
  std::uniform_real_distribution<double> u(-5.0, 5.0), r(0.01, 1.5);
  for (int trial = 0; trial < 200; ++trial) {
    Box a = make_box({u(rng), u(rng), u(rng)}, {r(rng), r(rng), r(rng)});
    Box b = make_box({u(rng), u(rng), u(rng)}, {r(rng), r(rng), r(rng)});
    bool prev = false;
    for (double theta : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      bool w = theta_criterion(a, b, theta);
      CHECK(w == theta_criterion(b, a, theta));
      if (prev) CHECK(w); // once weak, stays weak as theta grows
      prev = w;
    }
  }
}

TEST_CASE("bounding box contains every point with slack") {
  auto pts = random_sources(5, 500, -2.0, 7.0);
  Box b = bounding_box(pts);
  for (const Source& s : pts) {
    CHECK(s.position.x > b.center.x - b.half_widths.x);
    CHECK(s.position.x < b.center.x + b.half_widths.x);
    CHECK(s.position.y > b.center.y - b.half_widths.y);
    CHECK(s.position.y < b.center.y + b.half_widths.y);
    CHECK(s.position.z > b.center.z - b.half_widths.z);
    CHECK(s.position.z < b.center.z + b.half_widths.z);
  }
  CHECK(b.radius == doctest::Approx(norm(b.half_widths)));
}

TEST_CASE("bounding box of a single point stays a real box") {
  Source s{{3.0, -1.0, 0.5}, 2.0, 0};
  Box b = bounding_box(std::span<const Source>(&s, 1));
  CHECK(b.half_widths.x > 0.0);
  CHECK(b.half_widths.y > 0.0);
  CHECK(b.half_widths.z > 0.0);
  CHECK(inside(b, s.position));
  CHECK_THROWS_AS(bounding_box({}), std::invalid_argument);
}

TEST_CASE("split plane blends midpoint and median") {
  std::vector<double> coords{0.1, 0.2, 0.9};
  CHECK(split_plane(0.0, 1.0, 1.0, coords) == 0.2);
  coords = {0.9, 0.1, 0.6, 0.2};
  CHECK(split_plane(0.0, 1.0, 1.0, coords) == doctest::Approx(0.4));
  coords = {0.1, 0.2, 0.9};
  CHECK(split_plane(0.0, 1.0, 0.5, coords) == doctest::Approx(0.35));
  coords = {0.1, 0.2, 0.9};
  CHECK(split_plane(0.0, 1.0, 0.0, coords) == 0.5);
  coords.clear();
  CHECK(split_plane(0.0, 1.0, 1.0, coords) == 0.5);
  coords = {0.0, 0.0, 0.0}; // median sits on the boundary: clamp inward
  double p = split_plane(0.0, 1.0, 1.0, coords);
  CHECK(p > 0.0);
  CHECK(p < 1.0);
}

TEST_CASE("octant split routes points into the matching child box") {
  auto pts = random_sources(11, 300);
  Box root = bounding_box(pts);
  for (double eta : {0.0, 0.5, 1.0}) {
    BoxSplit sp = compute_split(root, pts, eta);
    std::array<int, 8> count{};
    for (const Source& s : pts) {
      int oct = split_octant(sp, s.position);
      ++count[static_cast<size_t>(oct)];
      CHECK(inside(octant_box(root, sp, oct), s.position));
    }
    int total = 0;
    for (int c : count) total += c;
    CHECK(total == 300);
    if (eta == 1.0) // distinct uniform coords: median splits are near-even
      for (int c : count) CHECK(std::abs(c - 300 / 8) <= 8);
  }
}

TEST_CASE("octant boxes tile the parent") {
  auto pts = random_sources(13, 64);
  Box root = bounding_box(pts);
  BoxSplit sp = compute_split(root, pts, 0.7);
  double vol = 0.0;
  for (int oct = 0; oct < 8; ++oct) {
    Box c = octant_box(root, sp, oct);
    vol += 8.0 * c.half_widths.x * c.half_widths.y * c.half_widths.z;
    CHECK(c.radius == doctest::Approx(norm(c.half_widths)));
  }
  CHECK(vol == doctest::Approx(8.0 * root.half_widths.x * root.half_widths.y *
                               root.half_widths.z));
}

TEST_CASE("cubic grid with a power-of-two side equals nested octant splits") {
  Box domain = make_box({0.3, -0.2, 1.0}, {1.1, 0.9, 1.3});
  Partition part = make_partition({}, domain, 8, PartitionScheme::CubicGrid);
  BoxSplit sp = compute_split(domain, {}, 0.0);
  for (int oct = 0; oct < 8; ++oct)
    CHECK(same_box(part.rank_boxes[static_cast<size_t>(oct)], octant_box(domain, sp, oct)));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    Vec3 p{0.3 + 1.1 * u(rng), -0.2 + 0.9 * u(rng), 1.0 + 1.3 * u(rng)};
    CHECK(part.route(p) == split_octant(sp, p));
  }
}

TEST_CASE("recursive bisection with eta matches the octant split of the same box") {
  auto pts = random_sources(17, 500, -1.0, 2.0);
  Box domain = bounding_box(pts);
  for (double eta : {0.0, 0.7}) {
    Partition part = make_partition(pts, domain, 8, PartitionScheme::RecursiveBisection, eta);
    BoxSplit sp = compute_split(domain, pts, eta);
    for (int oct = 0; oct < 8; ++oct)
      CHECK(same_box(part.rank_boxes[static_cast<size_t>(oct)], octant_box(domain, sp, oct)));
    for (const Source& s : pts) CHECK(part.route(s.position) == split_octant(sp, s.position));
  }
}

TEST_CASE("median bisection balances rank loads") {
  auto pts = random_sources(23, 800);
  Box domain = bounding_box(pts);
  Partition part = make_partition(pts, domain, 8, PartitionScheme::RecursiveBisection, 1.0);
  auto buckets = partition_sources(pts, part);
  REQUIRE(buckets.size() == 8);
  for (const auto& b : buckets) CHECK(b.size() == 100);
}

TEST_CASE("lattice grid tiles and routes half-open") {
  Box domain = make_box({0.5, 0.5, 0.5}, {0.5, 0.5, 0.5});
  Partition part = make_partition({}, domain, 27, PartitionScheme::CubicGrid);
  REQUIRE(part.rank_boxes.size() == 27);
  CHECK(part.route({0.1, 0.1, 0.1}) == 0);
  CHECK(part.route({0.9, 0.9, 0.9}) == 26);
  // exactly on the first x plane: upper side
  double plane = part.grid_planes[0][0];
  CHECK(part.route({plane, 0.1, 0.1}) == 9);
  double vol = 0.0;
  for (const Box& b : part.rank_boxes)
    vol += 8.0 * b.half_widths.x * b.half_widths.y * b.half_widths.z;
  CHECK(vol == doctest::Approx(1.0));
}

TEST_CASE("point on a midpoint plane goes to the upper rank") {
  Box domain = make_box({0.5, 0.5, 0.5}, {0.5, 0.5, 0.5});
  Partition part = make_partition({}, domain, 8, PartitionScheme::CubicGrid);
  CHECK(part.route({0.5, 0.25, 0.25}) == 4);
  CHECK(part.route({0.25, 0.5, 0.25}) == 2);
  CHECK(part.route({0.25, 0.25, 0.5}) == 1);
  CHECK(part.route({0.5, 0.5, 0.5}) == 7);
}

TEST_CASE("partition bucketing keeps every source once, in input order") {
  auto pts = random_sources(29, 777);
  Box domain = bounding_box(pts);
  for (auto scheme : {PartitionScheme::CubicGrid, PartitionScheme::RecursiveBisection}) {
    Partition part = make_partition(pts, domain, 8, scheme, 0.4);
    auto buckets = partition_sources(pts, part);
    std::set<std::int64_t> seen;
    size_t total = 0;
    for (const auto& b : buckets) {
      total += b.size();
      std::int64_t prev = -1;
      for (const Source& s : b) {
        CHECK(seen.insert(s.global_id).second);
        CHECK(s.global_id > prev); // input was id-ordered, buckets must stay so
        prev = s.global_id;
        CHECK(inside(part.rank_boxes[static_cast<size_t>(part.route(s.position))], s.position));
      }
    }
    CHECK(total == pts.size());
  }
}

TEST_CASE("invalid rank counts are rejected") {
  Box domain = make_box({0, 0, 0}, {1, 1, 1});
  CHECK_THROWS_AS(make_partition({}, domain, 0, PartitionScheme::CubicGrid),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_partition({}, domain, 12, PartitionScheme::CubicGrid),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_partition({}, domain, 3, PartitionScheme::RecursiveBisection),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_partition({}, domain, 8, PartitionScheme::RecursiveBisection, 1.5),
                  std::invalid_argument);
}

TEST_CASE("target routing follows source routing") {
  auto pts = random_sources(31, 400);
  Box domain = bounding_box(pts);
  Partition part = make_partition(pts, domain, 8, PartitionScheme::RecursiveBisection, 1.0);
  std::vector<TargetPoint> tgts;
  for (const Source& s : pts) tgts.push_back({s.position, s.global_id});
  auto sb = partition_sources(pts, part);
  auto tb = partition_targets(tgts, part);
  for (size_t r = 0; r < 8; ++r) {
    REQUIRE(sb[r].size() == tb[r].size());
    for (size_t i = 0; i < sb[r].size(); ++i) CHECK(sb[r][i].global_id == tb[r][i].global_id);
  }
}

TEST_SUITE_END();
