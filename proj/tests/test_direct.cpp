#include <doctest.h>

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "fmm/direct.hpp"

using namespace fmm;

TEST_SUITE_BEGIN("direct");

TEST_CASE("three-body potentials by hand") {
  std::vector<Source> pts{{{0, 0, 0}, 1.0, 0}, {{1, 0, 0}, 2.0, 1}, {{0, 2, 0}, 3.0, 2}};
  auto phi = brute_force_self(pts);
  CHECK(phi[0] == doctest::Approx(2.0 + 1.5).epsilon(1e-15));
  CHECK(phi[1] == doctest::Approx(1.0 + 3.0 / std::sqrt(5.0)).epsilon(1e-15));
  CHECK(phi[2] == doctest::Approx(1.0 / 2.0 + 2.0 / std::sqrt(5.0)).epsilon(1e-15));
  std::vector<TargetPoint> tgt{{{0, 0, 3}, 100}};
  auto at = brute_force_at(pts, tgt);
  CHECK(at[0] ==
        doctest::Approx(1.0 / 3.0 + 2.0 / std::sqrt(10.0) + 3.0 / std::sqrt(13.0)).epsilon(1e-15));
}

TEST_CASE("kernel fold is bitwise the reference loop") {
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> u(0.0, 1.0), q(0.1, 2.0);
  std::vector<Source> pts;
  for (int i = 0; i < 100; ++i) pts.push_back({{u(rng), u(rng), u(rng)}, q(rng), i});
  PackedPoints pack;
  for (const Source& s : pts) pack.append(s);
  std::vector<double> w(pts.size());
  auto ref = brute_force_self(pts);
  for (size_t i = 0; i < pts.size(); ++i) {
    double got = p2p_range(pts[i].position, pts[i].global_id, pack, 0,
                           static_cast<std::uint32_t>(pts.size()), w.data());
    CHECK(got == ref[i]); // same adds in the same order
  }
}

TEST_CASE("subranges and empty ranges") {
  PackedPoints pack;
  pack.append({{1, 0, 0}, 2.0, 7});
  pack.append({{0, 1, 0}, 3.0, 8});
  pack.append({{0, 0, 1}, 4.0, 9});
  double w[3];
  CHECK(p2p_range({0, 0, 0}, kNoExclusion, pack, 0, 3, w) == doctest::Approx(9.0));
  CHECK(p2p_range({0, 0, 0}, kNoExclusion, pack, 1, 2, w) == doctest::Approx(3.0));
  CHECK(p2p_range({0, 0, 0}, kNoExclusion, pack, 2, 2, w) == 0.0);
}

TEST_CASE("a point never sees itself") {
  PackedPoints pack;
  pack.append({{0.5, 0.5, 0.5}, 2.0, 42});
  pack.append({{1.5, 0.5, 0.5}, 1.0, 43});
  double w[2];
  CHECK(p2p_range({0.5, 0.5, 0.5}, 42, pack, 0, 2, w) == doctest::Approx(1.0));
}

TEST_CASE("distinct coincident points are a named error") {
  PackedPoints pack;
  pack.append({{0.5, 0.5, 0.5}, 2.0, 42});
  pack.append({{0.5, 0.5, 0.5}, 1.0, 43});
  double w[2];
  try {
    p2p_range({0.5, 0.5, 0.5}, 42, pack, 0, 2, w);
    FAIL("expected a zero-distance error");
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    CHECK(msg.find("42") != std::string::npos);
    CHECK(msg.find("43") != std::string::npos);
  }
}

TEST_CASE("anonymous foreign points interact with everything") {
  PackedPoints pack;
  pack.append_anonymous({1, 0, 0}, 5.0);
  double w[1];
  // a target with a real id is never excluded against id -1
  CHECK(p2p_range({0, 0, 0}, 0, pack, 0, 1, w) == doctest::Approx(5.0));
  CHECK(p2p_range({0, 0, 0}, kNoExclusion, pack, 0, 1, w) == doctest::Approx(5.0));
}

TEST_SUITE_END();
