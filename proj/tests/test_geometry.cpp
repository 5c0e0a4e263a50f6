#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dsgn/geometry.hpp"
#include "dsgn/rng.hpp"

using namespace dsgn;

namespace {
const Intrinsics kKitti{721.5377, 721.5377, 609.5593, 172.854};
}

TEST_CASE("unproject principal-point ray goes straight ahead") {
  const WorldPoint p = unproject({kKitti.cu, kKitti.cv, 10.0}, kKitti);
  CHECK(p.x == 0.0);
  CHECK(p.y == 0.0);
  CHECK(p.z == 10.0);
}

TEST_CASE("unproject matches the matrix form of the inverse projection") {
  const Intrinsics k{720.0, 700.0, 620.0, 180.0};
  // explicit 3x3 inverse-projection matrix applied to (u d, v d, d)
  auto oracle = [&](double u, double v, double d) {
    const double m[3][3] = {{1.0 / k.fx, 0, -k.cu / k.fx}, {0, 1.0 / k.fy, -k.cv / k.fy}, {0, 0, 1}};
    const double in[3] = {u * d, v * d, d};
    WorldPoint p;
    p.x = m[0][0] * in[0] + m[0][1] * in[1] + m[0][2] * in[2];
    p.y = m[1][0] * in[0] + m[1][1] * in[1] + m[1][2] * in[2];
    p.z = m[2][0] * in[0] + m[2][1] * in[1] + m[2][2] * in[2];
    return p;
  };
  const WorldPoint got = unproject({692.0, k.cv, 10.0}, k);
  const WorldPoint want = oracle(692.0, k.cv, 10.0);
  CHECK(got.x == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(got.x == doctest::Approx(want.x).epsilon(1e-12));
  CHECK(got.y == doctest::Approx(want.y).epsilon(1e-12));
  CHECK(got.z == want.z);

  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const double u = rng.uniform(0, 1242), v = rng.uniform(0, 375), d = rng.uniform(0.5, 80);
    const WorldPoint a = unproject({u, v, d}, k);
    const WorldPoint b = oracle(u, v, d);
    CHECK(std::abs(a.x - b.x) <= 1e-9);
    CHECK(std::abs(a.y - b.y) <= 1e-9);
  }
}

TEST_CASE("project puts the optical axis on the principal point") {
  const FrustumCoord c = project({0, 0, 7.5}, kKitti);
  CHECK(c.u == kKitti.cu);
  CHECK(c.v == kKitti.cv);
  CHECK(c.d == 7.5);
}

TEST_CASE("project example: one meter right at ten meters") {
  const Intrinsics k{720.0, 720.0, 620.0, 180.0};
  const FrustumCoord c = project({1.0, 0.0, 10.0}, k);
  CHECK(c.u == doctest::Approx(692.0).epsilon(1e-12));
}

TEST_CASE("round trips are identities to 1e-9 on 1000 random points") {
  Rng rng(77);
  for (int i = 0; i < 1000; ++i) {
    const FrustumCoord c{rng.uniform(-100, 1400), rng.uniform(-100, 500), rng.uniform(0.11, 90)};
    const FrustumCoord c2 = project(unproject(c, kKitti), kKitti);
    CHECK(std::abs(c2.u - c.u) <= 1e-9);
    CHECK(std::abs(c2.v - c.v) <= 1e-9);
    CHECK(std::abs(c2.d - c.d) <= 1e-9);

    const WorldPoint p{rng.uniform(-40, 40), rng.uniform(-5, 5), rng.uniform(0.11, 90)};
    const WorldPoint p2 = unproject(project(p, kKitti), kKitti);
    CHECK(std::abs(p2.x - p.x) <= 1e-9);
    CHECK(std::abs(p2.y - p.y) <= 1e-9);
    CHECK(std::abs(p2.z - p.z) <= 1e-9);
  }
}

TEST_CASE("unproject is linear in depth for a fixed pixel") {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const double u = rng.uniform(0, 1242), v = rng.uniform(0, 375), d = rng.uniform(0.1, 40);
    const WorldPoint a = unproject({u, v, d}, kKitti);
    const WorldPoint b = unproject({u, v, 2 * d}, kKitti);
    CHECK(b.x == doctest::Approx(2 * a.x).epsilon(1e-12));
    CHECK(b.y == doctest::Approx(2 * a.y).epsilon(1e-12));
    CHECK(b.z == doctest::Approx(2 * a.z).epsilon(1e-12));
  }
}

TEST_CASE("domain errors on non-positive depth") {
  CHECK_THROWS_AS(unproject({0, 0, 0}, kKitti), std::domain_error);
  CHECK_THROWS_AS(unproject({0, 0, -1}, kKitti), std::domain_error);
  CHECK_THROWS_AS(project({0, 0, 0}, kKitti), std::domain_error);
  CHECK_THROWS_AS(project({0, 0, -2}, kKitti), std::domain_error);
}

TEST_CASE("disparity/depth conversion") {
  const StereoRig rig{{721.0, 721.0, 600.0, 170.0}, 0.54};
  SUBCASE("round trip is the identity") {
    Rng rng(9);
    for (int i = 0; i < 200; ++i) {
      const double depth = rng.uniform(0.5, 90);
      const double disp = disparity_depth(rig, depth, DisparityDirection::kDepthToDisparity);
      const double back = disparity_depth(rig, disp, DisparityDirection::kDisparityToDepth);
      CHECK(std::abs(back - depth) <= 1e-12 * depth);
    }
  }
  SUBCASE("39 m vs 40 m differ by less than a quarter pixel") {
    const double d39 = disparity_depth(rig, 39.0, DisparityDirection::kDepthToDisparity);
    const double d40 = disparity_depth(rig, 40.0, DisparityDirection::kDepthToDisparity);
    const double gap = d39 - d40;
    // closed form: fx * b * (1/39 - 1/40)
    CHECK(gap == doctest::Approx(721.0 * 0.54 * (1.0 / 39.0 - 1.0 / 40.0)).epsilon(1e-12));
    CHECK(gap == doctest::Approx(0.2496).epsilon(1e-3));
    CHECK(gap < 0.25);
  }
  SUBCASE("closed-form value at 38.934 m") {
    const double disp = disparity_depth(rig, 38.934, DisparityDirection::kDepthToDisparity);
    CHECK(disp == doctest::Approx(10.0).epsilon(1e-4));
  }
  SUBCASE("strictly decreasing in depth") {
    Rng rng(10);
    for (int i = 0; i < 100; ++i) {
      const double a = rng.uniform(0.5, 80);
      const double b = a + rng.uniform(0.01, 5.0);
      CHECK(disparity_depth(rig, a, DisparityDirection::kDepthToDisparity) >
            disparity_depth(rig, b, DisparityDirection::kDepthToDisparity));
    }
  }
  SUBCASE("domain error on non-positive values") {
    CHECK_THROWS_AS(disparity_depth(rig, 0.0, DisparityDirection::kDepthToDisparity),
                    std::domain_error);
    CHECK_THROWS_AS(disparity_depth(rig, -3.0, DisparityDirection::kDisparityToDepth),
                    std::domain_error);
  }
}

TEST_CASE("angle wrapping lands in [0, 2pi)") {
  Rng rng(13);
  for (int i = 0; i < 300; ++i) {
    const double t = rng.uniform(-50, 50);
    const double w = wrap_angle_2pi(t);
    CHECK(w >= 0.0);
    CHECK(w < 2.0 * M_PI);
    CHECK(std::abs(std::sin(w) - std::sin(t)) < 1e-9);
    CHECK(std::abs(std::cos(w) - std::cos(t)) < 1e-9);
  }
}
