#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dsgn/detection.hpp"
#include "dsgn/eval.hpp"
#include "dsgn/rng.hpp"

using namespace dsgn;

namespace {

std::vector<double> randvec(Rng& rng, std::int64_t n, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

Box3D random_box(Rng& rng) {
  Box3D b;
  b.x = rng.uniform(-5, 5);
  b.y = rng.uniform(-1, 2);
  b.z = rng.uniform(3, 15);
  b.h = rng.uniform(0.5, 2.0);
  b.w = rng.uniform(0.4, 2.0);
  b.l = rng.uniform(0.5, 4.5);
  b.theta = rng.uniform(0, 2 * M_PI);
  return b;
}

}  // namespace

TEST_CASE("anchor lattice counting and placement") {
  const VoxelGrid g = VoxelGrid::create(-0.4, 0.4, 0, 0.4, 2.0, 2.8, 0.4, 0.4, 0.4);
  REQUIRE(g.nx == 2);
  REQUIRE(g.nz == 2);
  const AnchorSet a = generate_anchors(g, ClassConfig::car());
  CHECK(a.count() == 16);
  for (int t = 0; t < 4; ++t)
    for (int iz = 0; iz < 2; ++iz)
      for (int ix = 0; ix < 2; ++ix) {
        const Box3D b = a.anchor(t, iz, ix);
        CHECK(b.x == doctest::Approx(g.x_center(ix)).epsilon(1e-15));
        CHECK(b.z == doctest::Approx(g.z_center(iz)).epsilon(1e-15));
        CHECK(b.h == 1.56);
        CHECK(b.w == 1.6);
        CHECK(b.l == 3.9);
        CHECK(b.y == 0.825);
        CHECK(b.theta == doctest::Approx(t * M_PI / 2).epsilon(1e-12));
      }
}

TEST_CASE("class configurations carry the published anchor settings") {
  const ClassConfig car = ClassConfig::car();
  CHECK(car.h == 1.56);
  CHECK(car.w == 1.6);
  CHECK(car.l == 3.9);
  CHECK(car.y_center == 0.825);
  CHECK(car.gamma == 1.0);
  CHECK(car.n_theta == 4);
  const ClassConfig ped = ClassConfig::pedestrian();
  CHECK(ped.h == 1.73);
  CHECK(ped.w == 0.6);
  CHECK(ped.l == 0.8);
  CHECK(ped.y_center == 0.74);
  CHECK(ped.gamma == 5.0);
  const ClassConfig cyc = ClassConfig::cyclist();
  CHECK(cyc.h == 1.73);
  CHECK(cyc.w == 0.6);
  CHECK(cyc.l == 1.76);
  CHECK(cyc.y_center == 0.74);
  CHECK(cyc.gamma == 5.0);
}

TEST_CASE("BEV corners of an axis-aligned box") {
  Box3D b;
  b.l = 2;
  b.w = 1;
  b.h = 1;
  const BevCorners c = corners_bev(b);
  CHECK(c[0][0] == doctest::Approx(1.0));
  CHECK(c[0][1] == doctest::Approx(0.5));
  CHECK(c[1][0] == doctest::Approx(-1.0));
  CHECK(c[1][1] == doctest::Approx(0.5));
  CHECK(c[2][0] == doctest::Approx(-1.0));
  CHECK(c[2][1] == doctest::Approx(-0.5));
  CHECK(c[3][0] == doctest::Approx(1.0));
  CHECK(c[3][1] == doctest::Approx(-0.5));
}

TEST_CASE("a half turn reverses corners pairwise") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    Box3D b = random_box(rng);
    Box3D r = b;
    r.theta = wrap_angle_2pi(b.theta + M_PI);
    const BevCorners cb = corners_bev(b), cr = corners_bev(r);
    for (int i = 0; i < 4; ++i) {
      const int j = (i + 2) % 4;
      CHECK(cr[static_cast<std::size_t>(i)][0] == doctest::Approx(2 * b.x - cb[static_cast<std::size_t>(i)][0]).epsilon(1e-9));
      CHECK(cr[static_cast<std::size_t>(i)][1] == doctest::Approx(2 * b.z - cb[static_cast<std::size_t>(i)][1]).epsilon(1e-9));
      // the rotated corner set equals the original set shifted by two
      CHECK(cr[static_cast<std::size_t>(i)][0] ==
            doctest::Approx(cb[static_cast<std::size_t>(j)][0] ).epsilon(1e-9));
    }
  }
}

TEST_CASE("rotated corners match an explicit rotation-matrix oracle") {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    Box3D b = random_box(rng);
    Box3D flat = b;
    flat.theta = 0;
    flat.x = flat.z = 0;
    const BoxCorners base = corners_8(flat);
    const BoxCorners got = corners_8(b);
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    for (int i = 0; i < 8; ++i) {
      const double rx = c * base[static_cast<std::size_t>(i)][0] + s * base[static_cast<std::size_t>(i)][2];
      const double rz = -s * base[static_cast<std::size_t>(i)][0] + c * base[static_cast<std::size_t>(i)][2];
      CHECK(std::abs(got[static_cast<std::size_t>(i)][0] - (b.x + rx)) <= 1e-12);
      CHECK(std::abs(got[static_cast<std::size_t>(i)][2] - (b.z + rz)) <= 1e-12);
      CHECK(got[static_cast<std::size_t>(i)][1] ==
            doctest::Approx(b.y + (i < 4 ? b.h / 2 : -b.h / 2)).epsilon(1e-12));
    }
  }
}

TEST_CASE("corner distance") {
  Rng rng(4);
  SUBCASE("zero on identical boxes") {
    const Box3D b = random_box(rng);
    CHECK(corner_distance(b, b) == 0.0);
  }
  SUBCASE("a 3-4-5 translation gives exactly five meters") {
    const Box3D a = random_box(rng);
    Box3D g = a;
    g.x += 3;
    g.z += 4;
    CHECK(corner_distance(a, g) == doctest::Approx(5.0).epsilon(1e-12));
  }
  SUBCASE("symmetry and translation covariance") {
    for (int t = 0; t < 20; ++t) {
      const Box3D a = random_box(rng), g = random_box(rng);
      CHECK(corner_distance(a, g) == doctest::Approx(corner_distance(g, a)).epsilon(1e-12));
      Box3D a2 = a, g2 = g;
      a2.x += 1.3;
      g2.x += 1.3;
      a2.z -= 0.7;
      g2.z -= 0.7;
      CHECK(corner_distance(a2, g2) == doctest::Approx(corner_distance(a, g)).epsilon(1e-9));
    }
  }
}

// Independent assignment oracle: brute-force point counting, full sort,
// and explicit conflict resolution.
namespace {

struct OracleAssign {
  std::vector<int> matched;  // -1 negative
  std::vector<double> centerness;
};

OracleAssign oracle_assign(const AnchorSet& anchors, const std::vector<Box3D>& gts, double gamma,
                           const VoxelGrid& grid) {
  const long long n = anchors.count();
  OracleAssign res;
  res.matched.assign(static_cast<std::size_t>(n), -1);
  res.centerness.assign(static_cast<std::size_t>(n), 1.0);

  std::vector<std::vector<double>> dist(gts.size(), std::vector<double>(static_cast<std::size_t>(n)));
  std::vector<std::vector<long long>> chosen(gts.size());
  for (std::size_t g = 0; g < gts.size(); ++g) {
    for (long long a = 0; a < n; ++a) {
      dist[g][static_cast<std::size_t>(a)] = corner_distance(anchors.anchor(a), gts[g]);
    }
    long long k = 0;
    for (int iz = 0; iz < grid.nz; ++iz)
      for (int ix = 0; ix < grid.nx; ++ix) {
        const double px = grid.x_center(ix), pz = grid.z_center(iz);
        // inverse-rotate into the box frame
        const double c = std::cos(gts[g].theta), s = std::sin(gts[g].theta);
        const double dx = px - gts[g].x, dz = pz - gts[g].z;
        const double bx = c * dx - s * dz, bz = s * dx + c * dz;
        if (std::abs(bx) <= gts[g].l / 2 && std::abs(bz) <= gts[g].w / 2) ++k;
      }
    long long want = std::llround(gamma * static_cast<double>(k));
    if (want < 1) want = 1;
    std::vector<long long> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0LL);
    std::sort(order.begin(), order.end(), [&](long long x, long long y) {
      if (dist[g][static_cast<std::size_t>(x)] != dist[g][static_cast<std::size_t>(y)])
        return dist[g][static_cast<std::size_t>(x)] < dist[g][static_cast<std::size_t>(y)];
      return x < y;
    });
    order.resize(static_cast<std::size_t>(std::min(want, n)));
    chosen[g] = order;
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    for (long long a : chosen[g]) {
      const auto ia = static_cast<std::size_t>(a);
      if (res.matched[ia] < 0 ||
          dist[g][ia] < dist[static_cast<std::size_t>(res.matched[ia])][ia]) {
        res.matched[ia] = static_cast<int>(g);
      }
    }
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    double lo = 1e300, hi = -1e300;
    for (long long a : chosen[g]) {
      if (res.matched[static_cast<std::size_t>(a)] != static_cast<int>(g)) continue;
      lo = std::min(lo, dist[g][static_cast<std::size_t>(a)]);
      hi = std::max(hi, dist[g][static_cast<std::size_t>(a)]);
    }
    for (long long a : chosen[g]) {
      if (res.matched[static_cast<std::size_t>(a)] != static_cast<int>(g)) continue;
      res.centerness[static_cast<std::size_t>(a)] =
          hi > lo ? std::exp(-(dist[g][static_cast<std::size_t>(a)] - lo) / (hi - lo)) : 1.0;
    }
  }
  return res;
}

std::vector<Box3D> random_scene_gts(Rng& rng, const VoxelGrid& grid, const ClassConfig& cls,
                                    int max_n) {
  std::vector<Box3D> gts;
  const int n = rng.uniform_int(1, max_n);
  for (int i = 0; i < n; ++i) {
    Box3D b;
    b.h = cls.h * rng.uniform(0.9, 1.1);
    b.w = cls.w * rng.uniform(0.9, 1.1);
    b.l = cls.l * rng.uniform(0.9, 1.1);
    b.x = rng.uniform(grid.x_min + 1, grid.x_max - 1);
    b.z = rng.uniform(grid.z_min + 1, grid.z_max - 1);
    b.y = cls.y_center;
    b.theta = rng.uniform(0, 2 * M_PI);
    gts.push_back(b);
  }
  return gts;
}

}  // namespace

TEST_CASE("assignment: a ground truth equal to an anchor claims it at distance zero") {
  const VoxelGrid g = VoxelGrid::create(-1.6, 1.6, 0, 0.4, 2.0, 4.4, 0.4, 0.4, 0.4);
  const AnchorSet anchors = generate_anchors(g, ClassConfig::cyclist());
  const Box3D gt = anchors.anchor(2, 3, 4);
  const AssignmentResult res = assign_targets(anchors, {gt}, 1.0, g);
  const long long idx = anchors.index(2, 3, 4);
  CHECK(res.label[static_cast<std::size_t>(idx)] == 1);
  CHECK(res.matched_gt[static_cast<std::size_t>(idx)] == 0);
  CHECK(corner_distance(anchors.anchor(idx), gt) == 0.0);
}

TEST_CASE("assignment matches the exhaustive counting and sorting oracle") {
  Rng rng(17);
  const VoxelGrid g = VoxelGrid::create(-3.2, 3.2, 0, 0.4, 2.0, 8.4, 0.4, 0.4, 0.4);
  const ClassConfig cls = ClassConfig::cyclist();
  const AnchorSet anchors = generate_anchors(g, cls);
  for (int t = 0; t < 50; ++t) {
    const std::vector<Box3D> gts = random_scene_gts(rng, g, cls, 4);
    const AssignmentResult got = assign_targets(anchors, gts, cls.gamma, g);
    const OracleAssign want = oracle_assign(anchors, gts, cls.gamma, g);
    int n_pos = 0;
    for (long long a = 0; a < anchors.count(); ++a) {
      const auto ia = static_cast<std::size_t>(a);
      CHECK(got.matched_gt[ia] == want.matched[ia]);
      CHECK(got.label[ia] == (want.matched[ia] >= 0 ? 1 : 0));
      if (want.matched[ia] >= 0) {
        ++n_pos;
        CHECK(got.centerness[ia] == doctest::Approx(want.centerness[ia]).epsilon(1e-12));
      }
    }
    CHECK(got.n_pos == n_pos);
  }
}

TEST_CASE("doubling gamma doubles the positives while the pool lasts") {
  const VoxelGrid g = VoxelGrid::create(-3.2, 3.2, 0, 0.4, 2.0, 8.4, 0.4, 0.4, 0.4);
  const ClassConfig cls = ClassConfig::cyclist();
  const AnchorSet anchors = generate_anchors(g, cls);
  Box3D gt;
  gt.x = 0.1;
  gt.z = 5.1;
  gt.y = cls.y_center;
  gt.h = cls.h;
  gt.w = cls.w;
  gt.l = cls.l;
  gt.theta = 0.3;
  const AssignmentResult a1 = assign_targets(anchors, {gt}, 1.0, g);
  const AssignmentResult a2 = assign_targets(anchors, {gt}, 2.0, g);
  CHECK(a2.n_pos == 2 * a1.n_pos);
}

TEST_CASE("centerness attains both endpoints") {
  const VoxelGrid g = VoxelGrid::create(-3.2, 3.2, 0, 0.4, 2.0, 8.4, 0.4, 0.4, 0.4);
  const ClassConfig cls = ClassConfig::cyclist();
  const AnchorSet anchors = generate_anchors(g, cls);
  Box3D gt;
  gt.x = 0.13;
  gt.z = 5.07;
  gt.y = cls.y_center;
  gt.h = cls.h;
  gt.w = cls.w;
  gt.l = cls.l;
  gt.theta = 0.8;
  const AssignmentResult res = assign_targets(anchors, {gt}, cls.gamma, g);
  double lo = 2.0, hi = -1.0;
  for (long long a = 0; a < anchors.count(); ++a) {
    if (!res.label[static_cast<std::size_t>(a)]) continue;
    lo = std::min(lo, res.centerness[static_cast<std::size_t>(a)]);
    hi = std::max(hi, res.centerness[static_cast<std::size_t>(a)]);
  }
  CHECK(hi == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(lo == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("a single positive anchor takes centerness one") {
  // a grid with a single BEV cell has four anchors; gamma tuned for one hit
  const VoxelGrid g = VoxelGrid::create(-0.2, 0.2, 0, 0.4, 2.0, 2.4, 0.4, 0.4, 0.4);
  const AnchorSet anchors = generate_anchors(g, ClassConfig::cyclist());
  Box3D gt = anchors.anchor(0);
  gt.theta = 0.05;
  const AssignmentResult res = assign_targets(anchors, {gt}, 0.2, g);
  CHECK(res.n_pos == 1);
  for (long long a = 0; a < anchors.count(); ++a) {
    if (res.label[static_cast<std::size_t>(a)]) {
      CHECK(res.centerness[static_cast<std::size_t>(a)] == 1.0);
    }
  }
}

TEST_CASE("box decode") {
  Rng rng(23);
  const Box3D anchor = random_box(rng);
  SUBCASE("zero delta is the identity") {
    const Box3D b = decode_box(anchor, {0, 0, 0, 0, 0, 0, 0}, 4);
    CHECK(b.x == anchor.x);
    CHECK(b.y == anchor.y);
    CHECK(b.z == anchor.z);
    CHECK(b.h == anchor.h);
    CHECK(b.w == anchor.w);
    CHECK(b.l == anchor.l);
    CHECK(b.theta == doctest::Approx(wrap_angle_2pi(anchor.theta)).epsilon(1e-15));
  }
  SUBCASE("log-scale sizes") {
    const Box3D b = decode_box(anchor, {0, 0, 0, std::log(2.0), 0, 0, 0}, 4);
    CHECK(b.h == doctest::Approx(2 * anchor.h).epsilon(1e-12));
  }
  SUBCASE("yaw saturates at pi over n_theta") {
    const Box3D lo = decode_box(anchor, {0, 0, 0, 0, 0, 0, -50.0}, 4);
    const Box3D hi = decode_box(anchor, {0, 0, 0, 0, 0, 0, +50.0}, 4);
    const double d_lo = std::remainder(lo.theta - anchor.theta, 2 * M_PI);
    const double d_hi = std::remainder(hi.theta - anchor.theta, 2 * M_PI);
    CHECK(std::abs(d_lo) <= M_PI / 4 + 1e-12);
    CHECK(std::abs(d_hi) <= M_PI / 4 + 1e-12);
    CHECK(d_lo == doctest::Approx(-M_PI / 4).epsilon(1e-6));
    CHECK(d_hi == doctest::Approx(M_PI / 4).epsilon(1e-6));
  }
  SUBCASE("encode/decode round trip") {
    for (int t = 0; t < 50; ++t) {
      const Box3D a = random_box(rng);
      BoxDelta d;
      for (int p = 0; p < 6; ++p) d[static_cast<std::size_t>(p)] = 0.3 * rng.normal();
      d[6] = rng.uniform(-1.5, 1.5);
      const Box3D g = decode_box(a, d, 4);
      const BoxDelta back = encode_box(a, g, 4);
      for (int p = 0; p < 7; ++p) {
        CHECK(std::abs(back[static_cast<std::size_t>(p)] - d[static_cast<std::size_t>(p)]) <= 1e-10);
      }
    }
  }
}

namespace {

// Straight-line reimplementation of the regression loss for the oracle.
double oracle_regression(const std::vector<double>& deltas, const AnchorSet& anchors,
                         const AssignmentResult& assign, const std::vector<Box3D>& gts,
                         RegressionMode mode) {
  const long long cells = static_cast<long long>(anchors.nz) * anchors.nx;
  double total = 0;
  auto sl1 = [](double x) { return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5; };
  for (long long a = 0; a < anchors.count(); ++a) {
    if (!assign.label[static_cast<std::size_t>(a)]) continue;
    const Box3D anc = anchors.anchor(a);
    const Box3D& gt = gts[static_cast<std::size_t>(assign.matched_gt[static_cast<std::size_t>(a)])];
    BoxDelta d;
    const long long t = a / cells, rest = a % cells;
    for (int p = 0; p < 7; ++p) d[static_cast<std::size_t>(p)] = deltas[static_cast<std::size_t>((t * 7 + p) * cells + rest)];
    double item;
    if (mode == RegressionMode::kSeparable) {
      const BoxDelta target = encode_box(anc, gt, anchors.cls.n_theta);
      item = 0;
      for (int p = 0; p < 7; ++p) item += sl1(d[static_cast<std::size_t>(p)] - target[static_cast<std::size_t>(p)]) / 7.0;
    } else {
      const Box3D dec = decode_box(anc, d, anchors.cls.n_theta);
      const BoxCorners pc = corners_8(dec), gc = corners_8(gt);
      double r = 0;
      for (int i = 0; i < 8; ++i)
        for (int axis = 0; axis < 3; ++axis)
          r += std::abs(pc[static_cast<std::size_t>(i)][static_cast<std::size_t>(axis)] -
                        gc[static_cast<std::size_t>(i)][static_cast<std::size_t>(axis)]);
      item = sl1(r / 8.0);
    }
    total += assign.centerness[static_cast<std::size_t>(a)] * item;
  }
  return total / assign.n_pos;
}

}  // namespace

TEST_CASE("regression loss") {
  Rng rng(29);
  const VoxelGrid g = VoxelGrid::create(-1.6, 1.6, 0, 0.4, 2.0, 5.2, 0.4, 0.4, 0.4);
  const ClassConfig cls = ClassConfig::cyclist();
  const AnchorSet anchors = generate_anchors(g, cls);
  const std::vector<Box3D> gts = random_scene_gts(rng, g, cls, 2);
  const AssignmentResult assign = assign_targets(anchors, gts, cls.gamma, g);
  REQUIRE(assign.n_pos > 0);
  const long long cells = static_cast<long long>(anchors.nz) * anchors.nx;

  SUBCASE("perfect separable targets give zero loss") {
    std::vector<double> dv(static_cast<std::size_t>(anchors.count()) * 7, 0.0);
    for (long long a = 0; a < anchors.count(); ++a) {
      if (!assign.label[static_cast<std::size_t>(a)]) continue;
      const BoxDelta target = encode_box(anchors.anchor(a),
                                         gts[static_cast<std::size_t>(assign.matched_gt[static_cast<std::size_t>(a)])],
                                         cls.n_theta);
      const long long t = a / cells, rest = a % cells;
      for (int p = 0; p < 7; ++p) dv[static_cast<std::size_t>((t * 7 + p) * cells + rest)] = target[static_cast<std::size_t>(p)];
    }
    Tensor deltas = Tensor::constant({7 * cls.n_theta, g.nz, g.nx}, dv);
    CHECK(regression_loss(deltas, anchors, assign, gts, RegressionMode::kSeparable).scalar() <=
          1e-15);
  }
  SUBCASE("joint mode is zero when decoded boxes equal the ground truth") {
    // a single positive whose anchor orientation can reach the target yaw
    // (anchors of other orientations can never decode onto it, so the
    // zero-residual premise only holds per matching anchor)
    Box3D reachable = anchors.anchor(0, 2, 3);
    reachable.x += 0.11;
    reachable.z -= 0.08;
    reachable.theta = wrap_angle_2pi(reachable.theta + 0.2);
    AssignmentResult one;
    one.label.assign(static_cast<std::size_t>(anchors.count()), 0);
    one.matched_gt.assign(static_cast<std::size_t>(anchors.count()), -1);
    one.centerness.assign(static_cast<std::size_t>(anchors.count()), 1.0);
    const long long idx = anchors.index(0, 2, 3);
    one.label[static_cast<std::size_t>(idx)] = 1;
    one.matched_gt[static_cast<std::size_t>(idx)] = 0;
    one.n_pos = 1;

    std::vector<double> dv(static_cast<std::size_t>(anchors.count()) * 7, 0.0);
    const BoxDelta target = encode_box(anchors.anchor(idx), reachable, cls.n_theta);
    const long long t = idx / cells, rest = idx % cells;
    for (int p = 0; p < 7; ++p) dv[static_cast<std::size_t>((t * 7 + p) * cells + rest)] = target[static_cast<std::size_t>(p)];
    Tensor deltas = Tensor::constant({7 * cls.n_theta, g.nz, g.nx}, dv);
    CHECK(regression_loss(deltas, anchors, one, {reachable}, RegressionMode::kJointCorners)
              .scalar() <= 1e-9);
  }
  SUBCASE("random deltas match the loop oracle in both modes") {
    for (int t = 0; t < 10; ++t) {
      const auto dv = randvec(rng, anchors.count() * 7, 0.3);
      Tensor deltas = Tensor::constant({7 * cls.n_theta, g.nz, g.nx}, dv);
      for (RegressionMode mode : {RegressionMode::kSeparable, RegressionMode::kJointCorners}) {
        const double got = regression_loss(deltas, anchors, assign, gts, mode).scalar();
        CHECK(std::abs(got - oracle_regression(dv, anchors, assign, gts, mode)) <= 1e-12);
      }
    }
  }
  SUBCASE("gradients match finite differences in both modes") {
    const auto dv = randvec(rng, anchors.count() * 7, 0.3);
    for (RegressionMode mode : {RegressionMode::kSeparable, RegressionMode::kJointCorners}) {
      const double err = grad_check(
          [&](const Tensor& x) { return regression_loss(x, anchors, assign, gts, mode); },
          Tensor::constant({7 * cls.n_theta, g.nz, g.nx}, dv), 1e-5);
      CHECK(err < 1e-4);
    }
  }
  SUBCASE("no positives is a contract violation") {
    AssignmentResult empty;
    empty.label.assign(static_cast<std::size_t>(anchors.count()), 0);
    empty.matched_gt.assign(static_cast<std::size_t>(anchors.count()), -1);
    empty.centerness.assign(static_cast<std::size_t>(anchors.count()), 1.0);
    Tensor deltas = Tensor::zeros({7 * cls.n_theta, g.nz, g.nx});
    CHECK_THROWS_AS(regression_loss(deltas, anchors, empty, gts, RegressionMode::kSeparable),
                    std::logic_error);
    CHECK_THROWS_AS(centerness_loss(Tensor::zeros({cls.n_theta, g.nz, g.nx}), empty),
                    std::logic_error);
  }
}

TEST_CASE("focal loss") {
  const VoxelGrid g = VoxelGrid::create(-0.8, 0.8, 0, 0.4, 2.0, 3.6, 0.4, 0.4, 0.4);
  const ClassConfig cls = ClassConfig::cyclist();
  const AnchorSet anchors = generate_anchors(g, cls);
  Box3D gt = anchors.anchor(1, 2, 1);
  gt.theta += 0.1;
  const AssignmentResult assign = assign_targets(anchors, {gt}, 1.0, g);
  REQUIRE(assign.n_pos > 0);

  SUBCASE("confident correct logits vanish") {
    std::vector<double> lv(static_cast<std::size_t>(anchors.count()));
    for (long long a = 0; a < anchors.count(); ++a) {
      lv[static_cast<std::size_t>(a)] = assign.label[static_cast<std::size_t>(a)] ? 40.0 : -40.0;
    }
    CHECK(focal_loss(Tensor::constant({cls.n_theta, g.nz, g.nx}, lv), assign).scalar() < 1e-6);
  }
  SUBCASE("gamma zero, alpha half reduces to half the BCE sum over anchors") {
    Rng rng(31);
    const auto lv = randvec(rng, anchors.count());
    const double got =
        focal_loss(Tensor::constant({cls.n_theta, g.nz, g.nx}, lv), assign, 0.5, 0.0).scalar();
    double bce = 0;
    for (long long a = 0; a < anchors.count(); ++a) {
      const double x = lv[static_cast<std::size_t>(a)];
      const double p = 1.0 / (1.0 + std::exp(-x));
      bce += assign.label[static_cast<std::size_t>(a)] ? -std::log(p) : -std::log(1.0 - p);
    }
    CHECK(got == doctest::Approx(0.5 * bce / assign.n_pos).epsilon(1e-12));
  }
  SUBCASE("pure negatives are additive in the anchor count") {
    AssignmentResult neg1;
    neg1.label.assign(8, 0);
    neg1.matched_gt.assign(8, -1);
    neg1.centerness.assign(8, 1.0);
    AssignmentResult neg2;
    neg2.label.assign(16, 0);
    neg2.matched_gt.assign(16, -1);
    neg2.centerness.assign(16, 1.0);
    const double l1 = focal_loss(Tensor::zeros({8}), neg1).scalar();      // p = 0.5 everywhere
    const double l2 = focal_loss(Tensor::zeros({16}), neg2).scalar();
    CHECK(l2 == doctest::Approx(2 * l1).epsilon(1e-12));  // both normalized by max(n_pos,1)=1
  }
  SUBCASE("gradient matches finite differences") {
    Rng rng(37);
    const double err = grad_check(
        [&](const Tensor& x) { return focal_loss(x, assign); },
        Tensor::constant({cls.n_theta, g.nz, g.nx}, randvec(rng, anchors.count())), 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("centerness loss") {
  const VoxelGrid g = VoxelGrid::create(-0.8, 0.8, 0, 0.4, 2.0, 3.6, 0.4, 0.4, 0.4);
  const ClassConfig cls = ClassConfig::cyclist();
  const AnchorSet anchors = generate_anchors(g, cls);
  Box3D gt = anchors.anchor(0, 1, 1);
  gt.x += 0.07;
  const AssignmentResult assign = assign_targets(anchors, {gt}, 1.0, g);
  REQUIRE(assign.n_pos > 0);

  SUBCASE("matching predictions score near zero") {
    std::vector<double> lv(static_cast<std::size_t>(anchors.count()), 0.0);
    for (long long a = 0; a < anchors.count(); ++a) {
      if (!assign.label[static_cast<std::size_t>(a)]) continue;
      const double t = assign.centerness[static_cast<std::size_t>(a)];
      lv[static_cast<std::size_t>(a)] = std::log(t / (1 - t + 1e-300));
    }
    // targets in (1/e, 1]; sigmoid(logit) == target within double rounding
    const double loss = centerness_loss(Tensor::constant({cls.n_theta, g.nz, g.nx}, lv), assign).scalar();
    // BCE at its optimum equals the target entropy, not zero, unless t == 1;
    // compare against the entropy floor instead
    double floor = 0;
    for (long long a = 0; a < anchors.count(); ++a) {
      if (!assign.label[static_cast<std::size_t>(a)]) continue;
      const double t = assign.centerness[static_cast<std::size_t>(a)];
      if (t > 0 && t < 1) floor += -(t * std::log(t) + (1 - t) * std::log(1 - t));
    }
    floor /= assign.n_pos;
    CHECK(loss == doctest::Approx(floor).epsilon(1e-9));
  }
  SUBCASE("zero logit against a unit target scores ln 2") {
    AssignmentResult one;
    one.label = {1};
    one.matched_gt = {0};
    one.centerness = {1.0};
    one.n_pos = 1;
    CHECK(centerness_loss(Tensor::zeros({1}), one).scalar() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("random case matches a scalar oracle") {
    Rng rng(41);
    const auto lv = randvec(rng, anchors.count());
    double want = 0;
    for (long long a = 0; a < anchors.count(); ++a) {
      if (!assign.label[static_cast<std::size_t>(a)]) continue;
      const double x = lv[static_cast<std::size_t>(a)];
      const double p = 1.0 / (1.0 + std::exp(-x));
      const double t = assign.centerness[static_cast<std::size_t>(a)];
      want += -(t * std::log(p) + (1 - t) * std::log(1 - p));
    }
    want /= assign.n_pos;
    const double got =
        centerness_loss(Tensor::constant({cls.n_theta, g.nz, g.nx}, lv), assign).scalar();
    CHECK(std::abs(got - want) <= 1e-12);
  }
}

namespace {

std::vector<int> oracle_nms(const std::vector<Box3D>& boxes, const std::vector<double>& scores,
                            double thresh) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    return a < b;
  });
  std::vector<int> kept;
  std::vector<bool> dead(boxes.size(), false);
  for (int i : order) {
    if (dead[static_cast<std::size_t>(i)]) continue;
    kept.push_back(i);
    for (int j : order) {
      if (j == i || dead[static_cast<std::size_t>(j)]) continue;
      if (rotated_iou_bev(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]) > thresh) {
        dead[static_cast<std::size_t>(j)] = true;
      }
    }
  }
  return kept;
}

}  // namespace

TEST_CASE("BEV non-maximum suppression") {
  Rng rng(43);
  SUBCASE("identical boxes collapse to the higher score") {
    const Box3D b = random_box(rng);
    const std::vector<int> kept = bev_nms({b, b}, {0.9, 0.8}, 0.6);
    CHECK(kept == std::vector<int>{0});
  }
  SUBCASE("disjoint boxes all survive") {
    Box3D a = random_box(rng);
    Box3D b = a, c = a;
    b.x += 50;
    c.x -= 50;
    const std::vector<int> kept = bev_nms({a, b, c}, {0.5, 0.7, 0.6}, 0.6);
    CHECK(kept.size() == 3);
    CHECK(kept == std::vector<int>{1, 2, 0});
  }
  SUBCASE("random fifty-box sets match the brute-force oracle") {
    for (int t = 0; t < 10; ++t) {
      std::vector<Box3D> boxes;
      std::vector<double> scores;
      for (int i = 0; i < 50; ++i) {
        Box3D b = random_box(rng);
        b.x = rng.uniform(-6, 6);
        b.z = rng.uniform(3, 12);
        boxes.push_back(b);
        scores.push_back(rng.uniform());
      }
      CHECK(bev_nms(boxes, scores, 0.45) == oracle_nms(boxes, scores, 0.45));
    }
  }
  SUBCASE("kept scores are non-increasing and below-threshold pairwise") {
    std::vector<Box3D> boxes;
    std::vector<double> scores;
    for (int i = 0; i < 40; ++i) {
      Box3D b = random_box(rng);
      b.x = rng.uniform(-4, 4);
      b.z = rng.uniform(3, 9);
      boxes.push_back(b);
      scores.push_back(rng.uniform());
    }
    const std::vector<int> kept = bev_nms(boxes, scores, 0.5);
    for (std::size_t i = 1; i < kept.size(); ++i) {
      CHECK(scores[static_cast<std::size_t>(kept[i - 1])] >= scores[static_cast<std::size_t>(kept[i])]);
    }
    for (std::size_t i = 0; i < kept.size(); ++i)
      for (std::size_t j = i + 1; j < kept.size(); ++j) {
        CHECK(rotated_iou_bev(boxes[static_cast<std::size_t>(kept[i])],
                              boxes[static_cast<std::size_t>(kept[j])]) <= 0.5);
      }
  }
  SUBCASE("threshold domain") {
    CHECK_THROWS_AS(bev_nms({}, {}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(bev_nms({}, {}, 1.0), std::invalid_argument);
  }
}

TEST_CASE("detection records round trip through the text format") {
  Rng rng(47);
  std::vector<Detection> dets;
  for (int i = 0; i < 5; ++i) dets.push_back({random_box(rng), rng.uniform(), "Cyclist"});
  const std::vector<Detection> back = parse_detections(format_detections(dets));
  REQUIRE(back.size() == dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    CHECK(back[i].class_name == dets[i].class_name);
    CHECK(back[i].score == dets[i].score);
    CHECK(back[i].box.x == dets[i].box.x);
    CHECK(back[i].box.theta == dets[i].box.theta);
  }
}
