#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dsgn/data_io.hpp"
#include "dsgn/eval.hpp"
#include "dsgn/pipeline.hpp"
#include "dsgn/rng.hpp"

using namespace dsgn;

namespace {

SynthConfig toy_synth() { return PipelineConfig::toy_default().synth; }

}  // namespace

TEST_CASE("calibration parsing") {
  SUBCASE("a translation of -fx*0.54 in P3 gives baseline 0.54") {
    const std::string text =
        "P2: 720 0 620 0 0 720 187 0 0 0 1 0\n"
        "P3: 720 0 620 -388.8 0 720 187 0 0 0 1 0\n";
    const Calibration c = parse_calib(text);
    const StereoRig rig = c.rig();
    CHECK(rig.baseline == doctest::Approx(0.54).epsilon(1e-12));
    CHECK(rig.k.fx == 720.0);
    CHECK(rig.k.cu == 620.0);
    CHECK(rig.k.cv == 187.0);
  }
  SUBCASE("malformed floats name the offending line") {
    const std::string text = "P2: 720 0 620 0 0 720 187 0 0 0 1 0\nP3: 720 oops\n";
    try {
      parse_calib(text);
      FAIL("expected a parse error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
  SUBCASE("missing keys and wrong counts are rejected") {
    CHECK_THROWS_AS(parse_calib("P2: 1 2 3\n"), std::runtime_error);
    CHECK_THROWS_AS(parse_calib("P2: 720 0 620 0 0 720 187 0 0 0 1 0\n"), std::runtime_error);
  }
  SUBCASE("format/parse round trip is exact") {
    Rng rng(3);
    Calibration c;
    for (auto& v : c.p2) v = rng.normal();
    c.p2[0] = 700.0;
    c.p3 = c.p2;
    c.p3[3] = c.p2[3] - 700.0 * 0.5;
    const Calibration back = parse_calib(format_calib(c));
    for (int i = 0; i < 12; ++i) {
      CHECK(back.p2[static_cast<std::size_t>(i)] == doctest::Approx(c.p2[static_cast<std::size_t>(i)]).epsilon(1e-12));
      CHECK(back.p3[static_cast<std::size_t>(i)] == doctest::Approx(c.p3[static_cast<std::size_t>(i)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("label parsing") {
  const std::string line =
      "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.56 1.60 3.90 2.45 1.65 13.22 -1.72\n";
  SUBCASE("a car line populates the box fields") {
    const std::vector<LabelRecord> recs = parse_labels(line);
    REQUIRE(recs.size() == 1);
    const Box3D b = label_to_box(recs[0]);
    CHECK(b.h == 1.56);
    CHECK(b.w == 1.60);
    CHECK(b.l == 3.90);
    CHECK(b.x == 2.45);
    CHECK(b.z == 13.22);
  }
  SUBCASE("the stored location is the bottom-face center") {
    LabelRecord r;
    r.type = "Car";
    r.y = 1.65;
    r.h = 1.5;
    CHECK(label_to_box(r).y == doctest::Approx(0.9).epsilon(1e-15));
  }
  SUBCASE("DontCare rows parse but are excluded from ground-truth lists") {
    const std::string text = line + "DontCare -1 -1 -10 0 0 10 10 -1 -1 -1 -1000 -1000 -1000 -10\n";
    const std::vector<LabelRecord> recs = parse_labels(text);
    CHECK(recs.size() == 2);
    int scored = 0;
    for (const auto& r : recs) {
      if (r.type != "DontCare") ++scored;
    }
    CHECK(scored == 1);
  }
  SUBCASE("field-count mismatches are parse errors") {
    CHECK_THROWS_AS(parse_labels("Car 0.0 0 -1.58 587 173 614\n"), std::runtime_error);
  }
  SUBCASE("an optional sixteenth field is the score") {
    const std::string with_score =
        "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.56 1.60 3.90 2.45 1.65 13.22 -1.72 0.87\n";
    const std::vector<LabelRecord> recs = parse_labels(with_score);
    REQUIRE(recs.size() == 1);
    REQUIRE(recs[0].score.has_value());
    CHECK(*recs[0].score == 0.87);
  }
}

TEST_CASE("lidar points project to a sparse z-buffered depth map") {
  const Intrinsics k{100, 100, 20, 10};
  SUBCASE("a point on the optical axis lands on the principal point") {
    const SparseDepthMap m = lidar_to_sparse_depth({{0, 0, 10}}, k, 40, 20);
    CHECK(m.n_valid == 1);
    CHECK(m.at(10, 20) == 10.0);
  }
  SUBCASE("the nearer of two points on one pixel wins") {
    const SparseDepthMap m = lidar_to_sparse_depth({{0, 0, 9}, {0, 0, 5}}, k, 40, 20);
    CHECK(m.at(10, 20) == 5.0);
    const SparseDepthMap m2 = lidar_to_sparse_depth({{0, 0, 5}, {0, 0, 9}}, k, 40, 20);
    CHECK(m2.at(10, 20) == 5.0);
  }
  SUBCASE("a random cloud matches the loop oracle exactly") {
    Rng rng(7);
    std::vector<WorldPoint> cloud;
    for (int i = 0; i < 300; ++i) {
      cloud.push_back({rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(0.5, 20)});
    }
    const int w = 40, h = 20;
    const SparseDepthMap got = lidar_to_sparse_depth(cloud, k, w, h);
    std::vector<double> want(static_cast<std::size_t>(w) * h, 0.0);
    for (const auto& p : cloud) {
      const int u = static_cast<int>(std::lround(k.fx * p.x / p.z + k.cu));
      const int v = static_cast<int>(std::lround(k.fy * p.y / p.z + k.cv));
      if (u < 0 || u >= w || v < 0 || v >= h) continue;
      double& cell = want[static_cast<std::size_t>(v) * w + u];
      if (cell <= 0 || p.z < cell) cell = p.z;
    }
    CHECK(got.depth == want);
  }
}

TEST_CASE("synthetic scenes are deterministic per seed") {
  const SynthConfig cfg = toy_synth();
  const SceneSample a = synth_scene(42, cfg);
  const SceneSample b = synth_scene(42, cfg);
  CHECK(a.left.values() == b.left.values());
  CHECK(a.right.values() == b.right.values());
  CHECK(a.depth.depth == b.depth.depth);
  REQUIRE(a.boxes.size() == b.boxes.size());
  for (std::size_t i = 0; i < a.boxes.size(); ++i) {
    CHECK(a.boxes[i].x == b.boxes[i].x);
    CHECK(a.boxes[i].theta == b.boxes[i].theta);
  }
  const SceneSample c = synth_scene(43, cfg);
  CHECK(a.left.values() != c.left.values());
}

TEST_CASE("a zero-box configuration yields a background-only scene") {
  SynthConfig cfg = toy_synth();
  cfg.min_boxes = 0;
  cfg.max_boxes = 0;
  const SceneSample s = synth_scene(7, cfg);
  CHECK(s.boxes.empty());
  for (std::int64_t i = 0; i < s.depth.height * s.depth.width; ++i) {
    // everything hits the wall or the ground, so dense depth is positive
    CHECK(s.depth.depth[static_cast<std::size_t>(i)] >= 0.0);
  }
}

TEST_CASE("rendered stereo geometry is exact") {
  const SynthConfig cfg = toy_synth();
  const SceneRenderer renderer(11, cfg);
  const double fxb = cfg.rig.k.fx * cfg.rig.baseline;
  Rng rng(13);
  std::vector<double> fl, fr;
  int checked_disparity = 0, checked_consistency = 0;
  for (int trial = 0; trial < 4000 && (checked_disparity < 200 || checked_consistency < 200);
       ++trial) {
    const double u = rng.uniform(1.0, cfg.image_w - 2.0);
    const double v = rng.uniform(1.0, cfg.image_h - 2.0);
    const double z = renderer.render(false, u, v, &fl);

    // disparity check at object pixels
    const double disp = fxb / z;
    const double ur = u - disp;
    if (ur < 0 || ur > cfg.image_w - 1) continue;
    const double zr = renderer.render(true, ur, v, &fr);
    if (std::abs(zr - z) > 1e-9) continue;  // occluded in the right view
    ++checked_disparity;
    // the right-view ray through (u - fx b / z, v) hits the same point, so
    // its depth reproduces fx b / disparity to numerical accuracy
    CHECK(std::abs(fxb / zr - disp) <= 1e-9 * std::max(1.0, disp));
    // stereo feature consistency on non-occluded pixels
    ++checked_consistency;
    for (std::size_t c = 0; c < fl.size(); ++c) {
      CHECK(std::abs(fl[c] - fr[c]) <= 1e-6);
    }
  }
  CHECK(checked_disparity >= 200);
  CHECK(checked_consistency >= 200);
}

TEST_CASE("horizontal flip") {
  const SynthConfig cfg = toy_synth();
  const SceneSample s = synth_scene(21, cfg);

  SUBCASE("is an involution") {
    const SceneSample f2 = horizontal_flip(horizontal_flip(s));
    CHECK(f2.left.values() == s.left.values());
    CHECK(f2.right.values() == s.right.values());
    CHECK(f2.depth.depth == s.depth.depth);
    CHECK(f2.rig.k.cu == s.rig.k.cu);
    REQUIRE(f2.boxes.size() == s.boxes.size());
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      CHECK(f2.boxes[i].x == s.boxes[i].x);
      CHECK(f2.boxes[i].y == s.boxes[i].y);
      CHECK(f2.boxes[i].z == s.boxes[i].z);
      CHECK(f2.boxes[i].h == s.boxes[i].h);
      // pi - (pi - theta) can round in the last ulp
      CHECK(f2.boxes[i].theta == doctest::Approx(s.boxes[i].theta).epsilon(1e-14));
    }
  }
  SUBCASE("mirror rule for boxes and intrinsics") {
    Box3D b;
    b.x = 2.0;
    b.theta = 0.0;
    SceneSample plain = s;
    plain.boxes = {b};
    const SceneSample f = horizontal_flip(plain);
    CHECK(f.boxes[0].x == -2.0);
    CHECK(f.boxes[0].theta == doctest::Approx(M_PI));
    CHECK(f.rig.k.cu == doctest::Approx((s.depth.width - 1) - s.rig.k.cu));
  }
  SUBCASE("ground-truth-as-detections AP is invariant under joint flips") {
    const IouFn iou = [](const Box3D& a, const Box3D& b) { return rotated_iou_bev(a, b); };
    std::vector<DetectionRecord> dets;
    for (const auto& b : s.boxes) dets.push_back({b, 0.9, 0});
    const double before = average_precision(dets, s.boxes, iou, 0.7, 40);
    const SceneSample f = horizontal_flip(s);
    std::vector<DetectionRecord> fdets;
    for (const auto& b : f.boxes) fdets.push_back({b, 0.9, 0});
    const double after = average_precision(fdets, f.boxes, iou, 0.7, 40);
    CHECK(before == after);
    CHECK(before == 1.0);
  }
}

TEST_CASE("occupancy voxelization counts points per voxel") {
  const VoxelGrid g = VoxelGrid::create(-1, 1, 0, 1, 2, 4, 1, 1, 1);
  const std::vector<WorldPoint> pts = {{-0.5, 0.5, 2.5}, {-0.5, 0.5, 2.6}, {0.5, 0.5, 3.5},
                                       {5.0, 0.5, 2.5}};  // last one outside
  const Tensor occ = voxelize_occupancy(pts, g, 1);
  REQUIRE(occ.shape() == Shape{2, 1, 2});
  CHECK(occ.values() == std::vector<double>{1, 0, 0, 1});
  const Tensor occ2 = voxelize_occupancy(pts, g, 2);
  CHECK(occ2.values() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("scene save/load round trip") {
  const SynthConfig cfg = toy_synth();
  const SceneSample s = synth_scene(33, cfg);
  const std::string dir = "test_scene_io";
  save_scene(dir, 33, s, cfg.object_class.name);
  const auto scenes = list_scenes(dir);
  REQUIRE(scenes.size() == 1);
  CHECK(scenes[0].first == 33);
  const SceneSample back = load_scene(scenes[0].second, cfg.grid);
  CHECK(back.left.values() == s.left.values());
  CHECK(back.right.values() == s.right.values());
  CHECK(back.depth.depth == s.depth.depth);
  REQUIRE(back.boxes.size() == s.boxes.size());
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    CHECK(back.boxes[i].x == doctest::Approx(s.boxes[i].x).epsilon(1e-12));
    CHECK(back.boxes[i].y == doctest::Approx(s.boxes[i].y).epsilon(1e-12));
    CHECK(back.boxes[i].l == doctest::Approx(s.boxes[i].l).epsilon(1e-12));
    CHECK(back.boxes[i].theta == doctest::Approx(s.boxes[i].theta).epsilon(1e-12));
  }
  CHECK(back.rig.baseline == doctest::Approx(s.rig.baseline).epsilon(1e-12));
  CHECK(back.rig.k.fx == doctest::Approx(s.rig.k.fx).epsilon(1e-12));
  std::filesystem::remove_all(dir);
}

TEST_CASE("depth maps export as 16-bit millimeter PGM") {
  write_depth_pgm("test_depth.pgm", {1.234, 0.0, 65.0, 2.5}, 2, 2);
  std::ifstream is("test_depth.pgm", std::ios::binary);
  std::string magic;
  int w, h, maxval;
  is >> magic >> w >> h >> maxval;
  CHECK(magic == "P5");
  CHECK(w == 2);
  CHECK(h == 2);
  CHECK(maxval == 65535);
  is.get();  // single whitespace after the header
  unsigned char bytes[8];
  is.read(reinterpret_cast<char*>(bytes), 8);
  CHECK(is.gcount() == 8);
  const int v0 = bytes[0] << 8 | bytes[1];
  CHECK(v0 == 1234);
  std::filesystem::remove("test_depth.pgm");
}
