#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "dsgn/pipeline.hpp"
#include "dsgn/rng.hpp"

using namespace dsgn;

namespace {

// A deliberately tiny configuration for fast structural tests. The object
// class is scaled down so boxes fit the miniature grid.
PipelineConfig mini_config() {
  PipelineConfig cfg = PipelineConfig::toy_default();
  cfg.grid = VoxelGrid::create(-0.8, 0.8, -0.4, 0.4, 2.0, 3.6, 0.2, 0.2, 0.2);
  cfg.synth.grid = cfg.grid;
  cfg.synth.image_w = 16;
  cfg.synth.image_h = 8;
  cfg.synth.channels = 3;
  cfg.synth.rig.k = {10.0, 10.0, 7.5, 3.5};
  cfg.synth.rig.baseline = 0.5;
  cfg.synth.object_class = ClassConfig{"Toy", 0.5, 0.4, 0.7, 0.15, 2.0, 4};
  cfg.synth.min_boxes = 1;
  cfg.synth.max_boxes = 1;
  cfg.synth.placement_margin = 0.05;
  cfg.synth.size_jitter = 0.1;
  cfg.backbone_hidden = 4;
  cfg.backbone_out = 3;
  cfg.reducer_hidden = 3;
  cfg.tower_hidden = 3;
  cfg.bev_channels = 4;
  cfg.max_disp = 4;
  cfg.steps = 4;
  cfg.train_scenes = 2;
  cfg.val_scenes = 2;
  return cfg;
}

}  // namespace

TEST_CASE("defaults reproduce the published constants") {
  // grid
  const VoxelGrid g = VoxelGrid::kitti_default();
  CHECK(g.x_min == -30.4);
  CHECK(g.x_max == 30.4);
  CHECK(g.y_min == -1.0);
  CHECK(g.y_max == 3.0);
  CHECK(g.z_min == 2.0);
  CHECK(g.z_max == 40.4);
  CHECK(g.nx == 304);
  CHECK(g.ny == 20);
  CHECK(g.nz == 192);
  const std::vector<double> cands = depth_candidates(g);
  CHECK(cands.size() == 192);
  CHECK(cands.front() == doctest::Approx(2.1));
  CHECK(cands.back() == doctest::Approx(40.3));
  // anchors and gammas
  CHECK(ClassConfig::car().gamma == 1.0);
  CHECK(ClassConfig::pedestrian().gamma == 5.0);
  CHECK(ClassConfig::cyclist().gamma == 5.0);
  CHECK(ClassConfig::car().n_theta == 4);
  // NMS threshold
  CHECK(PipelineConfig::toy_default().nms_iou == 0.6);
}

TEST_CASE("config validation restricts construction/supervision pairs") {
  PipelineConfig cfg = mini_config();
  cfg.construction = ConstructionMode::kPsv3dgv;
  cfg.supervision = SupervisionMode::kOccupancy;
  CHECK_THROWS_AS(cfg.validate(), std::logic_error);
  cfg.construction = ConstructionMode::kCv3dgv;
  cfg.supervision = SupervisionMode::kNone;
  CHECK_THROWS_AS(cfg.validate(), std::logic_error);
  cfg.construction = ConstructionMode::kImg3dv;
  cfg.supervision = SupervisionMode::kDepth;
  CHECK_THROWS_AS(cfg.validate(), std::logic_error);
  cfg.supervision = SupervisionMode::kOccupancy;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("config files round trip") {
  PipelineConfig cfg = mini_config();
  cfg.construction = ConstructionMode::kCv3dgv;
  cfg.supervision = SupervisionMode::kDepth;
  cfg.feature_mode = VoxelFeatureMode::kProbability;
  cfg.att_concat = true;
  cfg.regression = RegressionMode::kJointCorners;
  cfg.steps = 123;
  cfg.lr = 0.0025;
  cfg.seed = 99;
  const PipelineConfig back = parse_config(format_config(cfg));
  CHECK(back.grid == cfg.grid);
  CHECK(back.construction == cfg.construction);
  CHECK(back.supervision == cfg.supervision);
  CHECK(back.feature_mode == cfg.feature_mode);
  CHECK(back.att_concat == cfg.att_concat);
  CHECK(back.regression == cfg.regression);
  CHECK(back.steps == 123);
  CHECK(back.lr == 0.0025);
  CHECK(back.seed == 99);
  CHECK(back.synth.rig.baseline == cfg.synth.rig.baseline);
  CHECK(back.synth.image_w == cfg.synth.image_w);

  CHECK_THROWS_AS(parse_config("[network]\nbogus_key = 3\n"), std::runtime_error);
}

TEST_CASE("a zero-weight network predicts the candidate mean and zero logits") {
  const PipelineConfig cfg = mini_config();
  Tape tape;
  TinyNetwork net = init_network(tape, cfg, 5);
  for (auto& [name, p] : net.params) {
    std::fill(p.mutable_values().begin(), p.mutable_values().end(), 0.0);
  }
  const SceneSample scene = synth_scene(3, cfg.synth);
  const ForwardResult out = forward(net, scene, cfg);

  const std::vector<double> cands = depth_candidates(cfg.grid);
  const double mid = std::accumulate(cands.begin(), cands.end(), 0.0) / static_cast<double>(cands.size());
  for (double v : out.depth_map.values()) CHECK(v == doctest::Approx(mid).epsilon(1e-12));
  for (double v : out.cls.values()) CHECK(v == 0.0);
  for (double v : out.deltas.values()) CHECK(v == 0.0);
  for (double v : out.ctr.values()) CHECK(v == 0.0);
}

TEST_CASE("forward output shapes follow the grid and anchor layout") {
  for (ConstructionMode mode :
       {ConstructionMode::kPsv3dgv, ConstructionMode::kCv3dgv, ConstructionMode::kImg3dv}) {
    PipelineConfig cfg = mini_config();
    cfg.construction = mode;
    cfg.supervision = mode == ConstructionMode::kPsv3dgv ? SupervisionMode::kDepth
                      : mode == ConstructionMode::kCv3dgv ? SupervisionMode::kDepth
                                                          : SupervisionMode::kOccupancy;
    Tape tape;
    TinyNetwork net = init_network(tape, cfg, 5);
    const SceneSample scene = synth_scene(3, cfg.synth);
    const ForwardResult out = forward(net, scene, cfg);
    const int nt = cfg.synth.object_class.n_theta;
    CHECK(out.cls.shape() == Shape{nt, cfg.grid.nz, cfg.grid.nx});
    CHECK(out.deltas.shape() == Shape{7 * nt, cfg.grid.nz, cfg.grid.nx});
    CHECK(out.ctr.shape() == Shape{nt, cfg.grid.nz, cfg.grid.nx});
    if (mode == ConstructionMode::kImg3dv) {
      CHECK_FALSE(out.depth_map.defined());
      CHECK(out.occ_logits.shape() == Shape{cfg.grid.nz, cfg.grid.ny, cfg.grid.nx});
    } else {
      const int h = cfg.synth.image_h / cfg.stride, w = cfg.synth.image_w / cfg.stride;
      CHECK(out.depth_map.shape() == Shape{h, w});
      CHECK(out.depth_is_disparity == (mode == ConstructionMode::kCv3dgv));
    }
  }
}

TEST_CASE("total loss adds exactly its active terms") {
  PipelineConfig cfg = mini_config();
  Tape tape;
  TinyNetwork net = init_network(tape, cfg, 5);
  const SceneSample scene = synth_scene(3, cfg.synth);
  const SceneTargets targets = make_targets(scene, cfg);
  REQUIRE(targets.assign.n_pos > 0);

  SUBCASE("depth supervision has four terms that sum") {
    const ForwardResult out = forward(net, scene, cfg);
    LossBreakdown bd;
    const Tensor loss = total_loss(out, targets, cfg, &bd);
    CHECK(bd.terms == 4);
    const AnchorSet anchors = generate_anchors(cfg.grid, cfg.synth.object_class);
    const double cls = focal_loss(out.cls, targets.assign).scalar();
    const double reg = regression_loss(out.deltas, anchors, targets.assign, targets.boxes,
                                       cfg.regression, cfg.corner_flip_min)
                           .scalar();
    const double ctr = centerness_loss(out.ctr, targets.assign).scalar();
    const double dep = depth_loss(out.depth_map, targets.depth_target).scalar();
    CHECK(std::abs(loss.scalar() - (cls + reg + ctr + dep)) <= 1e-12);
  }
  SUBCASE("supervision none leaves exactly three terms") {
    cfg.supervision = SupervisionMode::kNone;
    const ForwardResult out = forward(net, scene, cfg);
    LossBreakdown bd;
    const Tensor loss = total_loss(out, targets, cfg, &bd);
    CHECK(bd.terms == 3);
    CHECK(loss.scalar() == doctest::Approx(bd.cls + bd.reg + bd.ctr).epsilon(1e-12));
  }
}

TEST_CASE("gradients from the detection heads reach the stereo-volume weights") {
  PipelineConfig cfg = mini_config();
  cfg.supervision = SupervisionMode::kNone;
  Tape tape;
  TinyNetwork net = init_network(tape, cfg, 5);
  const SceneSample scene = synth_scene(3, cfg.synth);
  const SceneTargets targets = make_targets(scene, cfg);
  const ForwardResult out = forward(net, scene, cfg);
  const Tensor cls_only = focal_loss(out.cls, targets.assign);
  tape.backward(cls_only);
  double norm = 0;
  for (double g : net.get("red.w1").grad()) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("training is deterministic and a zero-step run is a no-op") {
  const PipelineConfig cfg = mini_config();
  SUBCASE("zero steps leave the parameters untouched") {
    PipelineConfig zero = cfg;
    zero.steps = 0;
    Tape tape;
    TinyNetwork net = init_network(tape, zero, zero.seed);
    std::vector<std::vector<double>> before;
    for (const auto& [n, p] : net.params) before.push_back(p.values());
    train_toy(tape, net, zero, "");
    for (std::size_t i = 0; i < net.params.size(); ++i) {
      CHECK(net.params[i].second.values() == before[i]);
    }
  }
  SUBCASE("equal seeds give bitwise-identical parameters") {
    auto run = [&] {
      Tape tape;
      TinyNetwork net = init_network(tape, cfg, cfg.seed);
      train_toy(tape, net, cfg, "");
      std::vector<std::vector<double>> out;
      for (const auto& [n, p] : net.params) out.push_back(p.values());
      return out;
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("checkpoints round trip") {
  const PipelineConfig cfg = mini_config();
  Tape tape;
  TinyNetwork net = init_network(tape, cfg, 5);
  save_checkpoint("test_ckpt.bin", net);
  Tape tape2;
  TinyNetwork other = init_network(tape2, cfg, 6);
  load_checkpoint("test_ckpt.bin", other);
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    CHECK(other.params[i].second.values() == net.params[i].second.values());
  }
  std::filesystem::remove("test_ckpt.bin");
}

TEST_CASE("flip augmentation trains without redefining the anchors") {
  PipelineConfig cfg = mini_config();
  cfg.flip_augment = true;
  cfg.steps = 6;
  Tape tape;
  TinyNetwork net = init_network(tape, cfg, cfg.seed);
  const TrainResult res = train_toy(tape, net, cfg, "");
  CHECK(res.steps_run == 6);
  for (double l : res.loss_curve) CHECK(std::isfinite(l));
}

TEST_CASE("detection decodes boxes above the score threshold") {
  const PipelineConfig cfg = mini_config();
  Tape tape;
  TinyNetwork net = init_network(tape, cfg, cfg.seed);
  const SceneSample scene = synth_scene(3, cfg.synth);
  PipelineConfig all = cfg;
  all.score_thresh = 0.0;
  const std::vector<DetectionRecord> dets = detect(net, scene, all);
  CHECK(!dets.empty());
  CHECK(static_cast<int>(dets.size()) <= all.max_dets);
  for (std::size_t i = 1; i < dets.size(); ++i) CHECK(dets[i - 1].score >= dets[i].score);
}

TEST_CASE("evaluate produces a report with the overall row defined") {
  const PipelineConfig cfg = mini_config();
  Tape tape;
  TinyNetwork net = init_network(tape, cfg, cfg.seed);
  const std::vector<SceneSample> val = make_scene_set(cfg, 2, true);
  const EvalReport rep = evaluate(net, val, cfg);
  CHECK(rep.defined[3]);
  CHECK(rep.ap_bev[3] >= 0.0);
  CHECK(rep.ap_bev[3] <= 1.0);
  CHECK(rep.has_depth);
  CHECK(rep.binned_ap.size() == 8);
  const std::string text = format_report(rep);
  CHECK(text.find("overall") != std::string::npos);
}

TEST_CASE("a single-cell ablation matrix reduces to train plus eval") {
  PipelineConfig cfg = mini_config();
  cfg.steps = 2;
  const auto rows = run_ablation({{"IMG->PSCV->3DV / PSCV", cfg}});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].ok);
  CHECK(rows[0].label == "IMG->PSCV->3DV / PSCV");
  const std::string table = format_ablation(rows);
  CHECK(table.find("IMG->PSCV->3DV") != std::string::npos);
}

TEST_CASE("the default ablation matrix carries the published variant labels") {
  const auto matrix = default_ablation_matrix(mini_config());
  REQUIRE(matrix.size() == 5);
  CHECK(matrix[0].first.find("IMG->3DV") != std::string::npos);
  CHECK(matrix[2].first.find("IMG->CV->3DV") != std::string::npos);
  CHECK(matrix[4].first.find("IMG->PSCV->3DV") != std::string::npos);
  for (const auto& [label, cfg] : matrix) CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("divergence aborts with a diagnostic") {
  PipelineConfig cfg = mini_config();
  cfg.steps = 5;
  Tape tape;
  TinyNetwork net = init_network(tape, cfg, cfg.seed);
  // a poisoned classification weight reaches the loss unconditionally
  net.get("head.cls_w").mutable_values()[0] = std::nan("");
  CHECK_THROWS_AS(train_toy(tape, net, cfg, "test_diverge"), std::runtime_error);
  CHECK(std::filesystem::exists("test_diverge/diagnostic.txt"));
  std::filesystem::remove_all("test_diverge");
}
