#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dsgn/data_io.hpp"
#include "dsgn/pipeline.hpp"
#include "dsgn/rng.hpp"

namespace fs = std::filesystem;
using namespace dsgn;

namespace {

PipelineConfig config_or_default(const std::string& path) {
  if (path.empty()) return PipelineConfig::toy_default();
  return load_config_file(path);
}

// Op-level gradient checks; returns worst error per op name.
std::vector<std::pair<std::string, double>> run_gradcheck(const std::string& which) {
  std::vector<std::pair<std::string, double>> out;
  PipelineConfig cfg = PipelineConfig::toy_default();
  Rng rng(24601);

  auto maybe = [&](const std::string& name) {
    return which == "all" || which == name;
  };
  auto randvec = [&rng](std::int64_t n, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = scale * rng.normal();
    return v;
  };

  const VoxelGrid grid = VoxelGrid::create(-0.8, 0.8, -0.4, 0.4, 2.0, 3.6, 0.2, 0.2, 0.2);
  const Intrinsics k{10.0, 10.0, 8.0, 4.0};
  const StereoRig rig{k, 0.5};

  if (maybe("soft_argmin")) {
    const std::vector<double> cands = depth_candidates(grid);
    Tensor at = Tensor::constant({grid.nz, 3, 4}, randvec(grid.nz * 12));
    const double err = grad_check(
        [&](const Tensor& x) {
          return sum(soft_argmin(CostVolume{x, cands}));
        },
        at, 1e-5);
    out.emplace_back("soft_argmin", err);
  }
  if (maybe("warp_psv_to_3dgv")) {
    Tensor at = Tensor::constant({2, grid.nz, 9, 17}, randvec(2 * grid.nz * 9 * 17));
    const double err = grad_check(
        [&](const Tensor& x) {
          PlaneSweepVolume psv{x, depth_candidates(grid), 1, rig};
          return sum(warp_psv_to_3dgv(psv, grid, k).feature);
        },
        at, 1e-5);
    out.emplace_back("warp_psv_to_3dgv", err);
  }
  if (maybe("lift_image_to_3dv")) {
    Tensor at = Tensor::constant({2, 9, 17}, randvec(2 * 9 * 17));
    const double err = grad_check(
        [&](const Tensor& x) { return sum(lift_image_to_3dv(x, grid, k).feature); }, at, 1e-5);
    out.emplace_back("lift_image_to_3dv", err);
  }
  if (maybe("build_psv")) {
    Tensor at = Tensor::constant({2 * 2, 5, 9}, randvec(4 * 5 * 9));
    const double err = grad_check(
        [&](const Tensor& x) {
          Tensor left = reshape(x, {4, 5, 9});  // split halves below
          // use the same tensor for both views to exercise both gradients
          return sum(build_psv(left, left, rig, grid, 1).feature);
        },
        at, 1e-5);
    out.emplace_back("build_psv", err);
  }
  if (maybe("decode_box")) {
    // joint-corner regression loss drives decode_box's differentiable path
    const VoxelGrid g2 = VoxelGrid::create(-0.8, 0.8, -0.4, 0.4, 2.0, 3.2, 0.4, 0.4, 0.4);
    AnchorSet anchors = generate_anchors(g2, ClassConfig::cyclist());
    std::vector<Box3D> gts = {anchors.anchor(1)};
    gts[0].x += 0.13;
    gts[0].z -= 0.2;
    gts[0].theta = wrap_angle_2pi(gts[0].theta + 0.2);
    AssignmentResult assign = assign_targets(anchors, gts, 1.0, g2);
    Tensor at = Tensor::constant({7 * 4, g2.nz, g2.nx}, randvec(28 * g2.nz * g2.nx, 0.2));
    const double err = grad_check(
        [&](const Tensor& x) {
          return regression_loss(x, anchors, assign, gts, RegressionMode::kJointCorners);
        },
        at, 1e-5);
    out.emplace_back("decode_box(joint_corners)", err);
  }
  if (maybe("losses")) {
    const VoxelGrid g2 = VoxelGrid::create(-0.8, 0.8, -0.4, 0.4, 2.0, 3.2, 0.4, 0.4, 0.4);
    AnchorSet anchors = generate_anchors(g2, ClassConfig::cyclist());
    std::vector<Box3D> gts = {anchors.anchor(2)};
    gts[0].x += 0.1;
    AssignmentResult assign = assign_targets(anchors, gts, 1.0, g2);
    Tensor at_logit = Tensor::constant({4, g2.nz, g2.nx}, randvec(4 * g2.nz * g2.nx));
    out.emplace_back("focal_loss",
                     grad_check([&](const Tensor& x) { return focal_loss(x, assign); }, at_logit, 1e-5));
    out.emplace_back("centerness_loss",
                     grad_check([&](const Tensor& x) { return centerness_loss(x, assign); }, at_logit, 1e-5));
    Tensor at_delta = Tensor::constant({28, g2.nz, g2.nx}, randvec(28 * g2.nz * g2.nx, 0.2));
    out.emplace_back(
        "regression_loss(separable)",
        grad_check(
            [&](const Tensor& x) {
              return regression_loss(x, anchors, assign, gts, RegressionMode::kSeparable);
            },
            at_delta, 1e-5));
    SparseDepthMap gt = SparseDepthMap::from_dense(3, 4, {2.5, 0, 3.0, 0, 0, 2.2, 0, 2.9, 3.1, 0, 0, 2.4});
    Tensor at_depth = Tensor::constant({3, 4}, randvec(12, 0.3));
    out.emplace_back("depth_loss", grad_check(
                                       [&](const Tensor& x) {
                                         return depth_loss(add(x, 2.7), gt);
                                       },
                                       at_depth, 1e-5));
    Tensor occ_target = Tensor::constant({2, 2, 2}, {1, 0, 0, 1, 0, 0, 1, 0});
    Tensor at_occ = Tensor::constant({2, 2, 2}, randvec(8));
    out.emplace_back("occupancy_loss", grad_check(
                                           [&](const Tensor& x) {
                                             return occupancy_loss(sigmoid(x), occ_target);
                                           },
                                           at_occ, 1e-5));
    out.emplace_back("smooth_l1", grad_check(
                                      [&](const Tensor& x) {
                                        return smooth_l1(x, Tensor::zeros({3, 4}), 1.0);
                                      },
                                      Tensor::constant({3, 4}, randvec(12, 0.4)), 1e-5));
  }
  if (maybe("forward")) {
    PipelineConfig small = cfg;
    small.grid = VoxelGrid::create(-0.8, 0.8, -0.4, 0.4, 2.0, 3.6, 0.2, 0.2, 0.2);
    small.synth.grid = small.grid;
    small.synth.image_w = 16;
    small.synth.image_h = 8;
    small.synth.channels = 3;
    small.synth.rig.k = {10.0, 10.0, 7.5, 3.5};
    small.synth.rig.baseline = 0.5;
    small.synth.object_class = ClassConfig{"Toy", 0.5, 0.4, 0.7, 0.15, 2.0, 4};
    small.synth.max_boxes = 1;
    small.backbone_hidden = 4;
    small.backbone_out = 3;
    small.reducer_hidden = 3;
    small.tower_hidden = 3;
    small.bev_channels = 4;
    SceneSample scene = synth_scene(5, small.synth);
    SceneTargets targets = make_targets(scene, small);

    // check the composed pipeline against finite differences, one parameter
    // tensor at a time
    double worst = 0.0;
    Tape probe_tape;
    TinyNetwork probe = init_network(probe_tape, small, 3);
    for (const auto& [name, value] : probe.params) {
      const auto vals = value.values();
      const Shape shape = value.shape();
      const double err = grad_check(
          [&](const Tensor& x) {
            // rebuild the network on the probe's tape, splicing x in
            TinyNetwork net = init_network(*x.tape(), small, 3);
            for (auto& [n, p] : net.params) {
              if (n == name) p = x;
            }
            ForwardResult fwd = forward(net, scene, small);
            return total_loss(fwd, targets, small);
          },
          Tensor::constant(shape, vals), 1e-5);
      worst = std::max(worst, err);
    }
    out.emplace_back("forward(composed)", worst);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stereo plane-sweep 3D detection pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir, model_path, data_dir, matrix_path, op = "all";
  std::string depth_format = "ten";
  std::uint64_t seed_lo = 0, seed_hi = 9;
  std::uint64_t sample_seed = 0;
  int recall_points = 0;

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--op", op, "all or one op name");

  auto* synth = app.add_subcommand("synth", "generate synthetic stereo scenes");
  synth->add_option("--config", config_path, "pipeline config file");
  synth->add_option("--seeds", seed_lo, "first seed")->required();
  synth->add_option("--seeds-end", seed_hi, "last seed (inclusive)");
  synth->add_option("--out", out_dir, "output dataset directory")->required();

  auto* train = app.add_subcommand("train-toy", "train the toy network");
  train->add_option("--config", config_path, "pipeline config file");
  train->add_option("--out", out_dir, "run directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--config", config_path, "pipeline config file");
  eval_cmd->add_option("--model", model_path, "checkpoint file")->required();
  eval_cmd->add_option("--data", data_dir, "scene dataset directory (default: synthetic val set)");
  eval_cmd->add_option("--recall-points", recall_points, "11 or 40");
  eval_cmd->add_option("--dump-depth", out_dir, "directory for predicted depth maps");
  eval_cmd->add_option("--depth-format", depth_format, "ten or pgm");

  auto* ablate = app.add_subcommand("ablate", "train and compare volume-construction variants");
  ablate->add_option("--config", config_path, "base pipeline config");
  ablate->add_option("--matrix", matrix_path, "file with 'label construction supervision' rows");

  auto* volumes = app.add_subcommand("volumes", "dump PSV and 3DGV tensors for one scene");
  volumes->add_option("--config", config_path, "pipeline config file");
  volumes->add_option("--sample", sample_seed, "scene seed")->required();
  volumes->add_option("--dump", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gradcheck->parsed()) {
      bool ok = true;
      for (const auto& [name, err] : run_gradcheck(op)) {
        const double tol = name == "forward(composed)" ? 1e-3 : 1e-4;
        const bool pass = err < tol;
        ok = ok && pass;
        std::cout << (pass ? "[PASS] " : "[FAIL] ") << name << "  max rel err " << err << '\n';
      }
      return ok ? 0 : 1;
    }

    if (synth->parsed()) {
      const PipelineConfig cfg = config_or_default(config_path);
      if (seed_hi < seed_lo) seed_hi = seed_lo;
      for (std::uint64_t s = seed_lo; s <= seed_hi; ++s) {
        save_scene(out_dir, s, synth_scene(s, cfg.synth), cfg.synth.object_class.name);
      }
      std::ofstream cfg_out(fs::path(out_dir) / "config.txt");
      cfg_out << format_config(cfg);
      std::cout << "wrote " << (seed_hi - seed_lo + 1) << " scenes to " << out_dir << '\n';
      return 0;
    }

    if (train->parsed()) {
      const PipelineConfig cfg = config_or_default(config_path);
      Tape tape;
      TinyNetwork net = init_network(tape, cfg, cfg.seed);
      const TrainResult res = train_toy(tape, net, cfg, out_dir);
      std::cout << "trained " << res.steps_run << " steps; final loss "
                << (res.loss_curve.empty() ? 0.0 : res.loss_curve.back()) << '\n';
      const std::vector<SceneSample> val = make_scene_set(cfg, cfg.val_scenes, true);
      const EvalReport rep = evaluate(net, val, cfg);
      std::cout << format_report(rep);
      std::ofstream report_out(fs::path(out_dir) / "report.txt");
      report_out << format_report(rep);
      return 0;
    }

    if (eval_cmd->parsed()) {
      PipelineConfig cfg = config_or_default(config_path);
      if (recall_points == 11 || recall_points == 40) cfg.recall_points = recall_points;
      Tape tape;
      TinyNetwork net = init_network(tape, cfg, cfg.seed);
      load_checkpoint(model_path, net);
      std::vector<SceneSample> scenes;
      if (data_dir.empty()) {
        scenes = make_scene_set(cfg, cfg.val_scenes, true);
      } else {
        for (const auto& [seed, dir] : list_scenes(data_dir)) scenes.push_back(load_scene(dir, cfg.grid));
      }
      if (scenes.empty()) throw std::runtime_error("eval: no scenes found");
      const EvalReport rep = evaluate(net, scenes, cfg);
      std::cout << format_report(rep);
      if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        for (std::size_t i = 0; i < scenes.size(); ++i) {
          int h = 0, w = 0;
          const std::vector<double> depth = predict_depth(net, scenes[i], cfg, &h, &w);
          if (depth.empty()) break;
          const std::string base = (fs::path(out_dir) / ("depth_" + std::to_string(i))).string();
          if (depth_format == "pgm") {
            write_depth_pgm(base + ".pgm", depth, h, w);
          } else {
            write_tensor_file(base + ".ten", Tensor::constant({h, w}, depth));
          }
        }
      }
      return 0;
    }

    if (ablate->parsed()) {
      const PipelineConfig base = config_or_default(config_path);
      std::vector<std::pair<std::string, PipelineConfig>> matrix;
      if (matrix_path.empty()) {
        matrix = default_ablation_matrix(base);
      } else {
        std::ifstream mf(matrix_path);
        if (!mf) throw std::runtime_error("cannot open matrix file: " + matrix_path);
        std::string label, c, s;
        while (mf >> label >> c >> s) {
          PipelineConfig cfg = base;
          if (c == "psv_3dgv") cfg.construction = ConstructionMode::kPsv3dgv;
          else if (c == "cv_3dgv") cfg.construction = ConstructionMode::kCv3dgv;
          else if (c == "img_3dv") cfg.construction = ConstructionMode::kImg3dv;
          else throw std::runtime_error("matrix: unknown construction " + c);
          if (s == "none") cfg.supervision = SupervisionMode::kNone;
          else if (s == "depth") cfg.supervision = SupervisionMode::kDepth;
          else if (s == "occupancy") cfg.supervision = SupervisionMode::kOccupancy;
          else throw std::runtime_error("matrix: unknown supervision " + s);
          matrix.emplace_back(label, cfg);
        }
      }
      const auto rows = run_ablation(matrix);
      std::cout << format_ablation(rows);
      bool all_ok = true;
      for (const auto& r : rows) all_ok = all_ok && r.ok;
      return all_ok ? 0 : 1;
    }

    if (volumes->parsed()) {
      const PipelineConfig cfg = config_or_default(config_path);
      fs::create_directories(out_dir);
      const SceneSample scene = synth_scene(sample_seed, cfg.synth);
      Tape tape;
      TinyNetwork net = init_network(tape, cfg, cfg.seed);
      const Tensor fl = tanh(conv2d(scene.left, net.get("bb.w1"), net.get("bb.b1"),
                                    {cfg.stride, cfg.stride}, {1, 1}));
      const Tensor fl2 = tanh(conv2d(fl, net.get("bb.w2"), net.get("bb.b2"), {1, 1}, {1, 1}));
      const Tensor fr = tanh(conv2d(scene.right, net.get("bb.w1"), net.get("bb.b1"),
                                    {cfg.stride, cfg.stride}, {1, 1}));
      const Tensor fr2 = tanh(conv2d(fr, net.get("bb.w2"), net.get("bb.b2"), {1, 1}, {1, 1}));
      PlaneSweepVolume psv = build_psv(fl2, fr2, scene.rig, cfg.grid, cfg.stride);
      GeometricVolume gv = warp_psv_to_3dgv(psv, cfg.grid, scene.rig.k);
      write_tensor_file((fs::path(out_dir) / "psv.ten").string(), psv.feature);
      write_tensor_file((fs::path(out_dir) / "gv.ten").string(), gv.feature);
      write_grid_sidecar((fs::path(out_dir) / "grid.txt").string(), cfg.grid);
      std::cout << "wrote psv.ten " << shape_str(psv.feature.shape()) << ", gv.ten "
                << shape_str(gv.feature.shape()) << " to " << out_dir << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
