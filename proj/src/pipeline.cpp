#include "dsgn/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dsgn/rng.hpp"

namespace fs = std::filesystem;

namespace dsgn {

std::string to_string(ConstructionMode m) {
  switch (m) {
    case ConstructionMode::kPsv3dgv: return "psv_3dgv";
    case ConstructionMode::kCv3dgv: return "cv_3dgv";
    case ConstructionMode::kImg3dv: return "img_3dv";
  }
  return "?";
}

std::string to_string(SupervisionMode m) {
  switch (m) {
    case SupervisionMode::kNone: return "none";
    case SupervisionMode::kDepth: return "depth";
    case SupervisionMode::kOccupancy: return "occupancy";
  }
  return "?";
}

std::string to_string(VoxelFeatureMode m) {
  switch (m) {
    case VoxelFeatureMode::kOccupancy: return "occupancy";
    case VoxelFeatureMode::kProbability: return "probability";
    case VoxelFeatureMode::kLastFeatures: return "last_features";
  }
  return "?";
}

std::string to_string(RegressionMode m) {
  return m == RegressionMode::kSeparable ? "separable" : "joint_corners";
}

// ---------------------------------------------------------------------------
// config

PipelineConfig PipelineConfig::toy_default() {
  PipelineConfig cfg;
  cfg.grid = VoxelGrid::create(-3.2, 3.2, -0.2, 1.6, 2.0, 6.8, 0.2, 0.2, 0.2);
  cfg.synth.grid = cfg.grid;
  cfg.synth.image_w = 48;
  cfg.synth.image_h = 32;
  cfg.synth.channels = 6;
  cfg.synth.rig.k = {30.0, 30.0, 23.5, 11.5};
  cfg.synth.rig.baseline = 1.5;  // wide toy baseline, keeps disparity resolvable
  cfg.synth.object_class = ClassConfig::cyclist();
  cfg.synth.min_boxes = 1;
  cfg.synth.max_boxes = 2;
  cfg.stride = 2;
  return cfg;
}

void PipelineConfig::validate() const {
  const bool ok =
      (construction == ConstructionMode::kPsv3dgv &&
       (supervision == SupervisionMode::kNone || supervision == SupervisionMode::kDepth)) ||
      (construction == ConstructionMode::kCv3dgv && supervision == SupervisionMode::kDepth) ||
      (construction == ConstructionMode::kImg3dv &&
       (supervision == SupervisionMode::kNone || supervision == SupervisionMode::kOccupancy));
  if (!ok) {
    throw std::logic_error("config: unsupported construction/supervision combination " +
                           to_string(construction) + " / " + to_string(supervision));
  }
  if (stride < 1) throw std::logic_error("config: stride must be >= 1");
  if (synth.image_w % stride != 0 || synth.image_h % stride != 0) {
    throw std::logic_error("config: image size must be divisible by the stride");
  }
}

namespace {

ConstructionMode construction_from(const std::string& s) {
  if (s == "psv_3dgv") return ConstructionMode::kPsv3dgv;
  if (s == "cv_3dgv") return ConstructionMode::kCv3dgv;
  if (s == "img_3dv") return ConstructionMode::kImg3dv;
  throw std::runtime_error("config: unknown construction mode '" + s + "'");
}

SupervisionMode supervision_from(const std::string& s) {
  if (s == "none") return SupervisionMode::kNone;
  if (s == "depth") return SupervisionMode::kDepth;
  if (s == "occupancy") return SupervisionMode::kOccupancy;
  throw std::runtime_error("config: unknown supervision mode '" + s + "'");
}

VoxelFeatureMode feature_mode_from(const std::string& s) {
  if (s == "occupancy") return VoxelFeatureMode::kOccupancy;
  if (s == "probability") return VoxelFeatureMode::kProbability;
  if (s == "last_features") return VoxelFeatureMode::kLastFeatures;
  throw std::runtime_error("config: unknown feature mode '" + s + "'");
}

RegressionMode regression_from(const std::string& s) {
  if (s == "separable") return RegressionMode::kSeparable;
  if (s == "joint_corners") return RegressionMode::kJointCorners;
  throw std::runtime_error("config: unknown regression mode '" + s + "'");
}

ClassConfig class_from(const std::string& s) {
  if (s == "Car") return ClassConfig::car();
  if (s == "Pedestrian") return ClassConfig::pedestrian();
  if (s == "Cyclist") return ClassConfig::cyclist();
  // custom class: dimensions come from the class_* override keys
  ClassConfig c;
  c.name = s;
  return c;
}

}  // namespace

PipelineConfig parse_config(const std::string& text) {
  PipelineConfig cfg = PipelineConfig::toy_default();
  double gx0 = cfg.grid.x_min, gx1 = cfg.grid.x_max, gy0 = cfg.grid.y_min, gy1 = cfg.grid.y_max;
  double gz0 = cfg.grid.z_min, gz1 = cfg.grid.z_max;
  double vw = cfg.grid.voxel_w, vh = cfg.grid.voxel_h, vd = cfg.grid.voxel_d;

  std::istringstream is(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key.front() == '[') {
      section = key.substr(1, key.size() - 2);
      continue;
    }
    std::string eq, value;
    if (!(ls >> eq >> value) || eq != "=") {
      throw std::runtime_error("config parse error at line " + std::to_string(line_no) +
                               ": expected 'key = value'");
    }
    auto num = [&] { return std::stod(value); };
    auto integer = [&] { return std::stoi(value); };
    auto flag = [&] { return value == "1" || value == "true"; };

    const std::string full = section + "." + key;
    if (full == "grid.x_min") gx0 = num();
    else if (full == "grid.x_max") gx1 = num();
    else if (full == "grid.y_min") gy0 = num();
    else if (full == "grid.y_max") gy1 = num();
    else if (full == "grid.z_min") gz0 = num();
    else if (full == "grid.z_max") gz1 = num();
    else if (full == "grid.voxel_w") vw = num();
    else if (full == "grid.voxel_h") vh = num();
    else if (full == "grid.voxel_d") vd = num();
    else if (full == "camera.fx") cfg.synth.rig.k.fx = num();
    else if (full == "camera.fy") cfg.synth.rig.k.fy = num();
    else if (full == "camera.cu") cfg.synth.rig.k.cu = num();
    else if (full == "camera.cv") cfg.synth.rig.k.cv = num();
    else if (full == "camera.baseline") cfg.synth.rig.baseline = num();
    else if (full == "synth.image_w") cfg.synth.image_w = integer();
    else if (full == "synth.image_h") cfg.synth.image_h = integer();
    else if (full == "synth.channels") cfg.synth.channels = integer();
    else if (full == "synth.class") cfg.synth.object_class = class_from(value);
    else if (full == "synth.class_h") cfg.synth.object_class.h = num();
    else if (full == "synth.class_w") cfg.synth.object_class.w = num();
    else if (full == "synth.class_l") cfg.synth.object_class.l = num();
    else if (full == "synth.class_y") cfg.synth.object_class.y_center = num();
    else if (full == "synth.class_gamma") cfg.synth.object_class.gamma = num();
    else if (full == "synth.class_n_theta") cfg.synth.object_class.n_theta = integer();
    else if (full == "synth.min_boxes") cfg.synth.min_boxes = integer();
    else if (full == "synth.max_boxes") cfg.synth.max_boxes = integer();
    else if (full == "synth.size_jitter") cfg.synth.size_jitter = num();
    else if (full == "synth.yaw_jitter") cfg.synth.yaw_jitter = num();
    else if (full == "synth.sparse_fraction") cfg.synth.sparse_fraction = num();
    else if (full == "network.stride") cfg.stride = integer();
    else if (full == "network.backbone_hidden") cfg.backbone_hidden = integer();
    else if (full == "network.backbone_out") cfg.backbone_out = integer();
    else if (full == "network.reducer_hidden") cfg.reducer_hidden = integer();
    else if (full == "network.tower_hidden") cfg.tower_hidden = integer();
    else if (full == "network.bev_channels") cfg.bev_channels = integer();
    else if (full == "network.max_disp") cfg.max_disp = integer();
    else if (full == "network.upsample_cost") cfg.upsample_cost = flag();
    else if (full == "network.construction") cfg.construction = construction_from(value);
    else if (full == "network.supervision") cfg.supervision = supervision_from(value);
    else if (full == "network.feature_mode") cfg.feature_mode = feature_mode_from(value);
    else if (full == "network.att_concat") cfg.att_concat = flag();
    else if (full == "network.regression") cfg.regression = regression_from(value);
    else if (full == "network.corner_flip_min") cfg.corner_flip_min = flag();
    else if (full == "train.steps") cfg.steps = integer();
    else if (full == "train.lr") cfg.lr = num();
    else if (full == "train.beta1") cfg.adam_beta1 = num();
    else if (full == "train.beta2") cfg.adam_beta2 = num();
    else if (full == "train.eps") cfg.adam_eps = num();
    else if (full == "train.seed") cfg.seed = static_cast<std::uint64_t>(std::stoull(value));
    else if (full == "train.train_scenes") cfg.train_scenes = integer();
    else if (full == "train.val_scenes") cfg.val_scenes = integer();
    else if (full == "train.flip_augment") cfg.flip_augment = flag();
    else if (full == "train.log_every") cfg.log_every = integer();
    else if (full == "eval.score_thresh") cfg.score_thresh = num();
    else if (full == "eval.nms_iou") cfg.nms_iou = num();
    else if (full == "eval.iou") cfg.eval_iou = num();
    else if (full == "eval.recall_points") cfg.recall_points = integer();
    else if (full == "eval.max_dets") cfg.max_dets = integer();
    else {
      throw std::runtime_error("config parse error at line " + std::to_string(line_no) +
                               ": unknown key '" + full + "'");
    }
  }
  cfg.grid = VoxelGrid::create(gx0, gx1, gy0, gy1, gz0, gz1, vw, vh, vd);
  cfg.synth.grid = cfg.grid;
  cfg.validate();
  return cfg;
}

std::string format_config(const PipelineConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "[grid]\n"
     << "x_min = " << cfg.grid.x_min << "\nx_max = " << cfg.grid.x_max
     << "\ny_min = " << cfg.grid.y_min << "\ny_max = " << cfg.grid.y_max
     << "\nz_min = " << cfg.grid.z_min << "\nz_max = " << cfg.grid.z_max
     << "\nvoxel_w = " << cfg.grid.voxel_w << "\nvoxel_h = " << cfg.grid.voxel_h
     << "\nvoxel_d = " << cfg.grid.voxel_d << "\n\n[camera]\n"
     << "fx = " << cfg.synth.rig.k.fx << "\nfy = " << cfg.synth.rig.k.fy
     << "\ncu = " << cfg.synth.rig.k.cu << "\ncv = " << cfg.synth.rig.k.cv
     << "\nbaseline = " << cfg.synth.rig.baseline << "\n\n[synth]\n"
     << "image_w = " << cfg.synth.image_w << "\nimage_h = " << cfg.synth.image_h
     << "\nchannels = " << cfg.synth.channels << "\nclass = " << cfg.synth.object_class.name
     << "\nclass_h = " << cfg.synth.object_class.h << "\nclass_w = " << cfg.synth.object_class.w
     << "\nclass_l = " << cfg.synth.object_class.l
     << "\nclass_y = " << cfg.synth.object_class.y_center
     << "\nclass_gamma = " << cfg.synth.object_class.gamma
     << "\nclass_n_theta = " << cfg.synth.object_class.n_theta
     << "\nmin_boxes = " << cfg.synth.min_boxes << "\nmax_boxes = " << cfg.synth.max_boxes
     << "\nsize_jitter = " << cfg.synth.size_jitter << "\nyaw_jitter = " << cfg.synth.yaw_jitter
     << "\nsparse_fraction = " << cfg.synth.sparse_fraction << "\n\n[network]\n"
     << "stride = " << cfg.stride << "\nbackbone_hidden = " << cfg.backbone_hidden
     << "\nbackbone_out = " << cfg.backbone_out << "\nreducer_hidden = " << cfg.reducer_hidden
     << "\ntower_hidden = " << cfg.tower_hidden << "\nbev_channels = " << cfg.bev_channels
     << "\nmax_disp = " << cfg.max_disp << "\nupsample_cost = " << (cfg.upsample_cost ? 1 : 0)
     << "\nconstruction = " << to_string(cfg.construction)
     << "\nsupervision = " << to_string(cfg.supervision)
     << "\nfeature_mode = " << to_string(cfg.feature_mode)
     << "\natt_concat = " << (cfg.att_concat ? 1 : 0)
     << "\nregression = " << to_string(cfg.regression)
     << "\ncorner_flip_min = " << (cfg.corner_flip_min ? 1 : 0) << "\n\n[train]\n"
     << "steps = " << cfg.steps << "\nlr = " << cfg.lr << "\nbeta1 = " << cfg.adam_beta1
     << "\nbeta2 = " << cfg.adam_beta2 << "\neps = " << cfg.adam_eps << "\nseed = " << cfg.seed
     << "\ntrain_scenes = " << cfg.train_scenes << "\nval_scenes = " << cfg.val_scenes
     << "\nflip_augment = " << (cfg.flip_augment ? 1 : 0) << "\nlog_every = " << cfg.log_every
     << "\n\n[eval]\n"
     << "score_thresh = " << cfg.score_thresh << "\nnms_iou = " << cfg.nms_iou
     << "\niou = " << cfg.eval_iou << "\nrecall_points = " << cfg.recall_points
     << "\nmax_dets = " << cfg.max_dets << '\n';
  return os.str();
}

PipelineConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// network

Tensor TinyNetwork::get(const std::string& name) const {
  for (const auto& [n, t] : params) {
    if (n == name) return t;
  }
  throw std::logic_error("network has no parameter '" + name + "'");
}

namespace {

int gv_channels(const PipelineConfig& cfg) {
  if (cfg.construction == ConstructionMode::kImg3dv) return cfg.backbone_out;
  int c = cfg.feature_mode == VoxelFeatureMode::kLastFeatures ? cfg.reducer_hidden : 1;
  if (cfg.att_concat) c += cfg.backbone_out;
  return c;
}

Tensor init_weight(Tape& tape, Rng& rng, Shape shape, double scale_mul = 1.0) {
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double scale = scale_mul * std::sqrt(1.0 / static_cast<double>(fan_in));
  std::vector<double> w(static_cast<std::size_t>(shape_size(shape)));
  for (auto& v : w) v = scale * rng.normal();
  return tape.variable(std::move(shape), std::move(w));
}

Tensor init_bias(Tape& tape, int n, double value = 0.0) {
  return tape.variable({n}, std::vector<double>(static_cast<std::size_t>(n), value));
}

}  // namespace

TinyNetwork init_network(Tape& tape, const PipelineConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x11));
  TinyNetwork net;
  const int cin = cfg.synth.channels;
  const int c0 = cfg.backbone_out;
  const int c1 = cfg.reducer_hidden;
  const int n_theta = cfg.synth.object_class.n_theta;
  const int cgv = gv_channels(cfg);

  net.params.emplace_back("bb.w1", init_weight(tape, rng, {cfg.backbone_hidden, cin, 3, 3}));
  net.params.emplace_back("bb.b1", init_bias(tape, cfg.backbone_hidden));
  net.params.emplace_back("bb.w2", init_weight(tape, rng, {c0, cfg.backbone_hidden, 3, 3}));
  net.params.emplace_back("bb.b2", init_bias(tape, c0));

  if (cfg.construction != ConstructionMode::kImg3dv) {
    net.params.emplace_back("red.w1", init_weight(tape, rng, {c1, 2 * c0, 3, 3, 3}));
    net.params.emplace_back("red.b1", init_bias(tape, c1));
    net.params.emplace_back("red.w2", init_weight(tape, rng, {1, c1, 3, 3, 3}));
    net.params.emplace_back("red.b2", init_bias(tape, 1));
  }
  if (cfg.construction == ConstructionMode::kImg3dv &&
      cfg.supervision == SupervisionMode::kOccupancy) {
    net.params.emplace_back("occ.w", init_weight(tape, rng, {1, cgv, 1, 1, 1}));
    net.params.emplace_back("occ.b", init_bias(tape, 1));
  }

  net.params.emplace_back("tower.w1", init_weight(tape, rng, {cfg.tower_hidden, cgv, 3, 3, 3}));
  net.params.emplace_back("tower.b1", init_bias(tape, cfg.tower_hidden));
  net.params.emplace_back("tower.wc",
                          init_weight(tape, rng, {cfg.bev_channels, cfg.tower_hidden, 1, cfg.grid.ny, 1}));
  net.params.emplace_back("tower.bc", init_bias(tape, cfg.bev_channels));

  net.params.emplace_back("head.cls_w", init_weight(tape, rng, {n_theta, cfg.bev_channels, 3, 3}));
  // focal-loss style prior so untrained anchors score near zero
  net.params.emplace_back("head.cls_b", init_bias(tape, n_theta, -std::log(99.0)));
  net.params.emplace_back("head.delta_w",
                          init_weight(tape, rng, {7 * n_theta, cfg.bev_channels, 3, 3}, 0.1));
  net.params.emplace_back("head.delta_b", init_bias(tape, 7 * n_theta));
  net.params.emplace_back("head.ctr_w", init_weight(tape, rng, {n_theta, cfg.bev_channels, 3, 3}));
  net.params.emplace_back("head.ctr_b", init_bias(tape, n_theta));
  return net;
}

void save_checkpoint(const std::string& path, const TinyNetwork& net) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  for (const auto& [name, t] : net.params) {
    os << "param " << name << '\n';
    write_tensor(os, t.shape(), t.values());
  }
}

void load_checkpoint(const std::string& path, TinyNetwork& net) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for read: " + path);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.rfind("param ", 0) != 0) throw std::runtime_error("checkpoint: bad record '" + line + "'");
    const std::string name = line.substr(6);
    Tensor stored = read_tensor(is);
    Tensor dst = net.get(name);
    if (dst.shape() != stored.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    }
    dst.mutable_values() = stored.values();
  }
}

// ---------------------------------------------------------------------------
// forward

namespace {

Tensor backbone(const TinyNetwork& net, const Tensor& image, const PipelineConfig& cfg) {
  Tensor h = tanh(conv2d(image, net.get("bb.w1"), net.get("bb.b1"), {cfg.stride, cfg.stride}, {1, 1}));
  return tanh(conv2d(h, net.get("bb.w2"), net.get("bb.b2"), {1, 1}, {1, 1}));
}

}  // namespace

ForwardResult forward(const TinyNetwork& net, const SceneSample& scene,
                      const PipelineConfig& cfg) {
  cfg.validate();
  if (!(scene.grid == cfg.grid)) throw std::logic_error("forward: scene/config grid mismatch");
  ForwardResult out;

  const Tensor fl = backbone(net, scene.left, cfg);
  GeometricVolume gv{Tensor{}, cfg.grid};

  if (cfg.construction == ConstructionMode::kImg3dv) {
    gv = lift_image_to_3dv(fl, cfg.grid, scene.rig.k, cfg.stride);
  } else {
    const Tensor fr = backbone(net, scene.right, cfg);
    Tensor frustum;  // (2C0, D, H, W)
    std::vector<double> candidates;
    if (cfg.construction == ConstructionMode::kPsv3dgv) {
      PlaneSweepVolume psv = build_psv(fl, fr, scene.rig, cfg.grid, cfg.stride);
      frustum = psv.feature;
      candidates = psv.candidates;
    } else {
      frustum = build_disparity_cost_volume(fl, fr, cfg.max_disp);
      candidates.resize(static_cast<std::size_t>(cfg.max_disp));
      for (int j = 0; j < cfg.max_disp; ++j) candidates[static_cast<std::size_t>(j)] = j;
    }

    // last PSV feature map, then the 1-channel matching cost
    Tensor hidden = relu(conv3d(frustum, net.get("red.w1"), net.get("red.b1"), {1, 1, 1}, {1, 1, 1}));
    Tensor raw = conv3d(hidden, net.get("red.w2"), net.get("red.b2"), {1, 1, 1}, {1, 1, 1});
    Tensor cost = reshape(raw, {raw.dim(1), raw.dim(2), raw.dim(3)});
    if (cfg.upsample_cost && cfg.stride > 1) cost = upsample_bilinear_hw(cost, cfg.stride);

    out.depth_map = soft_argmin(CostVolume{cost, candidates});
    out.depth_is_disparity = cfg.construction == ConstructionMode::kCv3dgv;

    Tensor to_warp;
    switch (cfg.feature_mode) {
      case VoxelFeatureMode::kLastFeatures:
        to_warp = hidden;
        break;
      case VoxelFeatureMode::kProbability:
      case VoxelFeatureMode::kOccupancy: {
        // encode only the depth distribution; keep the pre-upsample layout
        Tensor enc = voxel_feature_mode(reshape(raw, {raw.dim(1), raw.dim(2), raw.dim(3)}),
                                        cfg.feature_mode);
        to_warp = reshape(enc, {1, enc.dim(0), enc.dim(1), enc.dim(2)});
        break;
      }
    }

    const int fstride = cfg.stride;
    if (cfg.construction == ConstructionMode::kPsv3dgv) {
      gv = warp_psv_to_3dgv(PlaneSweepVolume{to_warp, candidates, fstride, scene.rig}, cfg.grid,
                            scene.rig.k);
    } else {
      gv = warp_disparity_volume_to_3dgv(to_warp, scene.rig, cfg.grid, fstride);
    }

    if (cfg.att_concat) {
      Tensor prob = voxel_feature_mode(reshape(raw, {raw.dim(1), raw.dim(2), raw.dim(3)}),
                                       VoxelFeatureMode::kProbability);
      GeometricVolume prob_gv = warp_psv_to_3dgv(
          PlaneSweepVolume{reshape(prob, {1, prob.dim(0), prob.dim(1), prob.dim(2)}), candidates,
                           fstride, scene.rig},
          cfg.grid, scene.rig.k);
      Tensor prob_voxels = reshape(prob_gv.feature, {cfg.grid.nz, cfg.grid.ny, cfg.grid.nx});
      gv = attention_concat(gv, fl, prob_voxels, scene.rig.k, fstride);
    }
  }

  if (cfg.construction == ConstructionMode::kImg3dv &&
      cfg.supervision == SupervisionMode::kOccupancy) {
    Tensor occ = conv3d(gv.feature, net.get("occ.w"), net.get("occ.b"), {1, 1, 1}, {0, 0, 0});
    out.occ_logits = reshape(occ, {cfg.grid.nz, cfg.grid.ny, cfg.grid.nx});
  }

  Tensor t1 = tanh(conv3d(gv.feature, net.get("tower.w1"), net.get("tower.b1"), {1, 1, 1}, {1, 1, 1}));
  Tensor bev_raw = tanh(conv3d(t1, net.get("tower.wc"), net.get("tower.bc"), {1, 1, 1}, {0, 0, 0}));
  Tensor bev = reshape(bev_raw, {cfg.bev_channels, cfg.grid.nz, cfg.grid.nx});

  out.cls = conv2d(bev, net.get("head.cls_w"), net.get("head.cls_b"), {1, 1}, {1, 1});
  out.deltas = conv2d(bev, net.get("head.delta_w"), net.get("head.delta_b"), {1, 1}, {1, 1});
  out.ctr = conv2d(bev, net.get("head.ctr_w"), net.get("head.ctr_b"), {1, 1}, {1, 1});
  return out;
}

// ---------------------------------------------------------------------------
// targets and loss

SceneTargets make_targets(const SceneSample& scene, const PipelineConfig& cfg) {
  SceneTargets t;
  t.boxes = scene.boxes;
  const AnchorSet anchors = generate_anchors(cfg.grid, cfg.synth.object_class);
  t.assign = assign_targets(anchors, t.boxes, cfg.synth.object_class.gamma, cfg.grid);

  const int eff_stride = (cfg.upsample_cost || cfg.construction == ConstructionMode::kImg3dv)
                             ? 1
                             : cfg.stride;
  SparseDepthMap d = scene.depth.strided(eff_stride);
  // ground truth outside the grid's depth range is not supervised
  std::vector<double> vals = d.depth;
  for (auto& v : vals) {
    if (v > 0 && (v < cfg.grid.z_min || v > cfg.grid.z_max)) v = 0.0;
  }
  if (cfg.construction == ConstructionMode::kCv3dgv) {
    const double fxb = scene.rig.k.fx * scene.rig.baseline;
    for (auto& v : vals) {
      if (v > 0) v = fxb / v / cfg.stride;  // disparity-domain target
    }
  }
  t.depth_target = SparseDepthMap::from_dense(d.height, d.width, std::move(vals));

  if (cfg.supervision == SupervisionMode::kOccupancy) {
    t.occupancy = voxelize_occupancy(depth_to_points(scene.depth, scene.rig.k), cfg.grid);
  }
  return t;
}

Tensor total_loss(const ForwardResult& out, const SceneTargets& targets,
                  const PipelineConfig& cfg, LossBreakdown* breakdown) {
  LossBreakdown bd;
  Tensor loss = focal_loss(out.cls, targets.assign);
  bd.cls = loss.scalar();
  bd.terms = 1;

  if (targets.assign.n_pos > 0) {
    const AnchorSet anchors = generate_anchors(cfg.grid, cfg.synth.object_class);
    Tensor reg = regression_loss(out.deltas, anchors, targets.assign, targets.boxes,
                                 cfg.regression, cfg.corner_flip_min);
    Tensor ctr = centerness_loss(out.ctr, targets.assign);
    bd.reg = reg.scalar();
    bd.ctr = ctr.scalar();
    bd.terms += 2;
    loss = add(add(loss, reg), ctr);
  }

  if (cfg.supervision == SupervisionMode::kDepth && targets.depth_target.n_valid > 0) {
    Tensor dl = depth_loss(out.depth_map, targets.depth_target);
    bd.depth = dl.scalar();
    bd.terms += 1;
    loss = add(loss, dl);
  } else if (cfg.supervision == SupervisionMode::kOccupancy) {
    Tensor ol = occupancy_loss(sigmoid(out.occ_logits), targets.occupancy);
    bd.depth = ol.scalar();
    bd.terms += 1;
    loss = add(loss, ol);
  }

  bd.total = loss.scalar();
  if (breakdown) *breakdown = bd;
  return loss;
}

// ---------------------------------------------------------------------------
// optimizer and training

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(std::vector<std::pair<std::string, Tensor>>& params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].second.values().size(), 0.0);
      v_[i].assign(params[i].second.values().size(), 0.0);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second.mutable_values();
    const auto& g = params[i].second.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
      v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
      p[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

std::vector<SceneSample> make_scene_set(const PipelineConfig& cfg, int count, bool validation) {
  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t seed =
        mix_seed(cfg.seed, static_cast<std::uint64_t>(i) + (validation ? 1000000ULL : 0ULL));
    out.push_back(synth_scene(seed, cfg.synth));
  }
  return out;
}

TrainResult train_toy(Tape& tape, TinyNetwork& net, const PipelineConfig& cfg,
                      const std::string& out_dir) {
  cfg.validate();
  TrainResult res;
  if (!out_dir.empty()) fs::create_directories(out_dir);

  std::vector<SceneSample> scenes = make_scene_set(cfg, cfg.train_scenes, false);
  std::vector<SceneTargets> targets;
  targets.reserve(scenes.size());
  for (const auto& s : scenes) targets.push_back(make_targets(s, cfg));

  std::vector<SceneSample> flipped;
  std::vector<SceneTargets> flipped_targets;
  if (cfg.flip_augment) {
    for (const auto& s : scenes) {
      flipped.push_back(horizontal_flip(s));
      flipped_targets.push_back(make_targets(flipped.back(), cfg));
    }
  }

  Adam opt(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  Rng order_rng(mix_seed(cfg.seed, 0xE0));
  std::vector<int> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);

  for (int step = 0; step < cfg.steps; ++step) {
    const std::size_t pos = static_cast<std::size_t>(step) % scenes.size();
    if (pos == 0) {
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<int>(i) - 1))]);
      }
    }
    const int idx = order[pos];
    const bool use_flip = cfg.flip_augment && order_rng.uniform() < 0.5;
    const SceneSample& s = use_flip ? flipped[static_cast<std::size_t>(idx)] : scenes[static_cast<std::size_t>(idx)];
    const SceneTargets& t = use_flip ? flipped_targets[static_cast<std::size_t>(idx)] : targets[static_cast<std::size_t>(idx)];

    tape.reset_ops();
    tape.zero_grad();
    ForwardResult fwd = forward(net, s, cfg);
    LossBreakdown bd;
    Tensor loss = total_loss(fwd, t, cfg, &bd);
    if (!std::isfinite(bd.total)) {
      if (!out_dir.empty()) {
        std::ofstream diag(fs::path(out_dir) / "diagnostic.txt");
        diag << "divergence at step " << step << "\nloss " << bd.total << "\ncls " << bd.cls
             << " reg " << bd.reg << " ctr " << bd.ctr << " depth " << bd.depth << '\n';
      }
      throw std::runtime_error("train_toy: non-finite loss at step " + std::to_string(step));
    }
    tape.backward(loss);
    opt.step(net.params);
    res.loss_curve.push_back(bd.total);
    res.last = bd;
  }
  res.steps_run = cfg.steps;
  tape.reset_ops();

  if (!out_dir.empty()) {
    save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), net);
    std::ofstream cfg_out(fs::path(out_dir) / "config.txt");
    cfg_out << format_config(cfg);
    std::ofstream curve(fs::path(out_dir) / "loss_curve.txt");
    curve.precision(17);
    for (std::size_t i = 0; i < res.loss_curve.size(); ++i) curve << i << ' ' << res.loss_curve[i] << '\n';
  }
  return res;
}

// ---------------------------------------------------------------------------
// inference and evaluation

namespace {

Tape* tape_of(const TinyNetwork& net) {
  if (net.params.empty()) throw std::logic_error("uninitialized network");
  return net.params.front().second.tape();
}

}  // namespace

std::vector<DetectionRecord> detect(const TinyNetwork& net, const SceneSample& scene,
                                    const PipelineConfig& cfg) {
  Tape* tape = tape_of(net);
  ForwardResult out = forward(net, scene, cfg);
  const std::vector<double> cls = out.cls.values();
  const std::vector<double> deltas = out.deltas.values();
  const std::vector<double> ctr = out.ctr.values();
  tape->reset_ops();

  const AnchorSet anchors = generate_anchors(cfg.grid, cfg.synth.object_class);
  const long long cells = static_cast<long long>(anchors.nz) * anchors.nx;
  const long long n = anchors.count();

  std::vector<Box3D> boxes;
  std::vector<double> scores;
  for (long long a = 0; a < n; ++a) {
    const double s_cls = 1.0 / (1.0 + std::exp(-cls[static_cast<std::size_t>(a)]));
    const double s_ctr = 1.0 / (1.0 + std::exp(-ctr[static_cast<std::size_t>(a)]));
    const double score = s_cls * s_ctr;
    if (score < cfg.score_thresh) continue;
    const long long t = a / cells, rest = a % cells;
    BoxDelta d;
    for (int p = 0; p < 7; ++p) d[static_cast<std::size_t>(p)] = deltas[static_cast<std::size_t>((t * 7 + p) * cells + rest)];
    boxes.push_back(decode_box(anchors.anchor(a), d, anchors.cls.n_theta));
    scores.push_back(score);
  }

  // NMS over the strongest candidates only
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&scores](int a, int b) { return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]; });
  if (order.size() > 256) order.resize(256);
  std::vector<Box3D> cand;
  std::vector<double> cand_scores;
  for (int i : order) {
    cand.push_back(boxes[static_cast<std::size_t>(i)]);
    cand_scores.push_back(scores[static_cast<std::size_t>(i)]);
  }
  const std::vector<int> kept = bev_nms(cand, cand_scores, cfg.nms_iou);

  std::vector<DetectionRecord> dets;
  for (int k : kept) {
    if (static_cast<int>(dets.size()) >= cfg.max_dets) break;
    dets.push_back({cand[static_cast<std::size_t>(k)], cand_scores[static_cast<std::size_t>(k)], 0});
  }
  return dets;
}

std::vector<double> predict_depth(const TinyNetwork& net, const SceneSample& scene,
                                  const PipelineConfig& cfg, int* h, int* w) {
  if (cfg.construction == ConstructionMode::kImg3dv) return {};
  Tape* tape = tape_of(net);
  ForwardResult out = forward(net, scene, cfg);
  std::vector<double> depth = out.depth_map.values();
  const int dh = out.depth_map.dim(0), dw = out.depth_map.dim(1);
  tape->reset_ops();
  if (out.depth_is_disparity) {
    const double fxb = scene.rig.k.fx * scene.rig.baseline;
    for (auto& v : depth) v = fxb / (std::max(v, 1e-6) * cfg.stride);
  }
  if (h) *h = dh;
  if (w) *w = dw;
  return depth;
}

EvalReport evaluate(const TinyNetwork& net, const std::vector<SceneSample>& scenes,
                    const PipelineConfig& cfg) {
  EvalReport rep;
  rep.recall_points = cfg.recall_points;

  std::vector<std::vector<DetectionRecord>> dets(scenes.size());
  std::vector<std::vector<Box3D>> gts(scenes.size());
  std::vector<std::vector<double>> heights(scenes.size());  // projected GT heights
  std::vector<double> depth_errs;
  std::vector<std::pair<double, double>> precision_vs_iou[5];
  const double pcc_threshes[5] = {0.1, 0.3, 0.5, 1.0, 2.0};

  const int eff_stride = (cfg.upsample_cost || cfg.construction == ConstructionMode::kImg3dv)
                             ? 1
                             : cfg.stride;

  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const SceneSample& s = scenes[si];
    dets[si] = detect(net, s, cfg);
    gts[si] = s.boxes;
    for (const auto& b : s.boxes) {
      auto rect = project_box_to_image(b, s.rig.k, s.left.dim(2), s.left.dim(1));
      heights[si].push_back(rect ? rect->height() : 0.0);
    }

    int dh = 0, dw = 0;
    std::vector<double> depth = predict_depth(net, s, cfg, &dh, &dw);
    if (depth.empty()) continue;
    const SparseDepthMap gt_depth = s.depth.strided(eff_stride);
    for (int v = 0; v < dh; ++v) {
      for (int u = 0; u < dw; ++u) {
        const double d = gt_depth.at(v, u);
        if (d <= 0 || d < cfg.grid.z_min || d > cfg.grid.z_max) continue;
        depth_errs.push_back(std::abs(depth[static_cast<std::size_t>(v) * dw + u] - d));
      }
    }

    // per-detection depth precision vs localization quality
    for (const auto& det : dets[si]) {
      if (det.score <= 0.1) continue;
      double best_iou = 0.0;
      for (const auto& g : s.boxes) best_iou = std::max(best_iou, rotated_iou_bev(det.box, g));
      if (best_iou <= 0.01) continue;
      auto rect = project_box_to_image(det.box, s.rig.k, s.left.dim(2), s.left.dim(1));
      if (!rect) continue;
      std::vector<std::uint8_t> mask(gt_depth.depth.size(), 0);
      for (int v = 0; v < dh; ++v)
        for (int u = 0; u < dw; ++u) {
          const double iu = static_cast<double>(u * eff_stride);
          const double iv = static_cast<double>(v * eff_stride);
          if (iu >= rect->x0 && iu <= rect->x1 && iv >= rect->y0 && iv <= rect->y1) {
            mask[static_cast<std::size_t>(v) * dw + u] = 1;
          }
        }
      for (int ti = 0; ti < 5; ++ti) {
        try {
          const double prec = box_depth_precision(depth, gt_depth, mask, pcc_threshes[ti]);
          precision_vs_iou[ti].emplace_back(prec, best_iou);
        } catch (const std::logic_error&) {
          // no ground truth inside this box
        }
      }
    }
  }

  const IouFn iou_bev_fn = [](const Box3D& a, const Box3D& b) { return rotated_iou_bev(a, b); };
  const IouFn iou_3d_fn = [](const Box3D& a, const Box3D& b) { return iou_3d(a, b); };

  auto ap_row = [&](int row, const std::vector<std::vector<DetectionRecord>>& d,
                    const std::vector<std::vector<Box3D>>& g, bool any_gt) {
    rep.defined[static_cast<std::size_t>(row)] = any_gt;
    if (!any_gt) return;
    rep.ap_bev[static_cast<std::size_t>(row)] =
        average_precision_scenes(d, g, iou_bev_fn, cfg.eval_iou, cfg.recall_points);
    rep.ap_3d[static_cast<std::size_t>(row)] =
        average_precision_scenes(d, g, iou_3d_fn, cfg.eval_iou, cfg.recall_points);
    // 2D AP over projected rectangles
    std::vector<std::vector<DetectionRecord>> d2 = d;
    IouFn iou2 = [&](const Box3D& a, const Box3D& b) {
      const auto& k = scenes.front().rig.k;
      auto ra = project_box_to_image(a, k, scenes.front().left.dim(2), scenes.front().left.dim(1));
      auto rb = project_box_to_image(b, k, scenes.front().left.dim(2), scenes.front().left.dim(1));
      if (!ra || !rb) return 0.0;
      return iou_2d(*ra, *rb);
    };
    rep.ap_2d[static_cast<std::size_t>(row)] =
        average_precision_scenes(d2, g, iou2, cfg.eval_iou, cfg.recall_points);
  };

  // difficulty rows: ground truths failing the gate are ignored, and
  // detections that match an ignored ground truth are removed first
  for (int di = 0; di < 3; ++di) {
    const Difficulty diff = static_cast<Difficulty>(di);
    std::vector<std::vector<DetectionRecord>> dd(scenes.size());
    std::vector<std::vector<Box3D>> dg(scenes.size());
    bool any = false;
    for (std::size_t si = 0; si < scenes.size(); ++si) {
      std::vector<Box3D> ignored;
      for (std::size_t gi = 0; gi < gts[si].size(); ++gi) {
        if (meets_difficulty(diff, heights[si][gi], 0, 0.0)) {
          dg[si].push_back(gts[si][gi]);
        } else {
          ignored.push_back(gts[si][gi]);
        }
      }
      any = any || !dg[si].empty();
      for (const auto& det : dets[si]) {
        bool matches_ignored = false;
        for (const auto& ig : ignored) {
          if (rotated_iou_bev(det.box, ig) >= cfg.eval_iou) {
            matches_ignored = true;
            break;
          }
        }
        if (!matches_ignored) dd[si].push_back(det);
      }
    }
    ap_row(di, dd, dg, any);
  }
  bool any_gt = false;
  for (const auto& g : gts) any_gt = any_gt || !g.empty();
  ap_row(3, dets, gts, any_gt);
  if (!any_gt) rep.empty_vs_empty_flag = true;

  if (!depth_errs.empty()) {
    rep.has_depth = true;
    double mean = 0;
    for (double e : depth_errs) mean += e;
    rep.depth_mean = mean / static_cast<double>(depth_errs.size());
    std::sort(depth_errs.begin(), depth_errs.end());
    rep.depth_median = depth_errs[(depth_errs.size() - 1) / 2];
  }

  rep.binned_ap = distance_binned_ap(dets, gts, 5.0, 40.0, iou_bev_fn, cfg.eval_iou,
                                     cfg.recall_points);

  for (int ti = 0; ti < 5; ++ti) {
    const auto& pts = precision_vs_iou[ti];
    if (pts.size() < 2) continue;
    std::vector<double> xs, ys;
    for (const auto& [p, i] : pts) {
      xs.push_back(p);
      ys.push_back(i);
    }
    try {
      rep.pcc.emplace_back(pcc_threshes[ti], pearson(xs, ys));
    } catch (const std::domain_error&) {
      // constant sample, correlation undefined
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// ablation harness

std::vector<std::pair<std::string, PipelineConfig>> default_ablation_matrix(
    const PipelineConfig& base) {
  std::vector<std::pair<std::string, PipelineConfig>> out;
  auto with = [&](ConstructionMode c, SupervisionMode s, const std::string& label) {
    PipelineConfig cfg = base;
    cfg.construction = c;
    cfg.supervision = s;
    out.emplace_back(label, cfg);
  };
  with(ConstructionMode::kImg3dv, SupervisionMode::kNone, "IMG->3DV / x");
  with(ConstructionMode::kImg3dv, SupervisionMode::kOccupancy, "IMG->3DV / 3DV");
  with(ConstructionMode::kCv3dgv, SupervisionMode::kDepth, "IMG->CV->3DV / CV");
  with(ConstructionMode::kPsv3dgv, SupervisionMode::kNone, "IMG->PSCV->3DV / x");
  with(ConstructionMode::kPsv3dgv, SupervisionMode::kDepth, "IMG->PSCV->3DV / PSCV");
  return out;
}

std::vector<AblationRow> run_ablation(
    const std::vector<std::pair<std::string, PipelineConfig>>& matrix) {
  std::vector<AblationRow> rows;
  for (const auto& [label, cfg] : matrix) {
    AblationRow row;
    row.label = label;
    try {
      Tape tape;
      TinyNetwork net = init_network(tape, cfg, cfg.seed);
      train_toy(tape, net, cfg, "");
      const std::vector<SceneSample> val = make_scene_set(cfg, cfg.val_scenes, true);
      const EvalReport rep = evaluate(net, val, cfg);
      row.ok = true;
      row.ap_3d = rep.ap_3d[3];
      row.ap_bev = rep.ap_bev[3];
      row.ap_2d = rep.ap_2d[3];
      row.has_depth = rep.has_depth;
      row.depth_mean = rep.depth_mean;
      row.depth_median = rep.depth_median;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "variant                     AP_3D   AP_BEV  AP_2D   depth mean/median (m)\n";
  for (const auto& r : rows) {
    os << r.label;
    for (std::size_t pad = r.label.size(); pad < 28; ++pad) os << ' ';
    if (!r.ok) {
      os << "FAILED: " << r.error << '\n';
      continue;
    }
    os << r.ap_3d << "  " << r.ap_bev << "  " << r.ap_2d << "  ";
    if (r.has_depth) {
      os << r.depth_mean << " / " << r.depth_median;
    } else {
      os << "-- / --";
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace dsgn
