#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dsgn/data_io.hpp"
#include "dsgn/depth_head.hpp"
#include "dsgn/detection.hpp"
#include "dsgn/eval.hpp"
#include "dsgn/tensor.hpp"
#include "dsgn/volumes.hpp"

namespace dsgn {

enum class ConstructionMode { kPsv3dgv, kCv3dgv, kImg3dv };
enum class SupervisionMode { kNone, kDepth, kOccupancy };

std::string to_string(ConstructionMode m);
std::string to_string(SupervisionMode m);
std::string to_string(VoxelFeatureMode m);
std::string to_string(RegressionMode m);

struct PipelineConfig {
  VoxelGrid grid;
  SynthConfig synth;  // carries the rig

  // network
  int stride = 1;
  int backbone_hidden = 10;
  int backbone_out = 6;
  int reducer_hidden = 6;
  int tower_hidden = 8;
  int bev_channels = 12;
  int max_disp = 16;  // cv mode plane count
  bool upsample_cost = false;
  ConstructionMode construction = ConstructionMode::kPsv3dgv;
  SupervisionMode supervision = SupervisionMode::kDepth;
  VoxelFeatureMode feature_mode = VoxelFeatureMode::kLastFeatures;
  bool att_concat = false;
  RegressionMode regression = RegressionMode::kSeparable;
  bool corner_flip_min = false;

  // training
  int steps = 600;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 7;
  int train_scenes = 200;
  int val_scenes = 50;
  bool flip_augment = false;
  int log_every = 50;

  // evaluation
  double score_thresh = 0.05;
  double nms_iou = 0.6;
  double eval_iou = 0.5;
  int recall_points = 40;
  int max_dets = 20;

  static PipelineConfig toy_default();
  // Throws unless (construction, supervision) is one of the supported rows:
  // psv_3dgv x {none, depth}, cv_3dgv x {depth}, img_3dv x {none, occupancy}.
  void validate() const;
};

PipelineConfig parse_config(const std::string& text);
std::string format_config(const PipelineConfig& cfg);
PipelineConfig load_config_file(const std::string& path);

// All learnable tensors, registered as leaves of the owning tape.
struct TinyNetwork {
  std::vector<std::pair<std::string, Tensor>> params;
  Tensor get(const std::string& name) const;
};

TinyNetwork init_network(Tape& tape, const PipelineConfig& cfg, std::uint64_t seed);
void save_checkpoint(const std::string& path, const TinyNetwork& net);
void load_checkpoint(const std::string& path, TinyNetwork& net);

struct ForwardResult {
  Tensor cls, deltas, ctr;      // heads, (n_theta, nz, nx) layouts
  Tensor depth_map;             // psv/cv modes; disparity units for cv
  Tensor occ_logits;            // img mode occupancy head, (nz, ny, nx)
  bool depth_is_disparity = false;
};

// Runs the full differentiable pipeline for one scene on the given tape.
// Gradients from any loss term reach every parameter in use.
ForwardResult forward(const TinyNetwork& net, const SceneSample& scene,
                      const PipelineConfig& cfg);

struct SceneTargets {
  AssignmentResult assign;
  std::vector<Box3D> boxes;
  SparseDepthMap depth_target;  // stride-resampled, restricted to the grid range
  Tensor occupancy;             // only for occupancy supervision
};

SceneTargets make_targets(const SceneSample& scene, const PipelineConfig& cfg);

struct LossBreakdown {
  double total = 0, depth = 0, cls = 0, reg = 0, ctr = 0;
  int terms = 0;
};

// Unweighted sum of the active terms (classification always; regression and
// centerness when positives exist; the supervision term per config).
Tensor total_loss(const ForwardResult& out, const SceneTargets& targets,
                  const PipelineConfig& cfg, LossBreakdown* breakdown = nullptr);

// Adam with bias correction; state per parameter tensor.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps);
  void step(std::vector<std::pair<std::string, Tensor>>& params);

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainResult {
  std::vector<double> loss_curve;
  LossBreakdown last;
  int steps_run = 0;
};

// Deterministic toy training run; writes checkpoint.bin, loss_curve.txt and
// config.txt into out_dir (when non-empty). Aborts with a diagnostic on
// divergence.
TrainResult train_toy(Tape& tape, TinyNetwork& net, const PipelineConfig& cfg,
                      const std::string& out_dir);

// Decoded, thresholded and NMS-filtered boxes for one scene.
std::vector<DetectionRecord> detect(const TinyNetwork& net, const SceneSample& scene,
                                    const PipelineConfig& cfg);

// Predicted metric depth for one scene (empty if the mode has none).
std::vector<double> predict_depth(const TinyNetwork& net, const SceneSample& scene,
                                  const PipelineConfig& cfg, int* h = nullptr, int* w = nullptr);

EvalReport evaluate(const TinyNetwork& net, const std::vector<SceneSample>& scenes,
                    const PipelineConfig& cfg);

// Synthetic train/val scene sets for a config (deterministic in cfg.seed).
std::vector<SceneSample> make_scene_set(const PipelineConfig& cfg, int count, bool validation);

struct AblationRow {
  std::string label;
  bool ok = false;
  std::string error;
  double ap_3d = 0, ap_bev = 0, ap_2d = 0;
  double depth_mean = 0, depth_median = 0;
  bool has_depth = false;
};

std::vector<std::pair<std::string, PipelineConfig>> default_ablation_matrix(
    const PipelineConfig& base);
std::vector<AblationRow> run_ablation(
    const std::vector<std::pair<std::string, PipelineConfig>>& matrix);
std::string format_ablation(const std::vector<AblationRow>& rows);

}  // namespace dsgn
