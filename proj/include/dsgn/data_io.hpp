#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dsgn/depth_head.hpp"
#include "dsgn/detection.hpp"
#include "dsgn/geometry.hpp"
#include "dsgn/tensor.hpp"
#include "dsgn/volumes.hpp"

namespace dsgn {

// ---------------------------------------------------------------------------
// KITTI calibration and labels

struct Calibration {
  std::array<double, 12> p2{};  // 3x4 row-major
  std::array<double, 12> p3{};

  StereoRig rig() const;
};

Calibration parse_calib(const std::string& text);
std::string format_calib(const Calibration& c);
Calibration make_calib(const StereoRig& rig);

struct LabelRecord {
  std::string type;
  double truncation = 0;
  int occlusion = 0;
  double alpha = 0;
  std::array<double, 4> bbox{};  // x0 y0 x1 y1
  double h = 0, w = 0, l = 0;
  double x = 0, y = 0, z = 0;  // bottom-face center, camera frame
  double rotation_y = 0;
  std::optional<double> score;
};

std::vector<LabelRecord> parse_labels(const std::string& text);
std::string format_labels(const std::vector<LabelRecord>& labels);

// Bottom-center location becomes the box center: y_center = y - h/2.
Box3D label_to_box(const LabelRecord& r);
LabelRecord box_to_label(const Box3D& b, const std::string& type, const Intrinsics& k,
                         int image_w, int image_h);

// Keeps the closest depth per pixel (z-buffer); points behind the camera or
// off the image are dropped.
SparseDepthMap lidar_to_sparse_depth(const std::vector<WorldPoint>& points,
                                     const Intrinsics& k, int image_w, int image_h);

// ---------------------------------------------------------------------------
// synthetic stereo scenes

struct SynthConfig {
  int image_w = 40;
  int image_h = 28;
  int channels = 6;  // channel 0 is the surface-class indicator
  StereoRig rig;
  VoxelGrid grid;
  ClassConfig object_class = ClassConfig::cyclist();
  int min_boxes = 1;
  int max_boxes = 3;
  double size_jitter = 0.05;   // relative
  double yaw_jitter = 0.15;    // radians around each anchor orientation
  double placement_margin = 0.3;
  int placement_retries = 200;
  double ground_y = 0.0;       // 0 = derive from the object class
  double wall_z = 0.0;         // 0 = just inside the far grid face
  double sparse_fraction = 0.3;
  double texture_freq_min = 0.8;
  double texture_freq_max = 6.0;
};

struct SceneSample {
  Tensor left;   // (C, H, W)
  Tensor right;  // (C, H, W)
  SparseDepthMap depth;  // left view
  std::vector<Box3D> boxes;
  StereoRig rig;
  VoxelGrid grid;
};

// The underlying geometry of a generated scene; exposes exact fractional
// queries for tests (stereo consistency, disparity checks).
class SceneRenderer {
 public:
  SceneRenderer(std::uint64_t seed, const SynthConfig& cfg);

  // Raycast through pixel (u, v) of the left or right camera; returns the
  // hit depth and fills the feature channels for that surface point.
  double render(bool right_view, double u, double v, std::vector<double>* features) const;

  const std::vector<Box3D>& boxes() const { return boxes_; }
  double ground_y() const { return ground_y_; }
  double wall_z() const { return wall_z_; }

  SceneSample materialize(std::uint64_t seed) const;

 private:
  SynthConfig cfg_;
  std::vector<Box3D> boxes_;
  double ground_y_ = 0, wall_z_ = 0;
  std::vector<std::array<double, 3>> freqs_;  // per texture channel
  std::vector<double> phases_;
};

// Deterministic per seed. Throws on infeasible placement after bounded
// retries.
SceneSample synth_scene(std::uint64_t seed, const SynthConfig& cfg);

// Mirror about the vertical image axis, swapping the stereo roles:
// features/depth mirrored, boxes x -> -x and theta -> pi - theta,
// cu -> W - 1 - cu.
SceneSample horizontal_flip(const SceneSample& s);

// Backprojection of the valid sparse-depth pixels, for occupancy targets.
std::vector<WorldPoint> depth_to_points(const SparseDepthMap& depth, const Intrinsics& k);

// A voxel is occupied iff at least min_points fall inside it.
Tensor voxelize_occupancy(const std::vector<WorldPoint>& points, const VoxelGrid& grid,
                          int min_points = 1);

// Dataset layout: <dir>/scene_<seed>/{left.ten,right.ten,depth.ten,boxes.txt,calib.txt}
void save_scene(const std::string& dir, std::uint64_t seed, const SceneSample& s,
                const std::string& class_name);
SceneSample load_scene(const std::string& scene_dir, const VoxelGrid& grid);
std::vector<std::pair<std::uint64_t, std::string>> list_scenes(const std::string& dir);

// 16-bit big-endian PGM with depth in millimeters (KITTI-style integer
// depth map); values above ~65.5 m saturate.
void write_depth_pgm(const std::string& path, const std::vector<double>& depth, int h, int w);

}  // namespace dsgn
