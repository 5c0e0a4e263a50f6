#pragma once

#include <array>
#include <string>
#include <vector>

#include "dsgn/tensor.hpp"
#include "dsgn/volumes.hpp"

namespace dsgn {

// Oriented box, camera frame (x right, y down, z front). (x,y,z) is the box
// center, theta the yaw about the vertical axis, normalized to [0, 2pi).
// At theta = 0 the length l runs along +x and the width w along z.
struct Box3D {
  double x = 0, y = 0, z = 0;
  double h = 0, w = 0, l = 0;
  double theta = 0;
};

using BevCorners = std::array<std::array<double, 2>, 4>;   // (x, z)
using BoxCorners = std::array<std::array<double, 3>, 8>;   // (x, y, z)

// Canonical corner order: starting front-left, counter-clockwise viewed from
// above; corners_8 lists the bottom four (y + h/2) then the top four.
BevCorners corners_bev(const Box3D& b);
BoxCorners corners_8(const Box3D& b);

// Mean BEV distance over the 8 canonically paired corners.
double corner_distance(const Box3D& a, const Box3D& g);

// Per-class anchor settings. gamma scales the number of positive anchors a
// ground-truth box receives during assignment.
struct ClassConfig {
  std::string name;
  double h = 0, w = 0, l = 0;
  double y_center = 0;
  double gamma = 1.0;
  int n_theta = 4;

  static ClassConfig car() { return {"Car", 1.56, 1.6, 3.9, 0.825, 1.0, 4}; }
  static ClassConfig pedestrian() { return {"Pedestrian", 1.73, 0.6, 0.8, 0.74, 5.0, 4}; }
  static ClassConfig cyclist() { return {"Cyclist", 1.73, 0.6, 1.76, 0.74, 5.0, 4}; }
};

// One anchor per (BEV cell, orientation); materialized lazily. The linear
// anchor index ((t * nz) + iz) * nx + ix matches the row-major layout of a
// head tensor of shape (n_theta, nz, nx).
struct AnchorSet {
  int nx = 0, nz = 0;
  double x_min = 0, z_min = 0;
  double cell_w = 0, cell_d = 0;
  ClassConfig cls;

  long long count() const { return static_cast<long long>(cls.n_theta) * nz * nx; }
  long long index(int t, int iz, int ix) const {
    return (static_cast<long long>(t) * nz + iz) * nx + ix;
  }
  Box3D anchor(long long idx) const;
  Box3D anchor(int t, int iz, int ix) const { return anchor(index(t, iz, ix)); }
};

AnchorSet generate_anchors(const VoxelGrid& grid, const ClassConfig& cls);

struct AssignmentResult {
  std::vector<std::uint8_t> label;   // 1 positive, 0 negative
  std::vector<int> matched_gt;       // -1 for negatives
  std::vector<double> centerness;    // meaningful on positives, in [1/e, 1]
  int n_pos = 0;
};

// Distance-based target assignment: each ground truth takes its
// round(gamma * k) nearest anchors by corner distance as positives, k being
// the number of BEV cells inside its footprint (at least one positive).
// Anchors claimed by several ground truths keep the nearest. Centerness is
// exp(-minmax(distance)) normalized per ground truth over its positive set.
AssignmentResult assign_targets(const AnchorSet& anchors, const std::vector<Box3D>& gts,
                                double gamma, const VoxelGrid& grid);

// Offsets regressed from an anchor. Component order: x, y, z, h, w, l, theta.
using BoxDelta = std::array<double, 7>;

// Centers add, sizes scale by exp, yaw moves by (pi / n_theta) * tanh.
Box3D decode_box(const Box3D& anchor, const BoxDelta& delta, int n_theta);

// Inverse of decode_box for the separable regression target; the angle
// difference is wrapped to (-pi/n_theta, pi/n_theta] before artanh.
BoxDelta encode_box(const Box3D& anchor, const Box3D& gt, int n_theta);

enum class RegressionMode { kSeparable, kJointCorners };

// Focal classification loss over every anchor (positives as the target
// class), summed and divided by max(n_pos, 1). logits is (n_theta, nz, nx).
Tensor focal_loss(const Tensor& logits, const AssignmentResult& assign, double alpha = 0.25,
                  double gamma_f = 2.0);

// Centerness-weighted smooth-L1 over positive anchors, divided by n_pos.
// deltas is (7 * n_theta, nz, nx); separable mode penalizes the offset
// residual, joint mode the mean L1 corner distance of the decoded box.
Tensor regression_loss(const Tensor& deltas, const AnchorSet& anchors,
                       const AssignmentResult& assign, const std::vector<Box3D>& gts,
                       RegressionMode mode, bool corner_flip_min = false, double beta = 1.0);

// Mean binary cross-entropy between sigmoid(logit) and the centerness
// targets, positives only. logits is (n_theta, nz, nx).
Tensor centerness_loss(const Tensor& logits, const AssignmentResult& assign);

// Greedy BEV non-maximum suppression: descending score (ties by lower
// index), suppressing boxes whose rotated IoU with a kept box exceeds the
// threshold. Returns kept indices in keep order.
std::vector<int> bev_nms(const std::vector<Box3D>& boxes, const std::vector<double>& scores,
                         double iou_threshold);

// Text export, one record per line: class score x y z h w l theta.
struct Detection {
  Box3D box;
  double score = 0;
  std::string class_name;
};
std::string format_detections(const std::vector<Detection>& dets);
std::vector<Detection> parse_detections(const std::string& text);

}  // namespace dsgn
