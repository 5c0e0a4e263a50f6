#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dsgn/depth_head.hpp"
#include "dsgn/detection.hpp"
#include "dsgn/geometry.hpp"

namespace dsgn {

// Exact rotated-rectangle IoU on the BEV plane via convex polygon clipping.
// Degenerate (zero-area) boxes give 0.
double rotated_iou_bev(const Box3D& a, const Box3D& b);

// BEV intersection area times vertical overlap, over the volume union.
double iou_3d(const Box3D& a, const Box3D& b);

// Axis-aligned image rectangle of a projected 3D box, clipped to the image.
// Absent when the box is entirely behind the camera or off screen.
struct Rect2D {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double height() const { return y1 - y0; }
};
std::optional<Rect2D> project_box_to_image(const Box3D& b, const Intrinsics& k, int image_w,
                                           int image_h);
double iou_2d(const Rect2D& a, const Rect2D& b);

struct DetectionRecord {
  Box3D box;
  double score = 0;
  int class_id = 0;
};

using IouFn = std::function<double(const Box3D&, const Box3D&)>;

// Interpolated average precision over 11 ({0, .1, ..., 1}) or 40
// ({1/40, ..., 1}) recall points. Detections are matched greedily in
// descending score order to the highest-IoU unmatched ground truth at or
// above the threshold. No ground truth with detections present gives 0;
// empty ground truth and no detections gives 1.
double average_precision(const std::vector<DetectionRecord>& dets,
                         const std::vector<Box3D>& gts, const IouFn& iou, double iou_thresh,
                         int recall_points);

// Multi-scene AP: matching happens within a scene, the PR curve pools scores.
double average_precision_scenes(const std::vector<std::vector<DetectionRecord>>& dets,
                                const std::vector<std::vector<Box3D>>& gts, const IouFn& iou,
                                double iou_thresh, int recall_points);

// Mean and median absolute depth error over pixels with ground truth inside
// [z_min, z_max]. Even-count median takes the lower middle element.
std::pair<double, double> depth_error_stats(const std::vector<double>& pred, int height,
                                            int width, const SparseDepthMap& gt, double z_min,
                                            double z_max);

// Fraction of masked ground-truth pixels whose error stays below the
// outlier threshold.
double box_depth_precision(const std::vector<double>& pred, const SparseDepthMap& gt,
                           const std::vector<std::uint8_t>& mask, double outlier_thresh);

// Sample Pearson correlation; throws on constant input.
double pearson(const std::vector<double>& xs, const std::vector<double>& ys);

// AP restricted to ground truths and detections whose center z falls in each
// [i*bin_width, (i+1)*bin_width) bin; bins with no ground truth are absent.
std::vector<std::optional<double>> distance_binned_ap(
    const std::vector<std::vector<DetectionRecord>>& dets,
    const std::vector<std::vector<Box3D>>& gts, double bin_width, double range_max,
    const IouFn& iou, double iou_thresh, int recall_points);

// KITTI-style difficulty gates on the projected 2D box (see docs/metrics.md
// for the threshold table).
enum class Difficulty { kEasy, kModerate, kHard };
struct DifficultyThresholds {
  double min_height;  // pixels
  int max_occlusion;
  double max_truncation;
};
DifficultyThresholds difficulty_thresholds(Difficulty d);
bool meets_difficulty(Difficulty d, double box_height_px, int occlusion, double truncation);

struct EvalReport {
  // rows: easy, moderate, hard, overall
  std::array<double, 4> ap_3d{}, ap_bev{}, ap_2d{};
  std::array<bool, 4> defined{};
  double depth_mean = 0, depth_median = 0;
  bool has_depth = false;
  std::vector<std::optional<double>> binned_ap;
  std::vector<std::pair<double, double>> pcc;  // (outlier_thresh, correlation)
  int recall_points = 40;
  bool empty_vs_empty_flag = false;  // an AP defaulted to 1 on empty/empty
};

std::string format_report(const EvalReport& r);

}  // namespace dsgn
