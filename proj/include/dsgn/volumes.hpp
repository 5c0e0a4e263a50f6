#pragma once

#include <vector>

#include "dsgn/geometry.hpp"
#include "dsgn/tensor.hpp"

namespace dsgn {

// Axis-aligned world-space grid, axes right/down/front in camera view.
// Ranges must be exact integer multiples of the voxel sizes.
struct VoxelGrid {
  double x_min = 0, x_max = 0;
  double y_min = 0, y_max = 0;
  double z_min = 0, z_max = 0;
  double voxel_w = 0, voxel_h = 0, voxel_d = 0;  // x, y, z edge lengths
  int nx = 0, ny = 0, nz = 0;                    // (W_V, H_V, D_V)

  static VoxelGrid create(double x_min, double x_max, double y_min, double y_max,
                          double z_min, double z_max, double voxel_w, double voxel_h,
                          double voxel_d);

  // The grid used throughout: [-30.4, 30.4] x [-1, 3] x [2, 40.4] at 0.2 m
  // cubes, i.e. dims (304, 20, 192).
  static VoxelGrid kitti_default();

  double x_center(int ix) const { return x_min + (ix + 0.5) * voxel_w; }
  double y_center(int iy) const { return y_min + (iy + 0.5) * voxel_h; }
  double z_center(int iz) const { return z_min + (iz + 0.5) * voxel_d; }

  long long voxel_count() const {
    return static_cast<long long>(nx) * ny * nz;
  }

  bool operator==(const VoxelGrid&) const = default;
};

// Depth hypotheses at the grid's z cell centers: z_min + (i + 0.5) * voxel_d.
std::vector<double> depth_candidates(const VoxelGrid& grid);

// Feature volume in camera frustum space, (C, D, H, W) where D indexes depth
// candidates and (H, W) is the feature-map resolution (image / stride).
struct PlaneSweepVolume {
  Tensor feature;
  std::vector<double> candidates;
  int stride = 1;
  StereoRig rig;
};

// Feature volume in world space, (C, D_V, H_V, W_V) indexed (c, iz, iy, ix).
// Voxels that project outside the image carry exactly zero features.
struct GeometricVolume {
  Tensor feature;
  VoxelGrid grid;
};

// Concatenates the left feature map with the right map reprojected onto the
// left view at each depth candidate: a horizontal shift by
// disparity(d_i) / stride with linear interpolation along u. left/right are
// (C0, H, W) at the given stride; the result carries 2*C0 channels.
PlaneSweepVolume build_psv(const Tensor& left, const Tensor& right,
                           const StereoRig& rig, const VoxelGrid& grid, int stride);

// Classic disparity cost volume: plane j concatenates left with right shifted
// right by j whole pixels, zeros at the left border. Output (2*C0, max_disp, H, W).
Tensor build_disparity_cost_volume(const Tensor& left, const Tensor& right, int max_disp);

// Warps a frustum-space volume to the world grid. Every voxel center projects
// to (u, v) pixels which are divided by the stride, and its z becomes a
// fractional candidate index; the feature is fetched by trilinear
// interpolation over (candidate index, v, u). Out-of-image voxels are zero,
// and the backward pass scatters gradients with the same weights.
GeometricVolume warp_psv_to_3dgv(const PlaneSweepVolume& psv, const VoxelGrid& grid,
                                 const Intrinsics& k);

// Same warp for a generic frustum volume whose planes are indexed by integer
// disparity rather than metric depth (the cost-volume route).
GeometricVolume warp_disparity_volume_to_3dgv(const Tensor& volume, const StereoRig& rig,
                                              const VoxelGrid& grid, int stride);

// Direct lift of a 2D feature map: each voxel bilinearly samples the map at
// its projection, so all voxels along a ray share features.
GeometricVolume lift_image_to_3dv(const Tensor& feat, const VoxelGrid& grid,
                                  const Intrinsics& k, int stride = 1);

enum class VoxelFeatureMode { kOccupancy, kProbability, kLastFeatures };

// Table-style encodings of the depth dimension of a (D, H, W) cost volume:
// occupancy is a detached one-hot at the per-ray cost argmin (ties toward the
// nearer plane), probability is softmax(-cost) along depth, last_features
// passes a C-channel map through unchanged.
Tensor voxel_feature_mode(const Tensor& cost, VoxelFeatureMode mode);

// Appends image features to a geometric volume: each voxel bilinearly samples
// image_feat at its projection and scales the sample by its depth
// probability. prob must be a (D_V, H_V, W_V) volume on gv's grid.
GeometricVolume attention_concat(const GeometricVolume& gv, const Tensor& image_feat,
                                 const Tensor& prob, const Intrinsics& k, int stride = 1);

// Sidecar describing a volume's grid, written next to tensor dumps.
void write_grid_sidecar(const std::string& path, const VoxelGrid& grid);
VoxelGrid read_grid_sidecar(const std::string& path);

}  // namespace dsgn
