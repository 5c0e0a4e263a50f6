#pragma once

#include <vector>

#include "dsgn/tensor.hpp"
#include "dsgn/volumes.hpp"

namespace dsgn {

// Per-pixel matching cost for every depth candidate, (D, H, W).
struct CostVolume {
  Tensor cost;
  std::vector<double> candidates;
};

// Ground-truth depth defined on a subset of pixels. Zero means "no value".
struct SparseDepthMap {
  int height = 0;
  int width = 0;
  std::vector<double> depth;  // height*width, 0 = invalid, valid entries > 0
  int n_valid = 0;

  static SparseDepthMap from_dense(int height, int width, std::vector<double> depth);
  bool valid(int v, int u) const { return depth[static_cast<std::size_t>(v) * width + u] > 0; }
  double at(int v, int u) const { return depth[static_cast<std::size_t>(v) * width + u]; }

  // View at a coarser resolution: keeps every stride-th pixel.
  SparseDepthMap strided(int stride) const;
};

// Reduces a plane-sweep volume to a single matching cost per (depth, pixel)
// with two 3D convolutions (a nonlinearity between them). weights[0] maps the
// PSV channels to a hidden width, weights[1] must produce one channel.
CostVolume reduce_to_cost(const PlaneSweepVolume& psv, const Tensor& w1, const Tensor& b1,
                          const Tensor& w2, const Tensor& b2);

// Depth as the expectation of the candidates under softmax(-cost): (H, W).
Tensor soft_argmin(const CostVolume& cv);

// Expectation along axis 0 with fixed per-plane weights: out(h,w) =
// sum_i weights[i] * prob(i,h,w). Used by soft_argmin; exposed for tests.
Tensor depth_expectation(const Tensor& prob, const std::vector<double>& weights);

// Bilinear upsampling of the trailing two axes of a (D, H, W) volume by an
// integer factor (used to bring a strided cost volume back to image size).
Tensor upsample_bilinear_hw(const Tensor& x, int factor);

// Mean smooth-L1 over pixels that carry ground truth. Throws when none do.
Tensor depth_loss(const Tensor& pred, const SparseDepthMap& gt, double beta = 1.0);

// Mean binary cross-entropy against a {0,1} occupancy grid; probabilities are
// clamped to [1e-7, 1 - 1e-7].
Tensor occupancy_loss(const Tensor& volume_prob, const Tensor& gt_occupancy);

}  // namespace dsgn
