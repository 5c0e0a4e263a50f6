#include "dsgn/volumes.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dsgn {

namespace {

int checked_cells(double lo, double hi, double step, const char* axis) {
  if (step <= 0) throw std::invalid_argument("voxel size must be positive");
  if (hi <= lo) throw std::invalid_argument("grid range must be increasing");
  const double cells = (hi - lo) / step;
  const int n = static_cast<int>(std::lround(cells));
  if (n < 1 || std::abs(cells - n) > 1e-9 * std::max(1.0, std::abs(cells))) {
    throw std::invalid_argument(std::string("grid ") + axis +
                                " range is not an integer multiple of the voxel size");
  }
  return n;
}

}  // namespace

VoxelGrid VoxelGrid::create(double x_min, double x_max, double y_min, double y_max,
                            double z_min, double z_max, double voxel_w, double voxel_h,
                            double voxel_d) {
  VoxelGrid g;
  g.x_min = x_min;
  g.x_max = x_max;
  g.y_min = y_min;
  g.y_max = y_max;
  g.z_min = z_min;
  g.z_max = z_max;
  g.voxel_w = voxel_w;
  g.voxel_h = voxel_h;
  g.voxel_d = voxel_d;
  g.nx = checked_cells(x_min, x_max, voxel_w, "x");
  g.ny = checked_cells(y_min, y_max, voxel_h, "y");
  g.nz = checked_cells(z_min, z_max, voxel_d, "z");
  return g;
}

VoxelGrid VoxelGrid::kitti_default() {
  return create(-30.4, 30.4, -1.0, 3.0, 2.0, 40.4, 0.2, 0.2, 0.2);
}

std::vector<double> depth_candidates(const VoxelGrid& grid) {
  std::vector<double> out(static_cast<std::size_t>(grid.nz));
  for (int i = 0; i < grid.nz; ++i) out[static_cast<std::size_t>(i)] = grid.z_center(i);
  return out;
}

// ---------------------------------------------------------------------------
// plane-sweep volume

PlaneSweepVolume build_psv(const Tensor& left, const Tensor& right,
                           const StereoRig& rig, const VoxelGrid& grid, int stride) {
  if (left.rank() != 3 || left.shape() != right.shape()) {
    throw std::invalid_argument("build_psv: left/right must be equal (C,H,W) maps");
  }
  if (stride < 1) throw std::invalid_argument("build_psv: stride must be >= 1");
  const int c0 = left.dim(0), h = left.dim(1), w = left.dim(2);
  const auto cands = depth_candidates(grid);
  const int nd = static_cast<int>(cands.size());

  std::vector<double> shifts(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) {
    shifts[i] = rig.k.fx * rig.baseline / cands[i] / stride;
  }

  const double* lp = left.values().data();
  const double* rp = right.values().data();
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<double> out(static_cast<std::size_t>(2 * c0) * nd * plane);

#pragma omp parallel for collapse(2)
  for (int c = 0; c < c0; ++c) {
    for (int i = 0; i < nd; ++i) {
      double* left_dst = out.data() + (static_cast<std::int64_t>(c) * nd + i) * plane;
      double* right_dst = out.data() + (static_cast<std::int64_t>(c0 + c) * nd + i) * plane;
      const double shift = shifts[static_cast<std::size_t>(i)];
      for (int v = 0; v < h; ++v) {
        const double* lrow = lp + (static_cast<std::int64_t>(c) * h + v) * w;
        const double* rrow = rp + (static_cast<std::int64_t>(c) * h + v) * w;
        for (int u = 0; u < w; ++u) {
          left_dst[static_cast<std::int64_t>(v) * w + u] = lrow[u];
          const double x = u - shift;
          double val = 0.0;
          if (x >= -0.5 && x <= w - 0.5) {
            const int x0 = static_cast<int>(std::floor(x));
            const double f = x - x0;
            if (x0 >= 0) val += (1.0 - f) * rrow[x0];
            if (x0 + 1 < w) val += f * rrow[x0 + 1];
          }
          right_dst[static_cast<std::int64_t>(v) * w + u] = val;
        }
      }
    }
  }

  Tensor feature = make_op(
      {2 * c0, nd, h, w}, std::move(out), {left, right},
      [c0, nd, h, w, shifts, plane](detail::Node& self) {
        const double* g = self.grad.data();
        auto& pl = *self.parents[0];
        auto& pr = *self.parents[1];
        if (pl.requires_grad) {
          double* gl = pl.grad.data();
#pragma omp parallel for
          for (int c = 0; c < c0; ++c) {
            for (int v = 0; v < h; ++v)
              for (int u = 0; u < w; ++u) {
                double acc = 0.0;
                for (int i = 0; i < nd; ++i) {
                  acc += g[((static_cast<std::int64_t>(c) * nd + i) * h + v) * w + u];
                }
                gl[(static_cast<std::int64_t>(c) * h + v) * w + u] += acc;
              }
          }
        }
        if (pr.requires_grad) {
          double* gr = pr.grad.data();
#pragma omp parallel for collapse(2)
          for (int c = 0; c < c0; ++c) {
            for (int v = 0; v < h; ++v) {
              double* grow = gr + (static_cast<std::int64_t>(c) * h + v) * w;
              for (int i = 0; i < nd; ++i) {
                const double shift = shifts[static_cast<std::size_t>(i)];
                const double* grad_plane =
                    g + (static_cast<std::int64_t>(c0 + c) * nd + i) * plane +
                    static_cast<std::int64_t>(v) * w;
                for (int u = 0; u < w; ++u) {
                  const double x = u - shift;
                  if (x < -0.5 || x > w - 0.5) continue;
                  const int x0 = static_cast<int>(std::floor(x));
                  const double f = x - x0;
                  const double gu = grad_plane[u];
                  if (x0 >= 0) grow[x0] += (1.0 - f) * gu;
                  if (x0 + 1 < w) grow[x0 + 1] += f * gu;
                }
              }
            }
          }
        }
      },
      "build_psv");

  return PlaneSweepVolume{feature, cands, stride, rig};
}

Tensor build_disparity_cost_volume(const Tensor& left, const Tensor& right, int max_disp) {
  if (left.rank() != 3 || left.shape() != right.shape()) {
    throw std::invalid_argument("disparity_cost_volume: left/right must be equal (C,H,W) maps");
  }
  if (max_disp < 1) throw std::invalid_argument("disparity_cost_volume: max_disp must be >= 1");
  const int c0 = left.dim(0), h = left.dim(1), w = left.dim(2);
  if (max_disp >= w) {
    throw std::invalid_argument("disparity_cost_volume: max_disp must be smaller than width");
  }

  const double* lp = left.values().data();
  const double* rp = right.values().data();
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<double> out(static_cast<std::size_t>(2 * c0) * max_disp * plane, 0.0);

#pragma omp parallel for collapse(2)
  for (int c = 0; c < c0; ++c) {
    for (int j = 0; j < max_disp; ++j) {
      double* ldst = out.data() + (static_cast<std::int64_t>(c) * max_disp + j) * plane;
      double* rdst = out.data() + (static_cast<std::int64_t>(c0 + c) * max_disp + j) * plane;
      for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
          ldst[static_cast<std::int64_t>(v) * w + u] = lp[(static_cast<std::int64_t>(c) * h + v) * w + u];
          if (u - j >= 0) {
            rdst[static_cast<std::int64_t>(v) * w + u] =
                rp[(static_cast<std::int64_t>(c) * h + v) * w + u - j];
          }
        }
    }
  }

  return make_op(
      {2 * c0, max_disp, h, w}, std::move(out), {left, right},
      [c0, max_disp, h, w, plane](detail::Node& self) {
        const double* g = self.grad.data();
        auto& pl = *self.parents[0];
        auto& pr = *self.parents[1];
        if (pl.requires_grad) {
          double* gl = pl.grad.data();
#pragma omp parallel for
          for (int c = 0; c < c0; ++c)
            for (std::int64_t s = 0; s < plane; ++s) {
              double acc = 0.0;
              for (int j = 0; j < max_disp; ++j) {
                acc += g[(static_cast<std::int64_t>(c) * max_disp + j) * plane + s];
              }
              gl[c * plane + s] += acc;
            }
        }
        if (pr.requires_grad) {
          double* gr = pr.grad.data();
#pragma omp parallel for collapse(2)
          for (int c = 0; c < c0; ++c)
            for (int v = 0; v < h; ++v)
              for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int j = 0; j < max_disp && x + j < w; ++j) {
                  acc += g[((static_cast<std::int64_t>(c0 + c) * max_disp + j) * h + v) * w + x + j];
                }
                gr[(static_cast<std::int64_t>(c) * h + v) * w + x] += acc;
              }
        }
      },
      "disparity_cost_volume");
}

// ---------------------------------------------------------------------------
// frustum -> world warp
//
// The interpolation stencil of every voxel is fixed by geometry, so it is
// computed once and shared by the forward gather and the backward scatter.
// The backward loop parallelizes over channels only: scatters from different
// voxels may hit the same frustum cell, but within a channel they are applied
// in a fixed serial order, keeping gradients bitwise reproducible.

namespace {

struct Stencil {
  std::int64_t off[8];
  double w[8];
  int count = 0;
};

// Nearest-sample-center border rule: a sample is dropped entirely when any
// coordinate rounds outside the volume, otherwise out-of-range corners of the
// stencil simply contribute nothing.
void trilinear_stencil(double z, double y, double x, int d, int h, int w, Stencil& st) {
  st.count = 0;
  if (x < -0.5 || x > w - 0.5 || y < -0.5 || y > h - 0.5 || z < -0.5 || z > d - 0.5) return;
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int z0 = static_cast<int>(std::floor(z));
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const int zz = z0 + dz, yy = y0 + dy, xx = x0 + dx;
        if (zz < 0 || zz >= d || yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        const double wt = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
        st.off[st.count] = (static_cast<std::int64_t>(zz) * h + yy) * w + xx;
        st.w[st.count] = wt;
        ++st.count;
      }
}

template <class IndexFn>
Tensor warp_frustum_volume(const Tensor& volume, const VoxelGrid& grid,
                           const Intrinsics& k, int stride, IndexFn depth_index) {
  if (volume.rank() != 4) {
    throw std::invalid_argument("warp: frustum volume must be (C,D,H,W)");
  }
  const int c = volume.dim(0), d = volume.dim(1), h = volume.dim(2), w = volume.dim(3);
  const std::int64_t slab = static_cast<std::int64_t>(d) * h * w;
  const std::int64_t nvox = grid.voxel_count();

  auto stencils = std::make_shared<std::vector<Stencil>>(static_cast<std::size_t>(nvox));
#pragma omp parallel for collapse(2)
  for (int iz = 0; iz < grid.nz; ++iz) {
    for (int iy = 0; iy < grid.ny; ++iy) {
      for (int ix = 0; ix < grid.nx; ++ix) {
        const std::int64_t vs = (static_cast<std::int64_t>(iz) * grid.ny + iy) * grid.nx + ix;
        Stencil& st = (*stencils)[static_cast<std::size_t>(vs)];
        const WorldPoint p{grid.x_center(ix), grid.y_center(iy), grid.z_center(iz)};
        if (p.z <= 0) {
          st.count = 0;
          continue;
        }
        const FrustumCoord f = project(p, k);
        trilinear_stencil(depth_index(p.z), f.v / stride, f.u / stride, d, h, w, st);
      }
    }
  }

  const double* in = volume.values().data();
  std::vector<double> out(static_cast<std::size_t>(c) * nvox, 0.0);
#pragma omp parallel for collapse(2)
  for (int ch = 0; ch < c; ++ch) {
    for (std::int64_t vs = 0; vs < nvox; ++vs) {
      const Stencil& st = (*stencils)[static_cast<std::size_t>(vs)];
      double acc = 0.0;
      for (int i = 0; i < st.count; ++i) acc += st.w[i] * in[ch * slab + st.off[i]];
      out[static_cast<std::size_t>(ch * nvox + vs)] = acc;
    }
  }

  return make_op(
      {c, grid.nz, grid.ny, grid.nx}, std::move(out), {volume},
      [c, slab, nvox, stencils](detail::Node& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        double* gin = parent.grad.data();
        const double* g = self.grad.data();
#pragma omp parallel for
        for (int ch = 0; ch < c; ++ch) {
          for (std::int64_t vs = 0; vs < nvox; ++vs) {
            const Stencil& st = (*stencils)[static_cast<std::size_t>(vs)];
            const double gv = g[ch * nvox + vs];
            for (int i = 0; i < st.count; ++i) gin[ch * slab + st.off[i]] += st.w[i] * gv;
          }
        }
      },
      "warp_to_3dgv");
}

}  // namespace

GeometricVolume warp_psv_to_3dgv(const PlaneSweepVolume& psv, const VoxelGrid& grid,
                                 const Intrinsics& k) {
  if (static_cast<int>(psv.candidates.size()) != psv.feature.dim(1)) {
    throw std::invalid_argument("warp_psv_to_3dgv: candidate count mismatch");
  }
  if (static_cast<int>(psv.candidates.size()) != grid.nz) {
    throw std::invalid_argument("warp_psv_to_3dgv: psv and grid depth layouts differ");
  }
  const double z_min = grid.z_min, vd = grid.voxel_d;
  Tensor warped = warp_frustum_volume(
      psv.feature, grid, k, psv.stride,
      [z_min, vd](double z) { return (z - z_min) / vd - 0.5; });
  return GeometricVolume{warped, grid};
}

GeometricVolume warp_disparity_volume_to_3dgv(const Tensor& volume, const StereoRig& rig,
                                              const VoxelGrid& grid, int stride) {
  const double fxb = rig.k.fx * rig.baseline;
  Tensor warped = warp_frustum_volume(
      volume, grid, rig.k, stride,
      [fxb, stride](double z) { return fxb / z / stride; });
  return GeometricVolume{warped, grid};
}

// ---------------------------------------------------------------------------
// direct image lift

namespace {

struct Stencil2D {
  std::int64_t off[4];
  double w[4];
  int count = 0;
};

void bilinear_stencil(double y, double x, int h, int w, Stencil2D& st) {
  st.count = 0;
  if (x < -0.5 || x > w - 0.5 || y < -0.5 || y > h - 0.5) return;
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const int yy = y0 + dy, xx = x0 + dx;
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      st.off[st.count] = static_cast<std::int64_t>(yy) * w + xx;
      st.w[st.count] = (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
      ++st.count;
    }
}

std::shared_ptr<std::vector<Stencil2D>> projection_stencils(const VoxelGrid& grid,
                                                            const Intrinsics& k, int stride,
                                                            int h, int w) {
  const std::int64_t nvox = grid.voxel_count();
  auto stencils = std::make_shared<std::vector<Stencil2D>>(static_cast<std::size_t>(nvox));
#pragma omp parallel for collapse(2)
  for (int iz = 0; iz < grid.nz; ++iz) {
    for (int iy = 0; iy < grid.ny; ++iy) {
      for (int ix = 0; ix < grid.nx; ++ix) {
        const std::int64_t vs = (static_cast<std::int64_t>(iz) * grid.ny + iy) * grid.nx + ix;
        Stencil2D& st = (*stencils)[static_cast<std::size_t>(vs)];
        const WorldPoint p{grid.x_center(ix), grid.y_center(iy), grid.z_center(iz)};
        if (p.z <= 0) {
          st.count = 0;
          continue;
        }
        const FrustumCoord f = project(p, k);
        bilinear_stencil(f.v / stride, f.u / stride, h, w, st);
      }
    }
  }
  return stencils;
}

}  // namespace

GeometricVolume lift_image_to_3dv(const Tensor& feat, const VoxelGrid& grid,
                                  const Intrinsics& k, int stride) {
  if (feat.rank() != 3) throw std::invalid_argument("lift_image_to_3dv: feat must be (C,H,W)");
  const int c = feat.dim(0), h = feat.dim(1), w = feat.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t nvox = grid.voxel_count();
  auto stencils = projection_stencils(grid, k, stride, h, w);

  const double* in = feat.values().data();
  std::vector<double> out(static_cast<std::size_t>(c) * nvox, 0.0);
#pragma omp parallel for collapse(2)
  for (int ch = 0; ch < c; ++ch) {
    for (std::int64_t vs = 0; vs < nvox; ++vs) {
      const Stencil2D& st = (*stencils)[static_cast<std::size_t>(vs)];
      double acc = 0.0;
      for (int i = 0; i < st.count; ++i) acc += st.w[i] * in[ch * plane + st.off[i]];
      out[static_cast<std::size_t>(ch * nvox + vs)] = acc;
    }
  }

  Tensor warped = make_op(
      {c, grid.nz, grid.ny, grid.nx}, std::move(out), {feat},
      [c, plane, nvox, stencils](detail::Node& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        double* gin = parent.grad.data();
        const double* g = self.grad.data();
#pragma omp parallel for
        for (int ch = 0; ch < c; ++ch) {
          for (std::int64_t vs = 0; vs < nvox; ++vs) {
            const Stencil2D& st = (*stencils)[static_cast<std::size_t>(vs)];
            const double gv = g[ch * nvox + vs];
            for (int i = 0; i < st.count; ++i) gin[ch * plane + st.off[i]] += st.w[i] * gv;
          }
        }
      },
      "lift_image_to_3dv");
  return GeometricVolume{warped, grid};
}

// ---------------------------------------------------------------------------
// voxel feature encodings

Tensor voxel_feature_mode(const Tensor& cost, VoxelFeatureMode mode) {
  switch (mode) {
    case VoxelFeatureMode::kLastFeatures:
      return cost;
    case VoxelFeatureMode::kProbability: {
      if (cost.rank() != 3) {
        throw std::logic_error("voxel_feature_mode: probability expects a (D,H,W) cost");
      }
      return softmax(neg(cost), 0);
    }
    case VoxelFeatureMode::kOccupancy: {
      if (cost.rank() != 3) {
        throw std::logic_error("voxel_feature_mode: occupancy expects a (D,H,W) cost");
      }
      const int d = cost.dim(0), h = cost.dim(1), w = cost.dim(2);
      const double* in = cost.values().data();
      std::vector<double> out(cost.values().size(), 0.0);
      const std::int64_t plane = static_cast<std::int64_t>(h) * w;
      for (std::int64_t s = 0; s < plane; ++s) {
        int best = 0;
        for (int i = 1; i < d; ++i) {
          if (in[i * plane + s] < in[best * plane + s]) best = i;  // ties keep nearer plane
        }
        out[static_cast<std::size_t>(best * plane + s)] = 1.0;
      }
      return Tensor::constant(cost.shape(), std::move(out));  // detached
    }
  }
  throw std::logic_error("voxel_feature_mode: invalid mode");
}

// ---------------------------------------------------------------------------
// attention-weighted image concatenation

GeometricVolume attention_concat(const GeometricVolume& gv, const Tensor& image_feat,
                                 const Tensor& prob, const Intrinsics& k, int stride) {
  if (image_feat.rank() != 3) {
    throw std::invalid_argument("attention_concat: image_feat must be (C,H,W)");
  }
  const VoxelGrid grid = gv.grid;
  const Shape expect = {grid.nz, grid.ny, grid.nx};
  if (prob.shape() != expect) {
    throw std::invalid_argument("attention_concat: prob shape " + shape_str(prob.shape()) +
                                " does not match grid " + shape_str(expect));
  }
  const int cg = gv.feature.dim(0);
  const int ci = image_feat.dim(0), h = image_feat.dim(1), w = image_feat.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t nvox = grid.voxel_count();
  auto stencils = projection_stencils(grid, k, stride, h, w);

  const double* gvp = gv.feature.values().data();
  const double* imp = image_feat.values().data();
  const double* prp = prob.values().data();
  std::vector<double> out(static_cast<std::size_t>(cg + ci) * nvox);

  std::copy(gvp, gvp + cg * nvox, out.begin());
#pragma omp parallel for collapse(2)
  for (int ch = 0; ch < ci; ++ch) {
    for (std::int64_t vs = 0; vs < nvox; ++vs) {
      const Stencil2D& st = (*stencils)[static_cast<std::size_t>(vs)];
      double acc = 0.0;
      for (int i = 0; i < st.count; ++i) acc += st.w[i] * imp[ch * plane + st.off[i]];
      out[static_cast<std::size_t>((cg + ch) * nvox + vs)] = acc * prp[vs];
    }
  }

  Tensor feature = make_op(
      {cg + ci, grid.nz, grid.ny, grid.nx}, std::move(out),
      {gv.feature, image_feat, prob},
      [cg, ci, plane, nvox, stencils](detail::Node& self) {
        const double* g = self.grad.data();
        auto& pg = *self.parents[0];
        auto& pi = *self.parents[1];
        auto& pp = *self.parents[2];
        const double* imp = pi.data.data();
        const double* prp = pp.data.data();
        if (pg.requires_grad) {
          double* dst = pg.grad.data();
          const std::int64_t n = static_cast<std::int64_t>(cg) * nvox;
#pragma omp parallel for
          for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
        }
        if (pi.requires_grad) {
          double* dst = pi.grad.data();
#pragma omp parallel for
          for (int ch = 0; ch < ci; ++ch) {
            for (std::int64_t vs = 0; vs < nvox; ++vs) {
              const Stencil2D& st = (*stencils)[static_cast<std::size_t>(vs)];
              const double gv = g[(cg + ch) * nvox + vs] * prp[vs];
              for (int i = 0; i < st.count; ++i) dst[ch * plane + st.off[i]] += st.w[i] * gv;
            }
          }
        }
        if (pp.requires_grad) {
          double* dst = pp.grad.data();
#pragma omp parallel for
          for (std::int64_t vs = 0; vs < nvox; ++vs) {
            const Stencil2D& st = (*stencils)[static_cast<std::size_t>(vs)];
            double acc = 0.0;
            for (int ch = 0; ch < ci; ++ch) {
              double sample = 0.0;
              for (int i = 0; i < st.count; ++i) sample += st.w[i] * imp[ch * plane + st.off[i]];
              acc += sample * g[(cg + ch) * nvox + vs];
            }
            dst[vs] += acc;
          }
        }
      },
      "attention_concat");
  return GeometricVolume{feature, grid};
}

// ---------------------------------------------------------------------------
// sidecar

void write_grid_sidecar(const std::string& path, const VoxelGrid& grid) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os.precision(17);
  os << "x_range " << grid.x_min << ' ' << grid.x_max << '\n'
     << "y_range " << grid.y_min << ' ' << grid.y_max << '\n'
     << "z_range " << grid.z_min << ' ' << grid.z_max << '\n'
     << "voxel " << grid.voxel_w << ' ' << grid.voxel_h << ' ' << grid.voxel_d << '\n';
}

VoxelGrid read_grid_sidecar(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open for read: " + path);
  std::string key;
  double x0, x1, y0, y1, z0, z1, vw, vh, vd;
  is >> key >> x0 >> x1;
  if (key != "x_range") throw std::runtime_error("grid sidecar: expected x_range");
  is >> key >> y0 >> y1;
  if (key != "y_range") throw std::runtime_error("grid sidecar: expected y_range");
  is >> key >> z0 >> z1;
  if (key != "z_range") throw std::runtime_error("grid sidecar: expected z_range");
  is >> key >> vw >> vh >> vd;
  if (key != "voxel" || !is) throw std::runtime_error("grid sidecar: expected voxel sizes");
  return VoxelGrid::create(x0, x1, y0, y1, z0, z1, vw, vh, vd);
}

}  // namespace dsgn
