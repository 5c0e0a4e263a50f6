// Compares the OpenMP kernels behind the tensor ops against the serial
// reference implementations on medium problem sizes.

#include <chrono>
#include <cstdio>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dsgn/rng.hpp"
#include "dsgn/serial_ref.hpp"
#include "dsgn/tensor.hpp"
#include "dsgn/volumes.hpp"

using namespace dsgn;

namespace {

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

std::vector<double> randvec(Rng& rng, std::int64_t n) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.normal();
  return v;
}

template <class F>
double time_ms(F&& f, int reps) {
  f();  // warm up
  const double t0 = now_ms();
  for (int i = 0; i < reps; ++i) f();
  return (now_ms() - t0) / reps;
}

void report(const char* name, double serial_ms, double parallel_ms) {
  std::printf("%-28s serial %8.2f ms   parallel %8.2f ms   speedup %.2fx\n", name, serial_ms,
              parallel_ms, serial_ms / parallel_ms);
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
  std::printf("built without OpenMP; both columns run serially\n");
#endif

  Rng rng(99);

  {  // conv2d
    const int c = 16, h = 64, w = 96, o = 16;
    const auto input = randvec(rng, static_cast<std::int64_t>(c) * h * w);
    const auto kernel = randvec(rng, static_cast<std::int64_t>(o) * c * 9);
    Tensor ti = Tensor::constant({c, h, w}, input);
    Tensor tk = Tensor::constant({o, c, 3, 3}, kernel);
    const double serial =
        time_ms([&] { ref::conv2d(input, c, h, w, kernel, o, 3, 3, 1, 1, 1, 1); }, 3);
    const double parallel = time_ms([&] { conv2d(ti, tk, Tensor{}, {1, 1}, {1, 1}); }, 3);
    report("conv2d 16x64x96 k3", serial, parallel);
  }

  {  // conv3d
    const int c = 8, d = 24, h = 24, w = 32, o = 8;
    const auto input = randvec(rng, static_cast<std::int64_t>(c) * d * h * w);
    const auto kernel = randvec(rng, static_cast<std::int64_t>(o) * c * 27);
    Tensor ti = Tensor::constant({c, d, h, w}, input);
    Tensor tk = Tensor::constant({o, c, 3, 3, 3}, kernel);
    const double serial = time_ms(
        [&] { ref::conv3d(input, c, d, h, w, kernel, o, 3, 3, 3, 1, 1, 1, 1, 1, 1); }, 3);
    const double parallel = time_ms([&] { conv3d(ti, tk, Tensor{}, {1, 1, 1}, {1, 1, 1}); }, 3);
    report("conv3d 8x24x24x32 k3", serial, parallel);
  }

  {  // frustum -> world warp
    const VoxelGrid grid = VoxelGrid::create(-6.4, 6.4, -1.2, 1.2, 2.0, 14.8, 0.2, 0.2, 0.2);
    const Intrinsics k{60.0, 60.0, 48.0, 24.0};
    const StereoRig rig{k, 0.54};
    const int c = 8;
    const auto cands = depth_candidates(grid);
    const int d = static_cast<int>(cands.size()), h = 48, w = 96;
    const auto input = randvec(rng, static_cast<std::int64_t>(c) * d * h * w);
    Tensor ti = Tensor::constant({c, d, h, w}, input);
    PlaneSweepVolume psv{ti, cands, 1, rig};

    const double serial = time_ms(
        [&] {
          // brute-force per-voxel trilinear fetch
          std::vector<double> out(static_cast<std::size_t>(c) * grid.voxel_count());
          const double* in = input.data();
          std::size_t idx = 0;
          for (int ch = 0; ch < c; ++ch)
            for (int iz = 0; iz < grid.nz; ++iz)
              for (int iy = 0; iy < grid.ny; ++iy)
                for (int ix = 0; ix < grid.nx; ++ix) {
                  const WorldPoint p{grid.x_center(ix), grid.y_center(iy), grid.z_center(iz)};
                  const FrustumCoord f = project(p, k);
                  const double zi = (p.z - grid.z_min) / grid.voxel_d - 0.5;
                  out[idx++] = ref::trilinear(in + static_cast<std::int64_t>(ch) * d * h * w, d,
                                              h, w, zi, f.v, f.u);
                }
          volatile double sink = out[0];
          (void)sink;
        },
        2);
    const double parallel = time_ms([&] { warp_psv_to_3dgv(psv, grid, k); }, 2);
    report("warp 8ch 64x12x64 grid", serial, parallel);
  }

  {  // plane-sweep volume construction
    const VoxelGrid grid = VoxelGrid::create(-6.4, 6.4, -1.2, 1.2, 2.0, 14.8, 0.2, 0.2, 0.2);
    const StereoRig rig{{60.0, 60.0, 48.0, 24.0}, 0.54};
    const int c = 8, h = 48, w = 96;
    const auto left = randvec(rng, static_cast<std::int64_t>(c) * h * w);
    const auto right = randvec(rng, static_cast<std::int64_t>(c) * h * w);
    Tensor tl = Tensor::constant({c, h, w}, left);
    Tensor tr = Tensor::constant({c, h, w}, right);
    const auto cands = depth_candidates(grid);

    const double serial = time_ms(
        [&] {
          const int nd = static_cast<int>(cands.size());
          std::vector<double> out(static_cast<std::size_t>(2 * c) * nd * h * w, 0.0);
          for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < nd; ++i) {
              const double shift = rig.k.fx * rig.baseline / cands[static_cast<std::size_t>(i)];
              for (int v = 0; v < h; ++v)
                for (int u = 0; u < w; ++u) {
                  out[((static_cast<std::size_t>(ch) * nd + i) * h + v) * w + u] =
                      left[(static_cast<std::size_t>(ch) * h + v) * w + u];
                  out[((static_cast<std::size_t>(c + ch) * nd + i) * h + v) * w + u] =
                      ref::bilinear(right.data() + static_cast<std::int64_t>(ch) * h * w, h, w, v,
                                    u - shift);
                }
            }
          volatile double sink = out[1];
          (void)sink;
        },
        2);
    const double parallel = time_ms([&] { build_psv(tl, tr, rig, grid, 1); }, 2);
    report("build_psv 8ch 64 planes", serial, parallel);
  }

  return 0;
}
