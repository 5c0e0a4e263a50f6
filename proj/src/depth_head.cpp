#include "dsgn/depth_head.hpp"

#include <cmath>
#include <stdexcept>

namespace dsgn {

SparseDepthMap SparseDepthMap::from_dense(int height, int width, std::vector<double> depth) {
  if (static_cast<std::int64_t>(depth.size()) != static_cast<std::int64_t>(height) * width) {
    throw std::invalid_argument("SparseDepthMap: buffer size mismatch");
  }
  SparseDepthMap m;
  m.height = height;
  m.width = width;
  m.depth = std::move(depth);
  for (double d : m.depth) {
    if (d < 0) throw std::invalid_argument("SparseDepthMap: negative depth");
    if (d > 0) ++m.n_valid;
  }
  return m;
}

SparseDepthMap SparseDepthMap::strided(int stride) const {
  if (stride <= 1) return *this;
  const int h = height / stride, w = width / stride;
  std::vector<double> out(static_cast<std::size_t>(h) * w, 0.0);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u)
      out[static_cast<std::size_t>(v) * w + u] = depth[static_cast<std::size_t>(v) * stride * width + u * stride];
  return from_dense(h, w, std::move(out));
}

CostVolume reduce_to_cost(const PlaneSweepVolume& psv, const Tensor& w1, const Tensor& b1,
                          const Tensor& w2, const Tensor& b2) {
  if (w2.dim(0) != 1) {
    throw std::invalid_argument("reduce_to_cost: second conv must emit one channel");
  }
  Tensor hidden = relu(conv3d(psv.feature, w1, b1, {1, 1, 1}, {w1.dim(2) / 2, w1.dim(3) / 2, w1.dim(4) / 2}));
  Tensor raw = conv3d(hidden, w2, b2, {1, 1, 1}, {w2.dim(2) / 2, w2.dim(3) / 2, w2.dim(4) / 2});
  Tensor cost = reshape(raw, {raw.dim(1), raw.dim(2), raw.dim(3)});
  return CostVolume{cost, psv.candidates};
}

Tensor depth_expectation(const Tensor& prob, const std::vector<double>& weights) {
  if (prob.rank() != 3 || prob.dim(0) != static_cast<int>(weights.size())) {
    throw std::invalid_argument("depth_expectation: weights must match axis 0");
  }
  const int d = prob.dim(0), h = prob.dim(1), w = prob.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const double* p = prob.values().data();
  std::vector<double> out(static_cast<std::size_t>(plane), 0.0);
  for (int i = 0; i < d; ++i) {
    const double wi = weights[static_cast<std::size_t>(i)];
    for (std::int64_t s = 0; s < plane; ++s) out[static_cast<std::size_t>(s)] += wi * p[i * plane + s];
  }
  auto wcopy = weights;
  return make_op(
      {h, w}, std::move(out), {prob},
      [d, plane, wcopy](detail::Node& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        double* gp = parent.grad.data();
        const double* g = self.grad.data();
        for (int i = 0; i < d; ++i) {
          const double wi = wcopy[static_cast<std::size_t>(i)];
          for (std::int64_t s = 0; s < plane; ++s) gp[i * plane + s] += wi * g[s];
        }
      },
      "depth_expectation");
}

Tensor soft_argmin(const CostVolume& cv) {
  if (cv.cost.rank() != 3 || cv.cost.dim(0) != static_cast<int>(cv.candidates.size())) {
    throw std::invalid_argument("soft_argmin: cost must be (D,H,W) over the candidates");
  }
  return depth_expectation(softmax(neg(cv.cost), 0), cv.candidates);
}

Tensor upsample_bilinear_hw(const Tensor& x, int factor) {
  if (x.rank() != 3) throw std::invalid_argument("upsample_bilinear_hw: expects (D,H,W)");
  if (factor < 1) throw std::invalid_argument("upsample_bilinear_hw: factor must be >= 1");
  if (factor == 1) return x;
  const int d = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = h * factor, ow = w * factor;

  // Shared sampling geometry for forward and backward, half-pixel centers.
  struct Tap {
    int i0, i1;
    double f;
  };
  auto taps_for = [factor](int out, int n) {
    std::vector<Tap> taps(static_cast<std::size_t>(out));
    for (int o = 0; o < out; ++o) {
      double src = (o + 0.5) / factor - 0.5;
      src = std::min(std::max(src, 0.0), static_cast<double>(n - 1));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, n - 1);
      taps[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
    }
    return taps;
  };
  auto ytaps = std::make_shared<std::vector<Tap>>(taps_for(oh, h));
  auto xtaps = std::make_shared<std::vector<Tap>>(taps_for(ow, w));

  const double* in = x.values().data();
  std::vector<double> out(static_cast<std::size_t>(d) * oh * ow);
#pragma omp parallel for
  for (int pl = 0; pl < d; ++pl) {
    const double* src = in + static_cast<std::int64_t>(pl) * h * w;
    double* dst = out.data() + static_cast<std::int64_t>(pl) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const Tap ty = (*ytaps)[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < ow; ++ox) {
        const Tap tx = (*xtaps)[static_cast<std::size_t>(ox)];
        const double top = (1 - tx.f) * src[ty.i0 * w + tx.i0] + tx.f * src[ty.i0 * w + tx.i1];
        const double bot = (1 - tx.f) * src[ty.i1 * w + tx.i0] + tx.f * src[ty.i1 * w + tx.i1];
        dst[static_cast<std::int64_t>(oy) * ow + ox] = (1 - ty.f) * top + ty.f * bot;
      }
    }
  }

  return make_op(
      {d, oh, ow}, std::move(out), {x},
      [d, h, w, oh, ow, ytaps, xtaps](detail::Node& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        double* gin = parent.grad.data();
        const double* g = self.grad.data();
#pragma omp parallel for
        for (int pl = 0; pl < d; ++pl) {
          double* dst = gin + static_cast<std::int64_t>(pl) * h * w;
          const double* src = g + static_cast<std::int64_t>(pl) * oh * ow;
          for (int oy = 0; oy < oh; ++oy) {
            const Tap ty = (*ytaps)[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < ow; ++ox) {
              const Tap tx = (*xtaps)[static_cast<std::size_t>(ox)];
              const double gv = src[static_cast<std::int64_t>(oy) * ow + ox];
              dst[ty.i0 * w + tx.i0] += (1 - ty.f) * (1 - tx.f) * gv;
              dst[ty.i0 * w + tx.i1] += (1 - ty.f) * tx.f * gv;
              dst[ty.i1 * w + tx.i0] += ty.f * (1 - tx.f) * gv;
              dst[ty.i1 * w + tx.i1] += ty.f * tx.f * gv;
            }
          }
        }
      },
      "upsample_bilinear_hw");
}

Tensor depth_loss(const Tensor& pred, const SparseDepthMap& gt, double beta) {
  if (pred.rank() != 2 || pred.dim(0) != gt.height || pred.dim(1) != gt.width) {
    throw std::invalid_argument("depth_loss: prediction and ground truth sizes differ");
  }
  if (gt.n_valid == 0) throw std::logic_error("depth_loss: no pixels carry ground truth");
  const std::int64_t n = pred.size();
  const double* p = pred.values().data();
  const double* t = gt.depth.data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (t[i] <= 0) continue;
    const double x = p[i] - t[i];
    const double ax = std::abs(x);
    acc += ax < beta ? 0.5 * x * x / beta : ax - 0.5 * beta;
  }
  const double inv = 1.0 / gt.n_valid;
  auto mask = std::make_shared<std::vector<double>>(gt.depth);
  return make_op(
      {1}, {acc * inv}, {pred},
      [n, beta, inv, mask](detail::Node& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        double* gp = parent.grad.data();
        const double* p = parent.data.data();
        const double* t = mask->data();
        const double g = self.grad[0] * inv;
        for (std::int64_t i = 0; i < n; ++i) {
          if (t[i] <= 0) continue;
          const double x = p[i] - t[i];
          gp[i] += (std::abs(x) < beta ? x / beta : (x > 0 ? 1.0 : -1.0)) * g;
        }
      },
      "depth_loss");
}

Tensor occupancy_loss(const Tensor& volume_prob, const Tensor& gt_occupancy) {
  if (volume_prob.shape() != gt_occupancy.shape()) {
    throw std::invalid_argument("occupancy_loss: shape mismatch");
  }
  constexpr double kLo = 1e-7, kHi = 1.0 - 1e-7;
  const std::int64_t n = volume_prob.size();
  const double* p = volume_prob.values().data();
  const double* t = gt_occupancy.values().data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (t[i] != 0.0 && t[i] != 1.0) {
      throw std::logic_error("occupancy_loss: targets must be 0 or 1");
    }
    const double q = std::min(std::max(p[i], kLo), kHi);
    acc += -(t[i] * std::log(q) + (1.0 - t[i]) * std::log(1.0 - q));
  }
  const double inv = 1.0 / static_cast<double>(n);
  return make_op(
      {1}, {acc * inv}, {volume_prob, gt_occupancy},
      [n, inv, kLo, kHi](detail::Node& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        double* gp = parent.grad.data();
        const double* p = parent.data.data();
        const double* t = self.parents[1]->data.data();
        const double g = self.grad[0] * inv;
        for (std::int64_t i = 0; i < n; ++i) {
          const double q = std::min(std::max(p[i], kLo), kHi);
          // Zero slope inside the clamp, matching the clamped forward.
          if (p[i] < kLo || p[i] > kHi) continue;
          gp[i] += (-t[i] / q + (1.0 - t[i]) / (1.0 - q)) * g;
        }
      },
      "occupancy_loss");
}

}  // namespace dsgn
