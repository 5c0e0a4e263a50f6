#include "dsgn/detection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dsgn/eval.hpp"
#include "dsgn/geometry.hpp"

namespace dsgn {

namespace {

// Box-frame corner offsets (along length, along width), counter-clockwise
// from front-left when viewed from above.
constexpr double kCornerSign[4][2] = {{+1, +1}, {-1, +1}, {-1, -1}, {+1, -1}};

inline void rotate_bev(double theta, double dx, double dz, double& x, double& z) {
  const double c = std::cos(theta), s = std::sin(theta);
  x = c * dx + s * dz;
  z = -s * dx + c * dz;
}

}  // namespace

BevCorners corners_bev(const Box3D& b) {
  BevCorners out;
  for (int i = 0; i < 4; ++i) {
    double rx, rz;
    rotate_bev(b.theta, kCornerSign[i][0] * b.l / 2, kCornerSign[i][1] * b.w / 2, rx, rz);
    out[static_cast<std::size_t>(i)] = {b.x + rx, b.z + rz};
  }
  return out;
}

BoxCorners corners_8(const Box3D& b) {
  const BevCorners bev = corners_bev(b);
  BoxCorners out;
  for (int i = 0; i < 4; ++i) {
    out[static_cast<std::size_t>(i)] = {bev[static_cast<std::size_t>(i)][0], b.y + b.h / 2,
                                        bev[static_cast<std::size_t>(i)][1]};
    out[static_cast<std::size_t>(i + 4)] = {bev[static_cast<std::size_t>(i)][0], b.y - b.h / 2,
                                            bev[static_cast<std::size_t>(i)][1]};
  }
  return out;
}

double corner_distance(const Box3D& a, const Box3D& g) {
  const BoxCorners ca = corners_8(a), cg = corners_8(g);
  double acc = 0.0;
  for (int i = 0; i < 8; ++i) {
    const double dx = ca[static_cast<std::size_t>(i)][0] - cg[static_cast<std::size_t>(i)][0];
    const double dz = ca[static_cast<std::size_t>(i)][2] - cg[static_cast<std::size_t>(i)][2];
    acc += std::sqrt(dx * dx + dz * dz);
  }
  return acc / 8.0;
}

Box3D AnchorSet::anchor(long long idx) const {
  const int t = static_cast<int>(idx / (static_cast<long long>(nz) * nx));
  const long long rest = idx % (static_cast<long long>(nz) * nx);
  const int iz = static_cast<int>(rest / nx);
  const int ix = static_cast<int>(rest % nx);
  Box3D b;
  b.x = x_min + (ix + 0.5) * cell_w;
  b.z = z_min + (iz + 0.5) * cell_d;
  b.y = cls.y_center;
  b.h = cls.h;
  b.w = cls.w;
  b.l = cls.l;
  b.theta = wrap_angle_2pi(2.0 * M_PI * t / cls.n_theta);
  return b;
}

AnchorSet generate_anchors(const VoxelGrid& grid, const ClassConfig& cls) {
  AnchorSet a;
  a.nx = grid.nx;
  a.nz = grid.nz;
  a.x_min = grid.x_min;
  a.z_min = grid.z_min;
  a.cell_w = grid.voxel_w;
  a.cell_d = grid.voxel_d;
  a.cls = cls;
  return a;
}

// ---------------------------------------------------------------------------
// assignment

namespace {

bool bev_point_in_box(const Box3D& b, double x, double z) {
  const double dx = x - b.x, dz = z - b.z;
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  // inverse yaw rotation into the box frame
  const double bx = c * dx - s * dz;
  const double bz = s * dx + c * dz;
  return std::abs(bx) <= b.l / 2 && std::abs(bz) <= b.w / 2;
}

}  // namespace

AssignmentResult assign_targets(const AnchorSet& anchors, const std::vector<Box3D>& gts,
                                double gamma, const VoxelGrid& grid) {
  const long long n = anchors.count();
  if (n <= 0) throw std::logic_error("assign_targets: empty anchor set");
  if (gamma <= 0) throw std::invalid_argument("assign_targets: gamma must be positive");

  AssignmentResult res;
  res.label.assign(static_cast<std::size_t>(n), 0);
  res.matched_gt.assign(static_cast<std::size_t>(n), -1);
  res.centerness.assign(static_cast<std::size_t>(n), 1.0);
  if (gts.empty()) return res;

  const int g_count = static_cast<int>(gts.size());
  std::vector<std::vector<double>> dist(static_cast<std::size_t>(g_count));
  for (int g = 0; g < g_count; ++g) {
    auto& row = dist[static_cast<std::size_t>(g)];
    row.resize(static_cast<std::size_t>(n));
#pragma omp parallel for
    for (long long a = 0; a < n; ++a) {
      row[static_cast<std::size_t>(a)] = corner_distance(anchors.anchor(a), gts[static_cast<std::size_t>(g)]);
    }
  }

  // Per ground truth: positives = the N nearest anchors, N = round(gamma * k)
  // with k the BEV cells covered, floored at one.
  std::vector<std::vector<long long>> wanted(static_cast<std::size_t>(g_count));
  for (int g = 0; g < g_count; ++g) {
    const Box3D& gt = gts[static_cast<std::size_t>(g)];
    long long k = 0;
    for (int iz = 0; iz < grid.nz; ++iz)
      for (int ix = 0; ix < grid.nx; ++ix)
        if (bev_point_in_box(gt, grid.x_center(ix), grid.z_center(iz))) ++k;
    const long long want = std::max(1LL, std::llround(gamma * static_cast<double>(k)));

    const auto& row = dist[static_cast<std::size_t>(g)];
    std::vector<long long> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0LL);
    const long long take = std::min(want, n);
    std::partial_sort(order.begin(), order.begin() + take, order.end(),
                      [&row](long long a, long long b) {
                        if (row[static_cast<std::size_t>(a)] != row[static_cast<std::size_t>(b)])
                          return row[static_cast<std::size_t>(a)] < row[static_cast<std::size_t>(b)];
                        return a < b;
                      });
    order.resize(static_cast<std::size_t>(take));
    wanted[static_cast<std::size_t>(g)] = std::move(order);
  }

  // Conflicts keep the nearest ground truth (ties: lower index).
  for (int g = 0; g < g_count; ++g) {
    for (long long a : wanted[static_cast<std::size_t>(g)]) {
      const auto ia = static_cast<std::size_t>(a);
      if (res.matched_gt[ia] < 0) {
        res.matched_gt[ia] = g;
        continue;
      }
      const int other = res.matched_gt[ia];
      if (dist[static_cast<std::size_t>(g)][ia] < dist[static_cast<std::size_t>(other)][ia]) {
        res.matched_gt[ia] = g;
      }
    }
  }

  // Min-max centerness over each ground truth's final positive set.
  for (int g = 0; g < g_count; ++g) {
    double dmin = std::numeric_limits<double>::infinity();
    double dmax = -std::numeric_limits<double>::infinity();
    for (long long a : wanted[static_cast<std::size_t>(g)]) {
      if (res.matched_gt[static_cast<std::size_t>(a)] != g) continue;
      const double d = dist[static_cast<std::size_t>(g)][static_cast<std::size_t>(a)];
      dmin = std::min(dmin, d);
      dmax = std::max(dmax, d);
    }
    for (long long a : wanted[static_cast<std::size_t>(g)]) {
      const auto ia = static_cast<std::size_t>(a);
      if (res.matched_gt[ia] != g) continue;
      res.label[ia] = 1;
      const double d = dist[static_cast<std::size_t>(g)][ia];
      res.centerness[ia] = dmax > dmin ? std::exp(-(d - dmin) / (dmax - dmin)) : 1.0;
    }
  }

  res.n_pos = 0;
  for (auto l : res.label) res.n_pos += l;
  return res;
}

// ---------------------------------------------------------------------------
// box coding

Box3D decode_box(const Box3D& anchor, const BoxDelta& delta, int n_theta) {
  if (n_theta < 1) throw std::invalid_argument("decode_box: n_theta must be >= 1");
  Box3D b;
  b.x = anchor.x + delta[0];
  b.y = anchor.y + delta[1];
  b.z = anchor.z + delta[2];
  b.h = anchor.h * std::exp(delta[3]);
  b.w = anchor.w * std::exp(delta[4]);
  b.l = anchor.l * std::exp(delta[5]);
  b.theta = wrap_angle_2pi(anchor.theta + M_PI / n_theta * std::tanh(delta[6]));
  return b;
}

BoxDelta encode_box(const Box3D& anchor, const Box3D& gt, int n_theta) {
  if (n_theta < 1) throw std::invalid_argument("encode_box: n_theta must be >= 1");
  const double half_span = M_PI / n_theta;
  double dtheta = std::remainder(gt.theta - anchor.theta, 2.0 * M_PI);
  // wrap the residual into (-pi/n_theta, pi/n_theta]
  while (dtheta > half_span) dtheta -= 2.0 * half_span;
  while (dtheta <= -half_span) dtheta += 2.0 * half_span;
  const double ratio = std::clamp(dtheta / half_span, -(1.0 - 1e-6), 1.0 - 1e-6);
  return {gt.x - anchor.x,        gt.y - anchor.y,        gt.z - anchor.z,
          std::log(gt.h / anchor.h), std::log(gt.w / anchor.w), std::log(gt.l / anchor.l),
          std::atanh(ratio)};
}

// ---------------------------------------------------------------------------
// losses

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

void check_head_shape(const Tensor& t, long long n, int per_anchor, const char* op) {
  if (t.size() != n * per_anchor) {
    throw std::invalid_argument(std::string(op) + ": head tensor size does not match anchors");
  }
}

double smooth_l1_scalar(double x, double beta) {
  const double ax = std::abs(x);
  return ax < beta ? 0.5 * x * x / beta : ax - 0.5 * beta;
}

double smooth_l1_slope(double x, double beta) {
  return std::abs(x) < beta ? x / beta : (x > 0 ? 1.0 : -1.0);
}

}  // namespace

Tensor focal_loss(const Tensor& logits, const AssignmentResult& assign, double alpha,
                  double gamma_f) {
  const long long n = static_cast<long long>(assign.label.size());
  check_head_shape(logits, n, 1, "focal_loss");
  const double* x = logits.values().data();
  const double norm = 1.0 / std::max(assign.n_pos, 1);

  double acc = 0.0;
  for (long long i = 0; i < n; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-x[i]));
    const double log_p = -softplus(-x[i]);
    const double log_q = -softplus(x[i]);
    if (assign.label[static_cast<std::size_t>(i)]) {
      acc += -alpha * std::pow(1.0 - p, gamma_f) * log_p;
    } else {
      acc += -(1.0 - alpha) * std::pow(p, gamma_f) * log_q;
    }
  }

  auto labels = std::make_shared<std::vector<std::uint8_t>>(assign.label);
  return make_op(
      {1}, {acc * norm}, {logits},
      [n, alpha, gamma_f, norm, labels](detail::Node& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        double* gx = parent.grad.data();
        const double* x = parent.data.data();
        const double g = self.grad[0] * norm;
        for (long long i = 0; i < n; ++i) {
          const double p = 1.0 / (1.0 + std::exp(-x[i]));
          double d;
          if ((*labels)[static_cast<std::size_t>(i)]) {
            const double log_p = -softplus(-x[i]);
            const double t1 = gamma_f > 0 ? gamma_f * std::pow(1.0 - p, gamma_f) * p * log_p : 0.0;
            d = alpha * (t1 - std::pow(1.0 - p, gamma_f + 1.0));
          } else {
            const double log_q = -softplus(x[i]);
            const double t1 = gamma_f > 0 ? gamma_f * std::pow(p, gamma_f) * (1.0 - p) * log_q : 0.0;
            d = (1.0 - alpha) * (-t1 + std::pow(p, gamma_f + 1.0));
          }
          gx[i] += d * g;
        }
      },
      "focal_loss");
}

Tensor regression_loss(const Tensor& deltas, const AnchorSet& anchors,
                       const AssignmentResult& assign, const std::vector<Box3D>& gts,
                       RegressionMode mode, bool corner_flip_min, double beta) {
  const long long n = static_cast<long long>(assign.label.size());
  if (n != anchors.count()) throw std::invalid_argument("regression_loss: assignment size mismatch");
  check_head_shape(deltas, n, 7, "regression_loss");
  if (assign.n_pos == 0) throw std::logic_error("regression_loss: no positive anchors");

  const long long cells = static_cast<long long>(anchors.nz) * anchors.nx;
  // delta component p of anchor a: heads are laid out (n_theta*7, nz, nx)
  auto delta_index = [cells](long long a, int p) {
    const long long t = a / cells, rest = a % cells;
    return (t * 7 + p) * cells + rest;
  };

  const double* dv = deltas.values().data();
  const double inv_pos = 1.0 / assign.n_pos;
  const int n_theta = anchors.cls.n_theta;

  struct PosGrad {
    long long a;
    double d[7];  // d(loss contribution)/d(delta component), pre upstream
  };
  auto grads = std::make_shared<std::vector<PosGrad>>();
  double total = 0.0;

  for (long long a = 0; a < n; ++a) {
    if (!assign.label[static_cast<std::size_t>(a)]) continue;
    const Box3D anc = anchors.anchor(a);
    const Box3D& gt = gts[static_cast<std::size_t>(assign.matched_gt[static_cast<std::size_t>(a)])];
    const double ctr = assign.centerness[static_cast<std::size_t>(a)];
    BoxDelta d;
    for (int p = 0; p < 7; ++p) d[static_cast<std::size_t>(p)] = dv[delta_index(a, p)];

    PosGrad pg{};
    pg.a = a;

    if (mode == RegressionMode::kSeparable) {
      const BoxDelta target = encode_box(anc, gt, n_theta);
      double loss = 0.0;
      for (int p = 0; p < 7; ++p) {
        const double r = d[static_cast<std::size_t>(p)] - target[static_cast<std::size_t>(p)];
        loss += smooth_l1_scalar(r, beta) / 7.0;
        pg.d[p] = ctr * inv_pos * smooth_l1_slope(r, beta) / 7.0;
      }
      total += ctr * inv_pos * loss;
    } else {
      const Box3D dec = decode_box(anc, d, n_theta);
      const double dtheta_ddelta =
          M_PI / n_theta * (1.0 - std::tanh(d[6]) * std::tanh(d[6]));

      auto corner_residual = [&](const Box3D& ref, double* grad7) {
        const BoxCorners pc = corners_8(dec), gc = corners_8(ref);
        const double c = std::cos(dec.theta), s = std::sin(dec.theta);
        double r = 0.0;
        for (int i = 0; i < 8; ++i) {
          const double sl = kCornerSign[i % 4][0] * dec.l / 2;
          const double sw = kCornerSign[i % 4][1] * dec.w / 2;
          const double sx = (pc[static_cast<std::size_t>(i)][0] - gc[static_cast<std::size_t>(i)][0]) > 0 ? 1.0 : -1.0;
          const double sy = (pc[static_cast<std::size_t>(i)][1] - gc[static_cast<std::size_t>(i)][1]) > 0 ? 1.0 : -1.0;
          const double sz = (pc[static_cast<std::size_t>(i)][2] - gc[static_cast<std::size_t>(i)][2]) > 0 ? 1.0 : -1.0;
          r += (std::abs(pc[static_cast<std::size_t>(i)][0] - gc[static_cast<std::size_t>(i)][0]) +
                std::abs(pc[static_cast<std::size_t>(i)][1] - gc[static_cast<std::size_t>(i)][1]) +
                std::abs(pc[static_cast<std::size_t>(i)][2] - gc[static_cast<std::size_t>(i)][2]));
          if (!grad7) continue;
          // corner position derivatives chained to the decoded parameters
          grad7[0] += sx / 8.0;                              // d/dx
          grad7[1] += sy / 8.0;                              // d/dy
          grad7[2] += sz / 8.0;                              // d/dz
          grad7[3] += sy * (i < 4 ? 0.5 : -0.5) / 8.0;       // d/dh
          grad7[4] += (sx * s * kCornerSign[i % 4][1] * 0.5 +
                       sz * c * kCornerSign[i % 4][1] * 0.5) / 8.0;   // d/dw
          grad7[5] += (sx * c * kCornerSign[i % 4][0] * 0.5 -
                       sz * s * kCornerSign[i % 4][0] * 0.5) / 8.0;   // d/dl
          // d(corner)/d(theta): rotating offset by 90 degrees
          const double ox = c * sl + s * sw, oz = -s * sl + c * sw;
          grad7[6] += (sx * oz - sz * ox) / 8.0;
        }
        return r / 8.0;
      };

      double g_main[7] = {0};
      const double r_main = corner_residual(gt, g_main);
      double r = r_main;
      const double* g_used = g_main;
      double g_flip[7] = {0};
      if (corner_flip_min) {
        Box3D flipped = gt;
        flipped.theta = wrap_angle_2pi(gt.theta + M_PI);
        const double r_flip = corner_residual(flipped, g_flip);
        if (r_flip < r_main) {
          r = r_flip;
          g_used = g_flip;
        }
      }

      total += ctr * inv_pos * smooth_l1_scalar(r, beta);
      const double outer = ctr * inv_pos * smooth_l1_slope(r, beta);
      // chain through decode: centers identity, sizes scale by themselves,
      // theta through the tanh band
      pg.d[0] = outer * g_used[0];
      pg.d[1] = outer * g_used[1];
      pg.d[2] = outer * g_used[2];
      pg.d[3] = outer * g_used[3] * dec.h;
      pg.d[4] = outer * g_used[4] * dec.w;
      pg.d[5] = outer * g_used[5] * dec.l;
      pg.d[6] = outer * g_used[6] * dtheta_ddelta;
    }
    grads->push_back(pg);
  }

  return make_op(
      {1}, {total}, {deltas},
      [grads, cells](detail::Node& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        double* gd = parent.grad.data();
        const double g = self.grad[0];
        for (const auto& pg : *grads) {
          const long long t = pg.a / cells, rest = pg.a % cells;
          for (int p = 0; p < 7; ++p) gd[(t * 7 + p) * cells + rest] += pg.d[p] * g;
        }
      },
      "regression_loss");
}

Tensor centerness_loss(const Tensor& logits, const AssignmentResult& assign) {
  const long long n = static_cast<long long>(assign.label.size());
  check_head_shape(logits, n, 1, "centerness_loss");
  if (assign.n_pos == 0) throw std::logic_error("centerness_loss: no positive anchors");

  const double* x = logits.values().data();
  double acc = 0.0;
  for (long long i = 0; i < n; ++i) {
    if (!assign.label[static_cast<std::size_t>(i)]) continue;
    const double t = assign.centerness[static_cast<std::size_t>(i)];
    acc += t * softplus(-x[i]) + (1.0 - t) * softplus(x[i]);
  }
  const double inv = 1.0 / assign.n_pos;

  auto labels = std::make_shared<std::vector<std::uint8_t>>(assign.label);
  auto targets = std::make_shared<std::vector<double>>(assign.centerness);
  return make_op(
      {1}, {acc * inv}, {logits},
      [n, inv, labels, targets](detail::Node& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        double* gx = parent.grad.data();
        const double* x = parent.data.data();
        const double g = self.grad[0] * inv;
        for (long long i = 0; i < n; ++i) {
          if (!(*labels)[static_cast<std::size_t>(i)]) continue;
          const double p = 1.0 / (1.0 + std::exp(-x[i]));
          gx[i] += (p - (*targets)[static_cast<std::size_t>(i)]) * g;
        }
      },
      "centerness_loss");
}

// ---------------------------------------------------------------------------
// NMS

std::vector<int> bev_nms(const std::vector<Box3D>& boxes, const std::vector<double>& scores,
                         double iou_threshold) {
  if (boxes.size() != scores.size()) throw std::invalid_argument("bev_nms: size mismatch");
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw std::invalid_argument("bev_nms: threshold must lie in (0,1)");
  }
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&scores](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });

  std::vector<int> kept;
  for (int idx : order) {
    bool suppressed = false;
    for (int k : kept) {
      if (rotated_iou_bev(boxes[static_cast<std::size_t>(idx)], boxes[static_cast<std::size_t>(k)]) >
          iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

// ---------------------------------------------------------------------------
// detection records

std::string format_detections(const std::vector<Detection>& dets) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& d : dets) {
    os << d.class_name << ' ' << d.score << ' ' << d.box.x << ' ' << d.box.y << ' ' << d.box.z
       << ' ' << d.box.h << ' ' << d.box.w << ' ' << d.box.l << ' ' << d.box.theta << '\n';
  }
  return os.str();
}

std::vector<Detection> parse_detections(const std::string& text) {
  std::vector<Detection> out;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Detection d;
    if (!(ls >> d.class_name >> d.score >> d.box.x >> d.box.y >> d.box.z >> d.box.h >> d.box.w >>
          d.box.l >> d.box.theta)) {
      throw std::runtime_error("detections: malformed line " + std::to_string(line_no));
    }
    out.push_back(d);
  }
  return out;
}

}  // namespace dsgn
