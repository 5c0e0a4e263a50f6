#include "dsgn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dsgn {

// ---------------------------------------------------------------------------
// rotated IoU

namespace {

struct Pt {
  double x, z;
};

double polygon_area(const std::vector<Pt>& poly) {
  double acc = 0.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Pt& a = poly[i];
    const Pt& b = poly[(i + 1) % n];
    acc += a.x * b.z - b.x * a.z;
  }
  return std::abs(acc) / 2.0;
}

// Sutherland-Hodgman: clip a convex polygon against the half-plane on the
// inner side of edge (e0, e1) of a counter-clockwise rectangle.
std::vector<Pt> clip_edge(const std::vector<Pt>& poly, const Pt& e0, const Pt& e1) {
  std::vector<Pt> out;
  const std::size_t n = poly.size();
  auto side = [&](const Pt& p) {
    return (e1.x - e0.x) * (p.z - e0.z) - (e1.z - e0.z) * (p.x - e0.x);
  };
  for (std::size_t i = 0; i < n; ++i) {
    const Pt& cur = poly[i];
    const Pt& nxt = poly[(i + 1) % n];
    const double sc = side(cur), sn = side(nxt);
    if (sc >= 0) out.push_back(cur);
    if ((sc > 0 && sn < 0) || (sc < 0 && sn > 0)) {
      const double t = sc / (sc - sn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.z + t * (nxt.z - cur.z)});
    }
  }
  return out;
}

std::vector<Pt> box_polygon(const Box3D& b) {
  const BevCorners c = corners_bev(b);
  return {{c[0][0], c[0][1]}, {c[1][0], c[1][1]}, {c[2][0], c[2][1]}, {c[3][0], c[3][1]}};
}

double bev_intersection_area(const Box3D& a, const Box3D& b) {
  std::vector<Pt> poly = box_polygon(a);
  const std::vector<Pt> clip = box_polygon(b);
  for (std::size_t i = 0; i < 4 && !poly.empty(); ++i) {
    poly = clip_edge(poly, clip[i], clip[(i + 1) % 4]);
  }
  return poly.size() < 3 ? 0.0 : polygon_area(poly);
}

}  // namespace

double rotated_iou_bev(const Box3D& a, const Box3D& b) {
  const double area_a = a.w * a.l, area_b = b.w * b.l;
  if (area_a <= 0 || area_b <= 0) return 0.0;
  const double inter = bev_intersection_area(a, b);
  const double uni = area_a + area_b - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double iou_3d(const Box3D& a, const Box3D& b) {
  const double vol_a = a.w * a.l * a.h, vol_b = b.w * b.l * b.h;
  if (vol_a <= 0 || vol_b <= 0) return 0.0;
  const double y_overlap =
      std::max(0.0, std::min(a.y + a.h / 2, b.y + b.h / 2) - std::max(a.y - a.h / 2, b.y - b.h / 2));
  const double inter = bev_intersection_area(a, b) * y_overlap;
  const double uni = vol_a + vol_b - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::optional<Rect2D> project_box_to_image(const Box3D& b, const Intrinsics& k, int image_w,
                                           int image_h) {
  const BoxCorners corners = corners_8(b);
  double x0 = 1e30, y0 = 1e30, x1 = -1e30, y1 = -1e30;
  int in_front = 0;
  for (const auto& c : corners) {
    if (c[2] <= 1e-6) continue;
    ++in_front;
    const FrustumCoord f = project(WorldPoint{c[0], c[1], c[2]}, k);
    x0 = std::min(x0, f.u);
    y0 = std::min(y0, f.v);
    x1 = std::max(x1, f.u);
    y1 = std::max(y1, f.v);
  }
  if (in_front == 0) return std::nullopt;
  Rect2D r{std::max(0.0, x0), std::max(0.0, y0), std::min<double>(image_w, x1),
           std::min<double>(image_h, y1)};
  if (r.x1 <= r.x0 || r.y1 <= r.y0) return std::nullopt;
  return r;
}

double iou_2d(const Rect2D& a, const Rect2D& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// ---------------------------------------------------------------------------
// average precision

namespace {

std::vector<double> recall_grid(int recall_points) {
  std::vector<double> r;
  if (recall_points == 11) {
    for (int i = 0; i <= 10; ++i) r.push_back(i / 10.0);
  } else if (recall_points == 40) {
    for (int i = 1; i <= 40; ++i) r.push_back(i / 40.0);
  } else {
    throw std::invalid_argument("average_precision: recall_points must be 11 or 40");
  }
  return r;
}

// Match one scene greedily; emits (score, is_tp) for every detection.
void match_scene(const std::vector<DetectionRecord>& dets, const std::vector<Box3D>& gts,
                 const IouFn& iou, double iou_thresh,
                 std::vector<std::pair<double, bool>>& out) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&dets](int a, int b) {
    return dets[static_cast<std::size_t>(a)].score > dets[static_cast<std::size_t>(b)].score;
  });
  std::vector<bool> taken(gts.size(), false);
  for (int di : order) {
    const auto& d = dets[static_cast<std::size_t>(di)];
    double best = -1.0;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(d.box, gts[g]);
      if (v >= iou_thresh && v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) taken[static_cast<std::size_t>(best_g)] = true;
    out.emplace_back(d.score, best_g >= 0);
  }
}

double ap_from_matches(std::vector<std::pair<double, bool>> matches, std::size_t total_gt,
                       int recall_points) {
  const auto grid = recall_grid(recall_points);
  if (total_gt == 0) return matches.empty() ? 1.0 : 0.0;
  std::stable_sort(matches.begin(), matches.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  // precision/recall after each prefix of the score-ranked list
  std::vector<double> prec(matches.size()), rec(matches.size());
  int tp = 0;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    if (matches[i].second) ++tp;
    prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(tp) / static_cast<double>(total_gt);
  }
  double acc = 0.0;
  for (double r : grid) {
    double p = 0.0;
    for (std::size_t i = 0; i < matches.size(); ++i) {
      if (rec[i] >= r - 1e-12) p = std::max(p, prec[i]);
    }
    acc += p;
  }
  return acc / static_cast<double>(grid.size());
}

}  // namespace

double average_precision(const std::vector<DetectionRecord>& dets,
                         const std::vector<Box3D>& gts, const IouFn& iou, double iou_thresh,
                         int recall_points) {
  std::vector<std::pair<double, bool>> matches;
  match_scene(dets, gts, iou, iou_thresh, matches);
  return ap_from_matches(std::move(matches), gts.size(), recall_points);
}

double average_precision_scenes(const std::vector<std::vector<DetectionRecord>>& dets,
                                const std::vector<std::vector<Box3D>>& gts, const IouFn& iou,
                                double iou_thresh, int recall_points) {
  if (dets.size() != gts.size()) {
    throw std::invalid_argument("average_precision_scenes: scene count mismatch");
  }
  std::vector<std::pair<double, bool>> matches;
  std::size_t total_gt = 0;
  for (std::size_t s = 0; s < dets.size(); ++s) {
    match_scene(dets[s], gts[s], iou, iou_thresh, matches);
    total_gt += gts[s].size();
  }
  return ap_from_matches(std::move(matches), total_gt, recall_points);
}

// ---------------------------------------------------------------------------
// depth statistics

std::pair<double, double> depth_error_stats(const std::vector<double>& pred, int height,
                                            int width, const SparseDepthMap& gt, double z_min,
                                            double z_max) {
  if (height != gt.height || width != gt.width ||
      pred.size() != static_cast<std::size_t>(height) * width) {
    throw std::invalid_argument("depth_error_stats: size mismatch");
  }
  std::vector<double> errs;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = gt.depth[i];
    if (d <= 0 || d < z_min || d > z_max) continue;
    errs.push_back(std::abs(pred[i] - d));
  }
  if (errs.empty()) throw std::logic_error("depth_error_stats: no valid pixels in range");
  double mean = 0.0;
  for (double e : errs) mean += e;
  mean /= static_cast<double>(errs.size());
  std::sort(errs.begin(), errs.end());
  const double median = errs[(errs.size() - 1) / 2];  // lower middle when even
  return {mean, median};
}

double box_depth_precision(const std::vector<double>& pred, const SparseDepthMap& gt,
                           const std::vector<std::uint8_t>& mask, double outlier_thresh) {
  if (pred.size() != gt.depth.size() || mask.size() != gt.depth.size()) {
    throw std::invalid_argument("box_depth_precision: size mismatch");
  }
  long long total = 0, good = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i] || gt.depth[i] <= 0) continue;
    ++total;
    if (std::abs(pred[i] - gt.depth[i]) < outlier_thresh) ++good;
  }
  if (total == 0) throw std::logic_error("box_depth_precision: empty masked set");
  return static_cast<double>(good) / static_cast<double>(total);
}

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw std::invalid_argument("pearson: need two equally sized samples of length >= 2");
  }
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0 || syy == 0) throw std::domain_error("pearson: constant input");
  return sxy / std::sqrt(sxx * syy);
}

std::vector<std::optional<double>> distance_binned_ap(
    const std::vector<std::vector<DetectionRecord>>& dets,
    const std::vector<std::vector<Box3D>>& gts, double bin_width, double range_max,
    const IouFn& iou, double iou_thresh, int recall_points) {
  if (bin_width <= 0 || range_max <= 0) {
    throw std::invalid_argument("distance_binned_ap: bad bin layout");
  }
  const int bins = static_cast<int>(std::lround(range_max / bin_width));
  if (std::abs(bins * bin_width - range_max) > 1e-9) {
    throw std::invalid_argument("distance_binned_ap: bins must partition the range");
  }
  std::vector<std::optional<double>> out(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    const double lo = b * bin_width, hi = (b + 1) * bin_width;
    auto in_bin = [lo, hi](double z) { return z >= lo && z < hi; };
    std::vector<std::vector<DetectionRecord>> bd(dets.size());
    std::vector<std::vector<Box3D>> bg(gts.size());
    std::size_t total_gt = 0;
    for (std::size_t s = 0; s < dets.size(); ++s) {
      for (const auto& d : dets[s])
        if (in_bin(d.box.z)) bd[s].push_back(d);
      for (const auto& g : gts[s])
        if (in_bin(g.z)) bg[s].push_back(g);
      total_gt += bg[s].size();
    }
    if (total_gt == 0) continue;  // absent, not zero
    out[static_cast<std::size_t>(b)] =
        average_precision_scenes(bd, bg, iou, iou_thresh, recall_points);
  }
  return out;
}

// ---------------------------------------------------------------------------
// difficulty and report

DifficultyThresholds difficulty_thresholds(Difficulty d) {
  switch (d) {
    case Difficulty::kEasy:
      return {40.0, 0, 0.15};
    case Difficulty::kModerate:
      return {25.0, 1, 0.30};
    case Difficulty::kHard:
      return {25.0, 2, 0.50};
  }
  throw std::logic_error("unknown difficulty");
}

bool meets_difficulty(Difficulty d, double box_height_px, int occlusion, double truncation) {
  const DifficultyThresholds t = difficulty_thresholds(d);
  return box_height_px >= t.min_height && occlusion <= t.max_occlusion &&
         truncation <= t.max_truncation;
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  const char* rows[4] = {"easy", "moderate", "hard", "overall"};
  os << "          AP_3D    AP_BEV   AP_2D   (recall points: " << r.recall_points << ")\n";
  for (int i = 0; i < 4; ++i) {
    os << rows[i];
    for (std::size_t pad = std::string(rows[i]).size(); pad < 10; ++pad) os << ' ';
    if (r.defined[static_cast<std::size_t>(i)]) {
      os << r.ap_3d[static_cast<std::size_t>(i)] << "   " << r.ap_bev[static_cast<std::size_t>(i)]
         << "   " << r.ap_2d[static_cast<std::size_t>(i)];
    } else {
      os << "  --       --       --";
    }
    os << '\n';
  }
  if (r.has_depth) {
    os << "depth error (m): mean " << r.depth_mean << "  median " << r.depth_median << '\n';
  }
  if (!r.binned_ap.empty()) {
    os << "distance-binned AP_BEV:";
    for (const auto& v : r.binned_ap) {
      if (v)
        os << ' ' << *v;
      else
        os << " --";
    }
    os << '\n';
  }
  for (const auto& [thresh, c] : r.pcc) {
    os << "pcc@" << thresh << "m " << c << '\n';
  }
  if (r.empty_vs_empty_flag) os << "note: AP defined as 1 on empty-vs-empty input\n";

  // machine-readable block
  for (int i = 0; i < 4; ++i) {
    if (!r.defined[static_cast<std::size_t>(i)]) continue;
    os << "ap_3d_" << rows[i] << '=' << r.ap_3d[static_cast<std::size_t>(i)] << '\n'
       << "ap_bev_" << rows[i] << '=' << r.ap_bev[static_cast<std::size_t>(i)] << '\n'
       << "ap_2d_" << rows[i] << '=' << r.ap_2d[static_cast<std::size_t>(i)] << '\n';
  }
  if (r.has_depth) {
    os << "depth_mean=" << r.depth_mean << '\n' << "depth_median=" << r.depth_median << '\n';
  }
  return os.str();
}

}  // namespace dsgn
