#include "dsgn/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dsgn/eval.hpp"
#include "dsgn/rng.hpp"

namespace fs = std::filesystem;

namespace dsgn {

// ---------------------------------------------------------------------------
// calibration

StereoRig Calibration::rig() const {
  StereoRig r;
  r.k.fx = p2[0];
  r.k.fy = p2[5];
  r.k.cu = p2[2];
  r.k.cv = p2[6];
  if (r.k.fx <= 0 || r.k.fy <= 0) throw std::runtime_error("calibration: non-positive focal length");
  if (std::abs(p2[0] - p3[0]) > 1e-6 * std::max(1.0, std::abs(p2[0]))) {
    throw std::runtime_error("calibration: P2/P3 focal lengths disagree");
  }
  r.baseline = (p2[3] - p3[3]) / r.k.fx;
  if (r.baseline <= 0) throw std::runtime_error("calibration: non-positive baseline");
  return r;
}

Calibration parse_calib(const std::string& text) {
  Calibration c;
  bool have_p2 = false, have_p3 = false;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key != "P2:" && key != "P3:") continue;
    std::array<double, 12>& dst = (key == "P2:") ? c.p2 : c.p3;
    for (int i = 0; i < 12; ++i) {
      if (!(ls >> dst[static_cast<std::size_t>(i)])) {
        throw std::runtime_error("calib parse error at line " + std::to_string(line_no) +
                                 ": expected 12 floats after " + key);
      }
    }
    double extra;
    if (ls >> extra) {
      throw std::runtime_error("calib parse error at line " + std::to_string(line_no) +
                               ": more than 12 values after " + key);
    }
    (key == "P2:" ? have_p2 : have_p3) = true;
  }
  if (!have_p2 || !have_p3) throw std::runtime_error("calib parse error: missing P2 or P3 line");
  return c;
}

std::string format_calib(const Calibration& c) {
  std::ostringstream os;
  os.precision(17);
  os << "P2:";
  for (double v : c.p2) os << ' ' << v;
  os << "\nP3:";
  for (double v : c.p3) os << ' ' << v;
  os << '\n';
  return os.str();
}

Calibration make_calib(const StereoRig& rig) {
  Calibration c;
  c.p2 = {rig.k.fx, 0, rig.k.cu, 0, 0, rig.k.fy, rig.k.cv, 0, 0, 0, 1, 0};
  c.p3 = c.p2;
  c.p3[3] = -rig.k.fx * rig.baseline;
  return c;
}

// ---------------------------------------------------------------------------
// labels

std::vector<LabelRecord> parse_labels(const std::string& text) {
  std::vector<LabelRecord> out;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    LabelRecord r;
    if (!(ls >> r.type >> r.truncation >> r.occlusion >> r.alpha >> r.bbox[0] >> r.bbox[1] >>
          r.bbox[2] >> r.bbox[3] >> r.h >> r.w >> r.l >> r.x >> r.y >> r.z >> r.rotation_y)) {
      throw std::runtime_error("label parse error at line " + std::to_string(line_no) +
                               ": expected 15 fields");
    }
    double s;
    if (ls >> s) r.score = s;
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_labels(const std::vector<LabelRecord>& labels) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& r : labels) {
    os << r.type << ' ' << r.truncation << ' ' << r.occlusion << ' ' << r.alpha;
    for (double v : r.bbox) os << ' ' << v;
    os << ' ' << r.h << ' ' << r.w << ' ' << r.l << ' ' << r.x << ' ' << r.y << ' ' << r.z << ' '
       << r.rotation_y;
    if (r.score) os << ' ' << *r.score;
    os << '\n';
  }
  return os.str();
}

Box3D label_to_box(const LabelRecord& r) {
  Box3D b;
  b.x = r.x;
  b.y = r.y - r.h / 2;  // bottom-face center -> box center
  b.z = r.z;
  b.h = r.h;
  b.w = r.w;
  b.l = r.l;
  b.theta = wrap_angle_2pi(r.rotation_y);
  return b;
}

LabelRecord box_to_label(const Box3D& b, const std::string& type, const Intrinsics& k,
                         int image_w, int image_h) {
  LabelRecord r;
  r.type = type;
  r.h = b.h;
  r.w = b.w;
  r.l = b.l;
  r.x = b.x;
  r.y = b.y + b.h / 2;
  r.z = b.z;
  r.rotation_y = b.theta;
  r.alpha = wrap_angle_2pi(b.theta - std::atan2(b.x, b.z));
  if (auto rect = project_box_to_image(b, k, image_w, image_h)) {
    r.bbox = {rect->x0, rect->y0, rect->x1, rect->y1};
  }
  return r;
}

SparseDepthMap lidar_to_sparse_depth(const std::vector<WorldPoint>& points,
                                     const Intrinsics& k, int image_w, int image_h) {
  std::vector<double> depth(static_cast<std::size_t>(image_w) * image_h, 0.0);
  for (const auto& p : points) {
    if (p.z <= 0) continue;
    const FrustumCoord f = project(p, k);
    const int u = static_cast<int>(std::lround(f.u));
    const int v = static_cast<int>(std::lround(f.v));
    if (u < 0 || u >= image_w || v < 0 || v >= image_h) continue;
    double& cell = depth[static_cast<std::size_t>(v) * image_w + u];
    if (cell <= 0 || p.z < cell) cell = p.z;
  }
  return SparseDepthMap::from_dense(image_h, image_w, std::move(depth));
}

// ---------------------------------------------------------------------------
// synthetic scenes

namespace {

double bev_half_diag(const Box3D& b) { return std::hypot(b.l, b.w) / 2; }

}  // namespace

SceneRenderer::SceneRenderer(std::uint64_t seed, const SynthConfig& cfg) : cfg_(cfg) {
  ground_y_ = cfg.ground_y != 0.0 ? cfg.ground_y : cfg.object_class.y_center + cfg.object_class.h / 2;
  wall_z_ = cfg.wall_z != 0.0 ? cfg.wall_z : cfg.grid.z_max - 0.5 * cfg.grid.voxel_d;

  // Texture frequencies are fixed per channel (a "world material"); the
  // phases vary per scene so depth cannot be memorized from values alone.
  const int tex = std::max(0, cfg.channels - 1);
  for (int c = 0; c < tex; ++c) {
    Rng frng(mix_seed(0xD5C4E11ULL, static_cast<std::uint64_t>(c)));
    freqs_.push_back({frng.uniform(cfg.texture_freq_min, cfg.texture_freq_max),
                      frng.uniform(cfg.texture_freq_min, cfg.texture_freq_max),
                      frng.uniform(cfg.texture_freq_min, cfg.texture_freq_max)});
  }
  Rng prng(mix_seed(seed, 2));
  for (int c = 0; c < tex; ++c) phases_.push_back(prng.uniform(0.0, 2.0 * M_PI));

  Rng rng(mix_seed(seed, 1));
  const int want = rng.uniform_int(cfg.min_boxes, cfg.max_boxes);
  const ClassConfig& cls = cfg.object_class;
  int retries = cfg.placement_retries;
  while (static_cast<int>(boxes_.size()) < want) {
    if (retries-- <= 0) {
      throw std::runtime_error("synth_scene: box placement infeasible after bounded retries");
    }
    Box3D b;
    b.h = cls.h * (1.0 + cfg.size_jitter * rng.uniform(-1.0, 1.0));
    b.w = cls.w * (1.0 + cfg.size_jitter * rng.uniform(-1.0, 1.0));
    b.l = cls.l * (1.0 + cfg.size_jitter * rng.uniform(-1.0, 1.0));
    const int t = rng.uniform_int(0, cls.n_theta - 1);
    b.theta = wrap_angle_2pi(2.0 * M_PI * t / cls.n_theta + rng.uniform(-cfg.yaw_jitter, cfg.yaw_jitter));
    b.y = ground_y_ - b.h / 2;
    const double hd = bev_half_diag(b) + cfg.placement_margin;
    const double x_lo = cfg.grid.x_min + hd, x_hi = cfg.grid.x_max - hd;
    const double z_lo = cfg.grid.z_min + hd, z_hi = wall_z_ - hd;
    if (x_lo >= x_hi || z_lo >= z_hi) {
      throw std::runtime_error("synth_scene: grid too small for the object class");
    }
    b.x = rng.uniform(x_lo, x_hi);
    b.z = rng.uniform(z_lo, z_hi);

    Box3D inflated = b;
    inflated.l += cfg.placement_margin;
    inflated.w += cfg.placement_margin;
    bool clash = false;
    for (const auto& other : boxes_) {
      Box3D other_inflated = other;
      other_inflated.l += cfg.placement_margin;
      other_inflated.w += cfg.placement_margin;
      if (rotated_iou_bev(inflated, other_inflated) > 0.0) {
        clash = true;
        break;
      }
    }
    if (!clash) boxes_.push_back(b);
  }
}

double SceneRenderer::render(bool right_view, double u, double v,
                             std::vector<double>* features) const {
  const Intrinsics& k = cfg_.rig.k;
  const double ox = right_view ? cfg_.rig.baseline : 0.0;
  const double dx = (u - k.cu) / k.fx;
  const double dy = (v - k.cv) / k.fy;
  // Rays are parameterized by z, so the hit t is the metric depth.

  double best_t = wall_z_;
  int hit = -1;  // -1 wall, -2 ground, >= 0 box index
  if (dy > 1e-12) {
    const double t = ground_y_ / dy;
    if (t > 0 && t < best_t) {
      best_t = t;
      hit = -2;
    }
  }
  for (std::size_t bi = 0; bi < boxes_.size(); ++bi) {
    const Box3D& b = boxes_[bi];
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    // ray into the box frame (inverse yaw about the vertical axis)
    const double o_rx = ox - b.x, o_rz = -b.z;
    const double obx = c * o_rx - s * o_rz;
    const double obz = s * o_rx + c * o_rz;
    const double oby = -b.y;
    const double dbx = c * dx - s * 1.0;
    const double dbz = s * dx + c * 1.0;
    const double dby = dy;

    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    const double half[3] = {b.l / 2, b.h / 2, b.w / 2};
    const double o3[3] = {obx, oby, obz};
    const double d3[3] = {dbx, dby, dbz};
    bool miss = false;
    for (int axis = 0; axis < 3; ++axis) {
      if (std::abs(d3[axis]) < 1e-15) {
        if (std::abs(o3[axis]) > half[axis]) {
          miss = true;
          break;
        }
        continue;
      }
      double ta = (-half[axis] - o3[axis]) / d3[axis];
      double tb = (half[axis] - o3[axis]) / d3[axis];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      if (t0 > t1) {
        miss = true;
        break;
      }
    }
    if (!miss && t0 > 1e-9 && t0 < best_t) {
      best_t = t0;
      hit = static_cast<int>(bi);
    }
  }

  if (features) {
    features->assign(static_cast<std::size_t>(cfg_.channels), 0.0);
    const WorldPoint p{ox + dx * best_t, dy * best_t, best_t};
    (*features)[0] = hit >= 0 ? 1.0 : (hit == -2 ? -0.5 : -1.0);
    for (std::size_t c = 0; c + 1 < static_cast<std::size_t>(cfg_.channels); ++c) {
      const auto& f = freqs_[c];
      (*features)[c + 1] = std::sin(f[0] * p.x + f[1] * p.y + f[2] * p.z + phases_[c]);
    }
  }
  return best_t;
}

SceneSample SceneRenderer::materialize(std::uint64_t seed) const {
  const int w = cfg_.image_w, h = cfg_.image_h, c = cfg_.channels;
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<double> left(static_cast<std::size_t>(c) * plane);
  std::vector<double> right(static_cast<std::size_t>(c) * plane);
  std::vector<double> depth(static_cast<std::size_t>(plane));

  std::vector<double> feats;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const std::int64_t s = static_cast<std::int64_t>(v) * w + u;
      depth[static_cast<std::size_t>(s)] = render(false, u, v, &feats);
      for (int ch = 0; ch < c; ++ch) left[static_cast<std::size_t>(ch * plane + s)] = feats[static_cast<std::size_t>(ch)];
      render(true, u, v, &feats);
      for (int ch = 0; ch < c; ++ch) right[static_cast<std::size_t>(ch * plane + s)] = feats[static_cast<std::size_t>(ch)];
    }
  }

  Rng srng(mix_seed(seed, 3));
  std::vector<double> sparse(depth);
  for (auto& d : sparse) {
    if (srng.uniform() >= cfg_.sparse_fraction) d = 0.0;
  }

  SceneSample out;
  out.left = Tensor::constant({c, h, w}, std::move(left));
  out.right = Tensor::constant({c, h, w}, std::move(right));
  out.depth = SparseDepthMap::from_dense(h, w, std::move(sparse));
  out.boxes = boxes_;
  out.rig = cfg_.rig;
  out.grid = cfg_.grid;
  return out;
}

SceneSample synth_scene(std::uint64_t seed, const SynthConfig& cfg) {
  return SceneRenderer(seed, cfg).materialize(seed);
}

// ---------------------------------------------------------------------------
// flip augmentation

namespace {

Tensor mirror_chw(const Tensor& t) {
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  const double* in = t.values().data();
  std::vector<double> out(t.values().size());
  for (int ch = 0; ch < c; ++ch)
    for (int v = 0; v < h; ++v)
      for (int u = 0; u < w; ++u)
        out[(static_cast<std::size_t>(ch) * h + v) * w + u] =
            in[(static_cast<std::size_t>(ch) * h + v) * w + (w - 1 - u)];
  return Tensor::constant(t.shape(), std::move(out));
}

}  // namespace

SceneSample horizontal_flip(const SceneSample& s) {
  SceneSample out;
  out.left = mirror_chw(s.right);
  out.right = mirror_chw(s.left);

  const int h = s.depth.height, w = s.depth.width;
  std::vector<double> depth(s.depth.depth.size());
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u)
      depth[static_cast<std::size_t>(v) * w + u] = s.depth.depth[static_cast<std::size_t>(v) * w + (w - 1 - u)];
  out.depth = SparseDepthMap::from_dense(h, w, std::move(depth));

  out.boxes = s.boxes;
  for (auto& b : out.boxes) {
    b.x = -b.x;
    b.theta = wrap_angle_2pi(M_PI - b.theta);
  }
  out.rig = s.rig;
  out.rig.k.cu = (w - 1) - s.rig.k.cu;
  out.grid = s.grid;
  return out;
}

// ---------------------------------------------------------------------------
// occupancy targets

std::vector<WorldPoint> depth_to_points(const SparseDepthMap& depth, const Intrinsics& k) {
  std::vector<WorldPoint> out;
  for (int v = 0; v < depth.height; ++v)
    for (int u = 0; u < depth.width; ++u)
      if (depth.valid(v, u)) out.push_back(unproject({static_cast<double>(u), static_cast<double>(v), depth.at(v, u)}, k));
  return out;
}

Tensor voxelize_occupancy(const std::vector<WorldPoint>& points, const VoxelGrid& grid,
                          int min_points) {
  std::vector<int> counts(static_cast<std::size_t>(grid.voxel_count()), 0);
  for (const auto& p : points) {
    const int ix = static_cast<int>(std::floor((p.x - grid.x_min) / grid.voxel_w));
    const int iy = static_cast<int>(std::floor((p.y - grid.y_min) / grid.voxel_h));
    const int iz = static_cast<int>(std::floor((p.z - grid.z_min) / grid.voxel_d));
    if (ix < 0 || ix >= grid.nx || iy < 0 || iy >= grid.ny || iz < 0 || iz >= grid.nz) continue;
    ++counts[(static_cast<std::size_t>(iz) * grid.ny + iy) * grid.nx + ix];
  }
  std::vector<double> occ(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) occ[i] = counts[i] >= min_points ? 1.0 : 0.0;
  return Tensor::constant({grid.nz, grid.ny, grid.nx}, std::move(occ));
}

// ---------------------------------------------------------------------------
// dataset layout

void save_scene(const std::string& dir, std::uint64_t seed, const SceneSample& s,
                const std::string& class_name) {
  const fs::path scene_dir = fs::path(dir) / ("scene_" + std::to_string(seed));
  fs::create_directories(scene_dir);
  write_tensor_file((scene_dir / "left.ten").string(), s.left);
  write_tensor_file((scene_dir / "right.ten").string(), s.right);
  write_tensor_file((scene_dir / "depth.ten").string(),
                    Tensor::constant({s.depth.height, s.depth.width}, s.depth.depth));
  std::vector<LabelRecord> labels;
  for (const auto& b : s.boxes) {
    labels.push_back(box_to_label(b, class_name, s.rig.k, s.left.dim(2), s.left.dim(1)));
  }
  std::ofstream boxes(scene_dir / "boxes.txt");
  boxes << format_labels(labels);
  std::ofstream calib(scene_dir / "calib.txt");
  calib << format_calib(make_calib(s.rig));
}

SceneSample load_scene(const std::string& scene_dir, const VoxelGrid& grid) {
  const fs::path p(scene_dir);
  SceneSample s;
  s.left = read_tensor_file((p / "left.ten").string());
  s.right = read_tensor_file((p / "right.ten").string());
  Tensor depth = read_tensor_file((p / "depth.ten").string());
  s.depth = SparseDepthMap::from_dense(depth.dim(0), depth.dim(1), depth.values());

  std::ifstream bf(p / "boxes.txt");
  std::stringstream bs;
  bs << bf.rdbuf();
  for (const auto& r : parse_labels(bs.str())) {
    if (r.type != "DontCare") s.boxes.push_back(label_to_box(r));
  }
  std::ifstream cf(p / "calib.txt");
  std::stringstream cs;
  cs << cf.rdbuf();
  s.rig = parse_calib(cs.str()).rig();
  s.grid = grid;
  return s;
}

std::vector<std::pair<std::uint64_t, std::string>> list_scenes(const std::string& dir) {
  std::vector<std::pair<std::uint64_t, std::string>> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_directory()) continue;
    const std::string name = e.path().filename().string();
    if (name.rfind("scene_", 0) != 0) continue;
    out.emplace_back(std::stoull(name.substr(6)), e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_depth_pgm(const std::string& path, const std::vector<double>& depth, int h, int w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os << "P5\n" << w << ' ' << h << "\n65535\n";
  for (double d : depth) {
    const long mm = std::lround(std::clamp(d, 0.0, 65.535) * 1000.0);
    const std::uint16_t v = static_cast<std::uint16_t>(mm);
    const unsigned char bytes[2] = {static_cast<unsigned char>(v >> 8),
                                    static_cast<unsigned char>(v & 0xff)};
    os.write(reinterpret_cast<const char*>(bytes), 2);
  }
}

}  // namespace dsgn
