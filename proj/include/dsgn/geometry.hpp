#pragma once

#include <cmath>

namespace dsgn {

// Pinhole intrinsics of a rectified camera, pixels.
struct Intrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cu = 0.0;
  double cv = 0.0;
};

// Rectified stereo pair: shared intrinsics, right camera translated along +x.
struct StereoRig {
  Intrinsics k;
  double baseline = 0.0;  // meters, > 0
};

// A point in camera frustum coordinates: pixel position plus metric depth.
struct FrustumCoord {
  double u = 0.0;
  double v = 0.0;
  double d = 0.0;
};

// Camera-frame point, axes right (+x), down (+y), front (+z).
struct WorldPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

enum class DisparityDirection { kDepthToDisparity, kDisparityToDepth };

// Inverse of the pinhole projection: (u,v,d) -> (x,y,z) with z = d.
WorldPoint unproject(const FrustumCoord& c, const Intrinsics& k);

// Pinhole projection: (x,y,z) -> (u,v,d) with d = z. Requires z > 0.
FrustumCoord project(const WorldPoint& p, const Intrinsics& k);

// disparity = fx * baseline / depth, and identically in the other direction.
double disparity_depth(const StereoRig& rig, double value, DisparityDirection dir);

inline double wrap_angle_2pi(double theta) {
  const double two_pi = 2.0 * M_PI;
  double t = std::fmod(theta, two_pi);
  if (t < 0) t += two_pi;
  if (t >= two_pi) t = 0.0;  // fmod rounding at the seam
  return t;
}

}  // namespace dsgn
