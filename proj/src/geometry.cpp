#include "dsgn/geometry.hpp"

#include <stdexcept>

namespace dsgn {

WorldPoint unproject(const FrustumCoord& c, const Intrinsics& k) {
  if (c.d <= 0) throw std::domain_error("unproject: depth must be positive");
  return {(c.u - k.cu) * c.d / k.fx, (c.v - k.cv) * c.d / k.fy, c.d};
}

FrustumCoord project(const WorldPoint& p, const Intrinsics& k) {
  if (p.z <= 0) throw std::domain_error("project: z must be positive");
  return {k.fx * p.x / p.z + k.cu, k.fy * p.y / p.z + k.cv, p.z};
}

double disparity_depth(const StereoRig& rig, double value, DisparityDirection) {
  if (value <= 0) throw std::domain_error("disparity_depth: value must be positive");
  // Self-inverse: depth -> disparity and disparity -> depth share the form.
  return rig.k.fx * rig.baseline / value;
}

}  // namespace dsgn
