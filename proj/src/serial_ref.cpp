#include "dsgn/serial_ref.hpp"

#include <cmath>

namespace dsgn::ref {

std::vector<double> conv2d(const std::vector<double>& input, int c, int h, int w,
                           const std::vector<double>& kernel, int o, int kh, int kw,
                           int sh, int sw, int ph, int pw) {
  const int oh = (h + 2 * ph - kh) / sh + 1;
  const int ow = (w + 2 * pw - kw) / sw + 1;
  std::vector<double> out(static_cast<std::size_t>(o) * oh * ow, 0.0);
  for (int oc = 0; oc < o; ++oc)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (int ic = 0; ic < c; ++ic)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const int iy = oy * sh - ph + ky;
              const int ix = ox * sw - pw + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += input[(static_cast<std::size_t>(ic) * h + iy) * w + ix] *
                     kernel[((static_cast<std::size_t>(oc) * c + ic) * kh + ky) * kw + kx];
            }
        out[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] = acc;
      }
  return out;
}

std::vector<double> conv3d(const std::vector<double>& input, int c, int d, int h, int w,
                           const std::vector<double>& kernel, int o, int kd, int kh, int kw,
                           int sd, int sh, int sw, int pd, int ph, int pw) {
  const int od = (d + 2 * pd - kd) / sd + 1;
  const int oh = (h + 2 * ph - kh) / sh + 1;
  const int ow = (w + 2 * pw - kw) / sw + 1;
  std::vector<double> out(static_cast<std::size_t>(o) * od * oh * ow, 0.0);
  for (int oc = 0; oc < o; ++oc)
    for (int oz = 0; oz < od; ++oz)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (int ic = 0; ic < c; ++ic)
            for (int kz = 0; kz < kd; ++kz)
              for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                  const int iz = oz * sd - pd + kz;
                  const int iy = oy * sh - ph + ky;
                  const int ix = ox * sw - pw + kx;
                  if (iz < 0 || iz >= d || iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                  acc += input[((static_cast<std::size_t>(ic) * d + iz) * h + iy) * w + ix] *
                         kernel[(((static_cast<std::size_t>(oc) * c + ic) * kd + kz) * kh + ky) * kw + kx];
                }
          out[((static_cast<std::size_t>(oc) * od + oz) * oh + oy) * ow + ox] = acc;
        }
  return out;
}

double bilinear(const double* plane, int h, int w, double y, double x) {
  if (x < -0.5 || x > w - 0.5 || y < -0.5 || y > h - 0.5) return 0.0;
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  double acc = 0.0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const int yy = y0 + dy, xx = x0 + dx;
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      const double wgt = (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
      acc += wgt * plane[static_cast<std::size_t>(yy) * w + xx];
    }
  return acc;
}

double trilinear(const double* vol, int d, int h, int w, double z, double y, double x) {
  if (x < -0.5 || x > w - 0.5 || y < -0.5 || y > h - 0.5 || z < -0.5 || z > d - 0.5) return 0.0;
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int z0 = static_cast<int>(std::floor(z));
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const int zz = z0 + dz, yy = y0 + dy, xx = x0 + dx;
        if (zz < 0 || zz >= d || yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        const double wgt = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
        acc += wgt * vol[(static_cast<std::size_t>(zz) * h + yy) * w + xx];
      }
  return acc;
}

}  // namespace dsgn::ref
