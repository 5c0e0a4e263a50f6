#pragma once

#include <array>
#include <vector>

// Plain serial reference implementations, written as straight nested loops
// over raw buffers. They are kept deliberately independent of the tensor
// engine's kernels: tests compare the two paths and the benchmark measures
// them against each other.

namespace dsgn::ref {

// input (C,H,W), kernel (O,C,kh,kw) -> (O,oh,ow)
std::vector<double> conv2d(const std::vector<double>& input, int c, int h, int w,
                           const std::vector<double>& kernel, int o, int kh, int kw,
                           int sh, int sw, int ph, int pw);

// input (C,D,H,W), kernel (O,C,kd,kh,kw) -> (O,od,oh,ow)
std::vector<double> conv3d(const std::vector<double>& input, int c, int d, int h, int w,
                           const std::vector<double>& kernel, int o, int kd, int kh, int kw,
                           int sd, int sh, int sw, int pd, int ph, int pw);

// Bilinear sample of a (H,W) plane at fractional (y,x); out-of-range
// neighbours contribute zero, and the sample is zero outright when the
// nearest integer position falls outside the plane.
double bilinear(const double* plane, int h, int w, double y, double x);

// Trilinear sample of a (D,H,W) volume with the same border rule.
double trilinear(const double* vol, int d, int h, int w, double z, double y, double x);

}  // namespace dsgn::ref
