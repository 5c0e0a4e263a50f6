#include "dsgn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dsgn {

std::int64_t shape_size(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("shape dims must be positive");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// ---------------------------------------------------------------------------
// Tensor

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::size() const { return node_ ? node_->size() : 0; }

const std::vector<double>& Tensor::values() const {
  if (!node_) throw std::logic_error("undefined tensor");
  return node_->data;
}

std::vector<double>& Tensor::mutable_values() {
  if (!node_) throw std::logic_error("undefined tensor");
  if (!node_->leaf) throw std::logic_error("only leaf tensors are mutable");
  return node_->data;
}

double Tensor::scalar() const {
  if (size() != 1) {
    throw std::logic_error("scalar() on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const std::vector<double>& Tensor::grad() const {
  if (!requires_grad()) throw std::logic_error("tensor has no grad buffer");
  return node_->grad;
}

Tape* Tensor::tape() const { return node_ ? node_->tape : nullptr; }

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
  if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("constant: data size does not match shape");
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_size(shape);
  return constant(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = shape_size(shape);
  return constant(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("leaf: data size does not match shape");
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  if (requires_grad) n->grad.assign(n->data.size(), 0.0);
  n->tape = this;
  nodes_.push_back(n);
  return Tensor(std::move(n));
}

Tensor Tape::record(Shape shape, std::vector<double> data,
                    std::vector<Tensor> parents,
                    std::function<void(detail::Node&)> backward,
                    const char* op) {
  if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument(std::string(op) + ": data size does not match shape");
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->leaf = false;
  n->op = op;
  for (auto& p : parents) {
    if (!p.defined()) continue;
    n->requires_grad = n->requires_grad || p.requires_grad();
    n->parents.push_back(p.node());
  }
  if (n->requires_grad) {
    n->grad.assign(n->data.size(), 0.0);
    n->backward = std::move(backward);
  }
  n->tape = this;
  nodes_.push_back(n);
  return Tensor(std::move(n));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::logic_error("backward requires a scalar loss");
  }
  if (loss.tape() != this) {
    throw std::logic_error("loss was not recorded on this tape");
  }
  if (!loss.requires_grad()) return;  // nothing reaches any parameter

  const detail::Node* target = loss.node().get();
  std::size_t start = nodes_.size();
  while (start > 0 && nodes_[start - 1].get() != target) --start;
  if (start == 0) throw std::logic_error("loss node not found on tape");

  loss.node()->grad[0] = 1.0;
  for (std::size_t i = start; i-- > 0;) {
    detail::Node& n = *nodes_[i];
    if (n.backward) n.backward(n);
  }
}

void Tape::zero_grad() {
  for (auto& n : nodes_) {
    std::fill(n->grad.begin(), n->grad.end(), 0.0);
  }
}

void Tape::reset_ops() {
  std::erase_if(nodes_, [](const std::shared_ptr<detail::Node>& n) { return !n->leaf; });
}

// ---------------------------------------------------------------------------
// Op plumbing

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward, const char* op) {
  Tape* tape = nullptr;
  for (const auto& p : parents) {
    if (!p.defined() || p.tape() == nullptr) continue;
    if (tape != nullptr && tape != p.tape()) {
      throw std::logic_error(std::string(op) + ": inputs recorded on different tapes");
    }
    tape = p.tape();
  }
  if (tape == nullptr) {
    // Forward-only compute over detached constants.
    return Tensor::constant(std::move(shape), std::move(data));
  }
  return tape->record(std::move(shape), std::move(data), std::move(parents),
                      std::move(backward), op);
}

namespace {

constexpr std::int64_t kParallelCutoff = 1 << 12;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// grad buffer of a parent node, or nullptr when the parent is detached.
double* grad_of(detail::Node& self, std::size_t parent) {
  auto& p = self.parents[parent];
  return p->requires_grad ? p->grad.data() : nullptr;
}

template <class Fwd, class Bwd>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd,
                          const char* op) {
  check_same_shape(a, b, op);
  const std::int64_t n = a.size();
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  std::vector<double> out(static_cast<std::size_t>(n));
#pragma omp parallel for if (n > kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = fwd(pa[i], pb[i]);
  return make_op(
      a.shape(), std::move(out), {a, b},
      [n, bwd](detail::Node& self) {
        double* ga = grad_of(self, 0);
        double* gb = grad_of(self, 1);
        const double* pa = self.parents[0]->data.data();
        const double* pb = self.parents[1]->data.data();
        const double* g = self.grad.data();
        for (std::int64_t i = 0; i < n; ++i) {
          auto [da, db] = bwd(pa[i], pb[i]);
          if (ga) ga[i] += da * g[i];
          if (gb) gb[i] += db * g[i];
        }
      },
      op);
}

template <class Fwd, class Bwd>
Tensor unary_elementwise(const Tensor& a, Fwd fwd, Bwd bwd, const char* op) {
  const std::int64_t n = a.size();
  const double* pa = a.values().data();
  std::vector<double> out(static_cast<std::size_t>(n));
#pragma omp parallel for if (n > kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = fwd(pa[i]);
  return make_op(
      a.shape(), std::move(out), {a},
      [n, bwd](detail::Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        const double* pa = self.parents[0]->data.data();
        const double* g = self.grad.data();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += bwd(pa[i]) * g[i];
      },
      op);
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, [](double x, double y) { return x + y; },
      [](double, double) { return std::pair{1.0, 1.0}; }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, [](double x, double y) { return x - y; },
      [](double, double) { return std::pair{1.0, -1.0}; }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair{y, x}; }, "mul");
}

Tensor add(const Tensor& a, double b) {
  return unary_elementwise(
      a, [b](double x) { return x + b; }, [](double) { return 1.0; }, "add_s");
}

Tensor sub(const Tensor& a, double b) { return add(a, -b); }

Tensor mul(const Tensor& a, double b) {
  return unary_elementwise(
      a, [b](double x) { return x * b; }, [b](double) { return b; }, "mul_s");
}

Tensor neg(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return -x; }, [](double) { return -1.0; }, "neg");
}

Tensor exp(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return std::exp(x); },
      [](double x) { return std::exp(x); }, "exp");
}

Tensor tanh(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      },
      "tanh");
}

Tensor sigmoid(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return stable_sigmoid(x); },
      [](double x) {
        const double s = stable_sigmoid(x);
        return s * (1.0 - s);
      },
      "sigmoid");
}

Tensor relu(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x) { return x > 0 ? 1.0 : 0.0; }, "relu");
}

// ---------------------------------------------------------------------------
// softmax

Tensor softmax(const Tensor& a, int axis) {
  const auto& shp = a.shape();
  if (axis < 0 || axis >= a.rank()) {
    throw std::invalid_argument("softmax: axis out of range");
  }
  std::int64_t outer = 1, inner = 1;
  const std::int64_t len = shp[static_cast<std::size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= shp[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < a.rank(); ++i) inner *= shp[static_cast<std::size_t>(i)];

  const double* in = a.values().data();
  std::vector<double> out(a.values().size());
  const std::int64_t slices = outer * inner;
#pragma omp parallel for if (slices * len > kParallelCutoff)
  for (std::int64_t s = 0; s < slices; ++s) {
    const std::int64_t o = s / inner, r = s % inner;
    const std::int64_t base = o * len * inner + r;
    double mx = in[base];
    for (std::int64_t k = 1; k < len; ++k) mx = std::max(mx, in[base + k * inner]);
    double denom = 0.0;
    for (std::int64_t k = 0; k < len; ++k) {
      const double e = std::exp(in[base + k * inner] - mx);
      out[static_cast<std::size_t>(base + k * inner)] = e;
      denom += e;
    }
    for (std::int64_t k = 0; k < len; ++k) out[static_cast<std::size_t>(base + k * inner)] /= denom;
  }

  return make_op(
      shp, std::move(out), {a},
      [outer, inner, len](detail::Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        const double* y = self.data.data();
        const double* g = self.grad.data();
        const std::int64_t slices = outer * inner;
#pragma omp parallel for if (slices * len > kParallelCutoff)
        for (std::int64_t s = 0; s < slices; ++s) {
          const std::int64_t o = s / inner, r = s % inner;
          const std::int64_t base = o * len * inner + r;
          double dot = 0.0;
          for (std::int64_t k = 0; k < len; ++k) dot += y[base + k * inner] * g[base + k * inner];
          for (std::int64_t k = 0; k < len; ++k) {
            const std::int64_t idx = base + k * inner;
            ga[idx] += y[idx] * (g[idx] - dot);
          }
        }
      },
      "softmax");
}

// ---------------------------------------------------------------------------
// reductions / reshape

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return make_op(
      {1}, {acc}, {a},
      [](detail::Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        const double g = self.grad[0];
        const std::int64_t n = self.parents[0]->size();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
      },
      "sum");
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return make_op(
      {1}, {acc * inv}, {a},
      [inv](detail::Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        const double g = self.grad[0] * inv;
        const std::int64_t n = self.parents[0]->size();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
      },
      "mean");
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw std::invalid_argument("reshape: element count mismatch");
  }
  std::vector<double> out = a.values();
  return make_op(
      std::move(shape), std::move(out), {a},
      [](detail::Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        const double* g = self.grad.data();
        const std::int64_t n = self.size();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
      },
      "reshape");
}

// ---------------------------------------------------------------------------
// convolution (cross-correlation, zero padding)
//
// Parallel kernels are gather-style: every output (and every gradient)
// element is produced by exactly one loop iteration, so results are
// bitwise identical for any thread count.

namespace {

int conv_out_dim(int n, int p, int k, int s, const char* op) {
  const int m = n + 2 * p - k;
  if (m < 0) {
    throw std::invalid_argument(std::string(op) + ": kernel larger than padded input");
  }
  return m / s + 1;
}

template <int SPATIAL>
struct ConvPlan {
  std::array<int, SPATIAL> in, out, k, s, p;
  int cin = 0, cout = 0;
  std::int64_t in_spatial = 1, out_spatial = 1, k_spatial = 1;
};

template <int SPATIAL>
ConvPlan<SPATIAL> make_plan(const Shape& in_shape, const Shape& k_shape,
                            std::array<int, SPATIAL> stride,
                            std::array<int, SPATIAL> pad, const char* op) {
  if (static_cast<int>(in_shape.size()) != SPATIAL + 1 ||
      static_cast<int>(k_shape.size()) != SPATIAL + 2) {
    throw std::invalid_argument(std::string(op) + ": bad input/kernel rank");
  }
  if (k_shape[1] != in_shape[0]) {
    throw std::invalid_argument(std::string(op) + ": kernel channel mismatch");
  }
  ConvPlan<SPATIAL> pl;
  pl.cin = in_shape[0];
  pl.cout = k_shape[0];
  for (int i = 0; i < SPATIAL; ++i) {
    if (stride[static_cast<std::size_t>(i)] < 1) {
      throw std::invalid_argument(std::string(op) + ": stride must be >= 1");
    }
    if (pad[static_cast<std::size_t>(i)] < 0) {
      throw std::invalid_argument(std::string(op) + ": negative padding");
    }
    pl.in[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(i) + 1];
    pl.k[static_cast<std::size_t>(i)] = k_shape[static_cast<std::size_t>(i) + 2];
    pl.s[static_cast<std::size_t>(i)] = stride[static_cast<std::size_t>(i)];
    pl.p[static_cast<std::size_t>(i)] = pad[static_cast<std::size_t>(i)];
    pl.out[static_cast<std::size_t>(i)] =
        conv_out_dim(pl.in[static_cast<std::size_t>(i)], pl.p[static_cast<std::size_t>(i)],
                     pl.k[static_cast<std::size_t>(i)], pl.s[static_cast<std::size_t>(i)], op);
    pl.in_spatial *= pl.in[static_cast<std::size_t>(i)];
    pl.out_spatial *= pl.out[static_cast<std::size_t>(i)];
    pl.k_spatial *= pl.k[static_cast<std::size_t>(i)];
  }
  return pl;
}

template <int SPATIAL>
inline void unravel(std::int64_t idx, const std::array<int, SPATIAL>& dims,
                    std::array<int, SPATIAL>& coord) {
  for (int i = SPATIAL - 1; i >= 0; --i) {
    coord[static_cast<std::size_t>(i)] = static_cast<int>(idx % dims[static_cast<std::size_t>(i)]);
    idx /= dims[static_cast<std::size_t>(i)];
  }
}

template <int SPATIAL>
Tensor conv_impl(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                 std::array<int, SPATIAL> stride, std::array<int, SPATIAL> pad,
                 const char* op) {
  const ConvPlan<SPATIAL> pl = make_plan<SPATIAL>(input.shape(), kernel.shape(), stride, pad, op);
  if (bias.defined() &&
      (bias.rank() != 1 || bias.dim(0) != pl.cout)) {
    throw std::invalid_argument(std::string(op) + ": bias must have shape (out_channels)");
  }

  const double* x = input.values().data();
  const double* w = kernel.values().data();
  const double* b = bias.defined() ? bias.values().data() : nullptr;

  std::vector<double> out(static_cast<std::size_t>(pl.cout * pl.out_spatial));

#pragma omp parallel for collapse(2)
  for (int o = 0; o < pl.cout; ++o) {
    for (std::int64_t os = 0; os < pl.out_spatial; ++os) {
      std::array<int, SPATIAL> oc{}, kc{};
      unravel<SPATIAL>(os, pl.out, oc);
      double acc = b ? b[o] : 0.0;
      for (int c = 0; c < pl.cin; ++c) {
        const double* xs = x + c * pl.in_spatial;
        const double* ws = w + (static_cast<std::int64_t>(o) * pl.cin + c) * pl.k_spatial;
        for (std::int64_t ks = 0; ks < pl.k_spatial; ++ks) {
          unravel<SPATIAL>(ks, pl.k, kc);
          std::int64_t in_idx = 0;
          bool ok = true;
          for (int i = 0; i < SPATIAL; ++i) {
            const int pos = oc[static_cast<std::size_t>(i)] * pl.s[static_cast<std::size_t>(i)] -
                            pl.p[static_cast<std::size_t>(i)] + kc[static_cast<std::size_t>(i)];
            if (pos < 0 || pos >= pl.in[static_cast<std::size_t>(i)]) {
              ok = false;
              break;
            }
            in_idx = in_idx * pl.in[static_cast<std::size_t>(i)] + pos;
          }
          if (ok) acc += xs[in_idx] * ws[ks];
        }
      }
      out[static_cast<std::size_t>(o * pl.out_spatial + os)] = acc;
    }
  }

  Shape out_shape;
  out_shape.push_back(pl.cout);
  for (int i = 0; i < SPATIAL; ++i) out_shape.push_back(pl.out[static_cast<std::size_t>(i)]);

  std::vector<Tensor> parents = {input, kernel};
  if (bias.defined()) parents.push_back(bias);

  return make_op(
      std::move(out_shape), std::move(out), std::move(parents),
      [pl](detail::Node& self) {
        const double* g = self.grad.data();
        const double* x = self.parents[0]->data.data();
        const double* w = self.parents[1]->data.data();
        double* gx = grad_of(self, 0);
        double* gw = grad_of(self, 1);
        double* gb = self.parents.size() > 2 ? grad_of(self, 2) : nullptr;

        if (gx) {
#pragma omp parallel for collapse(2)
          for (int c = 0; c < pl.cin; ++c) {
            for (std::int64_t is = 0; is < pl.in_spatial; ++is) {
              std::array<int, SPATIAL> ic{}, kc{};
              unravel<SPATIAL>(is, pl.in, ic);
              double acc = 0.0;
              for (int o = 0; o < pl.cout; ++o) {
                const double* gs = g + o * pl.out_spatial;
                const double* ws = w + (static_cast<std::int64_t>(o) * pl.cin + c) * pl.k_spatial;
                for (std::int64_t ks = 0; ks < pl.k_spatial; ++ks) {
                  unravel<SPATIAL>(ks, pl.k, kc);
                  std::int64_t out_idx = 0;
                  bool ok = true;
                  for (int i = 0; i < SPATIAL; ++i) {
                    const int num = ic[static_cast<std::size_t>(i)] +
                                    pl.p[static_cast<std::size_t>(i)] -
                                    kc[static_cast<std::size_t>(i)];
                    const int s = pl.s[static_cast<std::size_t>(i)];
                    if (num < 0 || num % s != 0) {
                      ok = false;
                      break;
                    }
                    const int opos = num / s;
                    if (opos >= pl.out[static_cast<std::size_t>(i)]) {
                      ok = false;
                      break;
                    }
                    out_idx = out_idx * pl.out[static_cast<std::size_t>(i)] + opos;
                  }
                  if (ok) acc += gs[out_idx] * ws[ks];
                }
              }
              gx[c * pl.in_spatial + is] += acc;
            }
          }
        }

        if (gw) {
#pragma omp parallel for collapse(2)
          for (int o = 0; o < pl.cout; ++o) {
            for (int c = 0; c < pl.cin; ++c) {
              std::array<int, SPATIAL> oc{}, kc{};
              const double* gs = g + o * pl.out_spatial;
              const double* xs = x + c * pl.in_spatial;
              double* gws = gw + (static_cast<std::int64_t>(o) * pl.cin + c) * pl.k_spatial;
              for (std::int64_t ks = 0; ks < pl.k_spatial; ++ks) {
                unravel<SPATIAL>(ks, pl.k, kc);
                double acc = 0.0;
                for (std::int64_t os = 0; os < pl.out_spatial; ++os) {
                  unravel<SPATIAL>(os, pl.out, oc);
                  std::int64_t in_idx = 0;
                  bool ok = true;
                  for (int i = 0; i < SPATIAL; ++i) {
                    const int pos = oc[static_cast<std::size_t>(i)] * pl.s[static_cast<std::size_t>(i)] -
                                    pl.p[static_cast<std::size_t>(i)] + kc[static_cast<std::size_t>(i)];
                    if (pos < 0 || pos >= pl.in[static_cast<std::size_t>(i)]) {
                      ok = false;
                      break;
                    }
                    in_idx = in_idx * pl.in[static_cast<std::size_t>(i)] + pos;
                  }
                  if (ok) acc += gs[os] * xs[in_idx];
                }
                gws[ks] += acc;
              }
            }
          }
        }

        if (gb) {
          for (int o = 0; o < pl.cout; ++o) {
            double acc = 0.0;
            const double* gs = g + o * pl.out_spatial;
            for (std::int64_t os = 0; os < pl.out_spatial; ++os) acc += gs[os];
            gb[o] += acc;
          }
        }
      },
      op);
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::array<int, 2> stride, std::array<int, 2> pad) {
  return conv_impl<2>(input, kernel, bias, stride, pad, "conv2d");
}

Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::array<int, 3> stride, std::array<int, 3> pad) {
  return conv_impl<3>(input, kernel, bias, stride, pad, "conv3d");
}

// ---------------------------------------------------------------------------
// smooth L1

Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta) {
  check_same_shape(pred, target, "smooth_l1");
  if (beta <= 0) throw std::invalid_argument("smooth_l1: beta must be positive");
  const std::int64_t n = pred.size();
  const double* p = pred.values().data();
  const double* t = target.values().data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double x = p[i] - t[i];
    const double ax = std::abs(x);
    acc += ax < beta ? 0.5 * x * x / beta : ax - 0.5 * beta;
  }
  const double inv = 1.0 / static_cast<double>(n);
  return make_op(
      {1}, {acc * inv}, {pred, target},
      [n, beta, inv](detail::Node& self) {
        double* gp = grad_of(self, 0);
        double* gt = grad_of(self, 1);
        const double* p = self.parents[0]->data.data();
        const double* t = self.parents[1]->data.data();
        const double g = self.grad[0] * inv;
        for (std::int64_t i = 0; i < n; ++i) {
          const double x = p[i] - t[i];
          const double d = std::abs(x) < beta ? x / beta : (x > 0 ? 1.0 : -1.0);
          if (gp) gp[i] += d * g;
          if (gt) gt[i] -= d * g;
        }
      },
      "smooth_l1");
}

// ---------------------------------------------------------------------------
// gradient checking

double grad_check(const std::function<Tensor(const Tensor&)>& fn,
                  const Tensor& at, double eps) {
  if (eps < 1e-7 || eps > 1e-3) {
    throw std::logic_error("grad_check: eps outside [1e-7, 1e-3]");
  }
  const std::vector<double> x0 = at.values();
  const Shape shape = at.shape();

  Tape tape;
  Tensor leaf = tape.leaf(shape, x0, true);
  Tensor y = fn(leaf);
  if (y.size() != 1) throw std::logic_error("grad_check: fn must be scalar-valued");
  tape.backward(y);
  const std::vector<double> analytic = leaf.grad();

  auto eval = [&](const std::vector<double>& x) {
    Tape t;
    Tensor l = t.leaf(shape, x, false);
    Tensor out = fn(l);
    if (out.size() != 1) throw std::logic_error("grad_check: fn must be scalar-valued");
    return out.scalar();
  };

  double worst = 0.0;
  std::vector<double> x = x0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double fp = eval(x);
    x[i] = keep - eps;
    const double fm = eval(x);
    x[i] = keep;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// dump format

void write_tensor(std::ostream& os, const Shape& shape, const std::vector<double>& data) {
  os << "dims:";
  for (int d : shape) os << ' ' << d;
  os << '\n';
  static_assert(sizeof(double) == 8);
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
}

void write_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  write_tensor(os, t.shape(), t.values());
}

Tensor read_tensor(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error("tensor dump: missing header");
  std::istringstream hs(header);
  std::string tag;
  hs >> tag;
  if (tag != "dims:") throw std::runtime_error("tensor dump: bad header '" + header + "'");
  Shape shape;
  int d;
  while (hs >> d) shape.push_back(d);
  if (shape.empty()) throw std::runtime_error("tensor dump: empty dims");
  const std::int64_t n = shape_size(shape);
  std::vector<double> data(static_cast<std::size_t>(n));
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * 8));
  if (is.gcount() != static_cast<std::streamsize>(n * 8)) {
    throw std::runtime_error("tensor dump: truncated payload");
  }
  return Tensor::constant(std::move(shape), std::move(data));
}

Tensor read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for read: " + path);
  return read_tensor(is);
}

}  // namespace dsgn
