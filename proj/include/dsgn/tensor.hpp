#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace dsgn {

using Shape = std::vector<int>;

std::int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

namespace detail {

// One recorded node of the computation graph. Leaves carry inputs and
// parameters; op nodes additionally carry a backward rule that scatters
// this node's grad into its parents' grad buffers.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // same length as data iff requires_grad
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  Tape* tape = nullptr;

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
};

}  // namespace detail

// Value-semantic handle to a graph node. Copies share the node.
// Tensors are immutable after creation except for two sanctioned cases:
// parameter updates between steps (mutable_values) and grad buffers.
class Tensor {
 public:
  Tensor() = default;

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int i) const { return shape()[static_cast<std::size_t>(i)]; }
  std::int64_t size() const;

  const std::vector<double>& values() const;
  std::vector<double>& mutable_values();  // leaves only (init, optimizer)
  double scalar() const;                  // size-1 tensors

  bool requires_grad() const;
  const std::vector<double>& grad() const;  // throws if absent

  Tape* tape() const;

  // Detached constants: participate in forward compute, never in backward.
  static Tensor constant(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);

  // For op implementers and the optimizer.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Records nodes in creation order, which is topological by construction.
// backward() replays the record once, in reverse, with deterministic
// accumulation order. reset_ops() drops op nodes but keeps leaves so
// parameters survive across training steps.
class Tape {
 public:
  Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad);
  Tensor variable(Shape shape, std::vector<double> data) {
    return leaf(std::move(shape), std::move(data), true);
  }

  // Appends an op node. requires_grad is inherited from parents; the
  // backward rule is kept only when some parent needs gradients.
  Tensor record(Shape shape, std::vector<double> data,
                std::vector<Tensor> parents,
                std::function<void(detail::Node&)> backward, const char* op);

  void backward(const Tensor& loss);
  void zero_grad();
  void reset_ops();

  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

// Records onto the tape of the first tape-bearing parent; with only
// detached parents the result is itself detached (forward-only).
Tensor make_op(Shape shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward, const char* op);

// ---------------------------------------------------------------------------
// Elementwise ops. Tensor-tensor forms require equal shapes; scalar forms
// broadcast the scalar. No other broadcasting exists.

Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, double b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, double b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);

// Numerically stable softmax (max-subtracted) along one axis.
Tensor softmax(const Tensor& a, int axis);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Cross-correlation with zero padding. 2D input is (C,H,W) with kernel
// (O,C,kh,kw); 3D input is (C,D,H,W) with kernel (O,C,kd,kh,kw). bias is
// per-output-channel (O) or an undefined Tensor for none. Output spatial
// extent is floor((n + 2p - k)/s) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::array<int, 2> stride, std::array<int, 2> pad);
Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::array<int, 3> stride, std::array<int, 3> pad);

// Mean over elements of the Huber-style loss: 0.5 x^2 / beta for |x| < beta,
// |x| - 0.5 beta otherwise, x = pred - target.
Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta);

// Central-difference check of reverse-mode gradients for a scalar-valued
// function of one tensor. Returns the max over coordinates of
// |analytic - numeric| / max(1, |analytic|). eps must lie in [1e-7, 1e-3].
double grad_check(const std::function<Tensor(const Tensor&)>& fn,
                  const Tensor& at, double eps);

// ---------------------------------------------------------------------------
// Dump format: one text header line "dims: d1 d2 ...\n" followed by the
// row-major payload as little-endian 64-bit floats.

void write_tensor(std::ostream& os, const Shape& shape,
                  const std::vector<double>& data);
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor(std::istream& is);
Tensor read_tensor_file(const std::string& path);

}  // namespace dsgn
