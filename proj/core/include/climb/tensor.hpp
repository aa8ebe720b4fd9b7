#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "climb/rng.hpp"

namespace climb {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> v;
  std::vector<double> g;  // empty until a backward pass touches this node
  bool requires_grad = false;

  TensorNode(Shape s, std::vector<double> vals);
  ~TensorNode();
  int64_t numel() const { return static_cast<int64_t>(v.size()); }
};

}  // namespace detail

// Logical-byte accounting for tensor storage, used by the benchmark harness
// to compare memory growth of sequence operators.
struct AllocationStats {
  static int64_t current_bytes();
  static int64_t peak_bytes();
  static void reset_peak();
};

// Dense row-major tensor of doubles with reverse-mode autodiff. A Tensor is a
// shared handle to its node; copies alias. Gradients accumulate into the node
// until zero_grad(). All math is double precision; float32 exists only as a
// checkpoint storage option.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, Rng& rng, double stdev = 1.0,
                      bool requires_grad = false);
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                             bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t dim() const;
  int64_t numel() const;
  int64_t size(int axis) const;  // negative axis counts from the back

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  std::vector<double>& values();
  const std::vector<double>& values() const;
  double item() const;  // numel()==1 only

  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws when absent
  std::vector<double>& grad_mutable();      // allocates zeros when absent
  void zero_grad();

  // Value copy detached from the tape; never requires grad.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  friend Tensor wrap_node(std::shared_ptr<detail::TensorNode>);

  std::shared_ptr<detail::TensorNode> node_;
};

Tensor wrap_node(std::shared_ptr<detail::TensorNode> node);

// Reverse-mode tape. Ops append backward closures while a tape is active and
// at least one input requires grad. backward() pops the closures in reverse
// and frees them, so the graph lives exactly one forward/backward cycle.
class Tape {
 public:
  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
  size_t size() const { return entries_.size(); }
  void run_backward_and_clear();

  static Tape* current();

 private:
  friend class TapeScope;
  friend class NoGradScope;
  std::vector<std::function<void()>> entries_;
};

// RAII: makes a fresh tape active on this thread for the scope's lifetime.
class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* prev_;
};

// RAII: disables recording inside the scope (inference / frozen passes).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

// Seeds d(loss)/d(loss)=1 and runs the active tape backwards. The loss must
// be a scalar produced under the currently active tape.
void backward(const Tensor& loss);

// Throws std::runtime_error when any element is NaN or Inf. Every op calls
// this on its output so a numerical fault surfaces at the op that caused it.
void check_finite(const Tensor& t, const char* op_name);

// Elementwise with trailing-dimension broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double negative_slope = 0.2);
Tensor abs_pow(const Tensor& a, double p);  // |x|^p, p >= 1
Tensor square(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

// Batched matmul: [..., m, k] x [..., k, n] -> [..., m, n] with leading-dim
// broadcasting between the two batch shapes.
Tensor matmul(const Tensor& a, const Tensor& b);

// x [B,Cin,H,W], w [Cout,Cin,kh,kw], bias [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad);
// x [B,Cin,H,W], w [Cin,Cout,kh,kw]; output spatial (H-1)*stride - 2*pad + kh.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                        int stride, int pad);
// x [B,L,M], w [M,K], bias [M]; left zero padding, tap K-1 is the current step.
Tensor depthwise_conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor avg_pool2d(const Tensor& x, int k);  // kernel k, stride k

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis, bool keepdims);
Tensor mean_axis(const Tensor& a, int axis, bool keepdims);

Tensor reshape(const Tensor& a, Shape shape);  // one -1 entry is inferred
Tensor transpose_last2(const Tensor& a);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor flip(const Tensor& a, int axis);

Tensor softmax_lastdim(const Tensor& a);

// Ascending sort of a rank-1 tensor. Also returns the permutation; gradients
// scatter back through it, so downstream losses differentiate through the
// sorted order (ties keep input order, matching finite differences almost
// everywhere).
std::pair<Tensor, std::vector<int64_t>> sort_with_backward(const Tensor& a);

// Batched selective-state-space recurrence primitive.
//   x, dt:  [B,L,M]   inputs and positive step sizes
//   b, c:   [B,L,N]   input/output mixing vectors per step
//   a:      [M,N]     continuous-time diagonal state matrix (negative)
// Returns y [B,L,M] where per (batch, channel m):
//   h_t = exp(dt*a) h_{t-1} + dt_b(dt, a, b_t) x_t,   y_t = <c_t, h_t>
// with the zero-order-hold input factor ((exp(dt*a)-1)/a) b_t and its series
// limit dt*b_t for |dt*a| < 1e-8. Differentiable in all five inputs.
Tensor selective_scan(const Tensor& x, const Tensor& dt, const Tensor& b,
                      const Tensor& c, const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace climb
