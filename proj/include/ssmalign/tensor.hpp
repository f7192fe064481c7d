// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense f64 tensor with reverse-mode automatic differentiation.
//
// Tensors are value-semantic handles onto graph nodes. A forward pass builds
// a define-by-run graph; backward(root) walks it once in reverse topological
// order and accumulates gradients into every leaf that requires grad. Graphs
// are single-owner and consumable-once; independent graphs may live on
// different threads. Forward ops never mutate their inputs — the only
// sanctioned mutation is an optimizer updating leaf values *between* graphs.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ssmalign {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thread-local counter of forward floating-point work, used by the
/// benchmark harness. One multiply-accumulate counts as two flops.
namespace flops {
std::uint64_t count();
void reset();
void add(std::uint64_t n);
}  // namespace flops

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily during backward
    bool requires_grad = false;
    bool consumed = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Propagates this node's grad into inputs' grads. Cleared after use.
    std::function<void(Node&)> backward_fn;
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double fill, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
    int dim(int axis) const { return node_->shape[static_cast<size_t>(axis)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }

    const std::vector<double>& data() const { return node_->value; }
    double at(std::int64_t i) const { return node_->value[static_cast<size_t>(i)]; }
    /// Value of a scalar (numel == 1) tensor.
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    /// Direct value access for optimizer updates and initialization. Must
    /// not be called while a graph referencing this tensor is still alive.
    std::vector<double>& raw_data() { return node_->value; }

    const char* op_name() const { return node_->op; }

    /// Leaf identity, used as a key in gradient maps.
    const detail::Node* id() const { return node_.get(); }

    friend Tensor make_op_node(const char* op, Shape shape, std::vector<double> value,
                               std::vector<Tensor> inputs,
                               std::function<void(detail::Node&)> backward_fn);
    friend void backward(const Tensor& root);

private:
    std::shared_ptr<detail::Node> node_;
};

/// Internal factory for op implementations: wires inputs and the backward
/// closure only when some input requires grad.
Tensor make_op_node(const char* op, Shape shape, std::vector<double> value,
                    std::vector<Tensor> inputs,
                    std::function<void(detail::Node&)> backward_fn);

/// Lazily allocates a node's grad buffer; for backward closures of fused ops.
std::vector<double>& ensure_grad_buffer(detail::Node& n);

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b);

/// Reverse-mode sweep from a scalar root. Every requires-grad leaf reachable
/// from root receives d(root)/d(leaf) in its grad buffer (summed over all
/// paths). The graph is consumable-once: a second backward over any of its
/// nodes is rejected.
void backward(const Tensor& root);

// ---------------------------------------------------------------------------
// Ops. All shape checks throw std::invalid_argument naming both shapes; any
// non-finite input value throws std::domain_error naming the op.
// ---------------------------------------------------------------------------
namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor matmul(const Tensor& a, const Tensor& b);

/// x: [..., Din] times W: [Dout, Din] plus optional bias [Dout].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// x: [B,Cin,H,W], w: [Cout,Cin,k,k] with k in {1,3}, optional bias [Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int pad);

/// Depthwise causal conv over sequences. x: [L,D] or [B,L,D], w: [D,k],
/// optional bias [D]. Output t only sees inputs t-k+1..t.
Tensor conv1d_causal(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor smooth_l1(const Tensor& x);

/// Concatenate along axis 1 of two 4-D tensors.
Tensor concat_channel(const Tensor& a, const Tensor& b);

Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor reshape(const Tensor& x, Shape shape);

/// v: [C] replicated to [B,C,H,W].
Tensor broadcast(const Tensor& v, int batch, int height, int width);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_squares(const Tensor& x);

/// Softmax over axis 1 of a 4-D tensor.
Tensor softmax_channel(const Tensor& x);

/// Nearest-neighbour 2x upsampling of a 4-D tensor.
Tensor upsample_nearest2x(const Tensor& x);

/// Identity forward; backward multiplies the incoming gradient by -lambda.
Tensor grl(const Tensor& x, double lambda);

}  // namespace ops

// ---------------------------------------------------------------------------
// Generic dispatch surface over the ops above.
// ---------------------------------------------------------------------------

enum class OpKind {
    Add,
    Mul,
    Matmul,
    Conv2d,
    Conv1d,
    Linear,
    Sigmoid,
    Silu,
    Softplus,
    Exp,
    ConcatChannel,
    Slice,
    Reshape,
    Broadcast,
    Mean,
    SumSquares,
    SoftmaxChannel,
    // kinds beyond the core set
    Sum,
    Scale,
    AddScalar,
    SmoothL1,
    UpsampleNearest2x,
    Grl,
};

struct OpAttrs {
    int stride = 1;
    int pad = 0;
    int axis = 0;
    int start = 0;
    int len = 0;
    int batch = 1;
    int height = 1;
    int width = 1;
    double scalar = 0.0;
    Shape shape;
};

Tensor forward_op(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

// ---------------------------------------------------------------------------
// Gradient verification oracle.
// ---------------------------------------------------------------------------

/// Max over all entries of all params of
///   |analytic - central difference| / max(|analytic|, |central|, denom_floor).
/// f must be deterministic and return a scalar tensor built from the given
/// leaves; eps must lie in (0, 1e-3]. Raise denom_floor above the rounding
/// noise |f| * ulp / eps when checking composite objectives whose smallest
/// true gradients sit below what central differences can resolve.
double finite_diff_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         std::vector<Tensor> params, double eps, double denom_floor = 1e-12);

}  // namespace ssmalign
