// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Tensor ops, reverse-mode sweep and the finite-difference oracle.

#include "ssmalign/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace ssmalign {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace flops {
namespace {
thread_local std::uint64_t g_flops = 0;
}
std::uint64_t count() { return g_flops; }
void reset() { g_flops = 0; }
void add(std::uint64_t n) { g_flops += n; }
}  // namespace flops

void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                " vs " + shape_str(b));
}

std::vector<double>& ensure_grad_buffer(detail::Node& n) {
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

namespace {

void check_positive_shape(const char* op, const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument(std::string(op) + ": empty shape");
    for (int d : shape) {
        if (d <= 0)
            throw std::invalid_argument(std::string(op) + ": non-positive extent in " +
                                        shape_str(shape));
    }
}

void check_finite(const char* op, const Tensor& t) {
    const auto& v = t.data();
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i]))
            throw std::domain_error(std::string(op) + ": non-finite input at index " +
                                    std::to_string(i));
    }
}

void check_inputs(const char* op, std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts) {
        if (t->defined()) check_finite(op, *t);
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

}  // namespace

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check_positive_shape("from_data", shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw std::invalid_argument("from_data: " + shape_str(shape) + " holds " +
                                    std::to_string(shape_numel(shape)) + " values, got " +
                                    std::to_string(data.size()));
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
    check_positive_shape("full", shape);
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)), fill);
    return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

double Tensor::item() const {
    if (numel() != 1)
        throw std::invalid_argument("item: tensor " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
}

Tensor make_op_node(const char* op, Shape shape, std::vector<double> value,
                    std::vector<Tensor> inputs,
                    std::function<void(detail::Node&)> backward_fn) {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(value);
    t.node_->op = op;
    bool needs_grad = false;
    for (const Tensor& in : inputs) {
        if (in.defined() && in.requires_grad()) needs_grad = true;
    }
    if (needs_grad) {
        t.node_->requires_grad = true;
        t.node_->inputs.reserve(inputs.size());
        for (const Tensor& in : inputs) {
            if (in.defined()) t.node_->inputs.push_back(in.node_);
        }
        t.node_->backward_fn = std::move(backward_fn);
    }
    return t;
}

void backward(const Tensor& root) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined root");
    if (root.numel() != 1)
        throw std::invalid_argument("backward: root " + shape_str(root.shape()) +
                                    " is not scalar");
    if (!root.requires_grad())
        throw std::invalid_argument("backward: root does not require grad");
    if (root.node_->consumed)
        throw std::logic_error("backward: graph already consumed");

    // Iterative post-order DFS for the topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.emplace_back(root.node_.get(), 0);
    visited.insert(root.node_.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->inputs.size()) {
            detail::Node* child = node->inputs[next_child++].get();
            if (visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    ensure_grad_buffer(*root.node_)[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        node->consumed = true;
        if (node->backward_fn && !node->grad.empty()) {
            node->backward_fn(*node);
        }
        // Release the closure (and any activations it captured) eagerly;
        // leaf grads survive for the optimizer.
        node->backward_fn = nullptr;
        if (!node->inputs.empty()) node->grad.clear();
    }
}

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_mismatch("add", a.shape(), b.shape());
    check_inputs("add", {&a, &b});
    const size_t n = a.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.at(i) + b.at(i);
    flops::add(n);
    return make_op_node("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (int k = 0; k < 2; ++k) {
            if (!self.inputs[k]->requires_grad) continue;
            auto& g = ensure_grad_buffer(*self.inputs[k]);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
    check_inputs("mul", {&a, &b});
    const size_t n = a.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.at(i) * b.at(i);
    flops::add(n);
    return make_op_node("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (self.inputs[0]->requires_grad) {
            auto& g = ensure_grad_buffer(*self.inputs[0]);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (self.inputs[1]->requires_grad) {
            auto& g = ensure_grad_buffer(*self.inputs[1]);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

Tensor scale(const Tensor& x, double c) {
    check_inputs("scale", {&x});
    if (!std::isfinite(c)) throw std::domain_error("scale: non-finite factor");
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = x.at(i) * c;
    flops::add(n);
    return make_op_node("scale", x.shape(), std::move(out), {x}, [c](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    });
}

Tensor add_scalar(const Tensor& x, double c) {
    check_inputs("add_scalar", {&x});
    if (!std::isfinite(c)) throw std::domain_error("add_scalar: non-finite addend");
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = x.at(i) + c;
    flops::add(n);
    return make_op_node("add_scalar", x.shape(), std::move(out), {x}, [](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        shape_mismatch("matmul", a.shape(), b.shape());
    check_inputs("matmul", {&a, &b});
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            const double* brow = pb + static_cast<size_t>(kk) * n;
            double* orow = out.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    flops::add(2ULL * m * k * n);
    return make_op_node("matmul", {m, n}, std::move(out), {a, b},
                        [m, k, n](detail::Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        const auto& go = self.grad;
        if (self.inputs[0]->requires_grad) {
            auto& ga = ensure_grad_buffer(*self.inputs[0]);  // dA = G B^T
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const double g = go[static_cast<size_t>(i) * n + j];
                    for (int kk = 0; kk < k; ++kk)
                        ga[static_cast<size_t>(i) * k + kk] += g * bv[static_cast<size_t>(kk) * n + j];
                }
        }
        if (self.inputs[1]->requires_grad) {
            auto& gb = ensure_grad_buffer(*self.inputs[1]);  // dB = A^T G
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    const double a_ik = av[static_cast<size_t>(i) * k + kk];
                    for (int j = 0; j < n; ++j)
                        gb[static_cast<size_t>(kk) * n + j] += a_ik * go[static_cast<size_t>(i) * n + j];
                }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2) shape_mismatch("linear", x.shape(), weight.shape());
    const int din = weight.dim(1), dout = weight.dim(0);
    if (x.dim(x.rank() - 1) != din) shape_mismatch("linear", x.shape(), weight.shape());
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dout))
        shape_mismatch("linear", weight.shape(), bias.shape());
    check_inputs("linear", {&x, &weight, &bias});

    const std::int64_t rows = x.numel() / din;
    Shape out_shape = x.shape();
    out_shape.back() = dout;
    std::vector<double> out(static_cast<size_t>(rows) * dout);
    const double* px = x.data().data();
    const double* pw = weight.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * din;
        double* orow = out.data() + r * dout;
        for (int o = 0; o < dout; ++o) {
            const double* wrow = pw + static_cast<size_t>(o) * din;
            double acc = bias.defined() ? bias.at(o) : 0.0;
            for (int i = 0; i < din; ++i) acc += wrow[i] * xr[i];
            orow[o] = acc;
        }
    }
    flops::add(2ULL * rows * dout * din);
    const bool has_bias = bias.defined();
    return make_op_node("linear", std::move(out_shape), std::move(out), {x, weight, bias},
                        [rows, din, dout, has_bias](detail::Node& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        const auto& go = self.grad;
        if (self.inputs[0]->requires_grad) {
            auto& gx = ensure_grad_buffer(*self.inputs[0]);
            for (std::int64_t r = 0; r < rows; ++r)
                for (int o = 0; o < dout; ++o) {
                    const double g = go[static_cast<size_t>(r) * dout + o];
                    const double* wrow = wv.data() + static_cast<size_t>(o) * din;
                    double* gxr = gx.data() + static_cast<size_t>(r) * din;
                    for (int i = 0; i < din; ++i) gxr[i] += g * wrow[i];
                }
        }
        if (self.inputs[1]->requires_grad) {
            auto& gw = ensure_grad_buffer(*self.inputs[1]);
            for (std::int64_t r = 0; r < rows; ++r)
                for (int o = 0; o < dout; ++o) {
                    const double g = go[static_cast<size_t>(r) * dout + o];
                    const double* xr = xv.data() + static_cast<size_t>(r) * din;
                    double* gwrow = gw.data() + static_cast<size_t>(o) * din;
                    for (int i = 0; i < din; ++i) gwrow[i] += g * xr[i];
                }
        }
        if (has_bias && self.inputs[2]->requires_grad) {
            auto& gb = ensure_grad_buffer(*self.inputs[2]);
            for (std::int64_t r = 0; r < rows; ++r)
                for (int o = 0; o < dout; ++o) gb[o] += go[static_cast<size_t>(r) * dout + o];
        }
    });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
    if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1))
        shape_mismatch("conv2d", x.shape(), weight.shape());
    const int k = weight.dim(2);
    if (weight.dim(3) != k || (k != 1 && k != 3))
        throw std::invalid_argument("conv2d: kernel must be 1x1 or 3x3, got " +
                                    shape_str(weight.shape()));
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
    const int batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int cout = weight.dim(0);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
        shape_mismatch("conv2d", weight.shape(), bias.shape());
    check_inputs("conv2d", {&x, &weight, &bias});
    const int oh = (h + 2 * pad - k) / stride + 1;
    const int ow = (w + 2 * pad - k) / stride + 1;
    if (oh <= 0 || ow <= 0)
        throw std::invalid_argument("conv2d: non-positive output for input " +
                                    shape_str(x.shape()));

    std::vector<double> out(static_cast<size_t>(batch) * cout * oh * ow);
    const double* px = x.data().data();
    const double* pw = weight.data().data();
    for (int b = 0; b < batch; ++b) {
        for (int co = 0; co < cout; ++co) {
            double* oplane = out.data() + (static_cast<size_t>(b) * cout + co) * oh * ow;
            const double bval = bias.defined() ? bias.at(co) : 0.0;
            std::fill(oplane, oplane + static_cast<size_t>(oh) * ow, bval);
            for (int ci = 0; ci < cin; ++ci) {
                const double* xplane = px + (static_cast<size_t>(b) * cin + ci) * h * w;
                const double* wk = pw + ((static_cast<size_t>(co) * cin + ci)) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const double wv = wk[ky * k + kx];
                        if (wv == 0.0) continue;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            const double* xrow = xplane + static_cast<size_t>(iy) * w;
                            double* orow = oplane + static_cast<size_t>(oy) * ow;
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= w) continue;
                                orow[ox] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    flops::add(2ULL * cout * cin * k * k * oh * ow * batch);
    const bool has_bias = bias.defined();
    return make_op_node("conv2d", {batch, cout, oh, ow}, std::move(out), {x, weight, bias},
                        [batch, cin, cout, h, w, k, oh, ow, stride, pad,
                         has_bias](detail::Node& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        const auto& go = self.grad;
        const bool need_gx = self.inputs[0]->requires_grad;
        const bool need_gw = self.inputs[1]->requires_grad;
        if (need_gx || need_gw) {
            auto* gx = need_gx ? &ensure_grad_buffer(*self.inputs[0]) : nullptr;
            auto* gw = need_gw ? &ensure_grad_buffer(*self.inputs[1]) : nullptr;
            for (int b = 0; b < batch; ++b) {
                for (int co = 0; co < cout; ++co) {
                    const double* gplane =
                        go.data() + (static_cast<size_t>(b) * cout + co) * oh * ow;
                    for (int ci = 0; ci < cin; ++ci) {
                        const double* xplane =
                            xv.data() + (static_cast<size_t>(b) * cin + ci) * h * w;
                        const size_t wbase = (static_cast<size_t>(co) * cin + ci) * k * k;
                        for (int ky = 0; ky < k; ++ky) {
                            for (int kx = 0; kx < k; ++kx) {
                                const double wval = wv[wbase + ky * k + kx];
                                double wacc = 0.0;
                                for (int oy = 0; oy < oh; ++oy) {
                                    const int iy = oy * stride + ky - pad;
                                    if (iy < 0 || iy >= h) continue;
                                    const double* grow = gplane + static_cast<size_t>(oy) * ow;
                                    const double* xrow = xplane + static_cast<size_t>(iy) * w;
                                    double* gxrow =
                                        need_gx ? gx->data() +
                                                      (static_cast<size_t>(b) * cin + ci) * h * w +
                                                      static_cast<size_t>(iy) * w
                                                : nullptr;
                                    for (int ox = 0; ox < ow; ++ox) {
                                        const int ix = ox * stride + kx - pad;
                                        if (ix < 0 || ix >= w) continue;
                                        const double g = grow[ox];
                                        if (need_gx) gxrow[ix] += g * wval;
                                        wacc += g * xrow[ix];
                                    }
                                }
                                if (need_gw) (*gw)[wbase + ky * k + kx] += wacc;
                            }
                        }
                    }
                }
            }
        }
        if (has_bias && self.inputs[2]->requires_grad) {
            auto& gb = ensure_grad_buffer(*self.inputs[2]);
            for (int b = 0; b < batch; ++b)
                for (int co = 0; co < cout; ++co) {
                    const double* gplane =
                        go.data() + (static_cast<size_t>(b) * cout + co) * oh * ow;
                    double acc = 0.0;
                    for (int i = 0; i < oh * ow; ++i) acc += gplane[i];
                    gb[co] += acc;
                }
        }
    });
}

Tensor conv1d_causal(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2) shape_mismatch("conv1d", x.shape(), weight.shape());
    const int d = weight.dim(0), k = weight.dim(1);
    if (x.rank() != 2 && x.rank() != 3) shape_mismatch("conv1d", x.shape(), weight.shape());
    const int dim_d = x.dim(x.rank() - 1);
    if (dim_d != d) shape_mismatch("conv1d", x.shape(), weight.shape());
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d))
        shape_mismatch("conv1d", weight.shape(), bias.shape());
    check_inputs("conv1d", {&x, &weight, &bias});
    const int batch = x.rank() == 3 ? x.dim(0) : 1;
    const int len = x.rank() == 3 ? x.dim(1) : x.dim(0);

    std::vector<double> out(x.data().size());
    const double* px = x.data().data();
    const double* pw = weight.data().data();
    for (int b = 0; b < batch; ++b) {
        const double* xb = px + static_cast<size_t>(b) * len * d;
        double* ob = out.data() + static_cast<size_t>(b) * len * d;
        for (int t = 0; t < len; ++t) {
            double* orow = ob + static_cast<size_t>(t) * d;
            for (int c = 0; c < d; ++c) orow[c] = bias.defined() ? bias.at(c) : 0.0;
            for (int j = 0; j < k; ++j) {
                const int src = t - (k - 1) + j;
                if (src < 0) continue;
                const double* xrow = xb + static_cast<size_t>(src) * d;
                for (int c = 0; c < d; ++c) orow[c] += pw[static_cast<size_t>(c) * k + j] * xrow[c];
            }
        }
    }
    flops::add(2ULL * batch * len * d * k);
    const bool has_bias = bias.defined();
    return make_op_node("conv1d", x.shape(), std::move(out), {x, weight, bias},
                        [batch, len, d, k, has_bias](detail::Node& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        const auto& go = self.grad;
        const bool need_gx = self.inputs[0]->requires_grad;
        const bool need_gw = self.inputs[1]->requires_grad;
        auto* gx = need_gx ? &ensure_grad_buffer(*self.inputs[0]) : nullptr;
        auto* gw = need_gw ? &ensure_grad_buffer(*self.inputs[1]) : nullptr;
        for (int b = 0; b < batch; ++b) {
            const size_t base = static_cast<size_t>(b) * len * d;
            for (int t = 0; t < len; ++t) {
                const double* grow = go.data() + base + static_cast<size_t>(t) * d;
                for (int j = 0; j < k; ++j) {
                    const int src = t - (k - 1) + j;
                    if (src < 0) continue;
                    const size_t xoff = base + static_cast<size_t>(src) * d;
                    for (int c = 0; c < d; ++c) {
                        if (need_gx) (*gx)[xoff + c] += grow[c] * wv[static_cast<size_t>(c) * k + j];
                        if (need_gw) (*gw)[static_cast<size_t>(c) * k + j] += grow[c] * xv[xoff + c];
                    }
                }
            }
        }
        if (has_bias && self.inputs[2]->requires_grad) {
            auto& gb = ensure_grad_buffer(*self.inputs[2]);
            for (int b = 0; b < batch; ++b)
                for (int t = 0; t < len; ++t) {
                    const double* grow =
                        go.data() + (static_cast<size_t>(b) * len + t) * d;
                    for (int c = 0; c < d; ++c) gb[c] += grow[c];
                }
        }
    });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor pointwise(const char* name, const Tensor& x, Fwd fwd, Bwd bwd, int flops_per_elem) {
    check_inputs(name, {&x});
    const size_t n = x.data().size();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = fwd(x.at(i));
    flops::add(static_cast<std::uint64_t>(n) * flops_per_elem);
    return make_op_node(name, x.shape(), std::move(out), {x}, [bwd](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        const auto& xv = self.inputs[0]->value;
        const auto& yv = self.value;
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bwd(xv[i], yv[i]);
    });
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
    return pointwise(
        "sigmoid", x, [](double v) { return stable_sigmoid(v); },
        [](double, double y) { return y * (1.0 - y); }, 4);
}

Tensor silu(const Tensor& x) {
    return pointwise(
        "silu", x, [](double v) { return v * stable_sigmoid(v); },
        [](double v, double) {
            const double s = stable_sigmoid(v);
            return s * (1.0 + v * (1.0 - s));
        },
        5);
}

Tensor softplus(const Tensor& x) {
    return pointwise(
        "softplus", x, [](double v) { return stable_softplus(v); },
        [](double v, double) { return stable_sigmoid(v); }, 4);
}

Tensor exp(const Tensor& x) {
    return pointwise(
        "exp", x, [](double v) { return std::exp(v); },
        [](double, double y) { return y; }, 1);
}

Tensor smooth_l1(const Tensor& x) {
    return pointwise(
        "smooth_l1", x,
        [](double v) { return std::abs(v) < 1.0 ? 0.5 * v * v : std::abs(v) - 0.5; },
        [](double v, double) { return std::clamp(v, -1.0, 1.0); }, 3);
}

Tensor concat_channel(const Tensor& a, const Tensor& b) {
    if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
        a.dim(3) != b.dim(3))
        shape_mismatch("concat_channel", a.shape(), b.shape());
    check_inputs("concat_channel", {&a, &b});
    const int batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    const size_t plane = static_cast<size_t>(h) * w;
    std::vector<double> out(static_cast<size_t>(batch) * (ca + cb) * plane);
    for (int n = 0; n < batch; ++n) {
        std::copy(a.data().begin() + static_cast<size_t>(n) * ca * plane,
                  a.data().begin() + static_cast<size_t>(n + 1) * ca * plane,
                  out.begin() + static_cast<size_t>(n) * (ca + cb) * plane);
        std::copy(b.data().begin() + static_cast<size_t>(n) * cb * plane,
                  b.data().begin() + static_cast<size_t>(n + 1) * cb * plane,
                  out.begin() + static_cast<size_t>(n) * (ca + cb) * plane + ca * plane);
    }
    return make_op_node("concat_channel", {batch, ca + cb, h, w}, std::move(out), {a, b},
                        [batch, ca, cb, plane](detail::Node& self) {
        for (int n = 0; n < batch; ++n) {
            const size_t base = static_cast<size_t>(n) * (ca + cb) * plane;
            if (self.inputs[0]->requires_grad) {
                auto& ga = ensure_grad_buffer(*self.inputs[0]);
                for (size_t i = 0; i < static_cast<size_t>(ca) * plane; ++i)
                    ga[static_cast<size_t>(n) * ca * plane + i] += self.grad[base + i];
            }
            if (self.inputs[1]->requires_grad) {
                auto& gb = ensure_grad_buffer(*self.inputs[1]);
                for (size_t i = 0; i < static_cast<size_t>(cb) * plane; ++i)
                    gb[static_cast<size_t>(n) * cb * plane + i] +=
                        self.grad[base + static_cast<size_t>(ca) * plane + i];
            }
        }
    });
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
    if (axis < 0 || axis >= x.rank() || start < 0 || len <= 0 ||
        start + len > x.dim(axis))
        throw std::invalid_argument("slice: bad range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") on axis " +
                                    std::to_string(axis) + " of " + shape_str(x.shape()));
    check_inputs("slice", {&x});
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const int extent = x.dim(axis);
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    std::vector<double> out(static_cast<size_t>(outer) * len * inner);
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy(x.data().begin() + (o * extent + start) * inner,
                  x.data().begin() + (o * extent + start + len) * inner,
                  out.begin() + o * len * inner);
    return make_op_node("slice", std::move(out_shape), std::move(out), {x},
                        [outer, inner, extent, start, len](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(len) * inner; ++i)
                g[(o * extent + start) * inner + i] += self.grad[o * len * inner + i];
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    check_positive_shape("reshape", shape);
    if (shape_numel(shape) != x.numel()) shape_mismatch("reshape", x.shape(), shape);
    check_inputs("reshape", {&x});
    std::vector<double> out = x.data();
    return make_op_node("reshape", std::move(shape), std::move(out), {x},
                        [](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor broadcast(const Tensor& v, int batch, int height, int width) {
    if (v.rank() != 1) throw std::invalid_argument("broadcast: prompt must be 1-D, got " +
                                                   shape_str(v.shape()));
    if (batch < 1 || height < 1 || width < 1)
        throw std::invalid_argument("broadcast: non-positive target dims");
    check_inputs("broadcast", {&v});
    const int c = v.dim(0);
    const size_t plane = static_cast<size_t>(height) * width;
    std::vector<double> out(static_cast<size_t>(batch) * c * plane);
    for (int n = 0; n < batch; ++n)
        for (int ch = 0; ch < c; ++ch)
            std::fill_n(out.begin() + (static_cast<size_t>(n) * c + ch) * plane, plane,
                        v.at(ch));
    return make_op_node("broadcast", {batch, c, height, width}, std::move(out), {v},
                        [batch, c, plane](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        for (int n = 0; n < batch; ++n)
            for (int ch = 0; ch < c; ++ch) {
                const double* gp = self.grad.data() + (static_cast<size_t>(n) * c + ch) * plane;
                double acc = 0.0;
                for (size_t i = 0; i < plane; ++i) acc += gp[i];
                g[ch] += acc;
            }
    });
}

Tensor sum(const Tensor& x) {
    check_inputs("sum", {&x});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    flops::add(x.data().size());
    return make_op_node("sum", {1}, {acc}, {x}, [](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        const double gv = self.grad[0];
        for (size_t i = 0; i < g.size(); ++i) g[i] += gv;
    });
}

Tensor mean(const Tensor& x) {
    check_inputs("mean", {&x});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.numel());
    flops::add(x.data().size() + 1);
    return make_op_node("mean", {1}, {acc * inv}, {x}, [inv](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        const double gv = self.grad[0] * inv;
        for (size_t i = 0; i < g.size(); ++i) g[i] += gv;
    });
}

Tensor sum_squares(const Tensor& x) {
    check_inputs("sum_squares", {&x});
    double acc = 0.0;
    for (double v : x.data()) acc += v * v;
    flops::add(2 * x.data().size());
    return make_op_node("sum_squares", {1}, {acc}, {x}, [](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        const auto& xv = self.inputs[0]->value;
        const double gv = self.grad[0];
        for (size_t i = 0; i < g.size(); ++i) g[i] += gv * 2.0 * xv[i];
    });
}

Tensor softmax_channel(const Tensor& x) {
    if (x.rank() != 4)
        throw std::invalid_argument("softmax_channel: need 4-D input, got " +
                                    shape_str(x.shape()));
    check_inputs("softmax_channel", {&x});
    const int batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const size_t plane = static_cast<size_t>(h) * w;
    std::vector<double> out(x.data().size());
    const double* px = x.data().data();
    for (int n = 0; n < batch; ++n) {
        for (size_t p = 0; p < plane; ++p) {
            const size_t base = static_cast<size_t>(n) * c * plane + p;
            double mx = px[base];
            for (int ch = 1; ch < c; ++ch) mx = std::max(mx, px[base + ch * plane]);
            double z = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                const double e = std::exp(px[base + ch * plane] - mx);
                out[base + ch * plane] = e;
                z += e;
            }
            const double inv = 1.0 / z;
            for (int ch = 0; ch < c; ++ch) out[base + ch * plane] *= inv;
        }
    }
    flops::add(5ULL * x.data().size());
    return make_op_node("softmax_channel", x.shape(), std::move(out), {x},
                        [batch, c, plane](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        const auto& yv = self.value;
        for (int n = 0; n < batch; ++n)
            for (size_t p = 0; p < plane; ++p) {
                const size_t base = static_cast<size_t>(n) * c * plane + p;
                double dot = 0.0;
                for (int ch = 0; ch < c; ++ch)
                    dot += self.grad[base + ch * plane] * yv[base + ch * plane];
                for (int ch = 0; ch < c; ++ch)
                    g[base + ch * plane] +=
                        yv[base + ch * plane] * (self.grad[base + ch * plane] - dot);
            }
    });
}

Tensor upsample_nearest2x(const Tensor& x) {
    if (x.rank() != 4)
        throw std::invalid_argument("upsample_nearest2x: need 4-D input, got " +
                                    shape_str(x.shape()));
    check_inputs("upsample_nearest2x", {&x});
    const int batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<double> out(static_cast<size_t>(batch) * c * 4 * h * w);
    const double* px = x.data().data();
    for (int nc = 0; nc < batch * c; ++nc) {
        const double* xp = px + static_cast<size_t>(nc) * h * w;
        double* op = out.data() + static_cast<size_t>(nc) * 4 * h * w;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                const double v = xp[y * w + xx];
                double* row0 = op + static_cast<size_t>(2 * y) * 2 * w + 2 * xx;
                double* row1 = row0 + static_cast<size_t>(2) * w;
                row0[0] = row0[1] = row1[0] = row1[1] = v;
            }
    }
    return make_op_node("upsample_nearest2x", {batch, c, 2 * h, 2 * w}, std::move(out), {x},
                        [batch, c, h, w](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        for (int nc = 0; nc < batch * c; ++nc) {
            const double* gp = self.grad.data() + static_cast<size_t>(nc) * 4 * h * w;
            double* gxp = g.data() + static_cast<size_t>(nc) * h * w;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    const double* row0 = gp + static_cast<size_t>(2 * y) * 2 * w + 2 * xx;
                    const double* row1 = row0 + static_cast<size_t>(2) * w;
                    gxp[y * w + xx] += row0[0] + row0[1] + row1[0] + row1[1];
                }
        }
    });
}

Tensor grl(const Tensor& x, double lambda) {
    check_inputs("grl", {&x});
    if (!std::isfinite(lambda)) throw std::domain_error("grl: non-finite lambda");
    std::vector<double> out = x.data();
    return make_op_node("grl", x.shape(), std::move(out), {x}, [lambda](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        for (size_t i = 0; i < g.size(); ++i) g[i] -= lambda * self.grad[i];
    });
}

}  // namespace ops

namespace {

void need_inputs(OpKind kind, const std::vector<Tensor>& inputs, size_t lo, size_t hi) {
    if (inputs.size() < lo || inputs.size() > hi)
        throw std::invalid_argument("forward_op: kind " + std::to_string(static_cast<int>(kind)) +
                                    " got " + std::to_string(inputs.size()) + " inputs");
}

Tensor maybe(const std::vector<Tensor>& inputs, size_t i) {
    return i < inputs.size() ? inputs[i] : Tensor{};
}

}  // namespace

Tensor forward_op(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
    using namespace ops;
    switch (kind) {
        case OpKind::Add: need_inputs(kind, inputs, 2, 2); return add(inputs[0], inputs[1]);
        case OpKind::Mul: need_inputs(kind, inputs, 2, 2); return mul(inputs[0], inputs[1]);
        case OpKind::Matmul: need_inputs(kind, inputs, 2, 2); return matmul(inputs[0], inputs[1]);
        case OpKind::Conv2d:
            need_inputs(kind, inputs, 2, 3);
            return conv2d(inputs[0], inputs[1], maybe(inputs, 2), attrs.stride, attrs.pad);
        case OpKind::Conv1d:
            need_inputs(kind, inputs, 2, 3);
            return conv1d_causal(inputs[0], inputs[1], maybe(inputs, 2));
        case OpKind::Linear:
            need_inputs(kind, inputs, 2, 3);
            return linear(inputs[0], inputs[1], maybe(inputs, 2));
        case OpKind::Sigmoid: need_inputs(kind, inputs, 1, 1); return sigmoid(inputs[0]);
        case OpKind::Silu: need_inputs(kind, inputs, 1, 1); return silu(inputs[0]);
        case OpKind::Softplus: need_inputs(kind, inputs, 1, 1); return softplus(inputs[0]);
        case OpKind::Exp: need_inputs(kind, inputs, 1, 1); return exp(inputs[0]);
        case OpKind::ConcatChannel:
            need_inputs(kind, inputs, 2, 2);
            return concat_channel(inputs[0], inputs[1]);
        case OpKind::Slice:
            need_inputs(kind, inputs, 1, 1);
            return slice(inputs[0], attrs.axis, attrs.start, attrs.len);
        case OpKind::Reshape:
            need_inputs(kind, inputs, 1, 1);
            return reshape(inputs[0], attrs.shape);
        case OpKind::Broadcast:
            need_inputs(kind, inputs, 1, 1);
            return broadcast(inputs[0], attrs.batch, attrs.height, attrs.width);
        case OpKind::Mean: need_inputs(kind, inputs, 1, 1); return mean(inputs[0]);
        case OpKind::SumSquares:
            need_inputs(kind, inputs, 1, 1);
            return sum_squares(inputs[0]);
        case OpKind::SoftmaxChannel:
            need_inputs(kind, inputs, 1, 1);
            return softmax_channel(inputs[0]);
        case OpKind::Sum: need_inputs(kind, inputs, 1, 1); return sum(inputs[0]);
        case OpKind::Scale:
            need_inputs(kind, inputs, 1, 1);
            return scale(inputs[0], attrs.scalar);
        case OpKind::AddScalar:
            need_inputs(kind, inputs, 1, 1);
            return add_scalar(inputs[0], attrs.scalar);
        case OpKind::SmoothL1: need_inputs(kind, inputs, 1, 1); return smooth_l1(inputs[0]);
        case OpKind::UpsampleNearest2x:
            need_inputs(kind, inputs, 1, 1);
            return upsample_nearest2x(inputs[0]);
        case OpKind::Grl:
            need_inputs(kind, inputs, 1, 1);
            return grl(inputs[0], attrs.scalar);
    }
    throw std::invalid_argument("forward_op: unknown op kind");
}

double finite_diff_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         std::vector<Tensor> params, double eps, double denom_floor) {
    if (!(eps > 0.0 && eps <= 1e-3))
        throw std::invalid_argument("finite_diff_check: eps must lie in (0, 1e-3]");
    if (!(denom_floor >= 1e-12))
        throw std::invalid_argument("finite_diff_check: denom_floor must be >= 1e-12");
    for (auto& p : params) {
        if (!p.requires_grad())
            throw std::invalid_argument("finite_diff_check: all params must require grad");
        p.zero_grad();
    }

    Tensor root = f(params);
    if (root.numel() != 1)
        throw std::invalid_argument("finite_diff_check: f must return a scalar");
    if (!std::isfinite(root.item()))
        throw std::domain_error("finite_diff_check: f returned non-finite value");
    backward(root);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.data().size(), 0.0));
        p.zero_grad();
    }

    double max_rel = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& values = params[pi].raw_data();
        for (size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double up = f(params).item();
            values[i] = saved - eps;
            const double down = f(params).item();
            values[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw std::domain_error("finite_diff_check: f non-finite at param " +
                                        std::to_string(pi) + " entry " + std::to_string(i));
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), denom_floor});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace ssmalign
