// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Autodiff core: forward semantics, backward oracles, error contract.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "ssmalign/rng.hpp"
#include "ssmalign/tensor.hpp"

using namespace ssmalign;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double scale = 1.0, bool rg = true) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.normal() * scale;
    return Tensor::from_data(std::move(shape), std::move(v), rg);
}

}  // namespace

TEST_CASE("elementwise add") {
    auto a = Tensor::from_data({2}, {1.0, 2.0});
    auto b = Tensor::from_data({2}, {3.0, 4.0});
    auto y = ops::add(a, b);
    CHECK(y.data() == std::vector<double>{4.0, 6.0});
}

TEST_CASE("matmul by identity") {
    Rng rng(11);
    auto x = rand_tensor({3, 4}, rng, 1.0, false);
    std::vector<double> id(9, 0.0);
    id[0] = id[4] = id[8] = 1.0;
    auto i3 = Tensor::from_data({3, 3}, std::move(id));
    auto y = ops::matmul(i3, x);
    CHECK(y.shape() == x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == doctest::Approx(x.at(i)));
}

TEST_CASE("conv2d constant field") {
    auto x = Tensor::full({1, 1, 4, 4}, 1.0);
    auto w = Tensor::full({1, 1, 3, 3}, 1.0);
    auto y = ops::conv2d(x, w, Tensor{}, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (std::int64_t i = 0; i < 4; ++i) CHECK(y.at(i) == doctest::Approx(9.0));
}

TEST_CASE("backward of sum of squares") {
    auto x = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    backward(ops::sum_squares(x));
    REQUIRE(x.has_grad());
    CHECK(x.grad() == std::vector<double>{2.0, 4.0, 6.0});
}

TEST_CASE("backward of sigmoid at zero") {
    auto x = Tensor::scalar(0.0, true);
    backward(ops::sigmoid(x));
    CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("gradient accumulation: y = x + x") {
    auto x = Tensor::from_data({3}, {0.5, -1.0, 2.0}, true);
    backward(ops::sum(ops::add(x, x)));
    for (double g : x.grad()) CHECK(g == doctest::Approx(2.0));
}

TEST_CASE("mean of conv2d matches finite differences") {
    Rng rng(42);
    auto x = rand_tensor({1, 2, 5, 5}, rng);
    auto w = rand_tensor({3, 2, 3, 3}, rng);
    auto b = rand_tensor({3}, rng);
    auto f = [](const std::vector<Tensor>& p) {
        return ops::mean(ops::conv2d(p[0], p[1], p[2], 1, 1));
    };
    CHECK(finite_diff_check(f, {x, w, b}, 1e-5) < 1e-6);
}

TEST_CASE("finite_diff_check on a quadratic is near-exact") {
    auto x = Tensor::scalar(5.0, true);
    auto f = [](const std::vector<Tensor>& p) { return ops::mul(p[0], p[0]); };
    CHECK(finite_diff_check(f, {x}, 1e-5) < 1e-9);
}

TEST_CASE("finite_diff_check: denominator floor prices in the method's resolution") {
    // f = sum(x^3) at x = 0: the analytic gradient vanishes exactly while the
    // central difference returns its pure eps^2 truncation term, so the
    // relative error under the default floor is exactly 1.
    auto x = Tensor::from_data({3}, {0.0, 0.0, 0.0}, true);
    auto f = [](const std::vector<Tensor>& p) {
        return ops::sum(ops::mul(ops::mul(p[0], p[0]), p[0]));
    };
    const double eps = 1e-3;
    CHECK(finite_diff_check(f, {x}, eps) == 1.0);
    // A floor above the truncation scale turns the same mismatch into
    // eps^2 / floor, the honest statement of what the probe can resolve.
    CHECK(finite_diff_check(f, {x}, eps, 1e-2) ==
          doctest::Approx(1e-4).epsilon(1e-12));
    CHECK_THROWS_AS(finite_diff_check(f, {x}, eps, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(finite_diff_check(f, {x}, eps, 9e-13), std::invalid_argument);
}

TEST_CASE("every op backward agrees with finite differences") {
    struct Case {
        const char* name;
        std::vector<Tensor> params;
        std::function<Tensor(const std::vector<Tensor>&)> f;
    };
    Rng rng(7);
    std::vector<Case> cases;

    cases.push_back({"add.vec", {rand_tensor({5}, rng), rand_tensor({5}, rng)},
                     [](const std::vector<Tensor>& p) { return ops::sum(ops::add(p[0], p[1])); }});
    cases.push_back({"add.4d", {rand_tensor({2, 3, 2, 2}, rng), rand_tensor({2, 3, 2, 2}, rng)},
                     [](const std::vector<Tensor>& p) { return ops::mean(ops::add(p[0], p[1])); }});
    cases.push_back({"mul", {rand_tensor({2, 4}, rng), rand_tensor({2, 4}, rng)},
                     [](const std::vector<Tensor>& p) { return ops::mean(ops::mul(p[0], p[1])); }});
    cases.push_back({"scale", {rand_tensor({6}, rng)},
                     [](const std::vector<Tensor>& p) { return ops::sum(ops::scale(p[0], -1.7)); }});
    cases.push_back({"add_scalar", {rand_tensor({6}, rng)}, [](const std::vector<Tensor>& p) {
                         return ops::mean(ops::add_scalar(p[0], 0.3));
                     }});
    cases.push_back({"matmul", {rand_tensor({3, 4}, rng), rand_tensor({4, 2}, rng)},
                     [](const std::vector<Tensor>& p) { return ops::mean(ops::matmul(p[0], p[1])); }});
    cases.push_back({"linear.2d",
                     {rand_tensor({5, 3}, rng), rand_tensor({4, 3}, rng), rand_tensor({4}, rng)},
                     [](const std::vector<Tensor>& p) {
                         return ops::mean(ops::linear(p[0], p[1], p[2]));
                     }});
    cases.push_back({"linear.3d.nobias", {rand_tensor({2, 5, 3}, rng), rand_tensor({4, 3}, rng)},
                     [](const std::vector<Tensor>& p) {
                         return ops::mean(ops::linear(p[0], p[1], Tensor{}));
                     }});
    cases.push_back({"conv2d.k3.s2.p1",
                     {rand_tensor({2, 2, 5, 5}, rng), rand_tensor({3, 2, 3, 3}, rng),
                      rand_tensor({3}, rng)},
                     [](const std::vector<Tensor>& p) {
                         return ops::mean(ops::conv2d(p[0], p[1], p[2], 2, 1));
                     }});
    cases.push_back({"conv2d.k1", {rand_tensor({1, 3, 4, 4}, rng), rand_tensor({2, 3, 1, 1}, rng)},
                     [](const std::vector<Tensor>& p) {
                         return ops::mean(ops::conv2d(p[0], p[1], Tensor{}, 1, 0));
                     }});
    cases.push_back({"conv1d.2d",
                     {rand_tensor({6, 3}, rng), rand_tensor({3, 3}, rng), rand_tensor({3}, rng)},
                     [](const std::vector<Tensor>& p) {
                         return ops::mean(ops::conv1d_causal(p[0], p[1], p[2]));
                     }});
    cases.push_back({"conv1d.3d", {rand_tensor({2, 6, 3}, rng), rand_tensor({3, 3}, rng)},
                     [](const std::vector<Tensor>& p) {
                         return ops::mean(ops::conv1d_causal(p[0], p[1], Tensor{}));
                     }});
    cases.push_back({"sigmoid", {rand_tensor({7}, rng)},
                     [](const std::vector<Tensor>& p) { return ops::mean(ops::sigmoid(p[0])); }});
    cases.push_back({"silu", {rand_tensor({2, 2, 2, 2}, rng)},
                     [](const std::vector<Tensor>& p) { return ops::mean(ops::silu(p[0])); }});
    cases.push_back({"softplus", {rand_tensor({7}, rng)},
                     [](const std::vector<Tensor>& p) { return ops::mean(ops::softplus(p[0])); }});
    cases.push_back({"exp", {rand_tensor({7}, rng, 0.5)},
                     [](const std::vector<Tensor>& p) { return ops::mean(ops::exp(p[0])); }});
    {
        // Stay clear of the |x| = 1 kink where central differences straddle branches.
        std::vector<double> v = {0.2, -0.6, 0.45, 1.8, -2.5, 0.0};
        cases.push_back({"smooth_l1", {Tensor::from_data({6}, std::move(v), true)},
                         [](const std::vector<Tensor>& p) { return ops::sum(ops::smooth_l1(p[0])); }});
    }
    cases.push_back({"concat_channel",
                     {rand_tensor({2, 2, 3, 3}, rng), rand_tensor({2, 3, 3, 3}, rng)},
                     [](const std::vector<Tensor>& p) {
                         return ops::mean(ops::concat_channel(p[0], p[1]));
                     }});
    cases.push_back({"slice.axis1", {rand_tensor({2, 5, 2, 2}, rng)},
                     [](const std::vector<Tensor>& p) {
                         return ops::mean(ops::slice(p[0], 1, 1, 3));
                     }});
    cases.push_back({"slice.axis0", {rand_tensor({6, 3}, rng)},
                     [](const std::vector<Tensor>& p) {
                         return ops::sum(ops::slice(p[0], 0, 2, 2));
                     }});
    cases.push_back({"reshape", {rand_tensor({2, 6}, rng)},
                     [](const std::vector<Tensor>& p) {
                         return ops::mean(ops::sigmoid(ops::reshape(p[0], {3, 4})));
                     }});
    cases.push_back({"broadcast", {rand_tensor({4}, rng)},
                     [](const std::vector<Tensor>& p) {
                         return ops::mean(ops::silu(ops::broadcast(p[0], 2, 3, 3)));
                     }});
    cases.push_back({"sum", {rand_tensor({3, 3}, rng)},
                     [](const std::vector<Tensor>& p) { return ops::sum(p[0]); }});
    cases.push_back({"mean", {rand_tensor({3, 3}, rng)},
                     [](const std::vector<Tensor>& p) { return ops::mean(p[0]); }});
    cases.push_back({"sum_squares", {rand_tensor({3, 3}, rng)},
                     [](const std::vector<Tensor>& p) { return ops::sum_squares(p[0]); }});
    cases.push_back({"softmax_channel", {rand_tensor({2, 4, 2, 2}, rng)},
                     [](const std::vector<Tensor>& p) {
                         // Weighted sum so the softmax Jacobian is actually exercised.
                         auto s = ops::softmax_channel(p[0]);
                         return ops::mean(ops::mul(s, ops::exp(s)));
                     }});
    cases.push_back({"upsample_nearest2x", {rand_tensor({1, 2, 3, 3}, rng)},
                     [](const std::vector<Tensor>& p) {
                         return ops::mean(ops::sigmoid(ops::upsample_nearest2x(p[0])));
                     }});

    for (auto& c : cases) {
        CAPTURE(c.name);
        CHECK(finite_diff_check(c.f, c.params, 1e-5) < 1e-6);
    }
}

TEST_CASE("chain rule through composed graph matches dispatch-built graph") {
    Rng rng(19);
    auto x0 = rand_tensor({4, 3}, rng);
    auto w0 = rand_tensor({2, 3}, rng);
    auto x1 = Tensor::from_data({4, 3}, x0.data(), true);
    auto w1 = Tensor::from_data({2, 3}, w0.data(), true);

    backward(ops::mean(ops::sigmoid(ops::linear(x0, w0, Tensor{}))));

    OpAttrs none;
    auto h = forward_op(OpKind::Linear, {x1, w1}, none);
    auto s = forward_op(OpKind::Sigmoid, {h}, none);
    backward(forward_op(OpKind::Mean, {s}, none));

    REQUIRE(x0.grad().size() == x1.grad().size());
    for (size_t i = 0; i < x0.grad().size(); ++i) CHECK(x0.grad()[i] == x1.grad()[i]);
    for (size_t i = 0; i < w0.grad().size(); ++i) CHECK(w0.grad()[i] == w1.grad()[i]);
}

TEST_CASE("gradient reversal is identity forward, -lambda backward") {
    auto x = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
    auto y = ops::grl(x, 0.7);
    CHECK(y.data() == x.data());
    backward(ops::sum(y));
    for (double g : x.grad()) CHECK(g == doctest::Approx(-0.7));
}

TEST_CASE("causal conv1d never looks ahead") {
    Rng rng(23);
    auto w = rand_tensor({2, 3}, rng, 1.0, false);
    std::vector<double> base(8 * 2);
    for (auto& v : base) v = rng.normal();
    auto x0 = Tensor::from_data({8, 2}, base);
    std::vector<double> bumped = base;
    bumped[7 * 2] += 10.0;  // t = 7 only
    auto x1 = Tensor::from_data({8, 2}, std::move(bumped));
    auto y0 = ops::conv1d_causal(x0, w, Tensor{});
    auto y1 = ops::conv1d_causal(x1, w, Tensor{});
    for (int t = 0; t < 7; ++t)
        for (int c = 0; c < 2; ++c) CHECK(y0.at(t * 2 + c) == y1.at(t * 2 + c));
    CHECK(y0.at(7 * 2) != y1.at(7 * 2));
}

TEST_CASE("forward never mutates inputs") {
    Rng rng(31);
    auto x = rand_tensor({2, 2, 4, 4}, rng);
    auto w = rand_tensor({2, 2, 3, 3}, rng);
    const auto x_before = x.data();
    const auto w_before = w.data();
    auto y = ops::silu(ops::conv2d(x, w, Tensor{}, 1, 1));
    backward(ops::mean(y));
    CHECK(x.data() == x_before);
    CHECK(w.data() == w_before);
}

TEST_CASE("conv2d flop accounting is exact") {
    auto x = Tensor::full({1, 2, 8, 8}, 0.5);
    auto w = Tensor::full({4, 2, 3, 3}, 0.25);
    flops::reset();
    ops::conv2d(x, w, Tensor{}, 1, 1);
    CHECK(flops::count() == 2ULL * 4 * 2 * 3 * 3 * 8 * 8);
}

TEST_CASE("error contract") {
    auto a = Tensor::from_data({2}, {1.0, 2.0});
    auto b = Tensor::from_data({3}, {1.0, 2.0, 3.0});
    CHECK_THROWS_AS(ops::add(a, b), std::invalid_argument);
    CHECK_THROWS_WITH_AS(ops::add(a, b), "add: shape mismatch [2] vs [3]",
                         std::invalid_argument);

    auto nan_in = Tensor::from_data({1}, {std::nan("")});
    CHECK_THROWS_AS(ops::sigmoid(nan_in), std::domain_error);

    auto x = Tensor::full({1, 1, 4, 4}, 1.0);
    auto bad_kernel = Tensor::full({1, 1, 2, 2}, 1.0);
    CHECK_THROWS_AS(ops::conv2d(x, bad_kernel, Tensor{}, 1, 0), std::invalid_argument);

    auto vec = Tensor::from_data({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(vec), std::invalid_argument);
    CHECK_THROWS_AS(Tensor::from_data({2}, {1.0}), std::invalid_argument);
    CHECK_THROWS_AS(vec.item(), std::invalid_argument);
    CHECK_THROWS_AS(ops::slice(vec, 0, 1, 2), std::invalid_argument);

    auto no_grad = Tensor::scalar(1.0);
    CHECK_THROWS_AS(backward(no_grad), std::invalid_argument);
}

TEST_CASE("graphs are consumable-once") {
    auto x = Tensor::from_data({2}, {1.0, 2.0}, true);
    auto root = ops::sum_squares(x);
    backward(root);
    CHECK_THROWS_AS(backward(root), std::logic_error);
}

TEST_CASE("rng streams are deterministic") {
    Rng a(99), b(99);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(99);
    auto f1 = c.fork(3);
    auto f2 = Rng(99).fork(3);
    CHECK(f1.next_u64() == f2.next_u64());
    Rng u(5);
    for (int i = 0; i < 1000; ++i) {
        const double v = u.uniform();
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
        const int k = u.uniform_int(7);
        CHECK(k >= 0);
        CHECK(k < 7);
    }
}
