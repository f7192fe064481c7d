// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0

#include "ssmalign/ssm.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace ssmalign {

std::pair<double, double> zoh_discretize(double a, double b, double delta, bool exact_input) {
    if (!(delta > 0.0))
        throw std::invalid_argument("zoh_discretize: delta must be positive, got " +
                                    std::to_string(delta));
    const double a_bar = std::exp(delta * a);
    double b_bar;
    if (exact_input && a != 0.0) {
        b_bar = std::expm1(delta * a) / a * b;
    } else {
        b_bar = delta * b;
    }
    return {a_bar, b_bar};
}

namespace {

struct ScanDims {
    int batch, len, d, n;
    bool batched;
};

ScanDims scan_dims(const Tensor& x, const Tensor& A, const Tensor& B_coef,
                   const Tensor& C_coef, const Tensor& delta) {
    if (x.rank() != 2 && x.rank() != 3)
        throw std::invalid_argument("selective_scan: x must be [L,D] or [B,L,D], got " +
                                    shape_str(x.shape()));
    ScanDims s{};
    s.batched = x.rank() == 3;
    s.batch = s.batched ? x.dim(0) : 1;
    s.len = s.batched ? x.dim(1) : x.dim(0);
    s.d = s.batched ? x.dim(2) : x.dim(1);
    if (A.rank() != 2 || A.dim(0) != s.d)
        throw std::invalid_argument("selective_scan: A " + shape_str(A.shape()) +
                                    " does not match x " + shape_str(x.shape()));
    s.n = A.dim(1);
    const Shape want_bc = s.batched ? Shape{s.batch, s.len, s.n} : Shape{s.len, s.n};
    if (B_coef.shape() != want_bc) throw std::invalid_argument(
        "selective_scan: B " + shape_str(B_coef.shape()) + " vs expected " + shape_str(want_bc));
    if (C_coef.shape() != want_bc) throw std::invalid_argument(
        "selective_scan: C " + shape_str(C_coef.shape()) + " vs expected " + shape_str(want_bc));
    if (delta.shape() != x.shape())
        throw std::invalid_argument("selective_scan: delta " + shape_str(delta.shape()) +
                                    " vs x " + shape_str(x.shape()));
    return s;
}

void check_scan_finite(const char* what, const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v))
            throw std::domain_error(std::string("selective_scan: non-finite ") + what);
}

}  // namespace

Tensor selective_scan_core(const Tensor& x, const Tensor& A, const Tensor& B_coef,
                           const Tensor& C_coef, const Tensor& delta, bool exact_input) {
    const ScanDims s = scan_dims(x, A, B_coef, C_coef, delta);
    check_scan_finite("input x", x);
    check_scan_finite("input A", A);
    check_scan_finite("input B", B_coef);
    check_scan_finite("input C", C_coef);
    check_scan_finite("input delta", delta);
    for (double dv : delta.data())
        if (!(dv > 0.0))
            throw std::invalid_argument("selective_scan: delta entries must be positive");

    const int batch = s.batch, len = s.len, d = s.d, n = s.n;
    const double* px = x.data().data();
    const double* pa = A.data().data();
    const double* pb = B_coef.data().data();
    const double* pc = C_coef.data().data();
    const double* pd = delta.data().data();

    auto hist = std::make_shared<std::vector<double>>(
        static_cast<size_t>(batch) * len * d * n, 0.0);
    std::vector<double> y(static_cast<size_t>(batch) * len * d, 0.0);

    for (int b = 0; b < batch; ++b) {
        for (int t = 0; t < len; ++t) {
            const size_t xt = (static_cast<size_t>(b) * len + t) * d;
            const size_t bt = (static_cast<size_t>(b) * len + t) * n;
            for (int ch = 0; ch < d; ++ch) {
                const double dl = pd[xt + ch];
                const double xv = px[xt + ch];
                const size_t hrow = (xt + ch) * static_cast<size_t>(n);
                const size_t hprev = hrow - static_cast<size_t>(d) * n;
                double acc = 0.0;
                for (int k = 0; k < n; ++k) {
                    const double a = pa[static_cast<size_t>(ch) * n + k];
                    const double abar = std::exp(dl * a);
                    const double bbar =
                        exact_input && a != 0.0 ? std::expm1(dl * a) / a : dl;
                    const double prev = t > 0 ? (*hist)[hprev + k] : 0.0;
                    const double h = abar * prev + bbar * pb[bt + k] * xv;
                    (*hist)[hrow + k] = h;
                    acc += pc[bt + k] * h;
                }
                if (!std::isfinite(acc))
                    throw std::domain_error("selective_scan: non-finite activation at step " +
                                            std::to_string(t));
                y[xt + ch] = acc;
            }
        }
    }
    flops::add(8ULL * batch * len * d * n);

    return make_op_node(
        "selective_scan", x.shape(), std::move(y), {x, A, B_coef, C_coef, delta},
        [batch, len, d, n, exact_input, hist](detail::Node& self) {
            const auto& xv = self.inputs[0]->value;
            const auto& av = self.inputs[1]->value;
            const auto& bv = self.inputs[2]->value;
            const auto& cv = self.inputs[3]->value;
            const auto& dv = self.inputs[4]->value;
            const auto& gy = self.grad;
            const bool ngx = self.inputs[0]->requires_grad;
            const bool nga = self.inputs[1]->requires_grad;
            const bool ngb = self.inputs[2]->requires_grad;
            const bool ngc = self.inputs[3]->requires_grad;
            const bool ngd = self.inputs[4]->requires_grad;
            auto* gx = ngx ? &ensure_grad_buffer(*self.inputs[0]) : nullptr;
            auto* ga = nga ? &ensure_grad_buffer(*self.inputs[1]) : nullptr;
            auto* gb = ngb ? &ensure_grad_buffer(*self.inputs[2]) : nullptr;
            auto* gc = ngc ? &ensure_grad_buffer(*self.inputs[3]) : nullptr;
            auto* gd = ngd ? &ensure_grad_buffer(*self.inputs[4]) : nullptr;

            // gh[t] = gy[t] C_t + abar[t+1] gh[t+1], swept from t = L-1 down.
            std::vector<double> gh(static_cast<size_t>(d) * n);
            std::vector<double> gh_next(static_cast<size_t>(d) * n);
            std::vector<double> abar_next(static_cast<size_t>(d) * n);
            for (int b = 0; b < batch; ++b) {
                std::fill(gh_next.begin(), gh_next.end(), 0.0);
                std::fill(abar_next.begin(), abar_next.end(), 0.0);
                for (int t = len - 1; t >= 0; --t) {
                    const size_t xt = (static_cast<size_t>(b) * len + t) * d;
                    const size_t bt = (static_cast<size_t>(b) * len + t) * n;
                    for (int ch = 0; ch < d; ++ch) {
                        const double dl = dv[xt + ch];
                        const double xval = xv[xt + ch];
                        const double g = gy[xt + ch];
                        const size_t hrow = (xt + ch) * static_cast<size_t>(n);
                        const size_t hprev = hrow - static_cast<size_t>(d) * n;
                        double ddelta = 0.0, dx = 0.0;
                        for (int k = 0; k < n; ++k) {
                            const double a = av[static_cast<size_t>(ch) * n + k];
                            const double abar = std::exp(dl * a);
                            const double h = (*hist)[hrow + k];
                            const double prev = t > 0 ? (*hist)[hprev + k] : 0.0;
                            const size_t dn = static_cast<size_t>(ch) * n + k;
                            const double ghv =
                                g * cv[bt + k] + gh_next[dn] * abar_next[dn];
                            gh[dn] = ghv;
                            abar_next[dn] = abar;
                            if (ngc) (*gc)[bt + k] += g * h;
                            const double dabar = ghv * prev;
                            ddelta += dabar * a * abar;
                            if (nga) (*ga)[dn] += dabar * dl * abar;
                            const double bcoef = bv[bt + k];
                            if (exact_input && a != 0.0) {
                                const double bbar = std::expm1(dl * a) / a;
                                ddelta += ghv * abar * bcoef * xval;
                                if (nga)
                                    (*ga)[dn] += ghv * bcoef * xval *
                                                 (dl * abar * a - std::expm1(dl * a)) / (a * a);
                                if (ngb) (*gb)[bt + k] += ghv * bbar * xval;
                                dx += ghv * bbar * bcoef;
                            } else {
                                ddelta += ghv * bcoef * xval;
                                if (ngb) (*gb)[bt + k] += ghv * dl * xval;
                                dx += ghv * dl * bcoef;
                            }
                        }
                        if (ngd) (*gd)[xt + ch] += ddelta;
                        if (ngx) (*gx)[xt + ch] += dx;
                    }
                    std::swap(gh, gh_next);
                }
            }
        });
}

Tensor selective_scan_core_reference(const Tensor& x, const Tensor& A, const Tensor& B_coef,
                                     const Tensor& C_coef, const Tensor& delta,
                                     bool exact_input) {
    const ScanDims s = scan_dims(x, A, B_coef, C_coef, delta);
    std::vector<double> y(x.data().size(), 0.0);
    for (int b = 0; b < s.batch; ++b) {
        for (int ch = 0; ch < s.d; ++ch) {
            for (int k = 0; k < s.n; ++k) {
                double h = 0.0;
                const double a = A.at(ch * s.n + k);
                for (int t = 0; t < s.len; ++t) {
                    const std::int64_t xt = (static_cast<std::int64_t>(b) * s.len + t) * s.d + ch;
                    const std::int64_t bt = (static_cast<std::int64_t>(b) * s.len + t) * s.n + k;
                    const auto [abar, bbar] =
                        zoh_discretize(a, B_coef.at(bt), delta.at(xt), exact_input);
                    h = abar * h + bbar * x.at(xt);
                    if (!std::isfinite(h))
                        throw std::domain_error(
                            "selective_scan_reference: non-finite activation at step " +
                            std::to_string(t));
                    y[static_cast<size_t>(xt)] += C_coef.at(bt) * h;
                }
            }
        }
    }
    return Tensor::from_data(x.shape(), std::move(y));
}

std::vector<std::pair<std::string, Tensor>> SelectiveSSMParams::named_params(
    const std::string& prefix) const {
    return {{prefix + ".a_log", a_log},
            {prefix + ".b_w", b_w},
            {prefix + ".c_w", c_w},
            {prefix + ".delta_w", delta_w},
            {prefix + ".delta_b", delta_b}};
}

SelectiveSSMParams make_selective_ssm(int channels, int state_size, Rng& rng,
                                      bool exact_zoh_input) {
    if (channels < 1 || state_size < 1)
        throw std::invalid_argument("make_selective_ssm: need positive channels/state");
    SelectiveSSMParams p;
    p.channels = channels;
    p.state_size = state_size;
    p.exact_zoh_input = exact_zoh_input;
    std::vector<double> alog(static_cast<size_t>(channels) * state_size);
    for (int d = 0; d < channels; ++d)
        for (int k = 0; k < state_size; ++k)
            alog[static_cast<size_t>(d) * state_size + k] = std::log(static_cast<double>(k + 1));
    p.a_log = Tensor::from_data({channels, state_size}, std::move(alog), true);

    const double wscale = 1.0 / std::sqrt(static_cast<double>(channels));
    auto init = [&](Shape shape, double scale) {
        std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
        for (auto& e : v) e = rng.normal() * scale;
        return Tensor::from_data(std::move(shape), std::move(v), true);
    };
    p.b_w = init({state_size, channels}, wscale);
    p.c_w = init({state_size, channels}, wscale);
    p.delta_w = init({channels, channels}, 0.1 * wscale);
    // softplus(delta_b) = 0.1 at init.
    p.delta_b = Tensor::full({channels}, std::log(std::expm1(0.1)), true);
    return p;
}

namespace {

Tensor ssm_coefficients(const Tensor& x, const SelectiveSSMParams& p, Tensor& B_coef,
                        Tensor& C_coef, Tensor& delta) {
    const int d_in = x.dim(x.rank() - 1);
    if (d_in != p.channels)
        throw std::invalid_argument("selective_scan: x has " + std::to_string(d_in) +
                                    " channels, params expect " + std::to_string(p.channels));
    B_coef = ops::linear(x, p.b_w, Tensor{});
    C_coef = ops::linear(x, p.c_w, Tensor{});
    delta = ops::softplus(ops::linear(x, p.delta_w, p.delta_b));
    return ops::scale(ops::exp(p.a_log), -1.0);
}

}  // namespace

Tensor selective_scan(const Tensor& x, const SelectiveSSMParams& p) {
    Tensor B_coef, C_coef, delta;
    Tensor A = ssm_coefficients(x, p, B_coef, C_coef, delta);
    return selective_scan_core(x, A, B_coef, C_coef, delta, p.exact_zoh_input);
}

Tensor selective_scan_reference(const Tensor& x, const SelectiveSSMParams& p) {
    const int rank = x.rank();
    if (rank != 2 && rank != 3)
        throw std::invalid_argument("selective_scan_reference: x must be [L,D] or [B,L,D]");
    const int batch = rank == 3 ? x.dim(0) : 1;
    const int len = rank == 3 ? x.dim(1) : x.dim(0);
    const int d = rank == 3 ? x.dim(2) : x.dim(1);
    const int n = p.state_size;
    if (d != p.channels)
        throw std::invalid_argument("selective_scan_reference: channel mismatch");

    const std::int64_t rows = static_cast<std::int64_t>(batch) * len;
    std::vector<double> bcoef(static_cast<size_t>(rows) * n);
    std::vector<double> ccoef(static_cast<size_t>(rows) * n);
    std::vector<double> dcoef(static_cast<size_t>(rows) * d);
    for (std::int64_t r = 0; r < rows; ++r) {
        for (int k = 0; k < n; ++k) {
            double bacc = 0.0, cacc = 0.0;
            for (int j = 0; j < d; ++j) {
                bacc += p.b_w.at(k * d + j) * x.at(r * d + j);
                cacc += p.c_w.at(k * d + j) * x.at(r * d + j);
            }
            bcoef[static_cast<size_t>(r) * n + k] = bacc;
            ccoef[static_cast<size_t>(r) * n + k] = cacc;
        }
        for (int j = 0; j < d; ++j) {
            double acc = p.delta_b.at(j);
            for (int e = 0; e < d; ++e) acc += p.delta_w.at(j * d + e) * x.at(r * d + e);
            // softplus, stable on both tails
            dcoef[static_cast<size_t>(r) * d + j] =
                acc > 30.0 ? acc : (acc < -30.0 ? std::exp(acc) : std::log1p(std::exp(acc)));
        }
    }
    std::vector<double> aval(static_cast<size_t>(d) * n);
    for (size_t i = 0; i < aval.size(); ++i) aval[i] = -std::exp(p.a_log.at(i));

    const Shape bc_shape = rank == 3 ? Shape{batch, len, n} : Shape{len, n};
    return selective_scan_core_reference(
        x, Tensor::from_data({d, n}, std::move(aval)),
        Tensor::from_data(bc_shape, std::move(bcoef)), Tensor::from_data(bc_shape, std::move(ccoef)),
        Tensor::from_data(x.shape(), std::move(dcoef)), p.exact_zoh_input);
}

std::vector<std::pair<std::string, Tensor>> MambaLayerParams::named_params(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out = {
        {prefix + ".gate_w", gate_w}, {prefix + ".gate_b", gate_b},
        {prefix + ".main_w", main_w}, {prefix + ".main_b", main_b},
        {prefix + ".conv_w", conv_w}, {prefix + ".conv_b", conv_b},
        {prefix + ".out_w", out_w},   {prefix + ".out_b", out_b},
    };
    auto ssm_named = ssm.named_params(prefix + ".ssm");
    out.insert(out.end(), ssm_named.begin(), ssm_named.end());
    return out;
}

MambaLayerParams make_mamba_layer(int channels, int state_size, Rng& rng) {
    MambaLayerParams p;
    p.channels = channels;
    const double wscale = 1.0 / std::sqrt(static_cast<double>(channels));
    auto init = [&](Shape shape, double scale) {
        std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
        for (auto& e : v) e = rng.normal() * scale;
        return Tensor::from_data(std::move(shape), std::move(v), true);
    };
    p.gate_w = init({channels, channels}, wscale);
    p.gate_b = Tensor::zeros({channels}, true);
    p.main_w = init({channels, channels}, wscale);
    p.main_b = Tensor::zeros({channels}, true);
    p.conv_w = init({channels, 3}, 1.0 / std::sqrt(3.0));
    p.conv_b = Tensor::zeros({channels}, true);
    p.ssm = make_selective_ssm(channels, state_size, rng);
    p.out_w = init({channels, channels}, wscale);
    p.out_b = Tensor::zeros({channels}, true);
    return p;
}

Tensor mamba_layer(const Tensor& f_in, const MambaLayerParams& p) {
    if (f_in.rank() != 2 && f_in.rank() != 3)
        throw std::invalid_argument("mamba_layer: input must be [L,D] or [B,L,D], got " +
                                    shape_str(f_in.shape()));
    if (f_in.dim(f_in.rank() - 1) != p.channels)
        throw std::invalid_argument("mamba_layer: input " + shape_str(f_in.shape()) +
                                    " does not match " + std::to_string(p.channels) +
                                    " channels");
    Tensor gate = ops::silu(ops::linear(f_in, p.gate_w, p.gate_b));
    Tensor main = ops::linear(f_in, p.main_w, p.main_b);
    Tensor conv = ops::silu(ops::conv1d_causal(main, p.conv_w, p.conv_b));
    Tensor f = selective_scan(conv, p.ssm);
    return ops::linear(ops::mul(gate, f), p.out_w, p.out_b);
}

Tensor raster_flatten(const Tensor& feature, RasterDesc* desc) {
    if (feature.rank() != 4)
        throw std::invalid_argument("raster_flatten: need [B,C,H,W], got " +
                                    shape_str(feature.shape()));
    const int b = feature.dim(0), c = feature.dim(1), h = feature.dim(2), w = feature.dim(3);
    if (desc) *desc = {b, c, h, w};
    const size_t plane = static_cast<size_t>(h) * w;
    std::vector<double> out(feature.data().size());
    const double* src = feature.data().data();
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const double* plane_src = src + (static_cast<size_t>(bi) * c + ci) * plane;
            double* dst = out.data() + static_cast<size_t>(bi) * plane * c + ci;
            for (size_t p = 0; p < plane; ++p) dst[p * c] = plane_src[p];
        }
    return make_op_node("raster_flatten", {b, h * w, c}, std::move(out), {feature},
                        [b, c, plane](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        for (int bi = 0; bi < b; ++bi)
            for (int ci = 0; ci < c; ++ci) {
                double* gdst = g.data() + (static_cast<size_t>(bi) * c + ci) * plane;
                const double* gsrc = self.grad.data() + static_cast<size_t>(bi) * plane * c + ci;
                for (size_t p = 0; p < plane; ++p) gdst[p] += gsrc[p * c];
            }
    });
}

Tensor raster_unflatten(const Tensor& seq, const RasterDesc& desc) {
    const Shape want{desc.batch, desc.height * desc.width, desc.channels};
    if (seq.shape() != want) shape_mismatch("raster_unflatten", seq.shape(), want);
    const int b = desc.batch, c = desc.channels;
    const size_t plane = static_cast<size_t>(desc.height) * desc.width;
    std::vector<double> out(seq.data().size());
    const double* src = seq.data().data();
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            double* dst = out.data() + (static_cast<size_t>(bi) * c + ci) * plane;
            const double* col = src + static_cast<size_t>(bi) * plane * c + ci;
            for (size_t p = 0; p < plane; ++p) dst[p] = col[p * c];
        }
    return make_op_node("raster_unflatten", {b, c, desc.height, desc.width}, std::move(out),
                        {seq}, [b, c, plane](detail::Node& self) {
        auto& g = ensure_grad_buffer(*self.inputs[0]);
        for (int bi = 0; bi < b; ++bi)
            for (int ci = 0; ci < c; ++ci) {
                const double* gsrc = self.grad.data() + (static_cast<size_t>(bi) * c + ci) * plane;
                double* gcol = g.data() + static_cast<size_t>(bi) * plane * c + ci;
                for (size_t p = 0; p < plane; ++p) gcol[p * c] += gsrc[p];
            }
    });
}

}  // namespace ssmalign
