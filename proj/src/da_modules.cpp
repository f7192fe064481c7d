// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0

#include "ssmalign/da_modules.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ssmalign {

namespace {

Tensor init_normal(Shape shape, double scale, Rng& rng) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& e : v) e = rng.normal() * scale;
    return Tensor::from_data(std::move(shape), std::move(v), true);
}

Tensor init_conv(int cout, int cin, int k, Rng& rng) {
    return init_normal({cout, cin, k, k}, 1.0 / std::sqrt(static_cast<double>(cin) * k * k), rng);
}

void check_channels(const char* what, const Tensor& f_in, int channels) {
    if (f_in.rank() != 4)
        throw std::invalid_argument(std::string(what) + ": need [B,C,H,W], got " +
                                    shape_str(f_in.shape()));
    if (f_in.dim(1) != channels)
        throw std::invalid_argument(std::string(what) + ": input " + shape_str(f_in.shape()) +
                                    " does not match block width " + std::to_string(channels));
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> GatedConvParams::named_params(
    const std::string& prefix) const {
    return {{prefix + ".conv1_w", conv1_w}, {prefix + ".conv1_b", conv1_b},
            {prefix + ".conv2_w", conv2_w}, {prefix + ".conv2_b", conv2_b},
            {prefix + ".gate_w", gate_w},   {prefix + ".gate_b", gate_b}};
}

GatedConvParams make_gated_conv(int channels, Rng& rng) {
    GatedConvParams p;
    p.channels = channels;
    p.conv1_w = init_conv(channels, channels, 3, rng);
    p.conv1_b = Tensor::zeros({channels}, true);
    p.conv2_w = init_conv(channels, channels, 3, rng);
    p.conv2_b = Tensor::zeros({channels}, true);
    p.gate_w = init_conv(channels, channels, 1, rng);
    p.gate_b = Tensor::zeros({channels}, true);
    return p;
}

Tensor gated_conv(const Tensor& x, const GatedConvParams& p) {
    check_channels("gated_conv", x, p.channels);
    Tensor main = ops::conv2d(ops::silu(ops::conv2d(x, p.conv1_w, p.conv1_b, 1, 1)),
                              p.conv2_w, p.conv2_b, 1, 1);
    Tensor gate = ops::sigmoid(ops::conv2d(x, p.gate_w, p.gate_b, 1, 0));
    return ops::mul(main, gate);
}

std::vector<std::pair<std::string, Tensor>> DualPipelineParams::named_params(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (kind == VariantKind::parallel) {
        out = {{prefix + ".down_s_w", down_s_w},
               {prefix + ".down_s_b", down_s_b},
               {prefix + ".down_c_w", down_c_w},
               {prefix + ".down_c_b", down_c_b}};
    }
    auto m = mamba.named_params(prefix + ".mamba");
    out.insert(out.end(), m.begin(), m.end());
    auto g = gated.named_params(prefix + ".gated");
    out.insert(out.end(), g.begin(), g.end());
    out.emplace_back(prefix + ".up_w", up_w);
    out.emplace_back(prefix + ".up_b", up_b);
    return out;
}

DualPipelineParams make_dual_pipeline(int channels, double reduction, VariantKind kind,
                                      int state_size, Rng& rng) {
    if (kind != VariantKind::parallel && kind != VariantKind::serial)
        throw std::invalid_argument("make_dual_pipeline: unknown variant kind");
    if (channels < 1) throw std::invalid_argument("make_dual_pipeline: need positive channels");
    DualPipelineParams p;
    p.kind = kind;
    p.channels = channels;
    if (kind == VariantKind::parallel) {
        if (!(reduction > 0.0))
            throw std::invalid_argument("make_dual_pipeline: reduction must be positive");
        const double q = static_cast<double>(channels) / reduction;
        if (q != std::floor(q) || q < 1.0)
            throw std::invalid_argument("make_dual_pipeline: channels " +
                                        std::to_string(channels) +
                                        " not divisible by reduction " + std::to_string(reduction));
        p.inner = static_cast<int>(q);
        p.down_s_w = init_conv(p.inner, 2 * channels, 1, rng);
        p.down_s_b = Tensor::zeros({p.inner}, true);
        p.down_c_w = init_conv(p.inner, 2 * channels, 1, rng);
        p.down_c_b = Tensor::zeros({p.inner}, true);
    } else {
        p.inner = 2 * channels;
    }
    p.mamba = make_mamba_layer(p.inner, state_size, rng);
    p.gated = make_gated_conv(p.inner, rng);
    const int fused = p.kind == VariantKind::parallel ? 2 * p.inner : p.inner;
    p.up_w = init_conv(channels, fused, 1, rng);
    p.up_b = Tensor::zeros({channels}, true);
    return p;
}

Tensor dual_pipeline_forward(const Tensor& f_in, const Tensor& prompt_map,
                             const DualPipelineParams& p, DualPipelineTrace* trace,
                             const PipelineToggles& toggles) {
    check_channels("dual_pipeline", f_in, p.channels);
    if (prompt_map.shape() != f_in.shape())
        shape_mismatch("dual_pipeline prompt", prompt_map.shape(), f_in.shape());

    Tensor f = ops::concat_channel(f_in, prompt_map);
    if (trace) trace->concat = f;

    const auto& fs = f_in.shape();
    Tensor fused;
    if (p.kind == VariantKind::parallel) {
        Tensor z_s, z_c;
        if (toggles.use_ssm) {
            Tensor f_s = ops::conv2d(f, p.down_s_w, p.down_s_b, 1, 0);
            RasterDesc desc;
            z_s = raster_unflatten(mamba_layer(raster_flatten(f_s, &desc), p.mamba), desc);
        } else {
            z_s = Tensor::zeros({fs[0], p.inner, fs[2], fs[3]});
        }
        if (toggles.use_conv) {
            Tensor f_c = ops::conv2d(f, p.down_c_w, p.down_c_b, 1, 0);
            z_c = gated_conv(f_c, p.gated);
        } else {
            z_c = Tensor::zeros({fs[0], p.inner, fs[2], fs[3]});
        }
        if (trace) {
            trace->z_s = z_s;
            trace->z_c = z_c;
        }
        fused = ops::concat_channel(z_s, z_c);
    } else {
        Tensor z_s = f;
        if (toggles.use_ssm) {
            RasterDesc desc;
            z_s = raster_unflatten(mamba_layer(raster_flatten(f, &desc), p.mamba), desc);
        }
        Tensor z_c = toggles.use_conv ? gated_conv(z_s, p.gated) : z_s;
        if (trace) {
            trace->z_s = z_s;
            trace->z_c = z_c;
        }
        fused = z_c;
    }
    return ops::conv2d(fused, p.up_w, p.up_b, 1, 0);
}

std::vector<std::pair<std::string, Tensor>> IASSMParams::named_params(
    const std::string& prefix) const {
    auto out = pipe.named_params(prefix + ".pipe");
    out.emplace_back(prefix + ".prompt", prompt);
    return out;
}

IASSMParams make_ia_ssm(int channels, double reduction, VariantKind kind, int state_size,
                        Rng& rng) {
    IASSMParams p;
    p.pipe = make_dual_pipeline(channels, reduction, kind, state_size, rng);
    p.prompt = init_normal({channels}, 0.1, rng);
    return p;
}

Tensor ia_ssm_forward(const Tensor& f_in, const IASSMParams& p, DualPipelineTrace* trace,
                      const PipelineToggles& toggles) {
    check_channels("ia_ssm", f_in, p.pipe.channels);
    Tensor prompt_map = toggles.use_prompt
                            ? ops::broadcast(p.prompt, f_in.dim(0), f_in.dim(2), f_in.dim(3))
                            : Tensor::zeros(f_in.shape());
    return dual_pipeline_forward(f_in, prompt_map, p.pipe, trace, toggles);
}

std::vector<std::pair<std::string, Tensor>> OASSMParams::named_params(
    const std::string& prefix) const {
    auto out = pipe.named_params(prefix + ".pipe");
    out.emplace_back(prefix + ".metanet_w", metanet_w);
    out.emplace_back(prefix + ".metanet_b", metanet_b);
    // Fixed anchors ride along in checkpoints but carry no gradient.
    out.emplace_back(prefix + ".prototypes", prototypes);
    return out;
}

OASSMParams make_oa_ssm(int channels, double reduction, int num_classes,
                        const Tensor& prototypes, VariantKind kind, int state_size, Rng& rng) {
    if (num_classes < 1) throw std::invalid_argument("make_oa_ssm: need at least one class");
    if (prototypes.rank() != 2 || prototypes.dim(0) != num_classes ||
        prototypes.dim(1) != channels)
        throw std::invalid_argument("make_oa_ssm: prototypes " + shape_str(prototypes.shape()) +
                                    " do not match K=" + std::to_string(num_classes) +
                                    ", C=" + std::to_string(channels));
    if (prototypes.requires_grad())
        throw std::invalid_argument("make_oa_ssm: prototypes must be fixed (no grad)");
    OASSMParams p;
    p.num_classes = num_classes;
    p.metanet_w = init_conv(num_classes, channels, 1, rng);
    p.metanet_b = Tensor::zeros({num_classes}, true);
    p.prototypes = prototypes;
    p.pipe = make_dual_pipeline(channels, reduction, kind, state_size, rng);
    return p;
}

Tensor instance_prompt(const Tensor& f_in, const OASSMParams& p) {
    check_channels("instance_prompt", f_in, p.pipe.channels);
    if (p.metanet_w.dim(0) != p.prototypes.dim(0))
        throw std::invalid_argument("instance_prompt: metanet emits " +
                                    std::to_string(p.metanet_w.dim(0)) + " classes, prototypes " +
                                    std::to_string(p.prototypes.dim(0)));
    Tensor logits = ops::conv2d(f_in, p.metanet_w, p.metanet_b, 1, 0);  // [B,K,H,W]
    Tensor weights = ops::softmax_channel(logits);
    // v_O[b,:,h,w] = sum_k W[b,k,h,w] E[k,:], expressed as a fixed 1x1 conv
    // with kernel [C,K,1,1] = E transposed.
    const int k = p.num_classes, c = p.pipe.channels;
    std::vector<double> w(static_cast<size_t>(c) * k);
    for (int ci = 0; ci < c; ++ci)
        for (int ki = 0; ki < k; ++ki)
            w[static_cast<size_t>(ci) * k + ki] = p.prototypes.at(ki * c + ci);
    Tensor proto_conv = Tensor::from_data({c, k, 1, 1}, std::move(w));
    return ops::conv2d(weights, proto_conv, Tensor{}, 1, 0);
}

Tensor oa_ssm_forward(const Tensor& f_in, const OASSMParams& p, DualPipelineTrace* trace,
                      const PipelineToggles& toggles) {
    Tensor prompt_map =
        toggles.use_prompt ? instance_prompt(f_in, p) : Tensor::zeros(f_in.shape());
    if (!toggles.use_prompt) check_channels("oa_ssm", f_in, p.pipe.channels);
    return dual_pipeline_forward(f_in, prompt_map, p.pipe, trace, toggles);
}

Tensor make_prototypes(int num_classes, int channels, std::uint64_t seed) {
    if (num_classes < 1 || channels < 1)
        throw std::invalid_argument("make_prototypes: K and C must be positive");
    Rng rng(seed);
    std::vector<double> rows(static_cast<size_t>(num_classes) * channels);
    for (int k = 0; k < num_classes; ++k) {
        int attempts = 0;
        for (;;) {
            if (++attempts > 1000)
                throw std::runtime_error("make_prototypes: cannot separate " +
                                         std::to_string(num_classes) + " rows in " +
                                         std::to_string(channels) +
                                         " dims below |cos| 0.9 after 1000 resamples");
            double norm2 = 0.0;
            std::vector<double> row(static_cast<size_t>(channels));
            for (auto& v : row) {
                v = rng.normal();
                norm2 += v * v;
            }
            if (norm2 == 0.0) continue;
            const double inv = 1.0 / std::sqrt(norm2);
            for (auto& v : row) v *= inv;
            bool separated = true;
            for (int j = 0; j < k && separated; ++j) {
                double cos = 0.0;
                for (int c = 0; c < channels; ++c)
                    cos += row[static_cast<size_t>(c)] *
                           rows[static_cast<size_t>(j) * channels + c];
                if (std::abs(cos) >= 0.9) separated = false;
            }
            if (!separated) continue;
            std::copy(row.begin(), row.end(),
                      rows.begin() + static_cast<size_t>(k) * channels);
            break;
        }
    }
    return Tensor::from_data({num_classes, channels}, std::move(rows));
}

std::int64_t param_count(const std::vector<std::pair<std::string, Tensor>>& named) {
    std::int64_t n = 0;
    for (const auto& [name, t] : named)
        if (t.requires_grad()) n += t.numel();
    return n;
}

std::pair<IASSMParams, std::int64_t> build_variant(int channels, double reduction,
                                                   VariantKind kind, int state_size, Rng& rng) {
    IASSMParams block = make_ia_ssm(channels, reduction, kind, state_size, rng);
    return {block, param_count(block.named_params("block"))};
}

}  // namespace ssmalign
