// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Prompt-conditioned alignment blocks. Both blocks concatenate the input
// with a prompt map and run a dual pipeline: a Mamba branch over the
// rasterized sequence (global context) next to a gated-conv branch (local
// context), fused back to the input width by a 1x1 conv. The image-aware
// block broadcasts one learnable prompt vector; the object-aware block
// derives a per-pixel prompt as a convex combination of fixed category
// prototypes. A serial variant (single pipe over the concatenated width)
// exists for parameter-efficiency comparison.

#pragma once

#include <cstdint>
#include <utility>

#include "ssmalign/rng.hpp"
#include "ssmalign/ssm.hpp"
#include "ssmalign/tensor.hpp"

namespace ssmalign {

enum class VariantKind { parallel, serial };

/// Runtime ablation switches for the dual pipeline. Parameters are untouched;
/// a disabled branch contributes zeros (parallel) or is skipped as identity
/// (serial), and a disabled prompt concatenates a zero map.
struct PipelineToggles {
    bool use_prompt = true;
    bool use_conv = true;
    bool use_ssm = true;
};

/// conv3x3 -> SiLU -> conv3x3, multiplied by a sigmoid(conv1x1) gate on the
/// block input. Shape-preserving; receptive field 5x5.
struct GatedConvParams {
    int channels = 0;
    Tensor conv1_w, conv1_b;  // [C,C,3,3],[C]
    Tensor conv2_w, conv2_b;  // [C,C,3,3],[C]
    Tensor gate_w, gate_b;    // [C,C,1,1],[C]

    std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix) const;
};

GatedConvParams make_gated_conv(int channels, Rng& rng);
Tensor gated_conv(const Tensor& x, const GatedConvParams& p);

/// Pipeline core shared by the image-aware and object-aware blocks.
/// parallel: concat(2C) -> {down_s -> mamba | down_c -> gated} each C/r,
///           fused 2(C/r) -> up -> C.
/// serial:   concat(2C) -> mamba(2C) -> gated(2C) -> up -> C.
struct DualPipelineParams {
    VariantKind kind = VariantKind::parallel;
    int channels = 0;  // C, block I/O width
    int inner = 0;     // C/r (parallel) or 2C (serial)
    Tensor down_s_w, down_s_b;  // parallel only: [inner,2C,1,1],[inner]
    Tensor down_c_w, down_c_b;  // parallel only
    MambaLayerParams mamba;     // width inner
    GatedConvParams gated;      // width inner
    Tensor up_w, up_b;          // [C, fused, 1, 1],[C]

    std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix) const;
};

/// Intermediate activations for receptive-field probing.
struct DualPipelineTrace {
    Tensor concat;  // [B,2C,H,W]
    Tensor z_s;     // scan branch output (parallel: [B,C/r,H,W])
    Tensor z_c;     // conv branch output
};

DualPipelineParams make_dual_pipeline(int channels, double reduction, VariantKind kind,
                                      int state_size, Rng& rng);

Tensor dual_pipeline_forward(const Tensor& f_in, const Tensor& prompt_map,
                             const DualPipelineParams& p, DualPipelineTrace* trace = nullptr,
                             const PipelineToggles& toggles = {});

/// Image-aware block: learnable C-vector prompt, broadcast over space.
struct IASSMParams {
    Tensor prompt;  // [C]
    DualPipelineParams pipe;

    std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix) const;
};

IASSMParams make_ia_ssm(int channels, double reduction, VariantKind kind, int state_size,
                        Rng& rng);
Tensor ia_ssm_forward(const Tensor& f_in, const IASSMParams& p,
                      DualPipelineTrace* trace = nullptr, const PipelineToggles& toggles = {});

/// Object-aware block: a 1x1 metanet scores K categories per pixel; softmax
/// weights mix fixed unit-norm prototype rows into a per-pixel prompt.
struct OASSMParams {
    int num_classes = 0;        // K
    Tensor metanet_w, metanet_b;  // [K,C,1,1],[K]
    Tensor prototypes;            // [K,C], fixed (requires_grad false)
    DualPipelineParams pipe;

    std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix) const;
};

OASSMParams make_oa_ssm(int channels, double reduction, int num_classes,
                        const Tensor& prototypes, VariantKind kind, int state_size, Rng& rng);

/// Per-pixel prompt v_O: [B,C,H,W]; every pixel is a convex combination of
/// prototype rows.
Tensor instance_prompt(const Tensor& f_in, const OASSMParams& p);

Tensor oa_ssm_forward(const Tensor& f_in, const OASSMParams& p,
                      DualPipelineTrace* trace = nullptr, const PipelineToggles& toggles = {});

/// Deterministic unit-norm K x C prototype rows with pairwise |cos| < 0.9,
/// enforced by rejection resampling (reported as an error if impossible).
Tensor make_prototypes(int num_classes, int channels, std::uint64_t seed);

/// Trainable scalar count over a named parameter list.
std::int64_t param_count(const std::vector<std::pair<std::string, Tensor>>& named);

/// Constructs an image-aware block of the given kind and reports its exact
/// trainable parameter count.
std::pair<IASSMParams, std::int64_t> build_variant(int channels, double reduction,
                                                   VariantKind kind, int state_size, Rng& rng);

}  // namespace ssmalign
