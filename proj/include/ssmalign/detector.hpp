// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Toy anchor-free single-stage detector with optional image-aware and
// object-aware state-space alignment blocks.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ssmalign/alignment.hpp"
#include "ssmalign/da_modules.hpp"
#include "ssmalign/geometry.hpp"
#include "ssmalign/rng.hpp"
#include "ssmalign/tensor.hpp"

namespace ssmalign {

/// 3x3 residual block: y = silu(x + conv2(silu(conv1(x)))), width preserved.
struct ResBlockParams {
    int channels = 0;
    Tensor c1_w, c1_b, c2_w, c2_b;
    std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix) const;
};

ResBlockParams make_resblock(int channels, Rng& rng);
Tensor resblock_forward(const Tensor& x, const ResBlockParams& p);

struct DetectorConfig {
    int image_size = 64;        ///< square input, must be divisible by 16
    int num_classes = 4;
    int c3_width = 16;          ///< backbone width at stride 4
    int c4_width = 32;          ///< backbone width at stride 8
    int c5_width = 64;          ///< backbone width at stride 16
    int pyramid_width = 32;     ///< shared FPN width
    int state_size = 8;         ///< SSM state dimension N
    double reduction = 2.0;     ///< channel reduction r inside alignment blocks
    VariantKind variant = VariantKind::parallel;
    std::array<bool, 3> ia_sites{true, true, true};   ///< IA block before C4 / before C5 / on C5
    std::array<bool, 3> oa_levels{true, true, true};  ///< OA block at P3 / P4 / P5
    PipelineToggles pipeline{};                       ///< prompt/conv/ssm switches inside blocks
    std::uint64_t prototype_seed = 0;
    double pseudo_conf_thresh = 0.8;
};

/// All trainable state of the detector plus its domain discriminators.
/// Alignment blocks are always constructed (so RNG consumption and
/// checkpoints are layout-stable) and skipped at runtime when toggled off.
struct DetectorParams {
    DetectorConfig cfg;
    // Stem: two stride-2 3x3 convs to stride 4, then a residual block.
    Tensor stem1_w, stem1_b;
    Tensor stem2_w, stem2_b;
    ResBlockParams res3;
    // Downsampling stages to stride 8 and 16.
    Tensor down4_w, down4_b;
    ResBlockParams res4;
    Tensor down5_w, down5_b;
    ResBlockParams res5;
    // Image-aware alignment blocks at the three insertion sites.
    IASSMParams ia1, ia2, ia3;
    // FPN 1x1 laterals onto the shared pyramid width.
    Tensor lat3_w, lat3_b;
    Tensor lat4_w, lat4_b;
    Tensor lat5_w, lat5_b;
    // Object-aware alignment block, shared across pyramid levels.
    OASSMParams oa;
    // Detection head, shared across levels.
    Tensor tower_w, tower_b;
    Tensor cls_w, cls_b;
    Tensor box_w, box_b;
    // Domain discriminators: one per IA site, one per pyramid level.
    std::vector<DiscriminatorParams> disc_image;
    std::vector<DiscriminatorParams> disc_object;

    std::vector<std::pair<std::string, Tensor>> named_params() const;
};

DetectorParams make_detector(const DetectorConfig& cfg, Rng& rng);

/// Total number of trainable scalars.
std::size_t detector_param_count(const DetectorParams& p);

struct BackboneFeatures {
    Tensor c3, c4, c5;        ///< backbone maps at strides 4/8/16
    Tensor p3, p4, p5;        ///< pyramid maps, all cfg.pyramid_width channels
    std::vector<Tensor> ia_features;  ///< outputs of the enabled IA blocks, site order
    std::vector<int> ia_site_index;   ///< which site each entry belongs to
};

/// Runs the backbone + FPN. Rejects inputs whose spatial size is not
/// divisible by 16 or whose channel count is not 3.
BackboneFeatures backbone_forward(const Tensor& image, const DetectorParams& p);

struct DetectionOutput {
    std::vector<Tensor> cls_logits;   ///< per level [B,K,H,W], levels P3,P4,P5
    std::vector<Tensor> box_offsets;  ///< per level [B,4,H,W]: (tx,ty,tw,th)
    std::vector<int> strides;         ///< {4,8,16}
    int image_size = 0;
    int num_classes = 0;
};

/// Runs the shared head over the pyramid. When `oa_features` is non-null it
/// receives the outputs of the enabled OA blocks (level order) for use by the
/// object-level adversarial loss.
DetectionOutput head_forward(const BackboneFeatures& f, const DetectorParams& p,
                             std::vector<Tensor>* oa_features = nullptr,
                             std::vector<int>* oa_level_index = nullptr);

struct DetectorActivations {
    BackboneFeatures backbone;
    DetectionOutput det;
    std::vector<Tensor> oa_features;
    std::vector<int> oa_level_index;
};

DetectorActivations detector_forward(const Tensor& image, const DetectorParams& p);

/// Per-pixel foreground indicator from classification logits: 1 where the
/// most confident class probability exceeds 0.5 (i.e. max logit > 0), else 0.
/// The result is a constant: no gradient flows through mask construction.
Tensor foreground_mask(const Tensor& cls_logits);

/// Dense box/class targets for one batch, built per pyramid level. A cell is
/// positive when its center lies inside a ground-truth box; the smallest such
/// box wins. Offsets are (dx/s, dy/s, log(w/(4s)), log(h/(4s))) with s the
/// level stride.
struct DetectionTargets {
    std::vector<Tensor> cls_targets;  ///< per level [B,K,H,W], 0/1 constants
    std::vector<Tensor> box_targets;  ///< per level [B,4,H,W] constants
    std::vector<Tensor> box_mask;     ///< per level [B,4,H,W], 1 at positive cells
};

DetectionTargets build_targets(const std::vector<std::vector<GtObject>>& gts,
                               const DetectorConfig& cfg);

/// Mean binary cross-entropy over every (cell, class) slot, summed over levels.
Tensor classification_loss(const DetectionOutput& out, const DetectionTargets& targets);

/// Smooth-L1 on box offsets at positive cells only (masked mean), summed over
/// levels. Zero when the batch has no positive cell.
Tensor regression_loss(const DetectionOutput& out, const DetectionTargets& targets);

/// Decodes every (cell, class) slot with sigmoid confidence above
/// `conf_thresh` into detections. Boxes are clamped to the image; degenerate
/// boxes are dropped. No suppression is applied.
std::vector<std::vector<Detection>> decode_detections(const DetectionOutput& out,
                                                      double conf_thresh);

/// Greedy per-class non-maximum suppression: keep the most confident box,
/// drop others of the same class with IoU > iou_thresh, repeat.
std::vector<Detection> nms_per_class(std::vector<Detection> dets, double iou_thresh = 0.5);

/// Self-training labels: decode, per-class greedy IoU-0.5 NMS, then keep
/// detections with confidence strictly above `conf_thresh` in (0,1).
std::vector<std::vector<GtObject>> pseudo_labels(const DetectionOutput& out,
                                                 double conf_thresh = 0.8);

struct EvalResult {
    double map = 0.0;
    std::vector<double> per_class_ap;  ///< AP per class; classes without GT excluded from map
    std::vector<bool> class_has_gt;
};

/// Mean average precision at a fixed IoU threshold with all-point
/// interpolation. Predictions are matched greedily in descending confidence,
/// one match per ground-truth object. Classes with no ground truth anywhere
/// are excluded from the mean; if no class has ground truth, mAP is 0.
EvalResult evaluate_map(const std::vector<std::vector<Detection>>& preds,
                        const std::vector<std::vector<GtObject>>& gts,
                        int num_classes, double iou_thresh = 0.5);

}  // namespace ssmalign
