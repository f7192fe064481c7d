// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Anchor-free detector: CNN backbone with optional alignment blocks, FPN,
// shared head, dense target assignment, decoding, NMS and mAP evaluation.

#include "ssmalign/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ssmalign {
namespace {

constexpr int kStrides[3] = {4, 8, 16};
constexpr double kSizeRef = 4.0;  // reference box side = kSizeRef * stride

Tensor init_normal(Shape shape, double scale, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (auto& e : v) e = rng.normal() * scale;
    return Tensor::from_data(std::move(shape), std::move(v), true);
}

Tensor init_conv(int cout, int cin, int k, Rng& rng) {
    return init_normal({cout, cin, k, k}, 1.0 / std::sqrt(static_cast<double>(cin) * k * k), rng);
}

double stable_sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void append_named(std::vector<std::pair<std::string, Tensor>>& out,
                  std::vector<std::pair<std::string, Tensor>> more) {
    for (auto& kv : more) out.emplace_back(std::move(kv.first), std::move(kv.second));
}

void check_level_counts(const DetectionOutput& out) {
    if (out.cls_logits.size() != 3 || out.box_offsets.size() != 3 || out.strides.size() != 3)
        throw std::invalid_argument("detector: expected 3 pyramid levels");
}

}  // namespace

// ---------------------------------------------------------------------------
// Residual block.
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, Tensor>> ResBlockParams::named_params(
    const std::string& prefix) const {
    return {{prefix + ".c1_w", c1_w},
            {prefix + ".c1_b", c1_b},
            {prefix + ".c2_w", c2_w},
            {prefix + ".c2_b", c2_b}};
}

ResBlockParams make_resblock(int channels, Rng& rng) {
    if (channels < 1) throw std::invalid_argument("make_resblock: channels must be positive");
    ResBlockParams p;
    p.channels = channels;
    p.c1_w = init_conv(channels, channels, 3, rng);
    p.c1_b = Tensor::zeros({channels}, true);
    p.c2_w = init_conv(channels, channels, 3, rng);
    p.c2_b = Tensor::zeros({channels}, true);
    return p;
}

Tensor resblock_forward(const Tensor& x, const ResBlockParams& p) {
    Tensor h = ops::silu(ops::conv2d(x, p.c1_w, p.c1_b, 1, 1));
    h = ops::conv2d(h, p.c2_w, p.c2_b, 1, 1);
    return ops::silu(ops::add(x, h));
}

// ---------------------------------------------------------------------------
// Construction.
// ---------------------------------------------------------------------------

DetectorParams make_detector(const DetectorConfig& cfg, Rng& rng) {
    if (cfg.image_size < 16 || cfg.image_size % 16 != 0)
        throw std::invalid_argument("make_detector: image_size " +
                                    std::to_string(cfg.image_size) +
                                    " must be a positive multiple of 16");
    if (cfg.num_classes < 1)
        throw std::invalid_argument("make_detector: num_classes must be positive");
    if (cfg.c3_width < 2 || cfg.c4_width < 2 || cfg.c5_width < 2 || cfg.pyramid_width < 2)
        throw std::invalid_argument("make_detector: widths must be at least 2");
    DetectorParams p;
    p.cfg = cfg;
    p.stem1_w = init_conv(cfg.c3_width, 3, 3, rng);
    p.stem1_b = Tensor::zeros({cfg.c3_width}, true);
    p.stem2_w = init_conv(cfg.c3_width, cfg.c3_width, 3, rng);
    p.stem2_b = Tensor::zeros({cfg.c3_width}, true);
    p.res3 = make_resblock(cfg.c3_width, rng);
    p.down4_w = init_conv(cfg.c4_width, cfg.c3_width, 3, rng);
    p.down4_b = Tensor::zeros({cfg.c4_width}, true);
    p.res4 = make_resblock(cfg.c4_width, rng);
    p.down5_w = init_conv(cfg.c5_width, cfg.c4_width, 3, rng);
    p.down5_b = Tensor::zeros({cfg.c5_width}, true);
    p.res5 = make_resblock(cfg.c5_width, rng);
    p.ia1 = make_ia_ssm(cfg.c3_width, cfg.reduction, cfg.variant, cfg.state_size, rng);
    p.ia2 = make_ia_ssm(cfg.c4_width, cfg.reduction, cfg.variant, cfg.state_size, rng);
    p.ia3 = make_ia_ssm(cfg.c5_width, cfg.reduction, cfg.variant, cfg.state_size, rng);
    p.lat3_w = init_conv(cfg.pyramid_width, cfg.c3_width, 1, rng);
    p.lat3_b = Tensor::zeros({cfg.pyramid_width}, true);
    p.lat4_w = init_conv(cfg.pyramid_width, cfg.c4_width, 1, rng);
    p.lat4_b = Tensor::zeros({cfg.pyramid_width}, true);
    p.lat5_w = init_conv(cfg.pyramid_width, cfg.c5_width, 1, rng);
    p.lat5_b = Tensor::zeros({cfg.pyramid_width}, true);
    Tensor protos = make_prototypes(cfg.num_classes, cfg.pyramid_width, cfg.prototype_seed);
    p.oa = make_oa_ssm(cfg.pyramid_width, cfg.reduction, cfg.num_classes, protos, cfg.variant,
                       cfg.state_size, rng);
    p.tower_w = init_conv(cfg.pyramid_width, cfg.pyramid_width, 3, rng);
    p.tower_b = Tensor::zeros({cfg.pyramid_width}, true);
    p.cls_w = init_conv(cfg.num_classes, cfg.pyramid_width, 3, rng);
    // Start with low foreground probability so early masks and pseudo-label
    // sets are sparse.
    p.cls_b = Tensor::full({cfg.num_classes}, -2.0, true);
    p.box_w = init_conv(4, cfg.pyramid_width, 3, rng);
    p.box_b = Tensor::zeros({4}, true);
    p.disc_image.push_back(make_discriminator(cfg.c3_width, rng));
    p.disc_image.push_back(make_discriminator(cfg.c4_width, rng));
    p.disc_image.push_back(make_discriminator(cfg.c5_width, rng));
    for (int l = 0; l < 3; ++l) p.disc_object.push_back(make_discriminator(cfg.pyramid_width, rng));
    return p;
}

std::vector<std::pair<std::string, Tensor>> DetectorParams::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("stem1_w", stem1_w);
    out.emplace_back("stem1_b", stem1_b);
    out.emplace_back("stem2_w", stem2_w);
    out.emplace_back("stem2_b", stem2_b);
    append_named(out, res3.named_params("res3"));
    out.emplace_back("down4_w", down4_w);
    out.emplace_back("down4_b", down4_b);
    append_named(out, res4.named_params("res4"));
    out.emplace_back("down5_w", down5_w);
    out.emplace_back("down5_b", down5_b);
    append_named(out, res5.named_params("res5"));
    append_named(out, ia1.named_params("ia1"));
    append_named(out, ia2.named_params("ia2"));
    append_named(out, ia3.named_params("ia3"));
    out.emplace_back("lat3_w", lat3_w);
    out.emplace_back("lat3_b", lat3_b);
    out.emplace_back("lat4_w", lat4_w);
    out.emplace_back("lat4_b", lat4_b);
    out.emplace_back("lat5_w", lat5_w);
    out.emplace_back("lat5_b", lat5_b);
    append_named(out, oa.named_params("oa"));
    out.emplace_back("tower_w", tower_w);
    out.emplace_back("tower_b", tower_b);
    out.emplace_back("cls_w", cls_w);
    out.emplace_back("cls_b", cls_b);
    out.emplace_back("box_w", box_w);
    out.emplace_back("box_b", box_b);
    for (std::size_t i = 0; i < disc_image.size(); ++i)
        append_named(out, disc_image[i].named_params("disc_image" + std::to_string(i)));
    for (std::size_t i = 0; i < disc_object.size(); ++i)
        append_named(out, disc_object[i].named_params("disc_object" + std::to_string(i)));
    return out;
}

std::size_t detector_param_count(const DetectorParams& p) {
    return static_cast<std::size_t>(param_count(p.named_params()));
}

// ---------------------------------------------------------------------------
// Forward passes.
// ---------------------------------------------------------------------------

BackboneFeatures backbone_forward(const Tensor& image, const DetectorParams& p) {
    if (image.rank() != 4 || image.shape()[1] != 3)
        throw std::invalid_argument("backbone_forward: expected [B,3,S,S] input, got " +
                                    shape_str(image.shape()));
    const int h = image.shape()[2], w = image.shape()[3];
    if (h != w || h % 16 != 0 || h < 16)
        throw std::invalid_argument("backbone_forward: spatial size " + std::to_string(h) + "x" +
                                    std::to_string(w) +
                                    " must be square and divisible by 16");
    const DetectorConfig& cfg = p.cfg;
    BackboneFeatures f;
    Tensor x = ops::silu(ops::conv2d(image, p.stem1_w, p.stem1_b, 2, 1));
    x = ops::silu(ops::conv2d(x, p.stem2_w, p.stem2_b, 2, 1));
    f.c3 = resblock_forward(x, p.res3);
    Tensor a3 = f.c3;
    if (cfg.ia_sites[0]) {
        a3 = ia_ssm_forward(f.c3, p.ia1, nullptr, cfg.pipeline);
        f.ia_features.push_back(a3);
        f.ia_site_index.push_back(0);
    }
    f.c4 = resblock_forward(ops::silu(ops::conv2d(a3, p.down4_w, p.down4_b, 2, 1)), p.res4);
    Tensor a4 = f.c4;
    if (cfg.ia_sites[1]) {
        a4 = ia_ssm_forward(f.c4, p.ia2, nullptr, cfg.pipeline);
        f.ia_features.push_back(a4);
        f.ia_site_index.push_back(1);
    }
    f.c5 = resblock_forward(ops::silu(ops::conv2d(a4, p.down5_w, p.down5_b, 2, 1)), p.res5);
    Tensor a5 = f.c5;
    if (cfg.ia_sites[2]) {
        a5 = ia_ssm_forward(f.c5, p.ia3, nullptr, cfg.pipeline);
        f.ia_features.push_back(a5);
        f.ia_site_index.push_back(2);
    }
    f.p5 = ops::conv2d(a5, p.lat5_w, p.lat5_b, 1, 0);
    f.p4 = ops::add(ops::conv2d(f.c4, p.lat4_w, p.lat4_b, 1, 0), ops::upsample_nearest2x(f.p5));
    f.p3 = ops::add(ops::conv2d(f.c3, p.lat3_w, p.lat3_b, 1, 0), ops::upsample_nearest2x(f.p4));
    return f;
}

DetectionOutput head_forward(const BackboneFeatures& f, const DetectorParams& p,
                             std::vector<Tensor>* oa_features, std::vector<int>* oa_level_index) {
    const DetectorConfig& cfg = p.cfg;
    const Tensor levels[3] = {f.p3, f.p4, f.p5};
    DetectionOutput out;
    out.strides = {kStrides[0], kStrides[1], kStrides[2]};
    out.image_size = f.p3.shape()[2] * kStrides[0];
    out.num_classes = cfg.num_classes;
    for (int l = 0; l < 3; ++l) {
        Tensor h = levels[l];
        if (cfg.oa_levels[static_cast<std::size_t>(l)]) {
            h = oa_ssm_forward(h, p.oa, nullptr, p.cfg.pipeline);
            if (oa_features) oa_features->push_back(h);
            if (oa_level_index) oa_level_index->push_back(l);
        }
        Tensor t = ops::silu(ops::conv2d(h, p.tower_w, p.tower_b, 1, 1));
        out.cls_logits.push_back(ops::conv2d(t, p.cls_w, p.cls_b, 1, 1));
        out.box_offsets.push_back(ops::conv2d(t, p.box_w, p.box_b, 1, 1));
    }
    return out;
}

DetectorActivations detector_forward(const Tensor& image, const DetectorParams& p) {
    DetectorActivations act;
    act.backbone = backbone_forward(image, p);
    act.det = head_forward(act.backbone, p, &act.oa_features, &act.oa_level_index);
    return act;
}

// ---------------------------------------------------------------------------
// Masks and dense targets.
// ---------------------------------------------------------------------------

Tensor foreground_mask(const Tensor& cls_logits) {
    if (cls_logits.rank() != 4)
        throw std::invalid_argument("foreground_mask: expected [B,K,H,W], got " +
                                    shape_str(cls_logits.shape()));
    const auto& s = cls_logits.shape();
    const int b = s[0], k = s[1], h = s[2], w = s[3];
    const std::vector<double>& v = cls_logits.data();
    std::vector<double> m(static_cast<std::size_t>(b) * h * w, 0.0);
    for (int bi = 0; bi < b; ++bi)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double best = -std::numeric_limits<double>::infinity();
                for (int c = 0; c < k; ++c)
                    best = std::max(best, v[((static_cast<std::size_t>(bi) * k + c) * h + y) * w + x]);
                // max class probability > 0.5 iff max logit > 0 (strict).
                if (best > 0.0) m[(static_cast<std::size_t>(bi) * h + y) * w + x] = 1.0;
            }
    return Tensor::from_data({b, 1, h, w}, std::move(m), false);
}

DetectionTargets build_targets(const std::vector<std::vector<GtObject>>& gts,
                               const DetectorConfig& cfg) {
    const int b = static_cast<int>(gts.size());
    if (b < 1) throw std::invalid_argument("build_targets: empty batch");
    for (const auto& img : gts)
        for (const auto& g : img) {
            if (g.cls < 0 || g.cls >= cfg.num_classes)
                throw std::invalid_argument("build_targets: class id " + std::to_string(g.cls) +
                                            " outside [0," + std::to_string(cfg.num_classes) + ")");
            if (g.box.width() <= 0.0 || g.box.height() <= 0.0)
                throw std::invalid_argument("build_targets: ground-truth box has non-positive size");
        }
    DetectionTargets t;
    const int k = cfg.num_classes;
    for (int li = 0; li < 3; ++li) {
        const int s = kStrides[li];
        const int hw = cfg.image_size / s;
        std::vector<double> cls(static_cast<std::size_t>(b) * k * hw * hw, 0.0);
        std::vector<double> box(static_cast<std::size_t>(b) * 4 * hw * hw, 0.0);
        std::vector<double> mask(box.size(), 0.0);
        for (int bi = 0; bi < b; ++bi)
            for (int y = 0; y < hw; ++y)
                for (int x = 0; x < hw; ++x) {
                    const double cx = (x + 0.5) * s, cy = (y + 0.5) * s;
                    int best = -1;
                    double best_area = std::numeric_limits<double>::infinity();
                    for (std::size_t gi = 0; gi < gts[bi].size(); ++gi) {
                        const Box& bx = gts[bi][gi].box;
                        if (bx.contains(cx, cy) && bx.area() < best_area) {
                            best = static_cast<int>(gi);
                            best_area = bx.area();
                        }
                    }
                    if (best < 0) continue;
                    const GtObject& g = gts[bi][static_cast<std::size_t>(best)];
                    cls[((static_cast<std::size_t>(bi) * k + g.cls) * hw + y) * hw + x] = 1.0;
                    const double tv[4] = {(g.box.cx() - cx) / s, (g.box.cy() - cy) / s,
                                          std::log(g.box.width() / (kSizeRef * s)),
                                          std::log(g.box.height() / (kSizeRef * s))};
                    for (int c = 0; c < 4; ++c) {
                        const std::size_t idx =
                            ((static_cast<std::size_t>(bi) * 4 + c) * hw + y) * hw + x;
                        box[idx] = tv[c];
                        mask[idx] = 1.0;
                    }
                }
        t.cls_targets.push_back(Tensor::from_data({b, k, hw, hw}, std::move(cls), false));
        t.box_targets.push_back(Tensor::from_data({b, 4, hw, hw}, std::move(box), false));
        t.box_mask.push_back(Tensor::from_data({b, 4, hw, hw}, std::move(mask), false));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

Tensor classification_loss(const DetectionOutput& out, const DetectionTargets& targets) {
    check_level_counts(out);
    if (targets.cls_targets.size() != out.cls_logits.size())
        throw std::invalid_argument("classification_loss: level count mismatch");
    Tensor total;
    for (std::size_t l = 0; l < out.cls_logits.size(); ++l) {
        const Tensor& x = out.cls_logits[l];
        const Tensor& y = targets.cls_targets[l];
        if (x.shape() != y.shape())
            throw std::invalid_argument("classification_loss: logits " + shape_str(x.shape()) +
                                        " vs targets " + shape_str(y.shape()));
        // Binary cross-entropy with logits: softplus(x) - x*y, averaged.
        Tensor bce = ops::mean(ops::add(ops::softplus(x), ops::scale(ops::mul(x, y), -1.0)));
        total = total.defined() ? ops::add(total, bce) : bce;
    }
    return total;
}

Tensor regression_loss(const DetectionOutput& out, const DetectionTargets& targets) {
    check_level_counts(out);
    if (targets.box_targets.size() != out.box_offsets.size() ||
        targets.box_mask.size() != out.box_offsets.size())
        throw std::invalid_argument("regression_loss: level count mismatch");
    Tensor total;
    for (std::size_t l = 0; l < out.box_offsets.size(); ++l) {
        const Tensor& x = out.box_offsets[l];
        if (x.shape() != targets.box_targets[l].shape())
            throw std::invalid_argument("regression_loss: offsets " + shape_str(x.shape()) +
                                        " vs targets " +
                                        shape_str(targets.box_targets[l].shape()));
        const std::vector<double>& mv = targets.box_mask[l].data();
        double denom = 0.0;
        for (double m : mv) denom += m;
        Tensor diff = ops::add(x, ops::scale(targets.box_targets[l], -1.0));
        Tensor masked = ops::mul(ops::smooth_l1(diff), targets.box_mask[l]);
        Tensor term = ops::scale(ops::sum(masked), 1.0 / std::max(1.0, denom));
        total = total.defined() ? ops::add(total, term) : term;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Decoding, suppression, pseudo labels.
// ---------------------------------------------------------------------------

std::vector<std::vector<Detection>> decode_detections(const DetectionOutput& out,
                                                      double conf_thresh) {
    check_level_counts(out);
    const int b = out.cls_logits[0].shape()[0];
    const double s_img = static_cast<double>(out.image_size);
    std::vector<std::vector<Detection>> result(static_cast<std::size_t>(b));
    for (std::size_t l = 0; l < out.cls_logits.size(); ++l) {
        const auto& cs = out.cls_logits[l].shape();
        const int k = cs[1], h = cs[2], w = cs[3];
        const std::vector<double>& logits = out.cls_logits[l].data();
        const std::vector<double>& off = out.box_offsets[l].data();
        const double s = static_cast<double>(out.strides[l]);
        for (int bi = 0; bi < b; ++bi)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    auto oat = [&](int c) {
                        return off[((static_cast<std::size_t>(bi) * 4 + c) * h + y) * w + x];
                    };
                    for (int c = 0; c < k; ++c) {
                        const double conf = stable_sigmoid_value(
                            logits[((static_cast<std::size_t>(bi) * k + c) * h + y) * w + x]);
                        if (!(conf > conf_thresh)) continue;
                        const double cx = (x + 0.5) * s + oat(0) * s;
                        const double cy = (y + 0.5) * s + oat(1) * s;
                        const double bw = kSizeRef * s * std::exp(oat(2));
                        const double bh = kSizeRef * s * std::exp(oat(3));
                        Box bx{cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh};
                        bx.x0 = std::clamp(bx.x0, 0.0, s_img);
                        bx.x1 = std::clamp(bx.x1, 0.0, s_img);
                        bx.y0 = std::clamp(bx.y0, 0.0, s_img);
                        bx.y1 = std::clamp(bx.y1, 0.0, s_img);
                        if (bx.width() <= 1e-9 || bx.height() <= 1e-9) continue;
                        result[static_cast<std::size_t>(bi)].push_back({bx, c, conf});
                    }
                }
    }
    return result;
}

std::vector<Detection> nms_per_class(std::vector<Detection> dets, double iou_thresh) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.conf > b.conf; });
    std::vector<bool> dead(dets.size(), false);
    std::vector<Detection> keep;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (dead[i]) continue;
        keep.push_back(dets[i]);
        for (std::size_t j = i + 1; j < dets.size(); ++j)
            if (!dead[j] && dets[j].cls == dets[i].cls && iou(dets[j].box, dets[i].box) > iou_thresh)
                dead[j] = true;
    }
    return keep;
}

std::vector<std::vector<GtObject>> pseudo_labels(const DetectionOutput& out, double conf_thresh) {
    if (!(conf_thresh > 0.0 && conf_thresh < 1.0))
        throw std::invalid_argument("pseudo_labels: conf_thresh must lie in (0,1)");
    auto decoded = decode_detections(out, 0.0);
    std::vector<std::vector<GtObject>> result(decoded.size());
    for (std::size_t i = 0; i < decoded.size(); ++i)
        for (const Detection& d : nms_per_class(std::move(decoded[i]), 0.5))
            if (d.conf > conf_thresh) result[i].push_back({d.box, d.cls});
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

EvalResult evaluate_map(const std::vector<std::vector<Detection>>& preds,
                        const std::vector<std::vector<GtObject>>& gts, int num_classes,
                        double iou_thresh) {
    if (preds.size() != gts.size())
        throw std::invalid_argument("evaluate_map: " + std::to_string(preds.size()) +
                                    " prediction lists vs " + std::to_string(gts.size()) +
                                    " ground-truth lists");
    if (num_classes < 1) throw std::invalid_argument("evaluate_map: num_classes must be positive");
    EvalResult res;
    res.per_class_ap.assign(static_cast<std::size_t>(num_classes), 0.0);
    res.class_has_gt.assign(static_cast<std::size_t>(num_classes), false);
    double ap_sum = 0.0;
    int ap_count = 0;
    for (int c = 0; c < num_classes; ++c) {
        int total_gt = 0;
        for (const auto& img : gts)
            for (const auto& g : img)
                if (g.cls == c) ++total_gt;
        if (total_gt == 0) continue;
        res.class_has_gt[static_cast<std::size_t>(c)] = true;
        struct Pred {
            double conf;
            std::size_t img;
            Box box;
        };
        std::vector<Pred> flat;
        for (std::size_t i = 0; i < preds.size(); ++i)
            for (const auto& d : preds[i])
                if (d.cls == c) flat.push_back({d.conf, i, d.box});
        std::stable_sort(flat.begin(), flat.end(),
                         [](const Pred& a, const Pred& b) { return a.conf > b.conf; });
        std::vector<std::vector<bool>> matched(gts.size());
        for (std::size_t i = 0; i < gts.size(); ++i) matched[i].assign(gts[i].size(), false);
        std::vector<double> prec(flat.size()), rec(flat.size());
        int tp = 0, fp = 0;
        for (std::size_t i = 0; i < flat.size(); ++i) {
            // Best-IoU unmatched ground truth of this class in the same image.
            double best_iou = 0.0;
            int best = -1;
            const auto& img_gts = gts[flat[i].img];
            for (std::size_t gi = 0; gi < img_gts.size(); ++gi) {
                if (img_gts[gi].cls != c || matched[flat[i].img][gi]) continue;
                const double v = iou(flat[i].box, img_gts[gi].box);
                if (v > best_iou) {
                    best_iou = v;
                    best = static_cast<int>(gi);
                }
            }
            if (best >= 0 && best_iou >= iou_thresh) {
                matched[flat[i].img][static_cast<std::size_t>(best)] = true;
                ++tp;
            } else {
                ++fp;
            }
            prec[i] = static_cast<double>(tp) / static_cast<double>(tp + fp);
            rec[i] = static_cast<double>(tp) / static_cast<double>(total_gt);
        }
        // All-point interpolation: integrate max-precision-to-the-right over
        // recall increments.
        double ap = 0.0, max_prec = 0.0;
        for (std::size_t i = flat.size(); i-- > 0;) {
            max_prec = std::max(max_prec, prec[i]);
            const double r_lo = (i == 0) ? 0.0 : rec[i - 1];
            if (rec[i] > r_lo) ap += (rec[i] - r_lo) * max_prec;
        }
        res.per_class_ap[static_cast<std::size_t>(c)] = ap;
        ap_sum += ap;
        ++ap_count;
    }
    res.map = (ap_count > 0) ? ap_sum / ap_count : 0.0;
    return res;
}

}  // namespace ssmalign
