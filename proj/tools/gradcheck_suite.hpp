// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification suite over every differentiable block, from
// the scan kernel up to the full detector step loss. Adversarial terms are
// checked in their literal signed form: the reversal layer is identity on
// values and negates gradients by design, so only the signed form admits a
// value-vs-gradient comparison. Shared by the CLI and the acceptance runner.

#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ssmalign/data_synth.hpp"
#include "ssmalign/train.hpp"

namespace ssmalign_tools {

struct BlockCheck {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 1e-4;
    bool pass = false;
};

namespace detail {

inline ssmalign::Tensor rand_tensor(ssmalign::Shape shape, ssmalign::Rng& rng,
                                    double scale = 1.0, bool rg = false) {
    std::vector<double> v(static_cast<size_t>(ssmalign::shape_numel(shape)));
    for (auto& x : v) x = rng.normal() * scale;
    return ssmalign::Tensor::from_data(std::move(shape), std::move(v), rg);
}

inline std::vector<ssmalign::Tensor> trainable(
    const std::vector<std::pair<std::string, ssmalign::Tensor>>& named) {
    std::vector<ssmalign::Tensor> out;
    for (const auto& [name, t] : named)
        if (t.requires_grad()) out.push_back(t);
    return out;
}

}  // namespace detail

/// Runs every block check once, in a fixed order. `corrupt_backward` adds a
/// value-only term (invisible to the graph) to the first block's objective;
/// the run must then fail, which exercises the suite's own alarm.
inline std::vector<BlockCheck> run_gradcheck_suite(bool corrupt_backward = false,
                                                   double tolerance = 1e-4) {
    using namespace ssmalign;
    using detail::rand_tensor;
    using detail::trainable;

    std::vector<BlockCheck> checks;
    auto record = [&](std::string name, double err) {
        checks.push_back({std::move(name), err, tolerance, err < tolerance});
    };

    {
        Rng rng(33);
        const int len = 5, d = 2, n = 3;
        auto x = rand_tensor({len, d}, rng, 1.0, true);
        std::vector<double> av(static_cast<size_t>(d) * n);
        for (auto& v : av) v = -0.2 - rng.uniform();
        auto a = Tensor::from_data({d, n}, std::move(av), true);
        auto b = rand_tensor({len, n}, rng, 1.0, true);
        auto c = rand_tensor({len, n}, rng, 1.0, true);
        std::vector<double> dv(static_cast<size_t>(len) * d);
        for (auto& v : dv) v = 0.3 + rng.uniform();
        auto delta = Tensor::from_data({len, d}, std::move(dv), true);
        auto f = [corrupt_backward](const std::vector<Tensor>& p) {
            Tensor out = ops::mean(selective_scan_core(p[0], p[1], p[2], p[3], p[4]));
            if (corrupt_backward) out = ops::add_scalar(out, 0.01 * p[0].at(0));
            return out;
        };
        record("selective_scan", finite_diff_check(f, {x, a, b, c, delta}, 1e-5));
    }

    {
        Rng rng(47);
        auto p = make_mamba_layer(3, 4, rng);
        auto x = rand_tensor({5, 3}, rng, 1.0, true);
        std::vector<Tensor> params = {x};
        for (auto& t : trainable(p.named_params("m"))) params.push_back(t);
        auto f = [&p](const std::vector<Tensor>& prm) { return ops::mean(mamba_layer(prm[0], p)); };
        record("mamba_layer", finite_diff_check(f, params, 1e-5));
    }

    for (auto kind : {VariantKind::parallel, VariantKind::serial}) {
        Rng rng(kind == VariantKind::parallel ? 10 : 13);
        auto p = make_ia_ssm(4, 2.0, kind, 3, rng);
        auto x = rand_tensor({1, 4, 2, 2}, rng, 1.0, true);
        std::vector<Tensor> params = {x};
        for (auto& t : trainable(p.named_params("ia"))) params.push_back(t);
        auto f = [&p](const std::vector<Tensor>& prm) {
            return ops::mean(ia_ssm_forward(prm[0], p));
        };
        record(kind == VariantKind::parallel ? "ia_ssm_parallel" : "ia_ssm_serial",
               finite_diff_check(f, params, 1e-5));
    }

    {
        Rng rng(11);
        auto proto = make_prototypes(3, 4, 6);
        auto p = make_oa_ssm(4, 2.0, 3, proto, VariantKind::parallel, 3, rng);
        auto x = rand_tensor({1, 4, 3, 3}, rng, 1.0, true);
        std::vector<Tensor> params = {x};
        for (auto& t : trainable(p.named_params("oa"))) params.push_back(t);
        auto f = [&p](const std::vector<Tensor>& prm) {
            return ops::mean(oa_ssm_forward(prm[0], p));
        };
        record("oa_ssm", finite_diff_check(f, params, 1e-5));
    }

    {
        Rng rng(21);
        std::vector<Tensor> feats;
        std::vector<DiscriminatorParams> discs;
        std::vector<Tensor> params;
        for (int i = 0; i < 3; ++i) {
            feats.push_back(rand_tensor({1, 4, 3, 3}, rng, 1.0, true));
            discs.push_back(make_discriminator(4, rng));
            params.push_back(feats.back());
            for (auto& t : trainable(discs.back().named_params("d"))) params.push_back(t);
        }
        AdvLossOptions opts;
        opts.literal_signed_form = true;
        auto f = [&](const std::vector<Tensor>&) {
            return image_adv_loss(feats, DomainLabel::target, discs, opts);
        };
        record("image_adv_loss", finite_diff_check(f, params, 1e-5));
    }

    {
        Rng rng(22);
        std::vector<Tensor> feats = {rand_tensor({1, 4, 3, 3}, rng, 1.0, true)};
        std::vector<DiscriminatorParams> discs = {make_discriminator(4, rng)};
        std::vector<Tensor> masks = {
            Tensor::from_data({1, 1, 3, 3}, {1, 0, 1, 1, 0, 0, 1, 1, 0})};
        std::vector<Tensor> params = {feats[0]};
        for (auto& t : trainable(discs[0].named_params("d"))) params.push_back(t);
        AdvLossOptions opts;
        opts.literal_signed_form = true;
        opts.expected_sites = 1;
        auto f = [&](const std::vector<Tensor>&) {
            return object_adv_loss(feats, masks, DomainLabel::source, discs, opts);
        };
        record("object_adv_loss", finite_diff_check(f, params, 1e-5));
    }

    {
        // End-to-end step loss on one source plus one target scene. A +1
        // classification bias keeps every location comfortably foreground,
        // so the constant adversarial masks cannot flip under probe steps,
        // without crushing the classification gradients into saturation.
        // Pseudo labels stay off: their targets are decoded from the current
        // weights, a dependence the graph deliberately treats as constant.
        SceneGenConfig g;
        g.image_size = 32;
        g.num_classes = 2;
        g.max_objects = 2;
        g.min_size = 6.0;
        g.max_size = 10.0;
        Dataset ds = make_dataset(g, {}, 1, 1, 400);

        DetectorConfig cfg;
        cfg.image_size = 32;
        cfg.num_classes = 2;
        cfg.c3_width = 2;
        cfg.c4_width = 2;
        cfg.c5_width = 4;
        cfg.pyramid_width = 4;
        cfg.state_size = 2;
        Rng rng(23);
        DetectorParams det = make_detector(cfg, rng);
        for (double& v : det.cls_b.raw_data()) v = 1.0;

        TrainConfig tc;
        tc.literal_adversarial = true;
        tc.use_pseudo_labels = false;

        const PairedBatch batch = BatchIter(ds, 1, 77).at(0);
        std::vector<Tensor> params = trainable(det.named_params());
        auto f = [&](const std::vector<Tensor>&) {
            return train_step_losses(det, batch, ds, tc).total;
        };
        // Step chosen so truncation (grows as eps^2) stays below the rounding
        // quantum |f| * ulp / eps; gradients under that noise over the
        // tolerance are consistent at this precision.
        const double eps_fd = 1e-4;
        const double noise = std::abs(f(params).item()) *
                             std::numeric_limits<double>::epsilon() / eps_fd;
        const double floor = std::max(1e-12, 8.0 * noise / tolerance);
        record("detector_step_loss", finite_diff_check(f, params, eps_fd, floor));
    }

    return checks;
}

}  // namespace ssmalign_tools
