// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Adversarial domain alignment. Per-pixel discriminators minimize an MSE
// against the domain label (source 0, target 1) while a gradient-reversal
// layer feeds the negated gradient into the feature extractor; the literal
// signed loss form is available behind an option for study.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ssmalign/rng.hpp"
#include "ssmalign/tensor.hpp"

namespace ssmalign {

enum class DomainLabel { source, target };

/// conv1x1 C -> C/2, SiLU, conv1x1 C/2 -> 1, sigmoid. Output in (0,1).
struct DiscriminatorParams {
    int channels = 0;
    Tensor w1, b1;  // [C/2,C,1,1],[C/2]
    Tensor w2, b2;  // [1,C/2,1,1],[1]

    std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix) const;
};

DiscriminatorParams make_discriminator(int channels, Rng& rng);

/// Per-pixel domain probability, [B,1,H,W].
Tensor discriminator_forward(const Tensor& f, const DiscriminatorParams& p);

struct AdvLossOptions {
    double lambda_grl = 1.0;
    /// Apply the leading minus literally instead of the reversal-layer
    /// reading; flips the sign of the returned loss.
    bool literal_signed_form = false;
    int expected_sites = 3;
};

/// Mean over all entries of (p - y)^2 with y = 0 (source) or 1 (target).
Tensor domain_mse(const Tensor& probs, DomainLabel domain);

/// Image-level loss: per site, reversal layer -> discriminator ->
/// mean-over-pixels MSE; summed over sites. Site count is enforced.
Tensor image_adv_loss(const std::vector<Tensor>& features, DomainLabel domain,
                      const std::vector<DiscriminatorParams>& discs,
                      const AdvLossOptions& opts = {});

/// Object-level loss: as image_adv_loss but per level the squared error is
/// weighted by a constant foreground mask [B,1,H,W] and reduced as
/// sum(M * err) / max(1, sum(M)).
Tensor object_adv_loss(const std::vector<Tensor>& features, const std::vector<Tensor>& masks,
                       DomainLabel domain, const std::vector<DiscriminatorParams>& discs,
                       const AdvLossOptions& opts = {});

/// Discriminator-only probe used by the receptive-field study: batch-mean of
/// (1/HW) sum_ij (D(f)_ij - y)^2, no reversal layer.
Tensor pixelwise_mse_domain_loss(const Tensor& f, DomainLabel domain,
                                 const DiscriminatorParams& disc);

struct LossWeights {
    double lambda_i = 1.0;
    double lambda_o = 0.5;
};

struct LossReport {
    double cls_source = 0.0, cls_target = 0.0;
    double adv_image = 0.0, adv_object = 0.0, reg = 0.0;
    double lambda_i = 1.0, lambda_o = 0.5;
    double total = 0.0;

    static const char* csv_header();  // step,cls_s,cls_t,adv_i,adv_o,reg,total
    std::string csv_row(std::int64_t step) const;
};

/// total = cls_s + cls_t + lambda_i*adv_i + lambda_o*adv_o + reg, associated
/// left to right; the report mirrors the graph values bit for bit.
Tensor total_loss(const Tensor& cls_s, const Tensor& cls_t, const Tensor& adv_i,
                  const Tensor& adv_o, const Tensor& reg, const LossWeights& w = {},
                  LossReport* report = nullptr);

/// Plain SGD with momentum. Mutates leaf values between graphs and clears
/// the consumed gradients.
class Sgd {
public:
    Sgd(std::vector<Tensor> params, double lr, double momentum = 0.9);
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    void step();

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double lr_;
    double momentum_;
};

}  // namespace ssmalign
