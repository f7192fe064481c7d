// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0

#include "ssmalign/alignment.hpp"

#include <cmath>
#include <stdexcept>

#include "ssmalign/io.hpp"

namespace ssmalign {

std::vector<std::pair<std::string, Tensor>> DiscriminatorParams::named_params(
    const std::string& prefix) const {
    return {{prefix + ".w1", w1}, {prefix + ".b1", b1},
            {prefix + ".w2", w2}, {prefix + ".b2", b2}};
}

DiscriminatorParams make_discriminator(int channels, Rng& rng) {
    if (channels < 2)
        throw std::invalid_argument("make_discriminator: need at least 2 channels");
    const int hidden = channels / 2;
    auto init = [&](Shape shape, double scale) {
        std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
        for (auto& e : v) e = rng.normal() * scale;
        return Tensor::from_data(std::move(shape), std::move(v), true);
    };
    DiscriminatorParams p;
    p.channels = channels;
    p.w1 = init({hidden, channels, 1, 1}, 1.0 / std::sqrt(static_cast<double>(channels)));
    p.b1 = Tensor::zeros({hidden}, true);
    p.w2 = init({1, hidden, 1, 1}, 1.0 / std::sqrt(static_cast<double>(hidden)));
    p.b2 = Tensor::zeros({1}, true);
    return p;
}

Tensor discriminator_forward(const Tensor& f, const DiscriminatorParams& p) {
    if (f.rank() != 4 || f.dim(1) != p.channels)
        throw std::invalid_argument("discriminator: input " + shape_str(f.shape()) +
                                    " does not match " + std::to_string(p.channels) +
                                    " channels");
    Tensor h = ops::silu(ops::conv2d(f, p.w1, p.b1, 1, 0));
    return ops::sigmoid(ops::conv2d(h, p.w2, p.b2, 1, 0));
}

Tensor domain_mse(const Tensor& probs, DomainLabel domain) {
    const double y = domain == DomainLabel::target ? 1.0 : 0.0;
    Tensor err = ops::add_scalar(probs, -y);
    return ops::scale(ops::sum_squares(err), 1.0 / static_cast<double>(probs.numel()));
}

Tensor image_adv_loss(const std::vector<Tensor>& features, DomainLabel domain,
                      const std::vector<DiscriminatorParams>& discs,
                      const AdvLossOptions& opts) {
    if (static_cast<int>(features.size()) != opts.expected_sites)
        throw std::invalid_argument("image_adv_loss: got " + std::to_string(features.size()) +
                                    " sites, expected " + std::to_string(opts.expected_sites));
    if (features.size() != discs.size())
        throw std::invalid_argument("image_adv_loss: " + std::to_string(features.size()) +
                                    " sites vs " + std::to_string(discs.size()) +
                                    " discriminators");
    Tensor total;
    for (size_t i = 0; i < features.size(); ++i) {
        // The literal form carries the leading minus itself; inserting the
        // reversal as well would cancel it on the feature side.
        Tensor in = opts.literal_signed_form ? features[i]
                                             : ops::grl(features[i], opts.lambda_grl);
        Tensor probs = discriminator_forward(in, discs[i]);
        Tensor site = domain_mse(probs, domain);
        total = total.defined() ? ops::add(total, site) : site;
    }
    return opts.literal_signed_form ? ops::scale(total, -1.0) : total;
}

Tensor object_adv_loss(const std::vector<Tensor>& features, const std::vector<Tensor>& masks,
                       DomainLabel domain, const std::vector<DiscriminatorParams>& discs,
                       const AdvLossOptions& opts) {
    if (features.size() != masks.size() || features.size() != discs.size())
        throw std::invalid_argument("object_adv_loss: " + std::to_string(features.size()) +
                                    " levels vs " + std::to_string(masks.size()) + " masks vs " +
                                    std::to_string(discs.size()) + " discriminators");
    if (features.empty()) throw std::invalid_argument("object_adv_loss: no levels");
    const double y = domain == DomainLabel::target ? 1.0 : 0.0;
    Tensor total;
    for (size_t i = 0; i < features.size(); ++i) {
        const Tensor& m = masks[i];
        if (m.requires_grad())
            throw std::invalid_argument("object_adv_loss: mask must be constant");
        Tensor in = opts.literal_signed_form ? features[i]
                                             : ops::grl(features[i], opts.lambda_grl);
        Tensor probs = discriminator_forward(in, discs[i]);
        if (m.shape() != probs.shape())
            shape_mismatch("object_adv_loss mask", m.shape(), probs.shape());
        double mask_sum = 0.0;
        for (double v : m.data()) mask_sum += v;
        Tensor err = ops::add_scalar(probs, -y);
        Tensor masked = ops::mul(ops::mul(err, err), m);
        Tensor level = ops::scale(ops::sum(masked), 1.0 / std::max(1.0, mask_sum));
        total = total.defined() ? ops::add(total, level) : level;
    }
    return opts.literal_signed_form ? ops::scale(total, -1.0) : total;
}

Tensor pixelwise_mse_domain_loss(const Tensor& f, DomainLabel domain,
                                 const DiscriminatorParams& disc) {
    return domain_mse(discriminator_forward(f, disc), domain);
}

const char* LossReport::csv_header() { return "step,cls_s,cls_t,adv_i,adv_o,reg,total"; }

std::string LossReport::csv_row(std::int64_t step) const {
    std::string row = std::to_string(step);
    for (double v : {cls_source, cls_target, adv_image, adv_object, reg, total}) {
        row += ',';
        row += io::format_double(v);
    }
    return row;
}

namespace {

void check_part(const char* name, const Tensor& t) {
    if (!t.defined() || t.numel() != 1)
        throw std::invalid_argument(std::string("total_loss: ") + name + " must be scalar");
    if (!std::isfinite(t.item()))
        throw std::invalid_argument(std::string("total_loss: non-finite ") + name);
}

}  // namespace

Tensor total_loss(const Tensor& cls_s, const Tensor& cls_t, const Tensor& adv_i,
                  const Tensor& adv_o, const Tensor& reg, const LossWeights& w,
                  LossReport* report) {
    check_part("cls_source", cls_s);
    check_part("cls_target", cls_t);
    check_part("adv_image", adv_i);
    check_part("adv_object", adv_o);
    check_part("reg", reg);
    Tensor total = ops::add(
        ops::add(ops::add(ops::add(cls_s, cls_t), ops::scale(adv_i, w.lambda_i)),
                 ops::scale(adv_o, w.lambda_o)),
        reg);
    if (report) {
        report->cls_source = cls_s.item();
        report->cls_target = cls_t.item();
        report->adv_image = adv_i.item();
        report->adv_object = adv_o.item();
        report->reg = reg.item();
        report->lambda_i = w.lambda_i;
        report->lambda_o = w.lambda_o;
        report->total = total.item();
    }
    return total;
}

Sgd::Sgd(std::vector<Tensor> params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) {
        if (!p.requires_grad())
            throw std::invalid_argument("Sgd: every parameter must require grad");
        velocity_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    }
}

void Sgd::step() {
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;  // parameter unused by this graph
        const auto& g = p.grad();
        auto& v = velocity_[i];
        auto& value = p.raw_data();
        for (size_t j = 0; j < v.size(); ++j) {
            v[j] = momentum_ * v[j] + g[j];
            value[j] -= lr_ * v[j];
        }
        p.zero_grad();
    }
}

}  // namespace ssmalign
