// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Adversarial losses: reduction arithmetic, sign conventions, mask
// semantics, objective decomposition, reversal-driven dynamics.

#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "ssmalign/alignment.hpp"
#include "ssmalign/rng.hpp"

using namespace ssmalign;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double scale = 1.0, bool rg = false) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.normal() * scale;
    return Tensor::from_data(std::move(shape), std::move(v), rg);
}

// Saturates the output head so the sigmoid emits the constant `level`
// exactly (0, 1) or near-exactly (0.5).
void freeze_output(DiscriminatorParams& d, double level) {
    for (auto& v : d.w2.raw_data()) v = 0.0;
    d.b2.raw_data()[0] = level == 0.0 ? -1000.0 : (level == 1.0 ? 1000.0 : 0.0);
}

}  // namespace

TEST_CASE("reversal composition scales gradients by -lambda") {
    Rng rng(1);
    auto w = rand_tensor({3, 3}, rng);
    for (double lambda : {0.0, 1.0, 2.5}) {
        auto x0 = rand_tensor({2, 3}, rng, 1.0, true);
        auto x1 = Tensor::from_data({2, 3}, x0.data(), true);
        backward(ops::sum_squares(ops::linear(x0, w, Tensor{})));
        backward(ops::sum_squares(ops::linear(ops::grl(x1, lambda), w, Tensor{})));
        for (size_t i = 0; i < x0.grad().size(); ++i)
            CHECK(x1.grad()[i] == doctest::Approx(-lambda * x0.grad()[i]).epsilon(1e-12));
    }
}

TEST_CASE("discriminator output lies in (0,1)") {
    Rng rng(2);
    auto d = make_discriminator(8, rng);
    auto f = rand_tensor({2, 8, 4, 4}, rng, 3.0);
    auto probs = discriminator_forward(f, d);
    CHECK(probs.shape() == Shape{2, 1, 4, 4});
    for (std::int64_t i = 0; i < probs.numel(); ++i) {
        CHECK(probs.at(i) > 0.0);
        CHECK(probs.at(i) < 1.0);
    }
}

TEST_CASE("image-level loss closed forms") {
    Rng rng(3);
    std::vector<Tensor> feats;
    std::vector<DiscriminatorParams> discs;
    for (int i = 0; i < 3; ++i) {
        feats.push_back(rand_tensor({2, 4, 3, 3}, rng));
        discs.push_back(make_discriminator(4, rng));
    }

    for (auto& d : discs) freeze_output(d, 0.0);
    CHECK(image_adv_loss(feats, DomainLabel::source, discs).item() == 0.0);

    for (auto& d : discs) freeze_output(d, 0.5);
    CHECK(image_adv_loss(feats, DomainLabel::source, discs).item() ==
          doctest::Approx(0.75).epsilon(1e-12));
    CHECK(image_adv_loss(feats, DomainLabel::target, discs).item() ==
          doctest::Approx(0.75).epsilon(1e-12));

    for (auto& d : discs) freeze_output(d, 1.0);
    CHECK(image_adv_loss(feats, DomainLabel::source, discs).item() ==
          doctest::Approx(3.0).epsilon(1e-12));  // 1.0 per site

    AdvLossOptions literal;
    literal.literal_signed_form = true;
    CHECK(image_adv_loss(feats, DomainLabel::source, discs, literal).item() ==
          doctest::Approx(-3.0).epsilon(1e-12));

    std::vector<Tensor> two(feats.begin(), feats.begin() + 2);
    std::vector<DiscriminatorParams> two_d(discs.begin(), discs.begin() + 2);
    CHECK_THROWS_AS(image_adv_loss(two, DomainLabel::source, two_d), std::invalid_argument);
    AdvLossOptions opts;
    opts.expected_sites = 2;
    CHECK(image_adv_loss(two, DomainLabel::source, two_d, opts).item() ==
          doctest::Approx(2.0));
}

TEST_CASE("object-level loss mask semantics") {
    Rng rng(4);
    std::vector<Tensor> feats = {rand_tensor({1, 4, 2, 2}, rng, 1.0, true)};
    std::vector<DiscriminatorParams> discs = {make_discriminator(4, rng)};
    freeze_output(discs[0], 0.5);

    SUBCASE("all-zero mask annihilates loss and gradients") {
        std::vector<Tensor> mask = {Tensor::zeros({1, 1, 2, 2})};
        auto loss = object_adv_loss(feats, mask, DomainLabel::source, discs);
        CHECK(loss.item() == 0.0);
        backward(loss);
        REQUIRE(feats[0].has_grad());
        for (double g : feats[0].grad()) CHECK(g == 0.0);
    }

    SUBCASE("all-ones mask reduces to the image-level loss") {
        std::vector<Tensor> mask = {Tensor::full({1, 1, 2, 2}, 1.0)};
        AdvLossOptions opts;
        opts.expected_sites = 1;
        auto lo = object_adv_loss(feats, mask, DomainLabel::target, discs);
        auto li = image_adv_loss(feats, DomainLabel::target, discs, opts);
        CHECK(lo.item() == li.item());
    }

    SUBCASE("single masked pixel") {
        auto m = Tensor::from_data({1, 1, 2, 2}, {0.0, 0.0, 1.0, 0.0});
        auto loss = object_adv_loss(feats, {m}, DomainLabel::source, discs);
        CHECK(loss.item() == doctest::Approx(0.25).epsilon(1e-12));
    }

    SUBCASE("shape and constancy violations are rejected") {
        std::vector<Tensor> bad = {Tensor::zeros({1, 1, 3, 3})};
        CHECK_THROWS_AS(object_adv_loss(feats, bad, DomainLabel::source, discs),
                        std::invalid_argument);
        std::vector<Tensor> grad_mask = {Tensor::zeros({1, 1, 2, 2}, true)};
        CHECK_THROWS_AS(object_adv_loss(feats, grad_mask, DomainLabel::source, discs),
                        std::invalid_argument);
    }
}

TEST_CASE("pixel MSE probe closed forms") {
    CHECK(domain_mse(Tensor::zeros({1, 1, 2, 2}), DomainLabel::source).item() == 0.0);
    CHECK(domain_mse(Tensor::full({1, 1, 2, 2}, 1.0), DomainLabel::target).item() == 0.0);
    CHECK(domain_mse(Tensor::full({1, 1, 2, 2}, 0.5), DomainLabel::source).item() ==
          doctest::Approx(0.25).epsilon(1e-12));
    auto d = Tensor::from_data({1, 1, 2, 2}, {0.0, 1.0, 0.0, 1.0});
    CHECK(domain_mse(d, DomainLabel::target).item() == doctest::Approx(0.5).epsilon(1e-12));

    Rng rng(5);
    auto disc = make_discriminator(4, rng);
    freeze_output(disc, 0.5);
    auto f = rand_tensor({2, 4, 3, 3}, rng);
    CHECK(pixelwise_mse_domain_loss(f, DomainLabel::source, disc).item() ==
          doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("objective decomposition is exact") {
    auto zero = Tensor::scalar(0.0);
    CHECK(total_loss(zero, zero, zero, zero, zero).item() == 0.0);

    auto one = Tensor::scalar(1.0);
    LossReport rep;
    auto t = total_loss(one, one, one, one, one, {}, &rep);
    CHECK(t.item() == doctest::Approx(4.5).epsilon(1e-15));
    CHECK(rep.total == t.item());

    Rng rng(6);
    double parts[5];
    for (auto& p : parts) p = rng.normal();
    auto cs = Tensor::scalar(parts[0]), ct = Tensor::scalar(parts[1]);
    auto ai = Tensor::scalar(parts[2]), ao = Tensor::scalar(parts[3]);
    auto rg = Tensor::scalar(parts[4]);
    LossReport r2;
    auto t2 = total_loss(cs, ct, ai, ao, rg, {}, &r2);
    const double want = ((((parts[0] + parts[1]) + 1.0 * parts[2]) + 0.5 * parts[3]) + parts[4]);
    CHECK(t2.item() == want);  // bit-for-bit
    CHECK(r2.total == want);

    auto ao_leaf = Tensor::scalar(0.3, true);
    auto t3 = total_loss(cs, ct, ai, ao_leaf, rg);
    backward(t3);
    CHECK(ao_leaf.grad()[0] == 0.5);
    auto f = [&](const std::vector<Tensor>& p) {
        return total_loss(cs, ct, ai, p[0], rg);
    };
    CHECK(finite_diff_check(f, {Tensor::scalar(0.3, true)}, 1e-5) < 1e-9);

    auto bad = Tensor::scalar(std::nan(""));
    CHECK_THROWS_WITH_AS(total_loss(cs, ct, bad, ao, rg), "total_loss: non-finite adv_image",
                         std::invalid_argument);
}

TEST_CASE("loss report serializes one CSV row per step") {
    LossReport r;
    r.cls_source = 0.5;
    r.cls_target = 0.25;
    r.adv_image = 1.0;
    r.adv_object = 2.0;
    r.reg = 0.125;
    r.total = 4.875;
    CHECK(std::string(LossReport::csv_header()) == "step,cls_s,cls_t,adv_i,adv_o,reg,total");
    CHECK(r.csv_row(7) == "7,0.5,0.25,1,2,0.125,4.875");
}

TEST_CASE("discriminators alone separate fixed features") {
    Rng rng(7);
    std::vector<double> vs(16), vt(16);
    for (size_t i = 0; i < 16; ++i) {
        vs[i] = 1.0 + 0.2 * rng.normal();
        vt[i] = -1.0 + 0.2 * rng.normal();
    }
    auto fs = Tensor::from_data({8, 2, 1, 1}, std::move(vs));
    auto ft = Tensor::from_data({8, 2, 1, 1}, std::move(vt));
    auto disc = make_discriminator(2, rng);
    std::vector<Tensor> params;
    for (auto& [n, t] : disc.named_params("d")) params.push_back(t);
    Sgd opt(params, 0.5, 0.9);

    double first = 0.0, last = 0.0;
    for (int step = 0; step < 300; ++step) {
        auto loss = ops::add(domain_mse(discriminator_forward(fs, disc), DomainLabel::source),
                             domain_mse(discriminator_forward(ft, disc), DomainLabel::target));
        if (step == 0) first = loss.item();
        last = loss.item();
        backward(loss);
        opt.step();
    }
    CHECK(last < first);
    CHECK(last < 0.02);
}

TEST_CASE("reversal drives discriminator outputs to chance") {
    // Two-feature toy problem: a shared trainable 1x1 extractor maps fixed,
    // linearly separable inputs; reversal training must erase the separable
    // direction so the discriminator settles at chance.
    Rng rng(8);
    std::vector<double> vs(16), vt(16);
    for (size_t i = 0; i < 16; ++i) {
        vs[i] = 1.0 + 0.2 * rng.normal();
        vt[i] = -1.0 + 0.2 * rng.normal();
    }
    auto xs = Tensor::from_data({8, 2, 1, 1}, std::move(vs));
    auto xt = Tensor::from_data({8, 2, 1, 1}, std::move(vt));

    std::vector<double> wv(4);
    for (auto& v : wv) v = rng.normal() * 0.7;
    auto ext_w = Tensor::from_data({2, 2, 1, 1}, std::move(wv), true);
    auto ext_b = Tensor::zeros({2}, true);
    auto disc = make_discriminator(2, rng);

    std::vector<Tensor> params = {ext_w, ext_b};
    for (auto& [n, t] : disc.named_params("d")) params.push_back(t);
    Sgd opt(params, 0.1, 0.9);

    AdvLossOptions opts;
    opts.expected_sites = 1;
    auto mean_prob = [&](const Tensor& x) {
        auto probs = discriminator_forward(ops::conv2d(x, ext_w, ext_b, 1, 0), disc);
        double mean = 0.0;
        for (std::int64_t i = 0; i < probs.numel(); ++i) mean += probs.at(i);
        return mean / static_cast<double>(probs.numel());
    };

    for (int step = 0; step < 500; ++step) {
        auto fs = ops::conv2d(xs, ext_w, ext_b, 1, 0);
        auto ft = ops::conv2d(xt, ext_w, ext_b, 1, 0);
        auto loss = ops::add(image_adv_loss({fs}, DomainLabel::source, {disc}, opts),
                             image_adv_loss({ft}, DomainLabel::target, {disc}, opts));
        backward(loss);
        opt.step();
    }
    for (const auto& x : {xs, xt}) {
        const double mean = mean_prob(x);
        CHECK(mean > 0.4);
        CHECK(mean < 0.6);
    }
}

TEST_CASE("sgd with momentum minimizes a quadratic") {
    auto x = Tensor::from_data({2}, {5.0, -3.0}, true);
    Sgd opt({x}, 0.05, 0.9);
    for (int i = 0; i < 400; ++i) {
        backward(ops::sum_squares(x));
        opt.step();
    }
    CHECK(std::abs(x.at(0)) < 1e-8);
    CHECK(std::abs(x.at(1)) < 1e-8);
}
