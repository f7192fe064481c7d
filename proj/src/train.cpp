// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0

#include "ssmalign/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "ssmalign/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ssmalign {

namespace {

Tensor stack_scene_images(const Dataset& ds, const std::vector<int>& ids) {
    const int s = ds.image_size;
    std::vector<double> data;
    data.reserve(ids.size() * 3u * static_cast<std::size_t>(s) * static_cast<std::size_t>(s));
    for (int id : ids) {
        const auto& v = ds.scenes.at(static_cast<std::size_t>(id)).image.data();
        data.insert(data.end(), v.begin(), v.end());
    }
    return Tensor::from_data({static_cast<int>(ids.size()), 3, s, s}, std::move(data), false);
}

std::vector<DiscriminatorParams> pick_discs(const std::vector<DiscriminatorParams>& all,
                                            const std::vector<int>& index) {
    std::vector<DiscriminatorParams> out;
    out.reserve(index.size());
    for (int i : index) out.push_back(all.at(static_cast<std::size_t>(i)));
    return out;
}

std::ofstream open_csv(const std::string& path, const std::string& header) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << header << "\n";
    return f;
}

}  // namespace

double lr_schedule(const TrainConfig& tc, int epoch) {
    if (tc.warmup_epochs > 0 && epoch < tc.warmup_epochs)
        return tc.base_lr * static_cast<double>(epoch + 1) / tc.warmup_epochs;
    if (epoch < tc.decay_from_epoch || tc.epochs <= tc.decay_from_epoch) return tc.base_lr;
    return tc.base_lr * static_cast<double>(tc.epochs - epoch) /
           static_cast<double>(tc.epochs - tc.decay_from_epoch);
}

StepLosses train_step_losses(const DetectorParams& det, const PairedBatch& batch,
                             const Dataset& train_ds, const TrainConfig& tc) {
    const DetectorConfig& cfg = det.cfg;
    StepLosses sl;

    const DetectorActivations src = detector_forward(batch.source.images, det);
    const DetectionTargets src_tgt = build_targets(batch.source.labels, cfg);
    sl.cls_source = classification_loss(src.det, src_tgt);
    sl.reg = regression_loss(src.det, src_tgt);

    const DetectorActivations tgt = detector_forward(batch.target.images, det);
    if (tc.target_supervised) {
        std::vector<std::vector<GtObject>> labels;
        labels.reserve(batch.target.scene_ids.size());
        for (int id : batch.target.scene_ids)
            labels.push_back(train_ds.scenes.at(static_cast<std::size_t>(id)).objects);
        const DetectionTargets tt = build_targets(labels, cfg);
        sl.cls_target = classification_loss(tgt.det, tt);
        sl.reg = ops::add(sl.reg, regression_loss(tgt.det, tt));
    } else if (tc.use_pseudo_labels) {
        const auto pl = pseudo_labels(tgt.det, cfg.pseudo_conf_thresh);
        std::size_t n_boxes = 0;
        for (const auto& per_image : pl) n_boxes += per_image.size();
        // A batch with no confident detection yields no self-training signal;
        // an all-background target would push every target logit down instead.
        sl.cls_target = n_boxes == 0
                            ? Tensor::scalar(0.0)
                            : classification_loss(tgt.det, build_targets(pl, cfg));
    } else {
        sl.cls_target = Tensor::scalar(0.0);
    }

    const bool any_ia = !src.backbone.ia_features.empty();
    if (any_ia && tc.weights.lambda_i != 0.0) {
        AdvLossOptions opts;
        opts.lambda_grl = tc.grl_lambda;
        opts.literal_signed_form = tc.literal_adversarial;
        opts.expected_sites = static_cast<int>(src.backbone.ia_features.size());
        const auto discs = pick_discs(det.disc_image, src.backbone.ia_site_index);
        sl.adv_image =
            ops::add(image_adv_loss(src.backbone.ia_features, DomainLabel::source, discs, opts),
                     image_adv_loss(tgt.backbone.ia_features, DomainLabel::target, discs, opts));
    } else {
        sl.adv_image = Tensor::scalar(0.0);
    }

    const bool any_oa = !src.oa_features.empty();
    if (any_oa && tc.weights.lambda_o != 0.0) {
        AdvLossOptions opts;
        opts.lambda_grl = tc.grl_lambda;
        opts.literal_signed_form = tc.literal_adversarial;
        opts.expected_sites = static_cast<int>(src.oa_features.size());
        const auto discs = pick_discs(det.disc_object, src.oa_level_index);
        auto masks_for = [](const DetectorActivations& act) {
            std::vector<Tensor> masks;
            masks.reserve(act.oa_level_index.size());
            for (int level : act.oa_level_index)
                masks.push_back(foreground_mask(act.det.cls_logits.at(static_cast<std::size_t>(level))));
            return masks;
        };
        sl.adv_object = ops::add(
            object_adv_loss(src.oa_features, masks_for(src), DomainLabel::source, discs, opts),
            object_adv_loss(tgt.oa_features, masks_for(tgt), DomainLabel::target, discs, opts));
    } else {
        sl.adv_object = Tensor::scalar(0.0);
    }

    sl.total = total_loss(sl.cls_source, sl.cls_target, sl.adv_image, sl.adv_object, sl.reg,
                          tc.weights, &sl.report);
    return sl;
}

EvalResult evaluate_detector(const DetectorParams& det, const Dataset& ds, double conf_thresh,
                             int batch) {
    if (batch < 1) throw std::invalid_argument("evaluate_detector: batch must be >= 1");
    if (ds.scenes.empty()) throw std::invalid_argument("evaluate_detector: dataset is empty");
    if (ds.image_size != det.cfg.image_size || ds.num_classes != det.cfg.num_classes)
        throw std::invalid_argument("evaluate_detector: dataset geometry does not match detector");
    std::vector<std::vector<Detection>> preds;
    std::vector<std::vector<GtObject>> gts;
    preds.reserve(ds.scenes.size());
    gts.reserve(ds.scenes.size());
    for (std::size_t base = 0; base < ds.scenes.size(); base += static_cast<std::size_t>(batch)) {
        std::vector<int> ids;
        for (std::size_t i = base; i < std::min(base + static_cast<std::size_t>(batch), ds.scenes.size()); ++i)
            ids.push_back(static_cast<int>(i));
        const Tensor images = stack_scene_images(ds, ids);
        const DetectorActivations act = detector_forward(images, det);
        auto decoded = decode_detections(act.det, conf_thresh);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            preds.push_back(nms_per_class(std::move(decoded[i])));
            gts.push_back(ds.scenes[static_cast<std::size_t>(ids[i])].objects);
        }
    }
    return evaluate_map(preds, gts, det.cfg.num_classes);
}

TrainResult train_detector(DetectorParams& det, const Dataset& train_ds, const Dataset& val_ds,
                           const TrainConfig& tc) {
    if (tc.epochs < 1) throw std::invalid_argument("train_detector: epochs must be >= 1");
    if (tc.batch_per_domain < 1)
        throw std::invalid_argument("train_detector: batch_per_domain must be >= 1");
    if (train_ds.image_size != det.cfg.image_size || train_ds.num_classes != det.cfg.num_classes)
        throw std::invalid_argument("train_detector: training set geometry does not match detector");
    if (val_ds.image_size != det.cfg.image_size || val_ds.num_classes != det.cfg.num_classes)
        throw std::invalid_argument("train_detector: validation set geometry does not match detector");

    std::vector<Tensor> trainable;
    for (auto& [name, t] : det.named_params())
        if (t.requires_grad()) trainable.push_back(t);
    Sgd opt(trainable, tc.base_lr, tc.momentum);

    const bool logging = !tc.out_dir.empty();
    std::ofstream losses_csv, metrics_csv;
    if (logging) {
        fs::create_directories(tc.out_dir);
        losses_csv = open_csv(tc.out_dir + "/losses.csv", LossReport::csv_header());
        std::string header = "epoch,lr,map";
        for (int k = 0; k < det.cfg.num_classes; ++k) header += ",ap_" + std::to_string(k);
        header += ",cls_s,cls_t,adv_i,adv_o,reg,total";
        metrics_csv = open_csv(tc.out_dir + "/metrics.csv", header);
    }

    TrainResult res;
    long long step = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const double lr = lr_schedule(tc, epoch);
        opt.set_lr(lr);
        const std::uint64_t epoch_seed =
            tc.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1));
        BatchIter iter(train_ds, tc.batch_per_domain, epoch_seed);

        LossReport mean{};
        for (int s = 0; s < iter.steps(); ++s) {
            // Non-finite values surface either as a domain_error from an op's
            // input check or as a non-finite total; both abort the run and
            // leave the checkpoint from the last completed epoch in place.
            StepLosses sl;
            try {
                sl = train_step_losses(det, iter.at(s), train_ds, tc);
                if (!std::isfinite(sl.report.total)) throw std::domain_error("non-finite total");
                backward(sl.total);
            } catch (const std::domain_error&) {
                res.aborted_non_finite = true;
                return res;
            }
            opt.step();
            if (logging) losses_csv << sl.report.csv_row(step) << "\n";
            mean.cls_source += sl.report.cls_source;
            mean.cls_target += sl.report.cls_target;
            mean.adv_image += sl.report.adv_image;
            mean.adv_object += sl.report.adv_object;
            mean.reg += sl.report.reg;
            mean.total += sl.report.total;
            ++step;
        }
        const double n = std::max(1, iter.steps());
        mean.cls_source /= n;
        mean.cls_target /= n;
        mean.adv_image /= n;
        mean.adv_object /= n;
        mean.reg /= n;
        mean.total /= n;

        const bool do_eval =
            (epoch + 1) % std::max(1, tc.eval_every) == 0 || epoch == tc.epochs - 1;
        const EvalResult* eval_ptr = nullptr;
        EvalResult eval;
        if (do_eval) {
            eval = evaluate_detector(det, val_ds, tc.eval_conf_thresh, tc.eval_batch);
            res.evals.emplace_back(epoch, eval);
            res.final_map = eval.map;
            eval_ptr = &eval;
            if (logging) {
                std::string row = std::to_string(epoch) + "," + io::format_double(lr) + "," +
                                  io::format_double(eval.map);
                for (double ap : eval.per_class_ap) row += "," + io::format_double(ap);
                row += "," + io::format_double(mean.cls_source) + "," +
                       io::format_double(mean.cls_target) + "," +
                       io::format_double(mean.adv_image) + "," +
                       io::format_double(mean.adv_object) + "," + io::format_double(mean.reg) +
                       "," + io::format_double(mean.total);
                metrics_csv << row << "\n";
            }
        }
        if (logging) save_checkpoint(det, tc.out_dir + "/checkpoint", tc.config_echo_json);
        res.epochs_completed = epoch + 1;
        res.steps_done = step;
        if (tc.on_epoch) tc.on_epoch(epoch, lr, mean.total, eval_ptr);
    }
    return res;
}

std::string detector_config_json(const DetectorConfig& cfg) {
    json j;
    j["image_size"] = cfg.image_size;
    j["num_classes"] = cfg.num_classes;
    j["c3_width"] = cfg.c3_width;
    j["c4_width"] = cfg.c4_width;
    j["c5_width"] = cfg.c5_width;
    j["pyramid_width"] = cfg.pyramid_width;
    j["state_size"] = cfg.state_size;
    j["reduction"] = cfg.reduction;
    j["variant"] = cfg.variant == VariantKind::parallel ? "parallel" : "serial";
    j["ia_sites"] = {cfg.ia_sites[0], cfg.ia_sites[1], cfg.ia_sites[2]};
    j["oa_levels"] = {cfg.oa_levels[0], cfg.oa_levels[1], cfg.oa_levels[2]};
    j["use_prompt"] = cfg.pipeline.use_prompt;
    j["use_conv"] = cfg.pipeline.use_conv;
    j["use_ssm"] = cfg.pipeline.use_ssm;
    j["prototype_seed"] = cfg.prototype_seed;
    j["pseudo_conf_thresh"] = cfg.pseudo_conf_thresh;
    return j.dump();
}

DetectorConfig detector_config_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("detector config is not valid JSON: ") + e.what());
    }
    DetectorConfig cfg;
    try {
        cfg.image_size = j.at("image_size").get<int>();
        cfg.num_classes = j.at("num_classes").get<int>();
        cfg.c3_width = j.at("c3_width").get<int>();
        cfg.c4_width = j.at("c4_width").get<int>();
        cfg.c5_width = j.at("c5_width").get<int>();
        cfg.pyramid_width = j.at("pyramid_width").get<int>();
        cfg.state_size = j.at("state_size").get<int>();
        cfg.reduction = j.at("reduction").get<double>();
        const std::string variant = j.at("variant").get<std::string>();
        if (variant == "parallel")
            cfg.variant = VariantKind::parallel;
        else if (variant == "serial")
            cfg.variant = VariantKind::serial;
        else
            throw std::runtime_error("unknown variant '" + variant + "'");
        for (int i = 0; i < 3; ++i) {
            cfg.ia_sites[static_cast<std::size_t>(i)] =
                j.at("ia_sites").at(static_cast<std::size_t>(i)).get<bool>();
            cfg.oa_levels[static_cast<std::size_t>(i)] =
                j.at("oa_levels").at(static_cast<std::size_t>(i)).get<bool>();
        }
        cfg.pipeline.use_prompt = j.at("use_prompt").get<bool>();
        cfg.pipeline.use_conv = j.at("use_conv").get<bool>();
        cfg.pipeline.use_ssm = j.at("use_ssm").get<bool>();
        cfg.prototype_seed = j.at("prototype_seed").get<std::uint64_t>();
        cfg.pseudo_conf_thresh = j.at("pseudo_conf_thresh").get<double>();
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("detector config is missing fields: ") + e.what());
    }
    return cfg;
}

void save_checkpoint(const DetectorParams& det, const std::string& dir,
                     const std::string& run_config_json) {
    json manifest;
    manifest["detector"] = json::parse(detector_config_json(det.cfg));
    if (!run_config_json.empty()) {
        try {
            manifest["run"] = json::parse(run_config_json);
        } catch (const json::exception& e) {
            throw std::invalid_argument(std::string("run config echo is not valid JSON: ") +
                                        e.what());
        }
    }
    io::save_tensor_map(dir, det.named_params(), manifest.dump(1));
}

DetectorParams load_checkpoint(const std::string& dir, std::string* run_config_json) {
    std::string config_json;
    const auto entries = io::load_tensor_map(dir, &config_json);
    json manifest;
    try {
        manifest = json::parse(config_json);
    } catch (const json::exception& e) {
        throw std::runtime_error("checkpoint " + dir + " has no valid config: " + e.what());
    }
    if (!manifest.contains("detector"))
        throw std::runtime_error("checkpoint " + dir + " config lacks a detector section");
    DetectorParams det = [&] {
        Rng rng(0);
        return make_detector(detector_config_from_json(manifest["detector"].dump()), rng);
    }();
    if (run_config_json)
        *run_config_json = manifest.contains("run") ? manifest["run"].dump() : std::string();

    std::map<std::string, Tensor> fresh;
    for (auto& [name, t] : det.named_params()) fresh.emplace(name, t);
    std::size_t restored = 0;
    for (const auto& [name, loaded] : entries) {
        auto it = fresh.find(name);
        if (it == fresh.end())
            throw std::runtime_error("checkpoint " + dir + " has unknown tensor '" + name + "'");
        if (it->second.shape() != loaded.shape())
            throw std::runtime_error("checkpoint " + dir + " tensor '" + name +
                                     "' has mismatched shape");
        it->second.raw_data() = loaded.data();
        ++restored;
    }
    if (restored != fresh.size())
        throw std::runtime_error("checkpoint " + dir + " restored " + std::to_string(restored) +
                                 " of " + std::to_string(fresh.size()) + " tensors");
    return det;
}

}  // namespace ssmalign
