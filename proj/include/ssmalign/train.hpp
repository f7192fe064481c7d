// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Domain-adaptive training loop: labeled source batches plus unlabeled target
// batches per step, adversarial feature alignment through whichever blocks
// are enabled, optional pseudo-label self-training, SGD with a warm-up /
// constant / linear-decay schedule, CSV logging and checkpointing.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ssmalign/alignment.hpp"
#include "ssmalign/data_synth.hpp"
#include "ssmalign/detector.hpp"

namespace ssmalign {

struct TrainConfig {
    std::uint64_t seed = 0;
    int epochs = 30;
    int batch_per_domain = 2;
    double base_lr = 1e-3;
    double momentum = 0.9;
    int warmup_epochs = 5;      ///< linear ramp over the first epochs
    int decay_from_epoch = 20;  ///< linear decay to 0 afterwards
    LossWeights weights{};
    double grl_lambda = 1.0;
    /// Verification/study only: compute the adversarial terms in the literal
    /// signed form instead of through the reversal layer. Gradients then
    /// agree with finite differences end to end; training uses the reversal.
    bool literal_adversarial = false;
    bool use_pseudo_labels = true;
    /// Sanity mode: ground-truth labels are used on both domains and target
    /// boxes join the regression loss. Overrides pseudo labels.
    bool target_supervised = false;
    double eval_conf_thresh = 0.05;
    int eval_batch = 8;
    int eval_every = 1;         ///< validate every n epochs (final epoch always)
    std::string out_dir;        ///< "" disables losses.csv/metrics.csv/checkpoint
    std::string config_echo_json;  ///< optional run config stored in the checkpoint
    std::function<void(int epoch, double lr, double mean_total, const EvalResult*)> on_epoch;
};

/// Learning rate at `epoch`: base*(epoch+1)/warmup during warm-up, base until
/// decay_from_epoch, then base*(epochs-epoch)/(epochs-decay_from_epoch).
double lr_schedule(const TrainConfig& tc, int epoch);

/// All loss terms for one paired batch, sharing one autodiff graph.
struct StepLosses {
    Tensor cls_source, cls_target, adv_image, adv_object, reg, total;
    LossReport report;
};

/// Forward + losses for one step. `train_ds` supplies ground-truth labels for
/// target scenes in supervised-sanity mode; it must be the dataset the batch
/// was drawn from.
StepLosses train_step_losses(const DetectorParams& det, const PairedBatch& batch,
                             const Dataset& train_ds, const TrainConfig& tc);

struct TrainResult {
    std::vector<std::pair<int, EvalResult>> evals;  ///< (epoch, target-val result)
    double final_map = 0.0;
    int epochs_completed = 0;
    long long steps_done = 0;
    bool aborted_non_finite = false;
};

/// Runs the full loop, mutating `det` in place. A non-finite total loss stops
/// training immediately; the checkpoint from the last completed epoch is kept.
TrainResult train_detector(DetectorParams& det, const Dataset& train_ds,
                           const Dataset& val_ds, const TrainConfig& tc);

/// Decode + per-class NMS over every scene, then mAP against the scene labels.
EvalResult evaluate_detector(const DetectorParams& det, const Dataset& ds,
                             double conf_thresh = 0.05, int batch = 8);

std::string detector_config_json(const DetectorConfig& cfg);
DetectorConfig detector_config_from_json(const std::string& json_text);

/// Writes every named detector tensor plus a manifest embedding the detector
/// config (and, when non-empty, `run_config_json` under "run").
void save_checkpoint(const DetectorParams& det, const std::string& dir,
                     const std::string& run_config_json = "");

/// Rebuilds the detector from the embedded config and restores every tensor
/// by name; missing, extra or reshaped entries are rejected.
DetectorParams load_checkpoint(const std::string& dir, std::string* run_config_json = nullptr);

}  // namespace ssmalign
