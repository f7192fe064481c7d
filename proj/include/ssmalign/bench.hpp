// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Benchmark harness: scan-vs-attention complexity scaling on counted FLOPs
// (wall time as a secondary, noise-flagged signal), closed-form parameter
// accounting for the block variants, and the ablation-grid runner that
// produces the CSV study tables.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ssmalign/data_synth.hpp"
#include "ssmalign/detector.hpp"
#include "ssmalign/train.hpp"

namespace ssmalign {

/// Single-head softmax attention over an [L,D] sequence; the quadratic
/// comparator for the scan. Forward-only, exact FLOP bookkeeping.
struct AttentionParams {
    int dim = 0;
    Tensor wq, wk, wv;  // [D,D] each
};

AttentionParams make_attention(int dim, std::uint64_t seed);

/// y = softmax(Q K^T / sqrt(D)) V with Q/K/V = x W. When `weights_out` is
/// non-null it receives the [L,L] attention matrix.
Tensor quadratic_attention_reference(const Tensor& x, const AttentionParams& p,
                                     Tensor* weights_out = nullptr);

struct MechanismSeries {
    std::vector<std::uint64_t> flop_counts;  ///< per length, deterministic
    std::vector<double> wall_seconds;        ///< median of the repeats
    std::vector<bool> time_flagged;          ///< (max-min)/mean > 20% across repeats
    double flop_slope = 0.0;                 ///< least-squares log-log slope
};

struct ScalingReport {
    std::vector<int> lengths;
    int dim = 0;
    int state_size = 0;
    MechanismSeries scan, attention;
};

/// Runs both mechanisms at each length. Requires >= 4 strictly increasing
/// lengths, each >= 128. FLOPs are the primary signal; wall times are
/// reported but flagged when noisy.
ScalingReport measure_scaling(const std::vector<int>& lengths, int dim = 16, int state_size = 16,
                              int repeats = 5, std::uint64_t seed = 0);

/// scaling.csv: one row per length. Wall-time columns vary between runs;
/// FLOP and slope columns are deterministic.
/// Schema: length,scan_flops,scan_wall_s,scan_time_flagged,attention_flops,
///         attention_wall_s,attention_time_flagged,scan_flop_slope,
///         attention_flop_slope
void write_scaling_csv(const ScalingReport& report, const std::string& path);

/// Trainable scalar count over a named parameter list (alias of param_count).
std::int64_t count_params(const std::vector<std::pair<std::string, Tensor>>& named);

struct ParamsReport {
    int channels = 0;
    double reduction = 0.0;
    int state_size = 0;
    std::int64_t parallel_params = 0;
    std::int64_t serial_params = 0;
    double ratio = 0.0;  ///< parallel / serial
};

ParamsReport variant_param_report(int channels, double reduction, int state_size);

/// params.csv schema: block,params,ratio (ratio only on the parallel row).
void write_params_csv(const ParamsReport& report, const std::string& path);

/// One training configuration in an ablation grid. Geometry comes from the
/// grid's detector template; the cell overrides every toggle.
struct AblationCell {
    std::string name;
    std::array<bool, 3> ia_sites{false, false, false};
    std::array<bool, 3> oa_levels{false, false, false};
    PipelineToggles pipeline{};
    bool pseudo_labels = true;
    VariantKind variant = VariantKind::parallel;
};

struct AblationGrid {
    std::vector<AblationCell> cells;
    std::vector<std::uint64_t> seeds;
    DetectorConfig detector;  ///< geometry template; cell toggles override
    TrainConfig train;        ///< schedule template; seed/output overridden per run
};

struct CellResult {
    AblationCell cell;
    std::vector<double> seed_maps;  ///< completed seeds only, seed order kept
    bool failed = false;            ///< true when any seed run diverged
    double mean_map = 0.0;
    double std_map = 0.0;  ///< population std over the seed runs
};

/// "58.1(± 0.2)" style: mean and std as percent, one decimal.
std::string format_map_pm(double mean_map, double std_map);

/// Trains every cell x seed, collects mean +- std target mAP per cell, and
/// writes one CSV row per cell to `csv_path` ("" skips the file). A diverged
/// run marks its cell failed and the grid continues. Runs execute on a worker
/// pool of `max_workers` threads (0: SSMALIGN_THREADS env var, else 1); each
/// run itself is single-threaded, and the CSV bytes depend only on grid and
/// seeds.
/// Schema: cell,ia_c3,ia_c4,ia_c5,oa_p3,oa_p4,oa_p5,prompts,conv_pipeline,
///         ssm_pipeline,pseudo_labels,variant,seeds,status,map_mean,map_std,
///         map_formatted,seed_maps
std::vector<CellResult> run_ablation(const AblationGrid& grid, const Dataset& train_ds,
                                     const Dataset& val_ds, const std::string& csv_path,
                                     int max_workers = 0);

/// Canned grids mirroring the structure of the study tables: component
/// on/off, plain-Mamba comparison, block-internal switches for the image- and
/// object-aware blocks, insertion sites, and pseudo-label on/off. Returned as
/// (file stem, grid) pairs: table5 ... table10.
std::vector<std::pair<std::string, AblationGrid>> paper_table_grids(
    const DetectorConfig& detector, const TrainConfig& train,
    const std::vector<std::uint64_t>& seeds);

}  // namespace ssmalign
