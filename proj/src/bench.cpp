// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0

#include "ssmalign/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <thread>

#include "ssmalign/io.hpp"
#include "ssmalign/ssm.hpp"

namespace ssmalign {

namespace {

using Clock = std::chrono::steady_clock;

Tensor rand_mat(int rows, int cols, double scale, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    for (double& x : v) x = rng.normal(0.0, scale);
    return Tensor::from_data({rows, cols}, std::move(v));
}

double fit_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        num += (xs[i] - mx) * (ys[i] - my);
        den += (xs[i] - mx) * (xs[i] - mx);
    }
    return num / den;
}

std::ofstream open_csv(const std::string& path, const std::string& header) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << header << "\n";
    return f;
}

}  // namespace

AttentionParams make_attention(int dim, std::uint64_t seed) {
    if (dim < 1) throw std::invalid_argument("make_attention: dim must be >= 1");
    Rng rng(seed);
    AttentionParams p;
    p.dim = dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    p.wq = rand_mat(dim, dim, scale, rng);
    p.wk = rand_mat(dim, dim, scale, rng);
    p.wv = rand_mat(dim, dim, scale, rng);
    return p;
}

Tensor quadratic_attention_reference(const Tensor& x, const AttentionParams& p,
                                     Tensor* weights_out) {
    if (x.rank() != 2 || x.dim(1) != p.dim)
        throw std::invalid_argument("quadratic_attention_reference: x must be [L," +
                                    std::to_string(p.dim) + "], got " + shape_str(x.shape()));
    const int len = x.dim(0), d = p.dim;
    if (len < 1) throw std::invalid_argument("quadratic_attention_reference: L must be >= 1");
    const double* px = x.data().data();

    auto project = [&](const Tensor& w) {
        const double* pw = w.data().data();
        std::vector<double> out(static_cast<std::size_t>(len) * d, 0.0);
        for (int i = 0; i < len; ++i)
            for (int in = 0; in < d; ++in) {
                const double xv = px[static_cast<std::size_t>(i) * d + in];
                for (int out_c = 0; out_c < d; ++out_c)
                    out[static_cast<std::size_t>(i) * d + out_c] +=
                        xv * pw[static_cast<std::size_t>(in) * d + out_c];
            }
        return out;
    };
    const std::vector<double> q = project(p.wq);
    const std::vector<double> k = project(p.wk);
    const std::vector<double> v = project(p.wv);

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> weights(static_cast<std::size_t>(len) * len);
    for (int i = 0; i < len; ++i) {
        double* row = weights.data() + static_cast<std::size_t>(i) * len;
        double row_max = -1e300;
        for (int j = 0; j < len; ++j) {
            double s = 0.0;
            for (int c = 0; c < d; ++c)
                s += q[static_cast<std::size_t>(i) * d + c] *
                     k[static_cast<std::size_t>(j) * d + c];
            row[j] = s * inv_sqrt_d;
            row_max = std::max(row_max, row[j]);
        }
        double denom = 0.0;
        for (int j = 0; j < len; ++j) {
            row[j] = std::exp(row[j] - row_max);
            denom += row[j];
        }
        for (int j = 0; j < len; ++j) row[j] /= denom;
    }

    std::vector<double> y(static_cast<std::size_t>(len) * d, 0.0);
    for (int i = 0; i < len; ++i)
        for (int j = 0; j < len; ++j) {
            const double w = weights[static_cast<std::size_t>(i) * len + j];
            for (int c = 0; c < d; ++c)
                y[static_cast<std::size_t>(i) * d + c] +=
                    w * v[static_cast<std::size_t>(j) * d + c];
        }

    // Projections 3*2LDD, scores 2LLD + LL scale, softmax 4LL, mix 2LLD.
    const auto ll = static_cast<std::uint64_t>(len) * static_cast<std::uint64_t>(len);
    flops::add(6ULL * len * d * d + 4 * ll * d + 5 * ll);

    if (weights_out) *weights_out = Tensor::from_data({len, len}, std::move(weights));
    return Tensor::from_data({len, d}, std::move(y));
}

ScalingReport measure_scaling(const std::vector<int>& lengths, int dim, int state_size,
                              int repeats, std::uint64_t seed) {
    if (lengths.size() < 4)
        throw std::invalid_argument("measure_scaling: need at least 4 lengths");
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] < 128)
            throw std::invalid_argument("measure_scaling: lengths must be >= 128");
        if (i > 0 && lengths[i] <= lengths[i - 1])
            throw std::invalid_argument("measure_scaling: lengths must be strictly increasing");
    }
    if (dim < 1 || state_size < 1 || repeats < 1)
        throw std::invalid_argument("measure_scaling: dim, state and repeats must be positive");

    ScalingReport rep;
    rep.lengths = lengths;
    rep.dim = dim;
    rep.state_size = state_size;

    const AttentionParams attn = make_attention(dim, seed);
    for (int len : lengths) {
        Rng rng(seed ^ static_cast<std::uint64_t>(len));
        // Scan operands: channels-last sequence [1,L,D], positive step sizes.
        std::vector<double> xv(static_cast<std::size_t>(len) * dim);
        for (double& e : xv) e = rng.normal(0.0, 1.0);
        const Tensor x_seq = Tensor::from_data({1, len, dim}, std::move(xv));
        std::vector<double> av(static_cast<std::size_t>(dim) * state_size);
        for (double& e : av) e = -rng.uniform(0.2, 1.0);
        const Tensor a = Tensor::from_data({dim, state_size}, std::move(av));
        auto coef = [&] {
            std::vector<double> cv(static_cast<std::size_t>(len) * state_size);
            for (double& e : cv) e = rng.normal(0.0, 1.0);
            return Tensor::from_data({1, len, state_size}, std::move(cv));
        };
        const Tensor b_coef = coef(), c_coef = coef();
        std::vector<double> dv(static_cast<std::size_t>(len) * dim);
        for (double& e : dv) e = rng.uniform(0.05, 0.15);
        const Tensor delta = Tensor::from_data({1, len, dim}, std::move(dv));

        std::vector<double> xm(static_cast<std::size_t>(len) * dim);
        for (double& e : xm) e = rng.normal(0.0, 1.0);
        const Tensor x_mat = Tensor::from_data({len, dim}, std::move(xm));

        auto run = [&](auto&& fn, MechanismSeries& out) {
            flops::reset();
            fn();
            out.flop_counts.push_back(flops::count());
            std::vector<double> times;
            for (int r = 0; r < repeats; ++r) {
                const auto t0 = Clock::now();
                fn();
                times.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
            }
            std::sort(times.begin(), times.end());
            const double median = times[times.size() / 2];
            double mean = 0.0;
            for (double t : times) mean += t;
            mean /= static_cast<double>(times.size());
            out.wall_seconds.push_back(median);
            out.time_flagged.push_back(mean > 0.0 &&
                                       (times.back() - times.front()) / mean > 0.2);
        };
        run([&] { selective_scan_core(x_seq, a, b_coef, c_coef, delta); }, rep.scan);
        run([&] { quadratic_attention_reference(x_mat, attn); }, rep.attention);
        flops::reset();
    }

    std::vector<double> log_l;
    log_l.reserve(lengths.size());
    for (int len : lengths) log_l.push_back(std::log(static_cast<double>(len)));
    auto slope_of = [&](const MechanismSeries& s) {
        std::vector<double> log_f;
        log_f.reserve(s.flop_counts.size());
        for (auto f : s.flop_counts) log_f.push_back(std::log(static_cast<double>(f)));
        return fit_slope(log_l, log_f);
    };
    rep.scan.flop_slope = slope_of(rep.scan);
    rep.attention.flop_slope = slope_of(rep.attention);
    return rep;
}

void write_scaling_csv(const ScalingReport& report, const std::string& path) {
    auto f = open_csv(path,
                      "length,scan_flops,scan_wall_s,scan_time_flagged,attention_flops,"
                      "attention_wall_s,attention_time_flagged,scan_flop_slope,"
                      "attention_flop_slope");
    for (std::size_t i = 0; i < report.lengths.size(); ++i) {
        f << report.lengths[i] << "," << report.scan.flop_counts[i] << ","
          << io::format_double(report.scan.wall_seconds[i]) << ","
          << (report.scan.time_flagged[i] ? 1 : 0) << "," << report.attention.flop_counts[i]
          << "," << io::format_double(report.attention.wall_seconds[i]) << ","
          << (report.attention.time_flagged[i] ? 1 : 0) << ","
          << io::format_double(report.scan.flop_slope) << ","
          << io::format_double(report.attention.flop_slope) << "\n";
    }
}

std::int64_t count_params(const std::vector<std::pair<std::string, Tensor>>& named) {
    return param_count(named);
}

ParamsReport variant_param_report(int channels, double reduction, int state_size) {
    ParamsReport rep;
    rep.channels = channels;
    rep.reduction = reduction;
    rep.state_size = state_size;
    Rng rng(0);
    rep.parallel_params =
        build_variant(channels, reduction, VariantKind::parallel, state_size, rng).second;
    rep.serial_params =
        build_variant(channels, reduction, VariantKind::serial, state_size, rng).second;
    rep.ratio = static_cast<double>(rep.parallel_params) /
                static_cast<double>(rep.serial_params);
    return rep;
}

void write_params_csv(const ParamsReport& report, const std::string& path) {
    auto f = open_csv(path, "block,params,ratio");
    f << "parallel_ia_ssm," << report.parallel_params << "," << io::format_double(report.ratio)
      << "\n";
    f << "serial_ia_ssm," << report.serial_params << ",\n";
}

std::string format_map_pm(double mean_map, double std_map) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f(± %.1f)", mean_map * 100.0, std_map * 100.0);
    return buf;
}

std::vector<CellResult> run_ablation(const AblationGrid& grid, const Dataset& train_ds,
                                     const Dataset& val_ds, const std::string& csv_path,
                                     int max_workers) {
    if (grid.cells.empty()) throw std::invalid_argument("run_ablation: grid has no cells");
    if (grid.seeds.empty()) throw std::invalid_argument("run_ablation: grid has no seeds");

    struct Run {
        std::size_t cell;
        std::size_t seed;
    };
    std::vector<Run> runs;
    for (std::size_t c = 0; c < grid.cells.size(); ++c)
        for (std::size_t s = 0; s < grid.seeds.size(); ++s) runs.push_back({c, s});

    int workers = max_workers;
    if (workers <= 0) {
        const char* env = std::getenv("SSMALIGN_THREADS");
        workers = env ? std::atoi(env) : 1;
    }
    workers = std::max(1, std::min<int>(workers, static_cast<int>(runs.size())));

    // seed_map[c][s]: final target mAP, NaN when the run diverged.
    std::vector<std::vector<double>> seed_map(
        grid.cells.size(),
        std::vector<double>(grid.seeds.size(), std::numeric_limits<double>::quiet_NaN()));

    auto execute = [&](const Run& r) {
        const AblationCell& cell = grid.cells[r.cell];
        DetectorConfig cfg = grid.detector;
        cfg.ia_sites = cell.ia_sites;
        cfg.oa_levels = cell.oa_levels;
        cfg.pipeline = cell.pipeline;
        cfg.variant = cell.variant;
        TrainConfig tc = grid.train;
        tc.seed = grid.seeds[r.seed];
        tc.use_pseudo_labels = cell.pseudo_labels;
        tc.out_dir.clear();
        tc.on_epoch = nullptr;
        tc.eval_every = tc.epochs;  // final-epoch evaluation only
        Rng rng(grid.seeds[r.seed]);
        DetectorParams det = make_detector(cfg, rng);
        const TrainResult res = train_detector(det, train_ds, val_ds, tc);
        if (!res.aborted_non_finite) seed_map[r.cell][r.seed] = res.final_map;
    };

    if (workers == 1) {
        for (const Run& r : runs) execute(r);
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= runs.size()) return;
                execute(runs[i]);
            }
        };
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    std::vector<CellResult> results;
    results.reserve(grid.cells.size());
    for (std::size_t c = 0; c < grid.cells.size(); ++c) {
        CellResult cr;
        cr.cell = grid.cells[c];
        for (double m : seed_map[c]) {
            if (std::isnan(m))
                cr.failed = true;
            else
                cr.seed_maps.push_back(m);
        }
        if (!cr.seed_maps.empty()) {
            double mean = 0.0;
            for (double m : cr.seed_maps) mean += m;
            mean /= static_cast<double>(cr.seed_maps.size());
            double var = 0.0;
            for (double m : cr.seed_maps) var += (m - mean) * (m - mean);
            var /= static_cast<double>(cr.seed_maps.size());
            cr.mean_map = mean;
            cr.std_map = std::sqrt(var);
        }
        results.push_back(std::move(cr));
    }

    if (!csv_path.empty()) {
        auto f = open_csv(csv_path,
                          "cell,ia_c3,ia_c4,ia_c5,oa_p3,oa_p4,oa_p5,prompts,conv_pipeline,"
                          "ssm_pipeline,pseudo_labels,variant,seeds,status,map_mean,map_std,"
                          "map_formatted,seed_maps");
        for (std::size_t c = 0; c < results.size(); ++c) {
            const CellResult& cr = results[c];
            const AblationCell& cell = cr.cell;
            f << cell.name;
            for (bool b : cell.ia_sites) f << "," << (b ? 1 : 0);
            for (bool b : cell.oa_levels) f << "," << (b ? 1 : 0);
            f << "," << (cell.pipeline.use_prompt ? 1 : 0) << ","
              << (cell.pipeline.use_conv ? 1 : 0) << "," << (cell.pipeline.use_ssm ? 1 : 0)
              << "," << (cell.pseudo_labels ? 1 : 0) << ","
              << (cell.variant == VariantKind::parallel ? "parallel" : "serial") << ",";
            for (std::size_t s = 0; s < grid.seeds.size(); ++s)
                f << (s ? ";" : "") << grid.seeds[s];
            f << "," << (cr.failed ? "failed" : "ok");
            if (cr.seed_maps.empty()) {
                f << ",,," << "failed" << ",";
            } else {
                f << "," << io::format_double(cr.mean_map) << ","
                  << io::format_double(cr.std_map) << ","
                  << format_map_pm(cr.mean_map, cr.std_map) << ",";
            }
            std::size_t done = 0;
            for (std::size_t s = 0; s < grid.seeds.size(); ++s) {
                if (s) f << ";";
                if (std::isnan(seed_map[c][s]))
                    f << "failed";
                else
                    f << io::format_double(cr.seed_maps[done++]);
            }
            f << "\n";
        }
    }
    return results;
}

std::vector<std::pair<std::string, AblationGrid>> paper_table_grids(
    const DetectorConfig& detector, const TrainConfig& train,
    const std::vector<std::uint64_t>& seeds) {
    const std::array<bool, 3> off{false, false, false};
    const std::array<bool, 3> on{true, true, true};
    const PipelineToggles full{};
    const PipelineToggles plain_mamba{false, false, true};  // no prompt, no conv branch

    auto cell = [](std::string name, std::array<bool, 3> ia, std::array<bool, 3> oa,
                   PipelineToggles pt, bool pl) {
        AblationCell c;
        c.name = std::move(name);
        c.ia_sites = ia;
        c.oa_levels = oa;
        c.pipeline = pt;
        c.pseudo_labels = pl;
        return c;
    };
    auto grid = [&](std::vector<AblationCell> cells) {
        AblationGrid g;
        g.cells = std::move(cells);
        g.seeds = seeds;
        g.detector = detector;
        g.train = train;
        return g;
    };

    std::vector<std::pair<std::string, AblationGrid>> out;

    // Component on/off.
    out.emplace_back("table5", grid({
                                   cell("baseline", off, off, full, true),
                                   cell("ia_ssm", on, off, full, true),
                                   cell("oa_ssm", off, on, full, true),
                                   cell("both", on, on, full, true),
                               }));

    // Plain Mamba (no prompt, no conv pipeline) vs the full blocks.
    out.emplace_back("table6", grid({
                                   cell("backbone_mamba", on, off, plain_mamba, true),
                                   cell("backbone_ia_ssm", on, off, full, true),
                                   cell("head_mamba", off, on, plain_mamba, true),
                                   cell("head_oa_ssm", off, on, full, true),
                                   cell("both_mamba", on, on, plain_mamba, true),
                                   cell("both_full", on, on, full, true),
                               }));

    // Internal switches of the image-aware block (head blocks disabled).
    auto internal_rows = [&](std::array<bool, 3> ia, std::array<bool, 3> oa) {
        return std::vector<AblationCell>{
            cell("baseline", off, off, full, true),
            cell("conv_only", ia, oa, {false, true, false}, true),
            cell("ssm_only", ia, oa, {false, false, true}, true),
            cell("conv_ssm", ia, oa, {false, true, true}, true),
            cell("conv_prompt", ia, oa, {true, true, false}, true),
            cell("ssm_prompt", ia, oa, {true, false, true}, true),
            cell("full", ia, oa, {true, true, true}, true),
        };
    };
    out.emplace_back("table7", grid(internal_rows(on, off)));
    out.emplace_back("table8", grid(internal_rows(off, on)));

    // Insertion sites, one block at a time.
    out.emplace_back("table9",
                     grid({
                         cell("baseline", off, off, full, true),
                         cell("ia_c3", {true, false, false}, off, full, true),
                         cell("ia_c4", {false, true, false}, off, full, true),
                         cell("ia_c5", {false, false, true}, off, full, true),
                         cell("oa_p3", off, {true, false, false}, full, true),
                         cell("oa_p4", off, {false, true, false}, full, true),
                         cell("oa_p5", off, {false, false, true}, full, true),
                     }));

    // Pseudo labels on/off for baseline and full model.
    out.emplace_back("table10", grid({
                                    cell("baseline_no_pl", off, off, full, false),
                                    cell("baseline_pl", off, off, full, true),
                                    cell("full_no_pl", on, on, full, false),
                                    cell("full_pl", on, on, full, true),
                                }));
    return out;
}

}  // namespace ssmalign
