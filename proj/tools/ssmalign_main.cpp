// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: dataset generation, training, evaluation, gradient
// checking and benchmarking behind one binary. Configuration is a flat UTF-8
// JSON file whose keys match the flag spellings; command-line flags override
// file values, and the fully resolved config is printed and embedded into
// every artifact directory. Exit codes: 0 success, 1 usage, 2 runtime
// failure, 3 gradient-check failure.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gradcheck_suite.hpp"
#include "ssmalign/bench.hpp"
#include "ssmalign/data_synth.hpp"
#include "ssmalign/io.hpp"
#include "ssmalign/train.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace ssmalign;

namespace {

/// Command-line problems discovered after flag parsing (missing paths,
/// malformed config files). Reported like CLI11 usage errors: exit code 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Every tunable of every subcommand, flat. JSON config keys are the member
/// names; the long flags are their kebab-case spellings. Irrelevant fields
/// are ignored by a subcommand but still echoed, so one file can drive a
/// whole workflow.
struct RunConfig {
    std::uint64_t seed = 0;

    // Paths.
    std::string data_dir;
    std::string val_dir;
    std::string out_dir;
    std::string checkpoint_dir;
    std::string domain = "all";        ///< eval scene filter: all|source|target
    std::string val_domain = "target"; ///< gen-data validation split domain

    // Scene generation.
    int image_size = 64;
    int num_classes = 4;
    int min_objects = 1;
    int max_objects = 6;
    double min_size = 6.0;
    double max_size = 24.0;
    double co_occurrence = 0.8;
    double max_overlap = 0.3;
    double fog = 0.5;
    double hue = 0.15;
    double noise = 0.02;
    int n_source = 512;
    int n_target = 512;
    int n_val = 128;

    // Model geometry.
    int c3_width = 16;
    int c4_width = 32;
    int c5_width = 64;
    int pyramid_width = 32;
    int state_size = 8;
    double reduction = 2.0;
    std::string variant = "parallel";
    bool ia_c3 = true, ia_c4 = true, ia_c5 = true;
    bool oa_p3 = true, oa_p4 = true, oa_p5 = true;
    bool prompts = true, conv_pipeline = true, ssm_pipeline = true;

    // Objective.
    double lambda_image = 1.0;
    double lambda_object = 0.5;
    double pseudo_threshold = 0.8;
    bool use_pseudo_labels = true;
    bool target_supervised = false;
    double grl_lambda = 1.0;

    // Optimizer and schedule.
    double base_lr = 1e-3;
    double momentum = 0.9;
    int warmup_epochs = 5;
    int decay_from_epoch = 20;
    int epochs = 30;
    int batch = 2;

    // Evaluation.
    double eval_conf_thresh = 0.05;
    int eval_batch = 8;
    int eval_every = 1;

    // Benchmarks.
    int workers = 0;  ///< 0: SSMALIGN_THREADS, else 1; env always caps
    std::string grid = "table5";
    std::vector<int> lengths{256, 512, 1024, 2048};
    int bench_dim = 16;
    int bench_state = 16;
    int bench_repeats = 5;
    int channels = 32;
    std::vector<std::uint64_t> seeds{0, 1, 2};
};

/// Single source of truth for the JSON schema: every field, in echo order.
template <class F>
void visit_fields(RunConfig& c, F&& f) {
    f("seed", c.seed);
    f("data_dir", c.data_dir);
    f("val_dir", c.val_dir);
    f("out_dir", c.out_dir);
    f("checkpoint_dir", c.checkpoint_dir);
    f("domain", c.domain);
    f("val_domain", c.val_domain);
    f("image_size", c.image_size);
    f("num_classes", c.num_classes);
    f("min_objects", c.min_objects);
    f("max_objects", c.max_objects);
    f("min_size", c.min_size);
    f("max_size", c.max_size);
    f("co_occurrence", c.co_occurrence);
    f("max_overlap", c.max_overlap);
    f("fog", c.fog);
    f("hue", c.hue);
    f("noise", c.noise);
    f("n_source", c.n_source);
    f("n_target", c.n_target);
    f("n_val", c.n_val);
    f("c3_width", c.c3_width);
    f("c4_width", c.c4_width);
    f("c5_width", c.c5_width);
    f("pyramid_width", c.pyramid_width);
    f("state_size", c.state_size);
    f("reduction", c.reduction);
    f("variant", c.variant);
    f("ia_c3", c.ia_c3);
    f("ia_c4", c.ia_c4);
    f("ia_c5", c.ia_c5);
    f("oa_p3", c.oa_p3);
    f("oa_p4", c.oa_p4);
    f("oa_p5", c.oa_p5);
    f("prompts", c.prompts);
    f("conv_pipeline", c.conv_pipeline);
    f("ssm_pipeline", c.ssm_pipeline);
    f("lambda_image", c.lambda_image);
    f("lambda_object", c.lambda_object);
    f("pseudo_threshold", c.pseudo_threshold);
    f("use_pseudo_labels", c.use_pseudo_labels);
    f("target_supervised", c.target_supervised);
    f("grl_lambda", c.grl_lambda);
    f("base_lr", c.base_lr);
    f("momentum", c.momentum);
    f("warmup_epochs", c.warmup_epochs);
    f("decay_from_epoch", c.decay_from_epoch);
    f("epochs", c.epochs);
    f("batch", c.batch);
    f("eval_conf_thresh", c.eval_conf_thresh);
    f("eval_batch", c.eval_batch);
    f("eval_every", c.eval_every);
    f("workers", c.workers);
    f("grid", c.grid);
    f("lengths", c.lengths);
    f("bench_dim", c.bench_dim);
    f("bench_state", c.bench_state);
    f("bench_repeats", c.bench_repeats);
    f("channels", c.channels);
    f("seeds", c.seeds);
}

ordered_json config_json(RunConfig& c) {
    ordered_json j = ordered_json::object();
    visit_fields(c, [&](const char* key, auto& value) { j[key] = value; });
    return j;
}

void apply_config_file(RunConfig& c, const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw UsageError("config file not readable: " + path);
    ordered_json file;
    try {
        file = ordered_json::parse(in);
    } catch (const ordered_json::parse_error& e) {
        throw UsageError("config file " + path + " is not valid JSON: " + e.what());
    }
    if (!file.is_object()) throw UsageError("config file " + path + " must hold a JSON object");
    for (const auto& [key, value] : file.items()) {
        bool known = false;
        visit_fields(c, [&](const char* name, auto& field) {
            if (key != name) return;
            known = true;
            try {
                field = value.template get<std::decay_t<decltype(field)>>();
            } catch (const ordered_json::exception& e) {
                throw UsageError("config key \"" + key + "\" has the wrong type: " + e.what());
            }
        });
        if (!known) throw UsageError("config file " + path + " has unknown key \"" + key + "\"");
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out.good()) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

/// Prints the resolved config and drops the same bytes next to the artifacts
/// (`dir` empty: print only).
void echo_config(RunConfig& c, const fs::path& dir) {
    const std::string text = config_json(c).dump(2) + "\n";
    std::cout << "resolved config:\n" << text;
    if (!dir.empty()) write_text(dir / "run_config.json", text);
}

SceneGenConfig gen_config(const RunConfig& c) {
    SceneGenConfig g;
    g.image_size = c.image_size;
    g.num_classes = c.num_classes;
    g.min_objects = c.min_objects;
    g.max_objects = c.max_objects;
    g.min_size = c.min_size;
    g.max_size = c.max_size;
    g.co_occurrence = c.co_occurrence;
    g.max_overlap = c.max_overlap;
    return g;
}

VariantKind variant_kind(const std::string& name) {
    if (name == "parallel") return VariantKind::parallel;
    if (name == "serial") return VariantKind::serial;
    throw UsageError("variant must be parallel or serial, got \"" + name + "\"");
}

DetectorConfig detector_config(const RunConfig& c) {
    DetectorConfig dc;
    dc.image_size = c.image_size;
    dc.num_classes = c.num_classes;
    dc.c3_width = c.c3_width;
    dc.c4_width = c.c4_width;
    dc.c5_width = c.c5_width;
    dc.pyramid_width = c.pyramid_width;
    dc.state_size = c.state_size;
    dc.reduction = c.reduction;
    dc.variant = variant_kind(c.variant);
    dc.ia_sites = {c.ia_c3, c.ia_c4, c.ia_c5};
    dc.oa_levels = {c.oa_p3, c.oa_p4, c.oa_p5};
    dc.pipeline = {c.prompts, c.conv_pipeline, c.ssm_pipeline};
    dc.prototype_seed = c.seed;
    dc.pseudo_conf_thresh = c.pseudo_threshold;
    return dc;
}

/// Reverse mapping, so the echo of eval reflects the checkpoint being run.
void resolve_from_detector(RunConfig& c, const DetectorConfig& dc) {
    c.image_size = dc.image_size;
    c.num_classes = dc.num_classes;
    c.c3_width = dc.c3_width;
    c.c4_width = dc.c4_width;
    c.c5_width = dc.c5_width;
    c.pyramid_width = dc.pyramid_width;
    c.state_size = dc.state_size;
    c.reduction = dc.reduction;
    c.variant = dc.variant == VariantKind::parallel ? "parallel" : "serial";
    c.ia_c3 = dc.ia_sites[0];
    c.ia_c4 = dc.ia_sites[1];
    c.ia_c5 = dc.ia_sites[2];
    c.oa_p3 = dc.oa_levels[0];
    c.oa_p4 = dc.oa_levels[1];
    c.oa_p5 = dc.oa_levels[2];
    c.prompts = dc.pipeline.use_prompt;
    c.conv_pipeline = dc.pipeline.use_conv;
    c.ssm_pipeline = dc.pipeline.use_ssm;
    c.pseudo_threshold = dc.pseudo_conf_thresh;
}

TrainConfig train_config(const RunConfig& c) {
    TrainConfig tc;
    tc.seed = c.seed;
    tc.epochs = c.epochs;
    tc.batch_per_domain = c.batch;
    tc.base_lr = c.base_lr;
    tc.momentum = c.momentum;
    tc.warmup_epochs = c.warmup_epochs;
    tc.decay_from_epoch = c.decay_from_epoch;
    tc.weights = {c.lambda_image, c.lambda_object};
    tc.grl_lambda = c.grl_lambda;
    tc.use_pseudo_labels = c.use_pseudo_labels;
    tc.target_supervised = c.target_supervised;
    tc.eval_conf_thresh = c.eval_conf_thresh;
    tc.eval_batch = c.eval_batch;
    tc.eval_every = c.eval_every;
    return tc;
}

void require_path(const std::string& value, const char* flag) {
    if (value.empty())
        throw UsageError(std::string("missing ") + flag + " (flag or config key)");
}

std::string fmt(double v) { return io::format_double(v); }

void print_eval(const EvalResult& r, std::size_t scenes, const std::string& domain) {
    for (std::size_t k = 0; k < r.per_class_ap.size(); ++k) {
        if (r.class_has_gt[k])
            std::cout << "class " << k << " AP " << fmt(r.per_class_ap[k]) << "\n";
        else
            std::cout << "class " << k << " AP -  (no ground truth)\n";
    }
    std::cout << "mAP " << fmt(r.map) << " over " << scenes << " scenes (domain: " << domain
              << ")\n";
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(RunConfig& c, bool force) {
    require_path(c.out_dir, "--out");
    if (c.val_domain != "source" && c.val_domain != "target" && c.val_domain != "both")
        throw UsageError("val_domain must be source, target or both");
    const fs::path out = c.out_dir;
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!force)
            throw std::runtime_error("output directory " + out.string() +
                                     " exists and is not empty (pass --force to replace it)");
        fs::remove_all(out);
    }
    fs::create_directories(out);
    echo_config(c, out);

    const SceneGenConfig g = gen_config(c);
    const DomainShift shift{c.fog, c.hue, c.noise};
    const Dataset train = make_dataset(g, shift, c.n_source, c.n_target, c.seed);
    // Validation seeds start past the training range: no shared geometry.
    const std::uint64_t val0 = c.seed + static_cast<std::uint64_t>(std::max(c.n_source, c.n_target));
    const int vs = c.val_domain == "target" ? 0 : c.n_val;
    const int vt = c.val_domain == "source" ? 0 : c.n_val;
    const Dataset val = make_dataset(g, shift, vs, vt, val0);

    write_dataset(train, (out / "train").string());
    write_dataset(val, (out / "val").string());
    std::cout << "train: " << c.n_source << " source + " << c.n_target << " target scenes -> "
              << (out / "train" / "manifest.json").string() << "\n";
    std::cout << "val: " << vs << " source + " << vt << " target scenes -> "
              << (out / "val" / "manifest.json").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(RunConfig& c) {
    require_path(c.data_dir, "--data");
    require_path(c.val_dir, "--val");
    require_path(c.out_dir, "--out");
    const Dataset train_ds = read_dataset(c.data_dir);
    const Dataset val_ds = read_dataset(c.val_dir);
    c.image_size = train_ds.image_size;
    c.num_classes = train_ds.num_classes;

    const fs::path out = c.out_dir;
    fs::create_directories(out);
    echo_config(c, out);

    TrainConfig tc = train_config(c);
    tc.out_dir = out.string();
    tc.config_echo_json = config_json(c).dump();
    tc.on_epoch = [](int epoch, double lr, double mean_total, const EvalResult* ev) {
        std::cout << "epoch " << epoch << " lr " << fmt(lr) << " loss " << fmt(mean_total);
        if (ev) std::cout << " val_map " << fmt(ev->map);
        std::cout << "\n";
    };

    Rng rng(c.seed);
    DetectorParams det = make_detector(detector_config(c), rng);
    const TrainResult res = train_detector(det, train_ds, val_ds, tc);
    if (res.aborted_non_finite) {
        std::cerr << "training aborted: non-finite loss after " << res.epochs_completed
                  << " completed epochs; last-good checkpoint kept in "
                  << (out / "checkpoint").string() << "\n";
        return 2;
    }
    std::cout << "training complete: final val mAP " << fmt(res.final_map) << " after "
              << res.epochs_completed << " epochs (" << res.steps_done << " steps)\n";
    std::cout << "artifacts: " << out.string()
              << " (losses.csv, metrics.csv, checkpoint/, run_config.json)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(RunConfig& c, std::string report_path) {
    require_path(c.checkpoint_dir, "--checkpoint");
    require_path(c.data_dir, "--data");
    if (c.domain != "all" && c.domain != "source" && c.domain != "target")
        throw UsageError("domain must be all, source or target");

    std::string train_run_json;
    const DetectorParams det = load_checkpoint(c.checkpoint_dir, &train_run_json);
    Dataset ds = read_dataset(c.data_dir);
    if (c.domain == "source") ds = filter_domain(ds, DomainLabel::source);
    if (c.domain == "target") ds = filter_domain(ds, DomainLabel::target);
    if (ds.scenes.empty())
        throw std::runtime_error("evaluation split is empty (dataset " + c.data_dir +
                                 ", domain " + c.domain + ")");
    if (det.cfg.num_classes != ds.num_classes)
        throw std::runtime_error("class count mismatch: checkpoint has " +
                                 std::to_string(det.cfg.num_classes) + " classes, dataset has " +
                                 std::to_string(ds.num_classes));

    resolve_from_detector(c, det.cfg);
    echo_config(c, "");

    const EvalResult r = evaluate_detector(det, ds, c.eval_conf_thresh, c.eval_batch);
    print_eval(r, ds.scenes.size(), c.domain);

    ordered_json report = ordered_json::object();
    report["config"] = config_json(c);
    if (!train_run_json.empty()) report["train_config"] = ordered_json::parse(train_run_json);
    report["scenes"] = ds.scenes.size();
    report["per_class_ap"] = r.per_class_ap;
    report["class_has_gt"] = r.class_has_gt;
    report["map"] = r.map;
    if (report_path.empty())
        report_path = (fs::path(c.checkpoint_dir) / "eval_report.json").string();
    write_text(report_path, report.dump(2) + "\n");
    std::cout << "report: " << report_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(bool corrupt, double tolerance) {
    const auto checks = ssmalign_tools::run_gradcheck_suite(corrupt, tolerance);
    std::size_t passed = 0;
    std::printf("%-22s %-12s %-10s %s\n", "block", "max_rel_err", "tolerance", "status");
    for (const auto& c : checks) {
        std::printf("%-22s %-12.3e %-10.1e %s\n", c.name.c_str(), c.max_rel_err, c.tolerance,
                    c.pass ? "PASS" : "FAIL");
        passed += c.pass ? 1 : 0;
    }
    std::printf("gradient suite: %zu/%zu blocks within tolerance\n", passed, checks.size());
    return passed == checks.size() ? 0 : 3;
}

// ---------------------------------------------------------------------------
// bench

int effective_workers(const RunConfig& c) {
    int w = c.workers;
    if (const char* env = std::getenv("SSMALIGN_THREADS")) {
        const int cap = std::atoi(env);
        if (cap > 0) w = w > 0 ? std::min(w, cap) : cap;
    }
    return w;  // 0 falls through to the harness default of one worker
}

int cmd_bench(RunConfig& c, const std::string& kind) {
    require_path(c.out_dir, "--out");
    const fs::path out = c.out_dir;
    fs::create_directories(out);

    if (kind == "scaling") {
        echo_config(c, out);
        const ScalingReport rep =
            measure_scaling(c.lengths, c.bench_dim, c.bench_state, c.bench_repeats, c.seed);
        const fs::path csv = out / "scaling.csv";
        write_scaling_csv(rep, csv.string());
        std::cout << "scan flop slope " << fmt(rep.scan.flop_slope) << ", attention flop slope "
                  << fmt(rep.attention.flop_slope) << "\n";
        std::cout << "scan flops at L=" << rep.lengths.back() << ": "
                  << rep.scan.flop_counts.back() << " vs attention "
                  << rep.attention.flop_counts.back() << "\n";
        std::cout << "wrote " << csv.string() << "\n";
        return 0;
    }
    if (kind == "params") {
        echo_config(c, out);
        const ParamsReport rep = variant_param_report(c.channels, c.reduction, c.state_size);
        const fs::path csv = out / "params.csv";
        write_params_csv(rep, csv.string());
        std::cout << "parallel " << rep.parallel_params << " params, serial " << rep.serial_params
                  << " params, ratio " << fmt(rep.ratio) << "\n";
        std::cout << "wrote " << csv.string() << "\n";
        return 0;
    }

    // kind == "ablation" (the flag validator admits nothing else)
    require_path(c.data_dir, "--data");
    require_path(c.val_dir, "--val");
    const Dataset train_ds = read_dataset(c.data_dir);
    const Dataset val_ds = read_dataset(c.val_dir);
    c.image_size = train_ds.image_size;
    c.num_classes = train_ds.num_classes;
    echo_config(c, out);

    auto grids = paper_table_grids(detector_config(c), train_config(c), c.seeds);
    if (c.grid != "all") {
        std::erase_if(grids, [&](const auto& g) { return g.first != c.grid; });
        if (grids.empty()) throw UsageError("unknown grid \"" + c.grid + "\"");
    }
    const int workers = effective_workers(c);
    for (const auto& [stem, grid] : grids) {
        const fs::path csv = out / (stem + ".csv");
        std::cout << "grid " << stem << ": " << grid.cells.size() << " cells x "
                  << grid.seeds.size() << " seeds\n";
        const auto results = run_ablation(grid, train_ds, val_ds, csv.string(), workers);
        for (const auto& r : results)
            std::cout << "  " << r.cell.name << " map "
                      << (r.failed ? "failed" : format_map_pm(r.mean_map, r.std_map)) << "\n";
        std::cout << "wrote " << csv.string() << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------

/// The config file must load before CLI11 binds flag values, so flags win.
std::string find_config_arg(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--config" && i + 1 < argc) return argv[i + 1];
        if (a.rfind("--config=", 0) == 0) return a.substr(9);
    }
    return "";
}

void add_model_flags(CLI::App* cmd, RunConfig& c) {
    cmd->add_option("--c3-width", c.c3_width, "backbone width at stride 4");
    cmd->add_option("--c4-width", c.c4_width, "backbone width at stride 8");
    cmd->add_option("--c5-width", c.c5_width, "backbone width at stride 16");
    cmd->add_option("--pyramid-width", c.pyramid_width, "shared pyramid width");
    cmd->add_option("--state-size", c.state_size, "SSM state dimension");
    cmd->add_option("--reduction", c.reduction, "channel reduction inside alignment blocks");
    cmd->add_option("--variant", c.variant, "alignment block wiring")
        ->check(CLI::IsMember({"parallel", "serial"}));
    cmd->add_flag("--ia-c3,!--no-ia-c3", c.ia_c3, "image-aware block before C4");
    cmd->add_flag("--ia-c4,!--no-ia-c4", c.ia_c4, "image-aware block before C5");
    cmd->add_flag("--ia-c5,!--no-ia-c5", c.ia_c5, "image-aware block on C5");
    cmd->add_flag("--oa-p3,!--no-oa-p3", c.oa_p3, "object-aware block at P3");
    cmd->add_flag("--oa-p4,!--no-oa-p4", c.oa_p4, "object-aware block at P4");
    cmd->add_flag("--oa-p5,!--no-oa-p5", c.oa_p5, "object-aware block at P5");
    cmd->add_flag("--prompts,!--no-prompts", c.prompts, "prompt inputs inside alignment blocks");
    cmd->add_flag("--conv-pipeline,!--no-conv-pipeline", c.conv_pipeline,
                  "convolutional pipeline inside alignment blocks");
    cmd->add_flag("--ssm-pipeline,!--no-ssm-pipeline", c.ssm_pipeline,
                  "state-space pipeline inside alignment blocks");
}

void add_train_flags(CLI::App* cmd, RunConfig& c) {
    cmd->add_option("--lambda-image", c.lambda_image, "image-level adversarial weight");
    cmd->add_option("--lambda-object", c.lambda_object, "object-level adversarial weight");
    cmd->add_option("--pseudo-threshold", c.pseudo_threshold, "pseudo-label confidence cut");
    cmd->add_flag("--use-pseudo-labels,!--no-pseudo-labels", c.use_pseudo_labels,
                  "self-train on confident target detections");
    cmd->add_flag("--target-supervised", c.target_supervised,
                  "sanity mode: ground-truth labels on both domains");
    cmd->add_option("--grl-lambda", c.grl_lambda, "gradient reversal strength");
    cmd->add_option("--base-lr", c.base_lr, "SGD base learning rate");
    cmd->add_option("--momentum", c.momentum, "SGD momentum");
    cmd->add_option("--warmup-epochs", c.warmup_epochs, "linear warm-up epochs");
    cmd->add_option("--decay-from-epoch", c.decay_from_epoch, "start of the linear decay");
    cmd->add_option("--epochs", c.epochs, "training epochs");
    cmd->add_option("--batch", c.batch, "batch size per domain");
    cmd->add_option("--eval-conf-thresh", c.eval_conf_thresh, "confidence cut for evaluation");
    cmd->add_option("--eval-batch", c.eval_batch, "evaluation batch size");
    cmd->add_option("--eval-every", c.eval_every, "validate every n epochs");
}

}  // namespace

int main(int argc, char** argv) {
    RunConfig rc;
    std::string config_dummy;
    bool force = false;
    bool corrupt = false;
    double gradcheck_tol = 1e-4;
    std::string report_path;
    std::string bench_kind;

    CLI::App app{"synthetic cross-domain detection testbed: convolution + selective "
                 "state-space feature alignment"};
    app.require_subcommand(1);

    try {
        const std::string config_path = find_config_arg(argc, argv);
        if (!config_path.empty()) apply_config_file(rc, config_path);

        CLI::App* gen = app.add_subcommand("gen-data", "write a paired two-domain dataset");
        gen->add_option("--config", config_dummy, "JSON config file; flags override its values");
        gen->add_option("--out", rc.out_dir, "output directory (train/ and val/ inside)");
        gen->add_flag("--force", force, "replace an existing non-empty output directory");
        gen->add_option("--seed", rc.seed, "base scene seed");
        gen->add_option("--image-size", rc.image_size, "square image side");
        gen->add_option("--classes", rc.num_classes, "number of object classes");
        gen->add_option("--min-objects", rc.min_objects, "minimum objects per scene");
        gen->add_option("--max-objects", rc.max_objects, "maximum objects per scene");
        gen->add_option("--min-size", rc.min_size, "minimum box side in pixels");
        gen->add_option("--max-size", rc.max_size, "maximum box side in pixels");
        gen->add_option("--co-occurrence", rc.co_occurrence, "P(class 1 | class 0)");
        gen->add_option("--max-overlap", rc.max_overlap, "placement IoU cap");
        gen->add_option("--fog", rc.fog, "target-domain gray blend; 0 disables this component");
        gen->add_option("--hue", rc.hue, "target-domain channel mixing");
        gen->add_option("--noise", rc.noise, "target-domain noise sigma");
        gen->add_option("--n-source", rc.n_source, "labeled source scenes");
        gen->add_option("--n-target", rc.n_target, "unlabeled target scenes");
        gen->add_option("--n-val", rc.n_val, "validation scenes per chosen domain");
        gen->add_option("--val-domain", rc.val_domain, "validation split domain")
            ->check(CLI::IsMember({"source", "target", "both"}));

        CLI::App* train = app.add_subcommand("train", "domain-adaptive training run");
        train->add_option("--config", config_dummy, "JSON config file; flags override its values");
        train->add_option("--data", rc.data_dir, "training dataset directory");
        train->add_option("--val", rc.val_dir, "validation dataset directory");
        train->add_option("--out", rc.out_dir, "artifact directory");
        train->add_option("--seed", rc.seed, "training seed");
        add_model_flags(train, rc);
        add_train_flags(train, rc);

        CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
        eval->add_option("--config", config_dummy, "JSON config file; flags override its values");
        eval->add_option("--checkpoint", rc.checkpoint_dir, "checkpoint directory");
        eval->add_option("--data", rc.data_dir, "dataset directory");
        eval->add_option("--domain", rc.domain, "scene filter")
            ->check(CLI::IsMember({"all", "source", "target"}));
        eval->add_option("--out", report_path, "report path (default: <checkpoint>/eval_report.json)");
        eval->add_option("--eval-conf-thresh", rc.eval_conf_thresh, "confidence cut");
        eval->add_option("--eval-batch", rc.eval_batch, "evaluation batch size");

        CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
        grad->add_flag("--corrupt", corrupt,
                       "corrupt the first block's backward pass (negative control, must fail)");
        grad->add_option("--tolerance", gradcheck_tol, "max relative error per block")
            ->check(CLI::PositiveNumber);

        CLI::App* bench = app.add_subcommand("bench", "complexity, parameter and ablation studies");
        bench->add_option("kind", bench_kind, "study to run")
            ->required()
            ->check(CLI::IsMember({"scaling", "params", "ablation"}));
        bench->add_option("--config", config_dummy, "JSON config file; flags override its values");
        bench->add_option("--out", rc.out_dir, "output directory for CSV files");
        bench->add_option("--seed", rc.seed, "benchmark seed");
        bench->add_option("--lengths", rc.lengths, "scaling sequence lengths")->expected(-4);
        bench->add_option("--dim", rc.bench_dim, "scaling channel width");
        bench->add_option("--state", rc.bench_state, "scaling SSM state size");
        bench->add_option("--repeats", rc.bench_repeats, "timed repeats per point");
        bench->add_option("--channels", rc.channels, "params study input channels");
        bench->add_option("--data", rc.data_dir, "ablation training dataset");
        bench->add_option("--val", rc.val_dir, "ablation validation dataset");
        bench->add_option("--grid", rc.grid, "ablation grid (table5..table10 or all)");
        bench->add_option("--seeds", rc.seeds, "ablation seeds")->expected(-1);
        bench->add_option("--workers", rc.workers,
                          "ablation worker threads (0: SSMALIGN_THREADS, else 1)");
        add_model_flags(bench, rc);
        add_train_flags(bench, rc);

        app.parse(argc, argv);

        if (app.got_subcommand(gen)) return cmd_gen_data(rc, force);
        if (app.got_subcommand(train)) return cmd_train(rc);
        if (app.got_subcommand(eval)) return cmd_eval(rc, report_path);
        if (app.got_subcommand(grad)) return cmd_gradcheck(corrupt, gradcheck_tol);
        return cmd_bench(rc, bench_kind);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the usage message
        return code == 0 ? 0 : 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
