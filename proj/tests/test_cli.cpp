// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line binary contract: subcommand behavior, JSON config precedence,
// config echo in artifacts, exit codes, and determinism of produced files.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "ssmalign/data_synth.hpp"
#include "ssmalign/train.hpp"

using namespace ssmalign;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("ssmalign_cli_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream f(p);
    REQUIRE(f.good());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(line);
    return lines;
}

/// Runs the CLI with shell redirection; returns the exit code.
int run_cli(const std::string& args, const fs::path& scratch, std::string* out = nullptr,
            std::string* err = nullptr) {
    const fs::path out_p = scratch / "stdout.txt";
    const fs::path err_p = scratch / "stderr.txt";
    const std::string cmd = std::string("\"") + SSMALIGN_CLI_PATH + "\" " + args + " >" +
                            out_p.string() + " 2>" + err_p.string();
    const int status = std::system(cmd.c_str());
    if (out) *out = file_bytes(out_p);
    if (err) *err = file_bytes(err_p);
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::size_t count_occurrences(const std::string& text, const std::string& needle) {
    std::size_t n = 0;
    for (std::size_t pos = text.find(needle); pos != std::string::npos;
         pos = text.find(needle, pos + needle.size()))
        ++n;
    return n;
}

/// Relative path -> bytes for every regular file under `dir`.
std::map<std::string, std::string> dir_contents(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.is_regular_file())
            files[fs::relative(entry.path(), dir).string()] = file_bytes(entry.path());
    return files;
}

const char* kTinyGen =
    "--image-size 32 --classes 2 --max-objects 2 --min-size 9 --max-size 14 "
    "--n-source 4 --n-target 4 --n-val 2";
const char* kTinyModel =
    "--c3-width 2 --c4-width 2 --c5-width 4 --pyramid-width 4 --state-size 2 --eval-batch 4";

}  // namespace

TEST_CASE("cli gen-data: counts, determinism, force semantics, shift endpoint") {
    const fs::path dir = temp_dir("gen");
    std::string out, err;

    const std::string gen = "gen-data --seed 7 " + std::string(kTinyGen);
    CHECK(run_cli(gen + " --out " + (dir / "a").string(), dir, &out) == 0);
    CHECK(out.find("train: 4 source + 4 target scenes") != std::string::npos);
    CHECK(out.find("val: 0 source + 2 target scenes") != std::string::npos);
    CHECK(fs::exists(dir / "a" / "train" / "manifest.json"));
    CHECK(fs::exists(dir / "a" / "val" / "manifest.json"));

    const json echo = json::parse(file_bytes(dir / "a" / "run_config.json"));
    CHECK(echo.at("seed") == 7);
    CHECK(echo.at("n_source") == 4);
    CHECK(echo.at("image_size") == 32);

    // Same seed, fresh directory: identical data files. Only the echoed
    // out_dir inside run_config.json may differ between the two trees.
    CHECK(run_cli(gen + " --out " + (dir / "b").string(), dir) == 0);
    auto tree_a = dir_contents(dir / "a");
    auto tree_b = dir_contents(dir / "b");
    tree_a.erase("run_config.json");
    tree_b.erase("run_config.json");
    CHECK(tree_a == tree_b);

    // Existing non-empty directory is refused without --force.
    CHECK(run_cli(gen + " --out " + (dir / "a").string(), dir, &out, &err) == 2);
    CHECK(err.find("--force") != std::string::npos);

    // Regenerating the same path is byte-identical including the echo.
    const auto before = dir_contents(dir / "a");
    CHECK(run_cli(gen + " --out " + (dir / "a").string() + " --force", dir) == 0);
    CHECK(dir_contents(dir / "a") == before);

    // With every shift component at its identity the target pixels equal the
    // paired source pixels exactly.
    CHECK(run_cli(gen + " --out " + (dir / "flat").string() + " --fog 0 --hue 0 --noise 0",
                  dir) == 0);
    const Dataset flat = read_dataset((dir / "flat" / "train").string());
    std::map<std::uint64_t, const Scene*> source_by_seed;
    for (const Scene& s : flat.scenes)
        if (s.domain == DomainLabel::source) source_by_seed[s.seed] = &s;
    int pairs = 0;
    for (const Scene& s : flat.scenes) {
        if (s.domain != DomainLabel::target) continue;
        REQUIRE(source_by_seed.count(s.seed) == 1);
        CHECK(s.image.data() == source_by_seed[s.seed]->image.data());
        ++pairs;
    }
    CHECK(pairs == 4);
}

TEST_CASE("cli train: smoke run, config precedence, csv contracts, embedded echo") {
    const fs::path dir = temp_dir("train");
    std::string out, err;
    REQUIRE(run_cli("gen-data --seed 3 " + std::string(kTinyGen) + " --out " +
                        (dir / "d").string(),
                    dir) == 0);

    // File sets epochs 7 and seed 9; the flag takes epochs back to 1.
    std::ofstream(dir / "cfg.json") << R"({"epochs": 7, "seed": 9})";
    const std::string train = "train --config " + (dir / "cfg.json").string() + " --epochs 1 " +
                              "--data " + (dir / "d" / "train").string() + " --val " +
                              (dir / "d" / "val").string() + " " + kTinyModel;
    CHECK(run_cli(train + " --out " + (dir / "r").string(), dir, &out) == 0);
    CHECK(out.find("resolved config:") != std::string::npos);
    CHECK(out.find("training complete") != std::string::npos);

    const json echo = json::parse(file_bytes(dir / "r" / "run_config.json"));
    CHECK(echo.at("epochs") == 1);
    CHECK(echo.at("seed") == 9);
    CHECK(echo.at("image_size") == 32);   // resolved from the dataset
    CHECK(echo.at("num_classes") == 2);

    // Loss CSV: total column is the lambda-weighted sum of the others.
    const auto rows = read_lines(dir / "r" / "losses.csv");
    CHECK(rows[0] == "step,cls_s,cls_t,adv_i,adv_o,reg,total");
    CHECK(rows.size() >= 2);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        std::stringstream ss(rows[i]);
        std::string cell;
        std::vector<double> v;
        while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
        REQUIRE(v.size() == 7);
        CHECK(v[6] == doctest::Approx(v[1] + v[2] + 1.0 * v[3] + 0.5 * v[4] + v[5])
                          .epsilon(1e-9));
    }

    // The checkpoint embeds the same resolved config.
    std::string run_json;
    const DetectorParams det = load_checkpoint((dir / "r" / "checkpoint").string(), &run_json);
    CHECK(det.cfg.num_classes == 2);
    CHECK(json::parse(run_json).at("seed") == 9);

    // Unusable config files are usage errors.
    std::ofstream(dir / "bad_key.json") << R"({"epoch": 1})";
    CHECK(run_cli("train --config " + (dir / "bad_key.json").string(), dir, &out, &err) == 1);
    CHECK(err.find("unknown key") != std::string::npos);
    std::ofstream(dir / "bad_type.json") << R"({"epochs": "one"})";
    CHECK(run_cli("train --config " + (dir / "bad_type.json").string(), dir) == 1);
    std::ofstream(dir / "bad_json.json") << "{nope";
    CHECK(run_cli("train --config " + (dir / "bad_json.json").string(), dir) == 1);
    CHECK(run_cli("train", dir, &out, &err) == 1);  // missing paths
}

TEST_CASE("cli train: byte-identical reruns and non-finite abort") {
    const fs::path dir = temp_dir("det");
    REQUIRE(run_cli("gen-data --seed 3 " + std::string(kTinyGen) + " --out " +
                        (dir / "d").string(),
                    dir) == 0);
    const std::string train = "train --seed 5 --epochs 2 --data " +
                              (dir / "d" / "train").string() + " --val " +
                              (dir / "d" / "val").string() + " " + kTinyModel;
    CHECK(run_cli(train + " --out " + (dir / "r1").string(), dir) == 0);
    CHECK(run_cli(train + " --out " + (dir / "r2").string(), dir) == 0);
    CHECK(file_bytes(dir / "r1" / "losses.csv") == file_bytes(dir / "r2" / "losses.csv"));
    CHECK(file_bytes(dir / "r1" / "metrics.csv") == file_bytes(dir / "r2" / "metrics.csv"));

    std::string out, err;
    CHECK(run_cli(train + " --base-lr 1e300 --out " + (dir / "boom").string(), dir, &out,
                  &err) == 2);
    CHECK(err.find("non-finite") != std::string::npos);
}

TEST_CASE("cli eval: consistency with training, report round-trip, rejections") {
    const fs::path dir = temp_dir("eval");
    std::string out, err;
    REQUIRE(run_cli("gen-data --seed 3 " + std::string(kTinyGen) + " --out " +
                        (dir / "d").string(),
                    dir) == 0);
    REQUIRE(run_cli("train --seed 5 --epochs 2 --data " + (dir / "d" / "train").string() +
                        " --val " + (dir / "d" / "val").string() + " " + kTinyModel + " --out " +
                        (dir / "r").string(),
                    dir) == 0);
    const std::string ckpt = (dir / "r" / "checkpoint").string();

    // Training-time final mAP from the metrics CSV (last row, third column).
    const auto metrics = read_lines(dir / "r" / "metrics.csv");
    std::stringstream last(metrics.back());
    std::string cell;
    std::getline(last, cell, ',');
    std::getline(last, cell, ',');
    std::getline(last, cell, ',');
    const double train_final_map = std::stod(cell);

    // Same weights, same split, same decoding: the report reproduces the
    // training-time value, and in particular stays within the 0.01 band.
    CHECK(run_cli("eval --checkpoint " + ckpt + " --data " + (dir / "d" / "val").string() +
                      " --eval-batch 4 --out " + (dir / "report.json").string(),
                  dir, &out) == 0);
    CHECK(out.find("mAP ") != std::string::npos);
    const json report = json::parse(file_bytes(dir / "report.json"));
    CHECK(report.at("map").get<double>() ==
          doctest::Approx(train_final_map).epsilon(1e-12));
    CHECK(report.at("map").get<double>() >= train_final_map - 0.01);
    CHECK(report.at("per_class_ap").size() == 2);
    CHECK(report.at("class_has_gt").size() == 2);
    CHECK(report.at("train_config").at("seed") == 5);  // provenance from the checkpoint
    CHECK(report.at("config").at("num_classes") == 2);
    CHECK(report.at("scenes") == 2);

    // Default report lands inside the checkpoint directory.
    CHECK(run_cli("eval --checkpoint " + ckpt + " --data " + (dir / "d" / "val").string() +
                      " --eval-batch 4",
                  dir, &out) == 0);
    CHECK(fs::exists(dir / "r" / "checkpoint" / "eval_report.json"));

    // Domain filter that empties the split is an error, not a zero.
    CHECK(run_cli("eval --checkpoint " + ckpt + " --data " + (dir / "d" / "val").string() +
                      " --domain source",
                  dir, &out, &err) == 2);
    CHECK(err.find("empty") != std::string::npos);

    // A dataset with a different class count is rejected.
    REQUIRE(run_cli("gen-data --seed 3 --image-size 32 --classes 3 --max-objects 2 "
                    "--min-size 9 --max-size 14 --n-source 2 --n-target 2 --n-val 2 --out " +
                        (dir / "d3").string(),
                    dir) == 0);
    CHECK(run_cli("eval --checkpoint " + ckpt + " --data " + (dir / "d3" / "train").string(),
                  dir, &out, &err) == 2);
    CHECK(err.find("class count mismatch") != std::string::npos);
}

TEST_CASE("cli gradcheck: every block listed once; corrupt control exits nonzero") {
    const fs::path dir = temp_dir("grad");
    std::string out;
    CHECK(run_cli("gradcheck", dir, &out) == 0);
    for (const char* block :
         {"selective_scan", "mamba_layer", "ia_ssm_parallel", "ia_ssm_serial", "oa_ssm",
          "image_adv_loss", "object_adv_loss", "detector_step_loss"})
        CHECK(count_occurrences(out, block) == 1);
    CHECK(out.find("8/8 blocks within tolerance") != std::string::npos);
    CHECK(count_occurrences(out, "FAIL") == 0);

    CHECK(run_cli("gradcheck --corrupt", dir, &out) == 3);
    CHECK(count_occurrences(out, "FAIL") >= 1);
}

TEST_CASE("cli bench: scaling and params schemas, ablation default grid, usage errors") {
    const fs::path dir = temp_dir("bench");
    std::string out, err;

    CHECK(run_cli("bench scaling --out " + (dir / "s").string() +
                      " --lengths 128 192 256 320 --repeats 2",
                  dir, &out) == 0);
    const auto scaling = read_lines(dir / "s" / "scaling.csv");
    REQUIRE(scaling.size() == 5);
    CHECK(scaling[0] ==
          "length,scan_flops,scan_wall_s,scan_time_flagged,attention_flops,attention_wall_s,"
          "attention_time_flagged,scan_flop_slope,attention_flop_slope");
    CHECK(scaling[1].rfind("128,", 0) == 0);
    CHECK(out.find("scan flop slope") != std::string::npos);
    CHECK(fs::exists(dir / "s" / "run_config.json"));

    CHECK(run_cli("bench params --out " + (dir / "p").string(), dir, &out) == 0);
    const auto params = read_lines(dir / "p" / "params.csv");
    REQUIRE(params.size() == 3);
    CHECK(params[0] == "block,params,ratio");
    CHECK(params[1].rfind("parallel_ia_ssm,", 0) == 0);
    const double ratio = std::stod(params[1].substr(params[1].rfind(',') + 1));
    CHECK(ratio < 0.35);

    REQUIRE(run_cli("gen-data --seed 3 " + std::string(kTinyGen) + " --out " +
                        (dir / "d").string(),
                    dir) == 0);
    CHECK(run_cli("bench ablation --out " + (dir / "a").string() + " --data " +
                      (dir / "d" / "train").string() + " --val " + (dir / "d" / "val").string() +
                      " --seeds 0 --epochs 1 " + kTinyModel,
                  dir, &out) == 0);
    const auto table = read_lines(dir / "a" / "table5.csv");
    REQUIRE(table.size() == 5);  // header + the four-row component study
    CHECK(table[1].rfind("baseline,", 0) == 0);
    CHECK(table[2].rfind("ia_ssm,", 0) == 0);
    CHECK(table[3].rfind("oa_ssm,", 0) == 0);
    CHECK(table[4].rfind("both,", 0) == 0);
    CHECK(out.find("wrote") != std::string::npos);

    CHECK(run_cli("bench warp --out " + (dir / "x").string(), dir, &out, &err) == 1);
    CHECK(run_cli("bench ablation --grid bogus --out " + (dir / "x").string() + " --data " +
                      (dir / "d" / "train").string() + " --val " + (dir / "d" / "val").string(),
                  dir, &out, &err) == 1);
}
