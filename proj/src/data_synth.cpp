// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Scene sampling, shape rendering, domain shift, dataset files, batching.
// Rendering uses only +,-,*,/ and sqrt in f64 so golden-image fingerprints
// are stable across platforms.

#include "ssmalign/data_synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <utility>

#include "json.hpp"
#include "ssmalign/io.hpp"
#include "ssmalign/rng.hpp"

namespace ssmalign {
namespace {

constexpr int kPlacementAttempts = 100;
constexpr int kTextureGrid = 8;  // bilinear cells per axis
constexpr double kRingInner = 0.55;

// Per-class fill colors; appearance, not geometry.
constexpr double kPalette[4][3] = {
    {0.80, 0.25, 0.25},  // circle
    {0.25, 0.75, 0.35},  // square
    {0.30, 0.35, 0.85},  // triangle
    {0.80, 0.75, 0.25},  // ring
};

/// Independent stream s derived from (seed, s) alone.
Rng stream(std::uint64_t seed, std::uint64_t s) {
    Rng base(seed);
    return base.fork(s);
}

bool try_place(const SceneGenConfig& cfg, Rng& rng, const std::vector<GtObject>& placed,
               Box* out) {
    const double s_img = static_cast<double>(cfg.image_size);
    for (int a = 0; a < kPlacementAttempts; ++a) {
        const double side = rng.uniform(cfg.min_size, cfg.max_size);
        const double half = 0.5 * side;
        const double cx = rng.uniform(half + 0.5, s_img - half - 0.5);
        const double cy = rng.uniform(half + 0.5, s_img - half - 0.5);
        Box b{cx - half, cy - half, cx + half, cy + half};
        bool ok = true;
        for (const auto& p : placed)
            if (iou(b, p.box) > cfg.max_overlap) {
                ok = false;
                break;
            }
        if (ok) {
            *out = b;
            return true;
        }
    }
    return false;
}

/// One sampling attempt; empty result means an unplaceable layout.
std::vector<GtObject> sample_once(const SceneGenConfig& cfg, Rng& rng, bool* ok) {
    *ok = false;
    std::vector<GtObject> objs;
    const int n = cfg.min_objects +
                  static_cast<int>(rng.uniform_int(
                      static_cast<std::uint64_t>(cfg.max_objects - cfg.min_objects + 1)));
    for (int i = 0; i < n; ++i) {
        Box b;
        if (!try_place(cfg, rng, objs, &b)) return {};
        const int cls = static_cast<int>(rng.uniform_int(cfg.num_classes));
        objs.push_back({b, cls});
    }
    // Co-occurrence: given class 0 present, class 1 is present with
    // probability cfg.co_occurrence exactly (forced in or converted out).
    if (cfg.num_classes >= 2) {
        const bool has0 = std::any_of(objs.begin(), objs.end(),
                                      [](const GtObject& o) { return o.cls == 0; });
        if (has0) {
            const bool want1 = rng.uniform() < cfg.co_occurrence;
            const bool has1 = std::any_of(objs.begin(), objs.end(),
                                          [](const GtObject& o) { return o.cls == 1; });
            if (want1 && !has1) {
                int idx = -1;
                for (int i = static_cast<int>(objs.size()) - 1; i >= 0; --i)
                    if (objs[static_cast<std::size_t>(i)].cls != 0) {
                        idx = i;
                        break;
                    }
                if (idx < 0 && objs.size() >= 2) idx = 1;  // all class 0: keep object 0
                if (idx >= 0) {
                    objs[static_cast<std::size_t>(idx)].cls = 1;
                } else {
                    Box b;  // single class-0 object: place a companion
                    if (!try_place(cfg, rng, objs, &b)) return {};
                    objs.push_back({b, 1});
                }
            } else if (!want1 && has1) {
                for (auto& o : objs)
                    if (o.cls == 1)
                        o.cls = (cfg.num_classes > 2)
                                    ? 2 + static_cast<int>(rng.uniform_int(cfg.num_classes - 2))
                                    : 0;
            }
        }
    }
    *ok = true;
    return objs;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

std::vector<GtObject> sample_scene_objects(const SceneGenConfig& cfg, std::uint64_t seed,
                                           int* regen_out) {
    if (cfg.image_size < 16 || cfg.num_classes < 2 || cfg.min_objects < 1 ||
        cfg.max_objects < cfg.min_objects || cfg.min_size < 1.0 ||
        cfg.max_size + 1.0 >= cfg.image_size)
        throw std::invalid_argument("sample_scene_objects: invalid generator config");
    for (int regen = 0;; ++regen) {
        Rng rng = stream(seed, 2 * static_cast<std::uint64_t>(regen));
        bool ok = false;
        auto objs = sample_once(cfg, rng, &ok);
        if (ok) {
            if (regen_out) *regen_out = regen;
            return objs;
        }
    }
}

Scene generate_scene(const SceneGenConfig& cfg, std::uint64_t seed, DomainLabel domain,
                     const DomainShift& shift) {
    Scene sc;
    sc.seed = seed;
    sc.domain = domain;
    sc.objects = sample_scene_objects(cfg, seed, &sc.regen);

    const int s = cfg.image_size;
    // Appearance stream is tied to the accepted sub-seed but not the domain.
    Rng ap = stream(seed, 2 * static_cast<std::uint64_t>(sc.regen) + 1);

    // Textured background: bilinear interpolation of a coarse random grid.
    double grid[3][kTextureGrid + 1][kTextureGrid + 1];
    for (auto& ch : grid)
        for (auto& row : ch)
            for (auto& v : row) v = 0.30 + 0.20 * ap.uniform();

    std::vector<double> img(3 * static_cast<std::size_t>(s) * s);
    const double cells_per_px = static_cast<double>(kTextureGrid) / s;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double gx = (x + 0.5) * cells_per_px, gy = (y + 0.5) * cells_per_px;
                const int ix = std::min(static_cast<int>(gx), kTextureGrid - 1);
                const int iy = std::min(static_cast<int>(gy), kTextureGrid - 1);
                const double fx = gx - ix, fy = gy - iy;
                const double v = (1 - fy) * ((1 - fx) * grid[c][iy][ix] + fx * grid[c][iy][ix + 1]) +
                                 fy * ((1 - fx) * grid[c][iy + 1][ix] + fx * grid[c][iy + 1][ix + 1]);
                img[(static_cast<std::size_t>(c) * s + y) * s + x] = v;
            }

    // Filled shapes painted in object order.
    for (const auto& o : sc.objects) {
        double col[3];
        for (int c = 0; c < 3; ++c)
            col[c] = clamp01(kPalette[o.cls % 4][c] + ap.uniform(-0.08, 0.08));
        const double cx = o.box.cx(), cy = o.box.cy();
        const double half = 0.5 * o.box.width();
        const int x0 = std::max(0, static_cast<int>(o.box.x0));
        const int x1 = std::min(s - 1, static_cast<int>(o.box.x1));
        const int y0 = std::max(0, static_cast<int>(o.box.y0));
        const int y1 = std::min(s - 1, static_cast<int>(o.box.y1));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double dx = (x + 0.5) - cx, dy = (y + 0.5) - cy;
                bool inside = false;
                switch (o.cls % 4) {
                    case 0:
                        inside = dx * dx + dy * dy <= half * half;
                        break;
                    case 1:
                        inside = std::abs(dx) <= half && std::abs(dy) <= half;
                        break;
                    case 2: {  // apex-up triangle: half-width grows linearly
                        const double down = dy + half;  // 0 at apex row
                        inside = down >= 0.0 && down <= 2.0 * half && std::abs(dx) <= 0.5 * down;
                        break;
                    }
                    default: {
                        const double r2 = dx * dx + dy * dy;
                        const double inner = kRingInner * half;
                        inside = r2 <= half * half && r2 >= inner * inner;
                        break;
                    }
                }
                if (!inside) continue;
                for (int c = 0; c < 3; ++c)
                    img[(static_cast<std::size_t>(c) * s + y) * s + x] = col[c];
            }
    }

    if (domain == DomainLabel::target) {
        Rng nz = stream(seed, 0xD0 + static_cast<std::uint64_t>(sc.regen));
        const double h = shift.hue_shift;
        const std::size_t plane = static_cast<std::size_t>(s) * s;
        for (std::size_t i = 0; i < plane; ++i) {
            const double r = img[i], g = img[plane + i], b = img[2 * plane + i];
            double v[3] = {(1 - h) * r + h * g, (1 - h) * g + h * b, (1 - h) * b + h * r};
            for (int c = 0; c < 3; ++c) {
                v[c] += shift.noise_sigma * nz.normal();
                v[c] = (1.0 - shift.fog_alpha) * v[c] + shift.fog_alpha * 0.5;
                img[static_cast<std::size_t>(c) * plane + i] = clamp01(v[c]);
            }
        }
    }

    sc.image = Tensor::from_data({3, s, s}, std::move(img), false);
    return sc;
}

Dataset make_dataset(const SceneGenConfig& cfg, const DomainShift& shift, int n_source,
                     int n_target, std::uint64_t seed0) {
    if (n_source < 0 || n_target < 0)
        throw std::invalid_argument("make_dataset: negative split size");
    Dataset ds;
    ds.image_size = cfg.image_size;
    ds.num_classes = cfg.num_classes;
    for (int i = 0; i < n_source; ++i)
        ds.scenes.push_back(generate_scene(cfg, seed0 + static_cast<std::uint64_t>(i),
                                           DomainLabel::source, shift));
    for (int i = 0; i < n_target; ++i)
        ds.scenes.push_back(generate_scene(cfg, seed0 + static_cast<std::uint64_t>(i),
                                           DomainLabel::target, shift));
    return ds;
}

Dataset filter_domain(const Dataset& ds, DomainLabel domain) {
    Dataset out;
    out.image_size = ds.image_size;
    out.num_classes = ds.num_classes;
    for (const Scene& s : ds.scenes)
        if (s.domain == domain) out.scenes.push_back(s);
    return out;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["image_size"] = ds.image_size;
    manifest["num_classes"] = ds.num_classes;
    auto& scenes = manifest["scenes"] = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
        const Scene& sc = ds.scenes[i];
        nlohmann::json e;
        e["id"] = i;
        e["seed"] = sc.seed;
        e["domain"] = (sc.domain == DomainLabel::source) ? "source" : "target";
        e["regen"] = sc.regen;
        e["num_boxes"] = sc.objects.size();
        auto& boxes = e["boxes"] = nlohmann::json::array();
        for (const auto& o : sc.objects)
            boxes.push_back({o.cls, o.box.x0, o.box.y0, o.box.x1, o.box.y1});
        scenes.push_back(std::move(e));
        const std::string name = "img_" + std::to_string(i);
        io::save_tensor((fs::path(dir) / name).string(), sc.image, name);
    }
    std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
    out << manifest.dump(1) << "\n";
    if (!out) throw std::runtime_error("write_dataset: cannot write manifest in " + dir);
}

Dataset read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!in) throw std::runtime_error("read_dataset: missing manifest.json in " + dir);
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("read_dataset: malformed manifest.json: " + std::string(e.what()));
    }
    Dataset ds;
    ds.image_size = manifest.at("image_size").get<int>();
    ds.num_classes = manifest.at("num_classes").get<int>();
    for (const auto& e : manifest.at("scenes")) {
        const auto id = e.at("id").get<std::size_t>();
        Scene sc;
        sc.seed = e.at("seed").get<std::uint64_t>();
        const auto dom = e.at("domain").get<std::string>();
        if (dom != "source" && dom != "target")
            throw std::runtime_error("read_dataset: scene " + std::to_string(id) +
                                     " has unknown domain '" + dom + "'");
        sc.domain = (dom == "source") ? DomainLabel::source : DomainLabel::target;
        sc.regen = e.at("regen").get<int>();
        const auto& boxes = e.at("boxes");
        if (boxes.size() != e.at("num_boxes").get<std::size_t>())
            throw std::runtime_error("read_dataset: manifest box count mismatch for scene " +
                                     std::to_string(id));
        for (const auto& b : boxes) {
            if (b.size() != 5)
                throw std::runtime_error("read_dataset: malformed box entry in scene " +
                                         std::to_string(id));
            sc.objects.push_back({Box{b[1].get<double>(), b[2].get<double>(), b[3].get<double>(),
                                      b[4].get<double>()},
                                  b[0].get<int>()});
        }
        const std::string name = "img_" + std::to_string(id);
        sc.image = io::load_tensor((fs::path(dir) / name).string());
        if (sc.image.shape() != Shape{3, ds.image_size, ds.image_size})
            throw std::runtime_error("read_dataset: scene " + std::to_string(id) +
                                     " image shape " + shape_str(sc.image.shape()) +
                                     " disagrees with manifest size " +
                                     std::to_string(ds.image_size));
        ds.scenes.push_back(std::move(sc));
    }
    return ds;
}

BatchIter::BatchIter(const Dataset& ds, int batch_per_domain, std::uint64_t epoch_seed)
    : ds_(&ds), bs_(batch_per_domain) {
    if (batch_per_domain < 1) throw std::invalid_argument("BatchIter: batch size must be positive");
    for (std::size_t i = 0; i < ds.scenes.size(); ++i)
        (ds.scenes[i].domain == DomainLabel::source ? src_ : tgt_).push_back(static_cast<int>(i));
    if (src_.empty() || tgt_.empty())
        throw std::invalid_argument("BatchIter: both domains must be non-empty");
    if (static_cast<std::size_t>(bs_) > src_.size() || static_cast<std::size_t>(bs_) > tgt_.size())
        throw std::invalid_argument("BatchIter: batch " + std::to_string(bs_) +
                                    " exceeds a domain split (" + std::to_string(src_.size()) +
                                    " source, " + std::to_string(tgt_.size()) + " target)");
    Rng base(epoch_seed);
    for (auto* v : {&src_, &tgt_}) {
        Rng r = base.fork(v == &src_ ? 1 : 2);
        for (std::size_t i = v->size(); i > 1; --i)
            std::swap((*v)[i - 1], (*v)[static_cast<std::size_t>(r.uniform_int(i))]);
    }
    steps_ = static_cast<int>(std::min(src_.size(), tgt_.size())) / bs_;
}

PairedBatch BatchIter::at(int step) const {
    if (step < 0 || step >= steps_) throw std::invalid_argument("BatchIter: step out of range");
    const int s = ds_->image_size;
    auto build = [&](const std::vector<int>& idx, bool with_labels) {
        DomainBatch b;
        std::vector<double> data;
        data.reserve(static_cast<std::size_t>(bs_) * 3 * s * s);
        for (int i = 0; i < bs_; ++i) {
            const Scene& sc = ds_->scenes[static_cast<std::size_t>(idx[static_cast<std::size_t>(
                step * bs_ + i)])];
            const auto& v = sc.image.data();
            data.insert(data.end(), v.begin(), v.end());
            b.labels.push_back(with_labels ? sc.objects : std::vector<GtObject>{});
            b.scene_ids.push_back(idx[static_cast<std::size_t>(step * bs_ + i)]);
        }
        b.images = Tensor::from_data({bs_, 3, s, s}, std::move(data), false);
        return b;
    };
    return {build(src_, true), build(tgt_, false)};
}

std::uint64_t tensor_fingerprint(const Tensor& t) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a 64 offset basis
    for (double d : t.data()) {
        const auto bits = std::bit_cast<std::uint64_t>(d);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xFF;
            h *= 1099511628211ULL;
        }
    }
    return h;
}

}  // namespace ssmalign
