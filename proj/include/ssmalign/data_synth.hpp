// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic two-domain detection data: labeled source scenes
// and style-shifted target scenes sharing identical geometry per seed, with
// class co-occurrence structure for instance-level dependencies.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssmalign/alignment.hpp"
#include "ssmalign/geometry.hpp"
#include "ssmalign/tensor.hpp"

namespace ssmalign {

struct SceneGenConfig {
    int image_size = 64;
    int num_classes = 4;       ///< shapes: 0 circle, 1 square, 2 triangle, 3 ring
    int min_objects = 1;
    int max_objects = 6;
    double min_size = 6.0;     ///< box side in pixels
    double max_size = 24.0;
    double co_occurrence = 0.8;  ///< P(class 1 present | class 0 present)
    double max_overlap = 0.3;    ///< placement rejected above this IoU
};

/// Appearance shift applied to target scenes after rendering; source scenes
/// never receive it.
struct DomainShift {
    double fog_alpha = 0.5;    ///< blend toward gray 0.5; 1 = solid gray
    double hue_shift = 0.15;   ///< cyclic RGB channel mixing amount
    double noise_sigma = 0.02;
};

struct Scene {
    std::uint64_t seed = 0;
    DomainLabel domain = DomainLabel::source;
    int regen = 0;  ///< sub-seed increments spent on unplaceable layouts
    Tensor image;   ///< [3,S,S], f64 in [0,1]
    std::vector<GtObject> objects;
};

/// Samples object classes, sizes and positions for a seed. Geometry depends
/// only on (config, seed): paired source/target scenes share it exactly.
/// Layouts that cannot be placed within 100 attempts per object are retried
/// under an incremented sub-seed, reported via `regen_out`.
std::vector<GtObject> sample_scene_objects(const SceneGenConfig& cfg, std::uint64_t seed,
                                           int* regen_out = nullptr);

/// Renders the scene (textured background, filled shapes) and, for target
/// scenes, applies the domain shift. Identical seeds give pixel-identical
/// geometry across domains.
Scene generate_scene(const SceneGenConfig& cfg, std::uint64_t seed, DomainLabel domain,
                     const DomainShift& shift = {});

struct Dataset {
    int image_size = 0;
    int num_classes = 0;
    std::vector<Scene> scenes;
};

/// Paired dataset: source seeds seed0..seed0+n_source-1, target seeds
/// seed0..seed0+n_target-1 (equal indices share geometry).
Dataset make_dataset(const SceneGenConfig& cfg, const DomainShift& shift, int n_source,
                     int n_target, std::uint64_t seed0);

/// Scenes of one domain only; image size and class count carry over.
Dataset filter_domain(const Dataset& ds, DomainLabel domain);

/// Directory layout: manifest.json plus img_<id>.bin/.json per scene.
/// The manifest records per-scene seed, domain, regen count and boxes.
void write_dataset(const Dataset& ds, const std::string& dir);

/// Rejects image tensors whose shape disagrees with the manifest and scenes
/// whose recorded box count differs from the stored box list (naming the
/// scene id in both cases).
Dataset read_dataset(const std::string& dir);

struct DomainBatch {
    Tensor images;                              ///< [B,3,S,S]
    std::vector<std::vector<GtObject>> labels;  ///< per image; empty for target batches
    std::vector<int> scene_ids;
};

struct PairedBatch {
    DomainBatch source;
    DomainBatch target;
};

/// Deterministic per-epoch pairing of one labeled source batch with one
/// unlabeled target batch. Target labels are withheld even though stored.
class BatchIter {
public:
    BatchIter(const Dataset& ds, int batch_per_domain, std::uint64_t epoch_seed);
    int steps() const { return steps_; }
    PairedBatch at(int step) const;

private:
    const Dataset* ds_;
    int bs_ = 0;
    int steps_ = 0;
    std::vector<int> src_, tgt_;  // shuffled scene indices
};

/// FNV-1a over the raw f64 bytes of a tensor; used by golden-image tests.
std::uint64_t tensor_fingerprint(const Tensor& t);

}  // namespace ssmalign
