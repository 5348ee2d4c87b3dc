// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic multi-object scenes with exact instance and class masks.
// Rasterization is hard-edged (no anti-aliasing) so the ground truth is
// pixel-perfect. Objects are drawn back-to-front; instance masks record
// visible pixels only and are renumbered densely (1..n_visible).
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "slotmerge/errors.hpp"
#include "slotmerge/metrics.hpp"

namespace slotmerge {

enum class ShapeKind : std::uint16_t { kCircle = 1, kSquare = 2, kTriangle = 3 };

struct SceneSpec {
    std::size_t height = 32, width = 32;
    std::size_t min_objects = 3, max_objects = 3;
    std::vector<ShapeKind> shapes = {ShapeKind::kCircle, ShapeKind::kSquare,
                                     ShapeKind::kTriangle};
    std::vector<std::array<double, 3>> palette = {
        {0.9, 0.1, 0.1}, {0.1, 0.8, 0.2}, {0.2, 0.3, 0.9},
        {0.9, 0.8, 0.1}, {0.8, 0.2, 0.8}, {0.1, 0.8, 0.8},
    };
    std::size_t min_size = 8, max_size = 14;  // full extent in pixels
    bool allow_occlusion = true;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SceneSample {
    std::size_t height = 0, width = 0;
    std::vector<double> image;  // (h*w) x 3 row-major, values in [0,1]
    LabelGrid instances;        // painter's-order visibility, labels 1..n
    LabelGrid classes;          // label = shape kind of the instance
    std::size_t n_objects = 0;  // visible objects
};

SceneSample generate_scene(const SceneSpec& spec, std::uint64_t sample_seed);
std::vector<SceneSample> generate_scenes(const SceneSpec& spec, std::size_t count);

// SCENES v1 container (see docs/file-formats.md): textual header
// "SCENES v1 <count> <H> <W>\n" followed per sample by f32 RGB planes, the
// u16 instance grid and the u16 class grid, little-endian, row-major.
void save_scenes(const std::string& path, const std::vector<SceneSample>& samples);
std::vector<SceneSample> load_scenes(const std::string& path);

// Scene spec files use the same key=value syntax as run configs.
SceneSpec load_scene_spec(const std::string& path);

}  // namespace slotmerge
