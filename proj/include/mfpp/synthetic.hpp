#pragma once

// Procedural fixtures: planted-object scenes with known ground truth and
// smooth random "natural-like" images.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "mfpp/evaluation.hpp"
#include "mfpp/image.hpp"
#include "mfpp/model.hpp"
#include "mfpp/rng.hpp"

namespace mfpp {

struct PlantedScene {
    Image image;
    Rect object;
    GroundTruth truth;
};

/// Dark textured background in [0, 0.35] with a bright square of side `side`
/// in [0.85, 1] at a uniformly random position. Labeled class "object".
inline PlantedScene make_planted_scene(Size size, int side, std::uint64_t seed) {
    if (side < 1 || side > size.width || side > size.height) throw InvalidParams("object does not fit the image");
    Rng rng(stream_seed(seed, 0x5ce7e));
    PlantedScene s;
    s.image = Image(size.width, size.height);
    const int x0 = static_cast<int>(rng.uniform_int(0, size.width - side));
    const int y0 = static_cast<int>(rng.uniform_int(0, size.height - side));
    s.object = {x0, y0, x0 + side, y0 + side};
    // low-frequency shading plus per-pixel noise
    const double fx = 2 * std::numbers::pi * (0.5 + rng.uniform()) / size.width, fy = 2 * std::numbers::pi * (0.5 + rng.uniform()) / size.height;
    const double phase = 2 * std::numbers::pi * rng.uniform();
    for (int y = 0; y < size.height; ++y)
        for (int x = 0; x < size.width; ++x) {
            const double base = 0.15 + 0.08 * std::sin(fx * x + fy * y + phase);
            for (int c = 0; c < 3; ++c) {
                double v = base + 0.12 * (rng.uniform() - 0.5) + 0.04 * c;
                if (s.object.contains(x, y)) v = 0.85 + 0.15 * rng.uniform();
                s.image.at(x, y, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    s.truth.image_id = "planted_" + std::to_string(seed);
    s.truth.file_name = s.truth.image_id + ".png";
    s.truth.width = size.width;
    s.truth.height = size.height;
    s.truth.boxes.push_back({"object", static_cast<double>(x0), static_cast<double>(y0),
                             static_cast<double>(x0 + side), static_cast<double>(y0 + side), false, false});
    return s;
}

/// Sum of random colored Gaussian blobs over a random gradient with mild noise.
inline Image make_blob_image(Size size, std::uint64_t seed, int n_blobs = 8) {
    Rng rng(stream_seed(seed, 0xb10b));
    Image img(size.width, size.height);
    std::array<double, 3> c0, c1;
    for (auto& c : c0) c = rng.uniform();
    for (auto& c : c1) c = rng.uniform();
    struct Blob {
        double x, y, r;
        std::array<double, 3> color;
    };
    std::vector<Blob> blobs(static_cast<std::size_t>(n_blobs));
    const double scale = std::min(size.width, size.height);
    for (auto& b : blobs) {
        b.x = rng.uniform() * size.width;
        b.y = rng.uniform() * size.height;
        b.r = (0.08 + 0.2 * rng.uniform()) * scale;
        for (auto& c : b.color) c = rng.uniform() * 2 - 1;
    }
    for (int y = 0; y < size.height; ++y)
        for (int x = 0; x < size.width; ++x) {
            const double t = (static_cast<double>(x) / size.width + static_cast<double>(y) / size.height) / 2;
            for (int c = 0; c < 3; ++c) {
                double v = c0[c] * (1 - t) + c1[c] * t;
                for (const auto& b : blobs) {
                    const double d2 = ((x - b.x) * (x - b.x) + (y - b.y) * (y - b.y)) / (b.r * b.r);
                    v += 0.6 * b.color[c] * std::exp(-d2);
                }
                v += 0.03 * (rng.uniform() - 0.5);
                img.at(x, y, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    return img;
}

} // namespace mfpp
