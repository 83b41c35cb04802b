#pragma once

// Test-only oracles. Nothing here calls into the code paths it checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <queue>
#include <string>
#include <vector>

#include "mfpp/image.hpp"
#include "mfpp/io.hpp"
#include "mfpp/model.hpp"
#include "mfpp/segmentation.hpp"

namespace mfpp::testing {

inline const std::vector<std::string>& natural_fixtures() {
    static const std::vector<std::string> names{"astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry"};
    return names;
}

/// Fixture used for the sigma / boundary-smoothness trend.
inline constexpr const char* kSigmaFixture = "chelsea";

inline Image load_fixture(const std::string& name) {
    return read_image(std::string(MFPP_TEST_DATA) + "/" + name + ".png");
}

/// Labels are contiguous in [0, n_fragments) and every one is used.
inline bool is_partition(const LabelMap& lm) {
    if (lm.n_fragments < 1 || lm.labels.size() != static_cast<std::size_t>(lm.width) * lm.height) return false;
    std::vector<bool> seen(static_cast<std::size_t>(lm.n_fragments), false);
    for (auto l : lm.labels) {
        if (l < 0 || l >= lm.n_fragments) return false;
        seen[l] = true;
    }
    for (bool s : seen)
        if (!s) return false;
    return true;
}

/// Breadth-first flood fill from the first pixel of each label must reach every
/// pixel carrying that label.
inline bool all_fragments_connected(const LabelMap& lm) {
    const int w = lm.width, h = lm.height;
    std::map<std::int32_t, std::size_t> area;
    for (auto l : lm.labels) ++area[l];
    std::map<std::int32_t, bool> done;
    std::vector<char> visited(lm.labels.size(), 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const auto l = lm.at(x, y);
            if (done[l]) continue;
            done[l] = true;
            std::size_t reached = 0;
            std::queue<std::pair<int, int>> q;
            q.push({x, y});
            visited[static_cast<std::size_t>(y) * w + x] = 1;
            while (!q.empty()) {
                auto [cx, cy] = q.front();
                q.pop();
                ++reached;
                const std::array<std::pair<int, int>, 4> nb{{{cx - 1, cy}, {cx + 1, cy}, {cx, cy - 1}, {cx, cy + 1}}};
                for (auto [nx, ny] : nb) {
                    if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                    const std::size_t q_idx = static_cast<std::size_t>(ny) * w + nx;
                    if (visited[q_idx] || lm.labels[q_idx] != l) continue;
                    visited[q_idx] = 1;
                    q.push({nx, ny});
                }
            }
            if (reached != area[l]) return false;
        }
    return true;
}

/// Two label maps induce the same partition (equal up to renumbering).
inline bool same_partition(const LabelMap& a, const LabelMap& b) {
    if (a.labels.size() != b.labels.size()) return false;
    std::map<std::int32_t, std::int32_t> ab, ba;
    for (std::size_t p = 0; p < a.labels.size(); ++p) {
        auto [i1, n1] = ab.emplace(a.labels[p], b.labels[p]);
        auto [i2, n2] = ba.emplace(b.labels[p], a.labels[p]);
        if (i1->second != b.labels[p] || i2->second != a.labels[p]) return false;
    }
    return true;
}

/// 2x2 quadrant partition of a w x h lattice, labels in raster order of quadrants.
inline LabelMap quadrant_labels(int w, int h) {
    LabelMap lm{w, h, std::vector<std::int32_t>(static_cast<std::size_t>(w) * h), 4};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) lm.labels[static_cast<std::size_t>(y) * w + x] = (y >= h / 2 ? 2 : 0) + (x >= w / 2 ? 1 : 0);
    return lm;
}

/// Exact saliency for a single-layer, uncropped fragment sampler: enumerates
/// all 2^F keep-sets with their Bernoulli(p) probabilities, evaluates the model
/// on each masked image and returns E[phi * M(mu)] / p per pixel.
inline std::vector<double> enumerate_saliency(const Image& img, const Predictor& model, const LabelMap& lm, double p,
                                              int target = 0) {
    const int F = lm.n_fragments;
    const std::size_t n = img.pixel_count();
    std::vector<double> expect(n, 0.0);
    for (std::uint32_t set = 0; set < (1u << F); ++set) {
        double prob = 1.0;
        for (int f = 0; f < F; ++f) prob *= (set >> f & 1u) ? p : 1.0 - p;
        if (prob == 0.0) continue;
        Image masked = img;
        for (std::size_t q = 0; q < n; ++q)
            if (!(set >> lm.labels[q] & 1u))
                for (int c = 0; c < 3; ++c) masked.data[3 * q + c] = 0.0f;
        const auto resp = model.predict(PredictRequest::single(masked));
        const double phi = resp.scores.at(0, target);
        for (std::size_t q = 0; q < n; ++q)
            if (set >> lm.labels[q] & 1u) expect[q] += prob * phi;
    }
    for (double& v : expect) v /= p;
    return expect;
}

/// Reference 1-D Gaussian blur of one row (clamp-to-edge), computed directly.
inline std::vector<double> blur_row_oracle(const std::vector<double>& row, double sigma) {
    const int r = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> k;
    double z = 0;
    for (int i = -r; i <= r; ++i) {
        k.push_back(std::exp(-0.5 * i * i / (sigma * sigma)));
        z += k.back();
    }
    std::vector<double> out(row.size(), 0.0);
    const int n = static_cast<int>(row.size());
    for (int x = 0; x < n; ++x)
        for (int i = -r; i <= r; ++i) out[x] += k[i + r] / z * row[std::clamp(x + i, 0, n - 1)];
    return out;
}

} // namespace mfpp::testing
