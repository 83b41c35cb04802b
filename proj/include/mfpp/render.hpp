#pragma once

// Display-only rendering: colormaps, heatmap overlays and label colorings.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include "mfpp/image.hpp"
#include "mfpp/rng.hpp"
#include "mfpp/saliency.hpp"
#include "mfpp/segmentation.hpp"

namespace mfpp {

namespace detail {

// viridis sampled at 17 evenly spaced points
inline constexpr std::array<std::array<float, 3>, 17> kViridis{{
    {0.2670f, 0.0049f, 0.3294f}, {0.2823f, 0.0950f, 0.4173f}, {0.2788f, 0.1755f, 0.4834f},
    {0.2590f, 0.2515f, 0.5247f}, {0.2297f, 0.3224f, 0.5457f}, {0.1994f, 0.3876f, 0.5546f},
    {0.1727f, 0.4488f, 0.5579f}, {0.1490f, 0.5081f, 0.5573f}, {0.1276f, 0.5669f, 0.5506f},
    {0.1206f, 0.6258f, 0.5335f}, {0.1579f, 0.6838f, 0.5017f}, {0.2461f, 0.7389f, 0.4520f},
    {0.3692f, 0.7889f, 0.3829f}, {0.5160f, 0.8312f, 0.2943f}, {0.6785f, 0.8637f, 0.1895f},
    {0.8456f, 0.8873f, 0.0997f}, {0.9932f, 0.9062f, 0.1439f},
}};

} // namespace detail

/// Perceptually uniform colormap, t clamped to [0, 1].
inline std::array<float, 3> viridis(double t) {
    if (!std::isfinite(t)) t = 0.0;
    t = std::clamp(t, 0.0, 1.0) * (detail::kViridis.size() - 1);
    const auto i = std::min(static_cast<std::size_t>(t), detail::kViridis.size() - 2);
    const float f = static_cast<float>(t - static_cast<double>(i));
    std::array<float, 3> c;
    for (int k = 0; k < 3; ++k) c[k] = detail::kViridis[i][k] * (1 - f) + detail::kViridis[i + 1][k] * f;
    return c;
}

/// Min-max normalized heatmap alpha-blended over the image. The stored map is
/// never modified; a constant map renders as the lowest color.
inline Image heatmap_overlay(const Image& img, const SaliencyMap& map, float alpha = 0.5f) {
    if (img.size() != map.size()) throw DimensionMismatch("heatmap size differs from image size");
    const auto [lo_it, hi_it] = std::minmax_element(map.values.begin(), map.values.end());
    const double lo = *lo_it, range = *hi_it - *lo_it;
    Image out(img.width, img.height);
    for (std::size_t p = 0; p < map.values.size(); ++p) {
        const auto c = viridis(range > 0 ? (map.values[p] - lo) / range : 0.0);
        for (int k = 0; k < 3; ++k) out.data[3 * p + k] = (1 - alpha) * img.data[3 * p + k] + alpha * c[k];
    }
    return out;
}

/// Heatmap without the underlying image.
inline Image heatmap(const SaliencyMap& map) {
    Image blank(map.width, map.height);
    return heatmap_overlay(blank, map, 1.0f);
}

/// One pseudo-random color per fragment.
inline Image colorize_labels(const LabelMap& lm, std::uint64_t seed = 0) {
    std::vector<std::array<float, 3>> colors(static_cast<std::size_t>(lm.n_fragments));
    for (std::size_t f = 0; f < colors.size(); ++f) {
        Rng rng(stream_seed(seed, f));
        for (auto& c : colors[f]) c = static_cast<float>(0.15 + 0.85 * rng.uniform());
    }
    Image out(lm.width, lm.height);
    for (std::size_t p = 0; p < lm.labels.size(); ++p)
        for (int k = 0; k < 3; ++k) out.data[3 * p + k] = colors[lm.labels[p]][k];
    return out;
}

/// Fragments shaded by rank of their score: highest-ranked brightest.
inline Image colorize_scores(const LabelMap& lm, std::span<const double> scores) {
    const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
    const double lo = *lo_it, range = *hi_it - *lo_it;
    Image out(lm.width, lm.height);
    for (std::size_t p = 0; p < lm.labels.size(); ++p) {
        const auto c = viridis(range > 0 ? (scores[lm.labels[p]] - lo) / range : 0.0);
        for (int k = 0; k < 3; ++k) out.data[3 * p + k] = c[k];
    }
    return out;
}

} // namespace mfpp
