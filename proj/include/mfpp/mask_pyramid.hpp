#pragma once

// Multi-scale fragment pyramid and randomized perturbation masks.
//
// Masks are stored one byte per pixel as unorm8: fragment masks are binary
// (0 or 255), grid-baseline masks are bilinear ramps quantized to 8 bits.
// Mask i is a pure function of (seed, i), so any subset can be generated in any
// order or on any number of threads.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mfpp/error.hpp"
#include "mfpp/image.hpp"
#include "mfpp/parallel.hpp"
#include "mfpp/rng.hpp"
#include "mfpp/segmentation.hpp"

namespace mfpp {

inline constexpr float kMaskUnit = 1.0f / 255.0f;

struct PyramidConfig {
    std::vector<int> layer_fragment_counts{50, 100, 200, 400, 800};
    /// Canvas scale factor u: masks are drawn on a round(u*H) x round(u*W) canvas, then cropped.
    double upscale_offset = 2.2;
    double keep_prob = 0.5;
    int n_masks_total = 4000;
    std::uint64_t seed = 0;

    void validate() const {
        if (layer_fragment_counts.empty()) throw InvalidConfig("at least one pyramid layer is required");
        for (int c : layer_fragment_counts)
            if (c < 1) throw InvalidConfig("layer fragment counts must be positive");
        if (!(upscale_offset >= 1.0) || !std::isfinite(upscale_offset))
            throw InvalidConfig("upscale offset must be >= 1");
        if (!(keep_prob >= 0.0 && keep_prob <= 1.0)) throw InvalidConfig("keep probability must lie in [0,1]");
        if (n_masks_total < 1) throw InvalidConfig("mask count must be positive");
    }

    std::size_t layers() const noexcept { return layer_fragment_counts.size(); }

    Size canvas_for(Size target) const {
        return {static_cast<int>(std::lround(upscale_offset * target.width)),
                static_cast<int>(std::lround(upscale_offset * target.height))};
    }

    /// Masks assigned to `layer`: an even split with the remainder going to the earliest layers.
    std::size_t masks_in_layer(std::size_t layer) const {
        const std::size_t n = static_cast<std::size_t>(n_masks_total), l = layers();
        return n / l + (layer < n % l ? 1 : 0);
    }
};

struct FragmentPyramid {
    std::vector<LabelMap> layers;
    Size canvas;
};

/// Resizes the image to the canvas and segments it once per layer with the
/// requested fragment count; all other SLIC parameters are shared.
inline FragmentPyramid build_pyramid(const Image& img, const PyramidConfig& cfg, const SlicParams& slic) {
    img.validate();
    cfg.validate();
    slic.validate();
    const Size canvas = cfg.canvas_for(img.size());
    if (canvas.width < 2 || canvas.height < 2)
        throw InvalidConfig("mask canvas " + std::to_string(canvas.width) + "x" + std::to_string(canvas.height)
                            + " is smaller than 2x2");
    const Image resized = resize_bilinear(img, canvas.width, canvas.height);
    FragmentPyramid pyr;
    pyr.canvas = canvas;
    pyr.layers.reserve(cfg.layers());
    for (int count : cfg.layer_fragment_counts) {
        SlicParams p = slic;
        p.n_segments = count;
        pyr.layers.push_back(slic_segment(resized, p));
    }
    return pyr;
}

/// Where a mask came from.
struct MaskInfo {
    int layer = -1; ///< -1 for grid masks
    int crop_x = 0;
    int crop_y = 0;
    std::uint64_t seed = 0; ///< per-mask RNG stream seed
};

struct MaskBatch {
    Size size;
    std::vector<std::uint8_t> data;
    std::vector<MaskInfo> info;

    std::size_t count() const noexcept { return info.size(); }

    std::span<const std::uint8_t> mask(std::size_t i) const {
        return {data.data() + i * size.area(), size.area()};
    }
};

/// Draws fragment masks on demand. Mask i belongs to layer l when it falls in
/// that layer's contiguous index range; its keep bits (one Bernoulli(p) draw per
/// fragment, in label order) and crop offset come from stream_seed(seed, i).
class FragmentMaskSampler {
public:
    FragmentMaskSampler(const FragmentPyramid& pyramid, const PyramidConfig& cfg, Size target)
        : pyramid_(&pyramid), cfg_(cfg), target_(target) {
        cfg_.validate();
        if (pyramid.layers.size() != cfg_.layers())
            throw InvalidConfig("pyramid has " + std::to_string(pyramid.layers.size()) + " layers, config expects "
                                + std::to_string(cfg_.layers()));
        if (target.width < 1 || target.height < 1) throw InvalidConfig("mask target must be non-empty");
        if (target.width > pyramid.canvas.width || target.height > pyramid.canvas.height)
            throw InvalidConfig("mask target larger than canvas");
        std::size_t first = 0;
        for (std::size_t l = 0; l < cfg_.layers(); ++l) {
            layer_first_.push_back(first);
            first += cfg_.masks_in_layer(l);
        }
    }

    std::size_t count() const noexcept { return static_cast<std::size_t>(cfg_.n_masks_total); }
    Size target() const noexcept { return target_; }
    double keep_prob() const noexcept { return cfg_.keep_prob; }

    int layer_of(std::size_t i) const {
        int l = 0;
        while (l + 1 < static_cast<int>(layer_first_.size()) && i >= layer_first_[l + 1]) ++l;
        return l;
    }

    /// Writes mask i (target-sized, unorm8) into `out`.
    MaskInfo render(std::size_t i, std::span<std::uint8_t> out) const {
        Draw d = draw(i);
        const LabelMap& lm = pyramid_->layers[d.info.layer];
        for (int y = 0; y < target_.height; ++y) {
            const std::int32_t* row = lm.labels.data() + static_cast<std::size_t>(y + d.info.crop_y) * lm.width
                                      + d.info.crop_x;
            std::uint8_t* dst = out.data() + static_cast<std::size_t>(y) * target_.width;
            for (int x = 0; x < target_.width; ++x) dst[x] = d.keep[row[x]];
        }
        return d.info;
    }

    /// The full canvas mask i before cropping.
    std::vector<std::uint8_t> render_canvas(std::size_t i) const {
        Draw d = draw(i);
        const LabelMap& lm = pyramid_->layers[d.info.layer];
        std::vector<std::uint8_t> out(lm.labels.size());
        for (std::size_t p = 0; p < out.size(); ++p) out[p] = d.keep[lm.labels[p]];
        return out;
    }

private:
    struct Draw {
        MaskInfo info;
        std::vector<std::uint8_t> keep;
    };

    Draw draw(std::size_t i) const {
        Draw d;
        d.info.layer = layer_of(i);
        d.info.seed = stream_seed(cfg_.seed, i);
        Rng rng(d.info.seed);
        const LabelMap& lm = pyramid_->layers[d.info.layer];
        d.keep.resize(static_cast<std::size_t>(lm.n_fragments));
        for (auto& k : d.keep) k = rng.bernoulli(cfg_.keep_prob) ? 255 : 0;
        d.info.crop_x = static_cast<int>(rng.uniform_int(0, lm.width - target_.width));
        d.info.crop_y = static_cast<int>(rng.uniform_int(0, lm.height - target_.height));
        return d;
    }

    const FragmentPyramid* pyramid_;
    PyramidConfig cfg_;
    Size target_;
    std::vector<std::size_t> layer_first_;
};

struct GridConfig {
    int rows = 7;
    int cols = 7;
};

/// Grid-cell Bernoulli masks, bilinearly upsampled to (H + CH) x (W + CW) with
/// CH = ceil(H / rows), CW = ceil(W / cols), then cropped at a random offset in
/// [0, CH) x [0, CW).
class GridMaskSampler {
public:
    GridMaskSampler(std::size_t n_masks, GridConfig cells, double keep_prob, Size target, std::uint64_t seed)
        : n_(n_masks), cells_(cells), keep_prob_(keep_prob), target_(target), seed_(seed) {
        if (cells.rows < 1 || cells.cols < 1) throw InvalidConfig("grid needs at least 1x1 cells");
        if (!(keep_prob >= 0.0 && keep_prob <= 1.0)) throw InvalidConfig("keep probability must lie in [0,1]");
        if (target.width < 1 || target.height < 1) throw InvalidConfig("mask target must be non-empty");
        cell_h_ = (target.height + cells.rows - 1) / cells.rows;
        cell_w_ = (target.width + cells.cols - 1) / cells.cols;
    }

    std::size_t count() const noexcept { return n_; }
    Size target() const noexcept { return target_; }
    double keep_prob() const noexcept { return keep_prob_; }

    MaskInfo render(std::size_t i, std::span<std::uint8_t> out) const {
        MaskInfo info;
        info.seed = stream_seed(seed_, i);
        Rng rng(info.seed);
        std::vector<float> grid(static_cast<std::size_t>(cells_.rows) * cells_.cols);
        for (auto& g : grid) g = rng.bernoulli(keep_prob_) ? 1.0f : 0.0f;
        info.crop_x = static_cast<int>(rng.uniform_int(0, cell_w_ - 1));
        info.crop_y = static_cast<int>(rng.uniform_int(0, cell_h_ - 1));

        const int up_w = target_.width + cell_w_, up_h = target_.height + cell_h_;
        struct Tap {
            int i0, i1;
            float t;
        };
        auto taps = [](int offset, int n_out, int n_up, int n_cells) {
            std::vector<Tap> v(n_out);
            const double scale = static_cast<double>(n_cells) / n_up;
            for (int k = 0; k < n_out; ++k) {
                double s = (k + offset + 0.5) * scale - 0.5;
                s = std::clamp(s, 0.0, static_cast<double>(n_cells - 1));
                const int i0 = static_cast<int>(std::floor(s));
                v[k] = {i0, std::min(i0 + 1, n_cells - 1), static_cast<float>(s - i0)};
            }
            return v;
        };
        const auto tx = taps(info.crop_x, target_.width, up_w, cells_.cols);
        const auto ty = taps(info.crop_y, target_.height, up_h, cells_.rows);
        for (int y = 0; y < target_.height; ++y) {
            const float* r0 = grid.data() + static_cast<std::size_t>(ty[y].i0) * cells_.cols;
            const float* r1 = grid.data() + static_cast<std::size_t>(ty[y].i1) * cells_.cols;
            for (int x = 0; x < target_.width; ++x) {
                const float top = r0[tx[x].i0] * (1 - tx[x].t) + r0[tx[x].i1] * tx[x].t;
                const float bot = r1[tx[x].i0] * (1 - tx[x].t) + r1[tx[x].i1] * tx[x].t;
                const float v = top * (1 - ty[y].t) + bot * ty[y].t;
                out[static_cast<std::size_t>(y) * target_.width + x] =
                    static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
            }
        }
        return info;
    }

private:
    std::size_t n_;
    GridConfig cells_;
    double keep_prob_;
    Size target_;
    std::uint64_t seed_;
    int cell_h_ = 1, cell_w_ = 1;
};

template <class Sampler>
MaskBatch materialize(const Sampler& sampler, unsigned jobs = 1) {
    MaskBatch batch;
    batch.size = sampler.target();
    batch.data.resize(sampler.count() * batch.size.area());
    batch.info.resize(sampler.count());
    parallel_for(sampler.count(), jobs, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i)
            batch.info[i] = sampler.render(i, {batch.data.data() + i * batch.size.area(), batch.size.area()});
    });
    return batch;
}

inline MaskBatch gen_fragment_masks(const FragmentPyramid& pyr, const PyramidConfig& cfg, Size target,
                                    unsigned jobs = 1) {
    return materialize(FragmentMaskSampler(pyr, cfg, target), jobs);
}

inline MaskBatch gen_grid_masks(std::size_t n_masks, GridConfig cells, double keep_prob, Size target,
                                std::uint64_t seed, unsigned jobs = 1) {
    return materialize(GridMaskSampler(n_masks, cells, keep_prob, target, seed), jobs);
}

/// out = img * mask, per pixel and channel; `out` must hold img.data.size() floats.
inline void apply_mask_into(const Image& img, std::span<const std::uint8_t> mask, std::span<float> out) {
    if (mask.size() != img.pixel_count())
        throw DimensionMismatch("mask has " + std::to_string(mask.size()) + " pixels, image has "
                                + std::to_string(img.pixel_count()));
    if (out.size() != img.data.size()) throw DimensionMismatch("output buffer size differs from image");
    static const auto unit = [] {
        std::array<float, 256> t;
        for (int v = 0; v < 256; ++v) t[v] = v == 255 ? 1.0f : static_cast<float>(v) * kMaskUnit;
        return t;
    }();
    const float* src = img.data.data();
    float* dst = out.data();
    for (std::size_t p = 0; p < mask.size(); ++p) {
        const float m = unit[mask[p]];
        dst[3 * p] = src[3 * p] * m;
        dst[3 * p + 1] = src[3 * p + 1] * m;
        dst[3 * p + 2] = src[3 * p + 2] * m;
    }
}

inline Image apply_mask(const Image& img, std::span<const std::uint8_t> mask, Size mask_size) {
    if (mask_size != img.size() || mask.size() != mask_size.area())
        throw DimensionMismatch("mask " + std::to_string(mask_size.width) + "x" + std::to_string(mask_size.height)
                                + " does not match image " + std::to_string(img.width) + "x"
                                + std::to_string(img.height));
    Image out(img.width, img.height);
    apply_mask_into(img, mask, out.data);
    return out;
}

inline Image apply_mask(const Image& img, std::span<const float> mask, Size mask_size) {
    if (mask_size != img.size() || mask.size() != mask_size.area())
        throw DimensionMismatch("mask does not match image dimensions");
    Image out(img.width, img.height);
    for (std::size_t p = 0; p < mask.size(); ++p)
        for (int c = 0; c < Image::channels; ++c) out.data[3 * p + c] = img.data[3 * p + c] * mask[p];
    return out;
}

} // namespace mfpp
